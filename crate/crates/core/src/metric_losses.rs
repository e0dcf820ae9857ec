//! Two-view batches, multi-similarity mining and the metric-learning losses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::transforms::{apply_transform, sample_transform, TransformRanges, TransformSpec};

pub const MS_EPSILON: f64 = 0.1;

/// `B` augmented views: two per sampled instance, twins adjacent.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `(B, C, R, R)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub transforms: Vec<TransformSpec>,
    pub twin_index: Vec<usize>,
    pub seed: u64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Each twin pair once, lower index first.
    pub fn unique_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len()).filter(|&i| i < self.twin_index[i]).map(|i| (i, self.twin_index[i])).collect()
    }
}

/// Two independently transformed views of each chosen source patch.
/// `sources[k]` is a `(C, R, R)` patch with label `labels[k]`.
pub fn make_pair_batch(
    sources: &[&Tensor<f32>],
    labels: &[usize],
    ranges: &TransformRanges,
    seed: u64,
) -> Result<PairBatch> {
    if sources.is_empty() || sources.len() != labels.len() {
        return Err(Error::Input("pair batch needs one label per source patch".into()));
    }
    let shape = sources[0].shape.clone();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Input(format!("source patches must be square (C, R, R), got {shape:?}")));
    }
    let res = (shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * sources.len() * shape.iter().product::<usize>());
    let mut out_labels = Vec::new();
    let mut transforms = Vec::new();
    let mut twin_index = Vec::new();
    for (k, (src, &label)) in sources.iter().zip(labels).enumerate() {
        if src.shape != shape {
            return Err(Error::Input(format!("patch {k} has shape {:?}, expected {shape:?}", src.shape)));
        }
        for v in 0..2 {
            let t = sample_transform(rng.gen(), ranges, res)?;
            data.extend_from_slice(&apply_transform(src, &t)?.data);
            out_labels.push(label);
            transforms.push(t);
            twin_index.push(2 * k + 1 - v);
        }
    }
    let mut bshape = vec![2 * sources.len()];
    bshape.extend_from_slice(&shape);
    Ok(PairBatch { images: Tensor::from_vec(&bshape, data), labels: out_labels, transforms, twin_index, seed })
}

/// Samples `b / 2` distinct instances without replacement and builds their
/// two-view batch.
pub fn build_pair_batch(
    sources: &[Tensor<f32>],
    labels: &[usize],
    b: usize,
    ranges: &TransformRanges,
    seed: u64,
) -> Result<PairBatch> {
    if b == 0 || b % 2 != 0 {
        return Err(Error::Input(format!("batch size {b} must be even and positive")));
    }
    if sources.len() < b / 2 {
        return Err(Error::Input(format!("batch of {b} needs {} instances, dataset has {}", b / 2, sources.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, sources.len(), b / 2).into_vec();
    let picked: Vec<&Tensor<f32>> = chosen.iter().map(|&i| &sources[i]).collect();
    let picked_labels: Vec<usize> = chosen.iter().map(|&i| labels[i]).collect();
    make_pair_batch(&picked, &picked_labels, ranges, rng.gen())
}

/// Shuffled instance order for one epoch, chunked into half-batches.
pub fn epoch_chunks(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(b / 2).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

/// Positive pairs `(ap[k], p[k])` and negative pairs `(an[k], n[k])`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedIndices {
    pub ap: Vec<usize>,
    pub p: Vec<usize>,
    pub an: Vec<usize>,
    pub n: Vec<usize>,
}

/// Cosine-similarity matrix of the rows of `z`.
pub fn cosine_matrix(z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let normed: Vec<Vec<f64>> = z
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= 1e-12 {
                Err(Error::Numeric("cannot normalise zero embedding".into()))
            } else {
                Ok(r.iter().map(|v| v / n).collect())
            }
        })
        .collect::<Result<_>>()?;
    Ok(normed.iter().map(|a| normed.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect()).collect())
}

/// Multi-similarity mining. Positives are the augmented twins (both
/// orderings); a cross-label pair `(a, n)` is a hard negative when its
/// similarity exceeds the anchor's hardest positive similarity minus `eps`.
pub fn ms_mine(sim: &[Vec<f64>], labels: &[usize], twin_index: &[usize], eps: f64) -> MinedIndices {
    let b = labels.len();
    let mut out = MinedIndices::default();
    for a in 0..b {
        out.ap.push(a);
        out.p.push(twin_index[a]);
    }
    for a in 0..b {
        let hardest = (0..b)
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| sim[a][j])
            .fold(f64::INFINITY, f64::min);
        if !hardest.is_finite() {
            continue;
        }
        for n in 0..b {
            if labels[n] != labels[a] && sim[a][n] > hardest - eps {
                out.an.push(a);
                out.n.push(n);
            }
        }
    }
    if out.an.is_empty() && labels.iter().all(|&l| l == labels[0]) {
        log::warn!("single-label batch: no negatives mined");
    }
    out
}

/// Pairwise cosine similarities divided by `tau`, as a `(B, B)` graph node.
fn scaled_similarity<T: Scalar>(g: &mut Graph<T>, z: Var, tau: f64) -> Var {
    let n = g.normalize_rows(z);
    let s = g.matmul_nt(n, n);
    g.scale(s, T::from_f64c(1.0 / tau))
}

fn check_batch<T: Scalar>(g: &Graph<T>, z: Var, labels: &[usize]) -> Result<usize> {
    let s = g.shape(z);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Input(format!("embeddings must be a non-empty (B, D) matrix, got {s:?}")));
    }
    if s[0] != labels.len() {
        return Err(Error::Input(format!("{} embeddings but {} labels", s[0], labels.len())));
    }
    Ok(s[0])
}

/// NT-Xent over mined pairs: for every positive `(a, p)`,
/// `−log(e^{s_ap/τ} / (e^{s_ap/τ} + Σ_n e^{s_an/τ}))` with `n` ranging over
/// the mined negatives of `a`; averaged over positive pairs.
pub fn ntxent<T: Scalar>(g: &mut Graph<T>, z: Var, mined: &MinedIndices, tau: f64) -> Result<Var> {
    let b = g.shape(z)[0];
    if mined.ap.is_empty() {
        return Err(Error::Input("no positive pairs for NT-Xent".into()));
    }
    let s = scaled_similarity(g, z, tau);
    let rows = g.select(s, &mined.ap);
    let mut negs = vec![vec![false; b]; b];
    for (&a, &n) in mined.an.iter().zip(&mined.n) {
        negs[a][n] = true;
    }
    let mut mask = Vec::with_capacity(mined.ap.len() * b);
    let mut pick = Vec::with_capacity(mined.ap.len() * b);
    for (&a, &p) in mined.ap.iter().zip(&mined.p) {
        for j in 0..b {
            mask.push(j == p || negs[a][j]);
            pick.push(if j == p { T::one() } else { T::zero() });
        }
    }
    let lse = g.masked_lse(rows, mask, false);
    let picked = g.mul_const(rows, pick);
    let pos = g.sum_last(picked);
    let per = g.sub(lse, pos);
    Ok(g.mean_all(per))
}

/// Supervised contrastive loss: each anchor averages
/// `log softmax_{k≠i}(s_ik/τ)` over its same-label partners; anchors without
/// a partner are skipped.
pub fn supcon<T: Scalar>(g: &mut Graph<T>, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let b = check_batch(g, z, labels)?;
    let s = scaled_similarity(g, z, tau);
    let mut mask = Vec::with_capacity(b * b);
    let mut pos_w = Vec::with_capacity(b * b);
    let mut anchor_w = vec![T::zero(); b];
    let counts: Vec<usize> = (0..b).map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).count()).collect();
    let active = counts.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Err(Error::Input("SupCon needs at least one same-label pair".into()));
    }
    for i in 0..b {
        for j in 0..b {
            mask.push(j != i);
            let pos = j != i && labels[j] == labels[i];
            pos_w.push(if pos { T::from_f64c(1.0 / counts[i] as f64) } else { T::zero() });
        }
        if counts[i] > 0 {
            anchor_w[i] = T::from_f64c(-1.0 / active as f64);
        }
    }
    let lse = g.masked_lse(s, mask, false);
    let weighted = g.mul_const(s, pos_w);
    let mean_pos = g.sum_last(weighted);
    let log_prob = g.sub(mean_pos, lse);
    let per = g.mul_const(log_prob, anchor_w);
    Ok(g.sum_all(per))
}

/// Proxy Anchor with one proxy row per label:
/// `1/|P⁺| Σ_{p∈P⁺} log(1 + Σ_{x∈X_p⁺} e^{−α(s(x,p)−δ)})
///  + 1/|P| Σ_{p∈P} log(1 + Σ_{x∈X_p⁻} e^{α(s(x,p)+δ)})`.
pub fn proxy_anchor<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    labels: &[usize],
    proxies: Var,
    margin: f64,
    alpha: f64,
) -> Result<Var> {
    let b = check_batch(g, z, labels)?;
    let c = g.shape(proxies)[0];
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {l} has no proxy ({c} proxies)")));
    }
    let nz = g.normalize_rows(z);
    let np = g.normalize_rows(proxies);
    let s = g.matmul_nt(np, nz); // (C, B)
    let mut pos_mask = Vec::with_capacity(c * b);
    let mut neg_mask = Vec::with_capacity(c * b);
    for p in 0..c {
        for &l in labels {
            pos_mask.push(l == p);
            neg_mask.push(l != p);
        }
    }
    let with_pos = (0..c).filter(|p| labels.contains(p)).count();
    let a = T::from_f64c(alpha);
    let ad = T::from_f64c(alpha * margin);
    let pos_arg = g.scale(s, -a);
    let pos_arg = g.add_scalar(pos_arg, ad);
    let pos = g.masked_lse(pos_arg, pos_mask, true);
    let pos = g.sum_all(pos);
    let pos = g.scale(pos, T::from_f64c(1.0 / with_pos as f64));
    let neg_arg = g.scale(s, a);
    let neg_arg = g.add_scalar(neg_arg, ad);
    let neg = g.masked_lse(neg_arg, neg_mask, true);
    let neg = g.sum_all(neg);
    let neg = g.scale(neg, T::from_f64c(1.0 / c as f64));
    Ok(g.add(pos, neg))
}

/// Circle loss with detached self-paced weights, averaged over anchors that
/// have both positives and negatives.
pub fn circle<T: Scalar>(g: &mut Graph<T>, z: Var, labels: &[usize], m: f64, gamma: f64) -> Result<Var> {
    let b = check_batch(g, z, labels)?;
    let s = scaled_similarity(g, z, 1.0);
    let sv = g.value(s).data.clone();
    let mut coef = Vec::with_capacity(b * b);
    let mut offset = Vec::with_capacity(b * b);
    let mut pos_mask = Vec::with_capacity(b * b);
    let mut neg_mask = Vec::with_capacity(b * b);
    for i in 0..b {
        for j in 0..b {
            let v = sv[i * b + j].to_f64c();
            let pos = j != i && labels[i] == labels[j];
            let neg = labels[i] != labels[j];
            let (c, o) = if pos {
                let ap = (1.0 + m - v).max(0.0);
                (-gamma * ap, gamma * ap * (1.0 - m))
            } else if neg {
                let an = (v + m).max(0.0);
                (gamma * an, -gamma * an * m)
            } else {
                (0.0, 0.0)
            };
            coef.push(T::from_f64c(c));
            offset.push(o);
            pos_mask.push(pos);
            neg_mask.push(neg);
        }
    }
    let anchors: Vec<bool> =
        (0..b).map(|i| pos_mask[i * b..(i + 1) * b].contains(&true) && neg_mask[i * b..(i + 1) * b].contains(&true)).collect();
    let active = anchors.iter().filter(|&&a| a).count();
    if active == 0 {
        return Err(Error::Input("circle loss needs anchors with positives and negatives".into()));
    }
    let logits = g.mul_const(s, coef);
    let off = g.constant(Tensor::from_f64(&[b, b], &offset));
    let logits = g.add(logits, off);
    let lp = g.masked_lse(logits, pos_mask, false);
    let ln = g.masked_lse(logits, neg_mask, false);
    let sum = g.add(lp, ln);
    let per = g.softplus(sum);
    let w = anchors.iter().map(|&a| if a { T::from_f64c(1.0 / active as f64) } else { T::zero() }).collect();
    let per = g.mul_const(per, w);
    Ok(g.sum_all(per))
}

/// Selected metric loss and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    Ntxent {
        #[serde(default = "default_ntxent_tau")]
        temperature: f64,
    },
    Supcon {
        #[serde(default = "default_supcon_tau")]
        temperature: f64,
    },
    ProxyAnchor {
        #[serde(default = "default_pa_margin")]
        margin: f64,
        #[serde(default = "default_pa_alpha")]
        alpha: f64,
    },
    Circle {
        #[serde(default = "default_circle_m")]
        m: f64,
        #[serde(default = "default_circle_gamma")]
        gamma: f64,
    },
}

fn default_ntxent_tau() -> f64 {
    0.07
}
fn default_supcon_tau() -> f64 {
    0.1
}
fn default_pa_margin() -> f64 {
    0.1
}
fn default_pa_alpha() -> f64 {
    32.0
}
fn default_circle_m() -> f64 {
    0.4
}
fn default_circle_gamma() -> f64 {
    80.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::Ntxent { temperature: default_ntxent_tau() }
    }
}

pub const AVAILABLE_LOSSES: [&str; 4] = ["ntxent", "supcon", "proxy_anchor", "circle"];
/// Recognised names that this build does not implement.
pub const UNAVAILABLE_LOSSES: [&str; 5] = ["dr_ms", "pnp", "proxy_nca_pp", "subcenter_arcface", "proxy_synthesis"];

/// Looks a loss up by name with default hyperparameters.
pub fn registry_get(name: &str) -> Result<LossConfig> {
    match name {
        "ntxent" => Ok(LossConfig::default()),
        "supcon" => Ok(LossConfig::Supcon { temperature: default_supcon_tau() }),
        "proxy_anchor" => Ok(LossConfig::ProxyAnchor { margin: default_pa_margin(), alpha: default_pa_alpha() }),
        "circle" => Ok(LossConfig::Circle { m: default_circle_m(), gamma: default_circle_gamma() }),
        _ => Err(Error::UnknownLoss { name: name.to_string(), available: AVAILABLE_LOSSES.join(", ") }),
    }
}

impl LossConfig {
    pub fn name(&self) -> &'static str {
        match self {
            LossConfig::Ntxent { .. } => "ntxent",
            LossConfig::Supcon { .. } => "supcon",
            LossConfig::ProxyAnchor { .. } => "proxy_anchor",
            LossConfig::Circle { .. } => "circle",
        }
    }

    pub fn uses_proxies(&self) -> bool {
        matches!(self, LossConfig::ProxyAnchor { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LossConfig::Ntxent { temperature } | LossConfig::Supcon { temperature } => temperature > 0.0,
            LossConfig::ProxyAnchor { margin, alpha } => alpha > 0.0 && margin >= 0.0,
            LossConfig::Circle { m, gamma } => gamma > 0.0 && (0.0..1.0).contains(&m),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters for loss `{}`", self.name())))
        }
    }

    /// Evaluates the loss on `(B, D)` embeddings. `proxies` is required for
    /// proxy-based losses.
    pub fn evaluate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        z: Var,
        labels: &[usize],
        mined: &MinedIndices,
        proxies: Option<Var>,
    ) -> Result<Var> {
        check_batch(g, z, labels)?;
        match *self {
            LossConfig::Ntxent { temperature } => ntxent(g, z, mined, temperature),
            LossConfig::Supcon { temperature } => supcon(g, z, labels, temperature),
            LossConfig::ProxyAnchor { margin, alpha } => {
                let p = proxies.ok_or_else(|| Error::Config("proxy anchor loss needs proxies".into()))?;
                proxy_anchor(g, z, labels, p, margin, alpha)
            }
            LossConfig::Circle { m, gamma } => circle(g, z, labels, m, gamma),
        }
    }
}
