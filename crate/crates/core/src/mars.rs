//! Multi-view attention regularisation.
//!
//! For every encoder block the attention maps of the two views of a positive
//! pair are pose-normalised with the inverse of their view transform,
//! channel-reduced by a per-block 1×1 convolution and embedded by three
//! mini heads (channel, height-pooled, width-pooled). Cosine losses between
//! the two views' embeddings form the channel and spatial terms.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::ModelConfig;
use crate::conv::{ConvKind, ConvShape};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Gem, PRelu};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::transforms::{valid_mask, TransformSpec, ValidMask};

pub const COSINE_EPS: f64 = 1e-8;

/// GeM → batch norm → PReLU, without any linear layer.
#[derive(Debug, Clone)]
pub struct MiniHead {
    gem: Gem,
    bn: BatchNorm,
    act: PRelu,
}

impl MiniHead {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, p_init: f64) -> Self {
        Self {
            gem: Gem::new(store, &format!("{name}.gem"), p_init),
            bn: BatchNorm::new(store, &format!("{name}.bn"), dim),
            act: PRelu::new(store, &format!("{name}.prelu")),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let z = self.gem.forward(g, store, x);
        let z = self.bn.forward(g, store, z);
        self.act.forward(g, store, z)
    }

    pub fn gem_param(&self) -> crate::params::ParamId {
        self.gem.p
    }
}

/// Reducer and mini heads of one encoder block.
#[derive(Debug, Clone)]
pub struct BlockRegularizer<T> {
    pub index: usize,
    pub channels: usize,
    pub reduced: usize,
    pub resolution: (usize, usize),
    reducer: Conv2d<T>,
    pub gc: MiniHead,
    pub gy: MiniHead,
    pub gx: MiniHead,
}

/// Per-block loss values of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarsLossRecord {
    pub epoch: usize,
    pub step: usize,
    pub channel: Vec<f64>,
    pub spatial: Vec<f64>,
    pub combined: Vec<f64>,
    pub total: f64,
}

/// Graph handles for the regularisation terms of one batch.
pub struct MarsTerms {
    pub channel: Vec<Var>,
    pub spatial: Vec<Var>,
    pub total: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MarsModule<T> {
    pub blocks: Vec<BlockRegularizer<T>>,
    pub gamma_ch: f64,
    pub gamma_sp: f64,
}

impl<T: Scalar> BlockRegularizer<T> {
    fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        index: usize,
        (c, h, w): (usize, usize, usize),
        r: usize,
        p_init: f64,
    ) -> Result<Self> {
        if r == 0 || c % r != 0 {
            return Err(Error::Config(format!("{c} channels are not divisible by reduction factor {r}")));
        }
        let reduced = c / r;
        let name = format!("mars.block{}", index + 1);
        let reducer = Conv2d::new(
            store,
            rng,
            &format!("{name}.reducer"),
            ConvKind::Standard,
            ConvShape { cin: c, cout: reduced, kernel: 1, stride: 1, groups: 1, in_h: h, in_w: w },
            true,
        )?;
        Ok(Self {
            index,
            channels: c,
            reduced,
            resolution: (h, w),
            reducer,
            gc: MiniHead::new(store, &format!("{name}.gc"), reduced, p_init),
            gy: MiniHead::new(store, &format!("{name}.gy"), reduced, p_init),
            gx: MiniHead::new(store, &format!("{name}.gx"), reduced, p_init),
        })
    }

    /// Inverse-warps each sample of `(M, C, H, W)` by its view transform.
    pub fn pose_normalize(&self, g: &mut Graph<T>, attention: Var, transforms: &[TransformSpec]) -> Result<Var> {
        let grids = transforms
            .iter()
            .map(|t| t.invert_geometric().warp_grid::<T>(self.resolution).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.warp(attention, grids, self.resolution.0, self.resolution.1))
    }

    pub fn reduce(&self, g: &mut Graph<T>, store: &ParamStore<T>, normalized: Var) -> Var {
        self.reducer.forward(g, store, normalized)
    }

    pub fn channel_embed(&self, g: &mut Graph<T>, store: &ParamStore<T>, reduced: Var) -> Var {
        self.gc.forward(g, store, reduced)
    }

    /// `(zy, zx)`: height-averaged then width-GeM, and width-averaged then
    /// height-GeM embeddings.
    pub fn spatial_embed(&self, g: &mut Graph<T>, store: &ParamStore<T>, reduced: Var) -> (Var, Var) {
        let hy = g.mean_axis(reduced, 2);
        let zy = self.gy.forward(g, store, hy);
        let hx = g.mean_axis(reduced, 3);
        let zx = self.gx.forward(g, store, hx);
        (zy, zx)
    }

    /// Mean channel and spatial terms over `m` pairs whose reduced maps are
    /// stacked as `[first views; second views]` in `reduced`.
    pub fn pair_terms(&self, g: &mut Graph<T>, store: &ParamStore<T>, reduced: Var, m: usize) -> (Var, Var) {
        let zc = self.channel_embed(g, store, reduced);
        let (zy, zx) = self.spatial_embed(g, store, reduced);
        let ch = split_cosine(g, zc, m);
        let ch = g.mean_all(ch);
        let sy = split_cosine(g, zy, m);
        let sx = split_cosine(g, zx, m);
        let sp = g.add(sy, sx);
        let sp = g.mean_all(sp);
        (ch, sp)
    }

    fn tensor_terms(&self, store: &ParamStore<T>, a1: &Tensor<T>, a2: &Tensor<T>, training: bool) -> Result<(T, T)> {
        let shape = [1, self.reduced, self.resolution.0, self.resolution.1];
        for a in [a1, a2] {
            if a.len() != shape.iter().product::<usize>() {
                return Err(Error::Input(format!("reduced map must have shape {:?}, got {:?}", &shape[1..], a.shape)));
            }
        }
        let mut g = if training { Graph::new(true) } else { Graph::inference() };
        let x1 = g.constant(a1.clone().reshape(&shape));
        let x2 = g.constant(a2.clone().reshape(&shape));
        let both = g.concat(&[x1, x2], 0);
        for (z, name) in embeddings_for_guard(&mut g, self, store, both) {
            check_norms(g.value(z), name)?;
        }
        let (ch, sp) = self.pair_terms(&mut g, store, both, 1);
        Ok((g.value(ch).item(), g.value(sp).item()))
    }

    /// Channel term for one pair of reduced `(C/r, H, W)` maps.
    pub fn chmars(&self, store: &ParamStore<T>, a1: &Tensor<T>, a2: &Tensor<T>, training: bool) -> Result<T> {
        Ok(self.tensor_terms(store, a1, a2, training)?.0)
    }

    /// Spatial term for one pair of reduced `(C/r, H, W)` maps.
    pub fn spmars(&self, store: &ParamStore<T>, a1: &Tensor<T>, a2: &Tensor<T>, training: bool) -> Result<T> {
        Ok(self.tensor_terms(store, a1, a2, training)?.1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn mars_loss(
        &self,
        store: &ParamStore<T>,
        a1: &Tensor<T>,
        a2: &Tensor<T>,
        gamma_ch: f64,
        gamma_sp: f64,
        training: bool,
    ) -> Result<T> {
        let (ch, sp) = self.tensor_terms(store, a1, a2, training)?;
        Ok(T::from_f64c(gamma_ch) * ch + T::from_f64c(gamma_sp) * sp)
    }
}

fn embeddings_for_guard<T: Scalar>(
    g: &mut Graph<T>,
    block: &BlockRegularizer<T>,
    store: &ParamStore<T>,
    reduced: Var,
) -> Vec<(Var, &'static str)> {
    let zc = block.channel_embed(g, store, reduced);
    let (zy, zx) = block.spatial_embed(g, store, reduced);
    vec![(zc, "channel"), (zy, "height"), (zx, "width")]
}

fn check_norms<T: Scalar>(z: &Tensor<T>, name: &str) -> Result<()> {
    let d = z.shape[1];
    for row in z.data.chunks(d) {
        let n = row.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt();
        if n <= COSINE_EPS {
            return Err(Error::Numeric(format!("{name} attention embedding has near-zero norm {n:e}")));
        }
    }
    Ok(())
}

/// Per-pair cosine loss between rows `k` and `m + k` of `(2M, D)`.
fn split_cosine<T: Scalar>(g: &mut Graph<T>, z: Var, m: usize) -> Var {
    let z1 = g.slice(z, 0, 0, m);
    let z2 = g.slice(z, 0, m, m);
    cosine_loss_rows(g, z1, z2)
}

/// `1 − cos(z1_k, z2_k)` for every row pair of two `(M, D)` tensors.
pub fn cosine_loss_rows<T: Scalar>(g: &mut Graph<T>, z1: Var, z2: Var) -> Var {
    let n1 = g.normalize_rows(z1);
    let n2 = g.normalize_rows(z2);
    let prod = g.mul(n1, n2);
    let cos = g.sum_last(prod);
    let neg = g.scale(cos, -T::one());
    g.add_scalar(neg, T::one())
}

/// `1 − z1·z2 / (‖z1‖‖z2‖)`, in `[0, 2]`.
pub fn cosine_loss(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Input(format!("length mismatch {} vs {}", z1.len(), z2.len())));
    }
    let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 <= COSINE_EPS || n2 <= COSINE_EPS {
        return Err(Error::Numeric(format!("cosine loss on near-zero norm ({n1:e}, {n2:e})")));
    }
    let dot: f64 = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (n1 * n2)).clamp(0.0, 2.0))
}

/// Inverse-warps every channel of a `(C, H, W)` map by `t` and reports which
/// pixels are observable.
pub fn pose_normalize_map<T: Scalar>(map: &Tensor<T>, t: &TransformSpec) -> Result<(Tensor<T>, ValidMask)> {
    if map.ndim() != 3 || map.is_empty() {
        return Err(Error::Input(format!("expected (C, H, W) map, got {:?}", map.shape)));
    }
    let (c, h, w) = (map.dim(0), map.dim(1), map.dim(2));
    let grid = t.invert_geometric().warp_grid::<T>((h, w))?;
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        grid.gather(&map.data[ci * h * w..(ci + 1) * h * w], &mut out[ci * h * w..(ci + 1) * h * w]);
    }
    Ok((Tensor::from_vec(&map.shape, out), valid_mask(t, (h, w))))
}

impl<T: Scalar> MarsModule<T> {
    pub fn new(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let blocks = cfg
            .attention_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| BlockRegularizer::new(store, rng, i, shape, cfg.reduction_r, cfg.gem_p_init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, gamma_ch: cfg.gamma_ch, gamma_sp: cfg.gamma_sp })
    }

    /// Regularisation over the twin pairs `(first, second)` of a batch.
    /// Terms are averaged over pairs within a block and summed over blocks.
    pub fn objective(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        attention: &[Var],
        transforms: &[TransformSpec],
        pairs: &[(usize, usize)],
    ) -> Result<MarsTerms> {
        if attention.len() != self.blocks.len() {
            return Err(Error::Input(format!(
                "expected {} attention maps, got {}",
                self.blocks.len(),
                attention.len()
            )));
        }
        if pairs.is_empty() {
            log::warn!("no positive pairs in batch; attention regularisation is zero");
            return Ok(MarsTerms { channel: Vec::new(), spatial: Vec::new(), total: None });
        }
        let m = pairs.len();
        let order: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
        let views: Vec<TransformSpec> = order.iter().map(|&i| transforms[i]).collect();
        let (gc, gs) = (T::from_f64c(self.gamma_ch), T::from_f64c(self.gamma_sp));
        let mut terms = MarsTerms { channel: Vec::new(), spatial: Vec::new(), total: None };
        for (block, &a) in self.blocks.iter().zip(attention) {
            let selected = g.select(a, &order);
            let normalized = block.pose_normalize(g, selected, &views)?;
            let reduced = block.reduce(g, store, normalized);
            let (ch, sp) = block.pair_terms(g, store, reduced, m);
            let wch = g.scale(ch, gc);
            let wsp = g.scale(sp, gs);
            let combined = g.add(wch, wsp);
            terms.total = Some(match terms.total {
                None => combined,
                Some(t) => g.add(t, combined),
            });
            terms.channel.push(ch);
            terms.spatial.push(sp);
        }
        Ok(terms)
    }

    pub fn record(&self, g: &Graph<T>, terms: &MarsTerms, epoch: usize, step: usize) -> MarsLossRecord {
        let n = self.blocks.len();
        let read = |v: &[Var]| -> Vec<f64> {
            if v.is_empty() {
                vec![0.0; n]
            } else {
                v.iter().map(|&x| g.value(x).item().to_f64c()).collect()
            }
        };
        let channel = read(&terms.channel);
        let spatial = read(&terms.spatial);
        let combined: Vec<f64> =
            channel.iter().zip(&spatial).map(|(c, s)| self.gamma_ch * c + self.gamma_sp * s).collect();
        let total = combined.iter().sum();
        MarsLossRecord { epoch, step, channel, spatial, combined, total }
    }
}

/// Metric loss plus, when a regulariser is given, the summed per-block
/// regularisation over the twin pairs.
pub fn total_objective<T: Scalar>(
    g: &mut Graph<T>,
    ml_loss: Var,
    mars: Option<(&MarsModule<T>, &ParamStore<T>)>,
    attention: &[Var],
    transforms: &[TransformSpec],
    pairs: &[(usize, usize)],
) -> Result<(Var, MarsTerms)> {
    let Some((module, store)) = mars else {
        return Ok((ml_loss, MarsTerms { channel: Vec::new(), spatial: Vec::new(), total: None }));
    };
    let terms = module.objective(g, store, attention, transforms, pairs)?;
    let total = match terms.total {
        Some(t) => g.add(ml_loss, t),
        None => ml_loss,
    };
    Ok((total, terms))
}
