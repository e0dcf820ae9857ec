use std::collections::BTreeSet;

use mars_core::autograd::Graph;
use mars_core::gradcheck::check_params;
use mars_core::metric_losses::*;
use mars_core::params::ParamStore;
use mars_core::tensor::Tensor;
use mars_core::transforms::TransformRanges;
use mars_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

include!("common/cases.rs");

fn patches(n: usize, res: usize) -> Vec<Tensor<f32>> {
    (0..n).map(|k| Tensor::full(&[1, res, res], k as f32 / n as f32)).collect()
}

fn ranges() -> TransformRanges {
    TransformRanges { brightness: (0.8, 1.2), rotation_deg: (0.0, 360.0), max_translate_frac: 0.1 }
}

fn rows(z: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_vec(&[z.len(), z[0].len()], z.iter().flatten().copied().collect())
}

fn eval_loss(cfg: &LossConfig, z: &[Vec<f64>], labels: &[usize], mined: &MinedIndices, proxies: Option<&[Vec<f64>]>) -> f64 {
    let mut g = Graph::new(false);
    let zv = g.variable(rows(z));
    let pv = proxies.map(|p| g.variable(rows(p)));
    let l = cfg.evaluate(&mut g, zv, labels, mined, pv).unwrap();
    g.value(l).item()
}

/// Every cross-label pair as a negative, twins as positives.
fn all_negatives(labels: &[usize], twin: &[usize]) -> MinedIndices {
    let mut m = MinedIndices::default();
    for a in 0..labels.len() {
        m.ap.push(a);
        m.p.push(twin[a]);
        for n in 0..labels.len() {
            if labels[n] != labels[a] {
                m.an.push(a);
                m.n.push(n);
            }
        }
    }
    m
}

fn random_rows(b: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn twin_labels(b: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..b).map(|i| i / 2).collect(), (0..b).map(|i| i ^ 1).collect())
}

pub fn pair_batch_from_ten_instances() {
    let src = patches(10, 8);
    let labels: Vec<usize> = (0..10).collect();
    let batch = build_pair_batch(&src, &labels, 4, &ranges(), 7).unwrap();
    assert_eq!(batch.len(), 4);
    assert_eq!(batch.images.shape, vec![4, 1, 8, 8]);
    for i in 0..4 {
        let t = batch.twin_index[i];
        assert_ne!(t, i);
        assert_eq!(batch.twin_index[t], i);
        assert_eq!(batch.labels[t], batch.labels[i]);
    }
    let distinct: BTreeSet<usize> = batch.labels.iter().copied().collect();
    assert_eq!(distinct.len(), 2);
    for l in &distinct {
        assert_eq!(batch.labels.iter().filter(|&x| x == l).count(), 2);
    }
    assert_eq!(batch.unique_pairs().len(), 2);
    // Twins come from one source but two independent transforms.
    assert_ne!(batch.transforms[0], batch.transforms[1]);

    let again = build_pair_batch(&src, &labels, 4, &ranges(), 7).unwrap();
    assert_eq!(again.images.data, batch.images.data);
    assert_eq!(again.labels, batch.labels);
    assert_eq!(again.transforms, batch.transforms);
}

pub fn pair_batch_rejects_odd_or_oversized_batches() {
    let src = patches(3, 8);
    let labels = vec![0, 1, 2];
    assert!(matches!(build_pair_batch(&src, &labels, 5, &ranges(), 0), Err(Error::Input(_))));
    assert!(matches!(build_pair_batch(&src, &labels, 8, &ranges(), 0), Err(Error::Input(_))));
    assert!(matches!(build_pair_batch(&src, &labels, 0, &ranges(), 0), Err(Error::Input(_))));
}

pub fn epoch_chunks_cover_each_instance_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chunks = epoch_chunks(30, 8, &mut rng);
    let seen: Vec<usize> = chunks.iter().flatten().copied().collect();
    assert!(chunks.iter().all(|c| c.len() >= 2 && c.len() <= 4));
    assert_eq!(seen.iter().collect::<BTreeSet<_>>().len(), seen.len());
    // 30 = 7·4 + 2: nothing is dropped.
    assert_eq!(seen.len(), 30);
    // A trailing singleton cannot form negatives and is dropped.
    assert_eq!(epoch_chunks(9, 8, &mut rng).iter().flatten().count(), 8);
}

/// Pair `(a, n)` is a hard negative iff some positive of `a` is within `eps`
/// of it; written as an existence test over explicit pairs.
fn brute_force(sim: &[Vec<f64>], labels: &[usize], twin: &[usize], eps: f64) -> (BTreeSet<(usize, usize)>, BTreeSet<(usize, usize)>) {
    let b = labels.len();
    let pos = (0..b).map(|a| (a, twin[a])).collect();
    let mut neg = BTreeSet::new();
    for a in 0..b {
        for n in 0..b {
            if labels[a] == labels[n] {
                continue;
            }
            let positives: Vec<usize> = (0..b).filter(|&p| p != a && labels[p] == labels[a]).collect();
            if !positives.is_empty() && positives.iter().all(|&p| sim[a][n] > sim[a][p] - eps) {
                neg.insert((a, n));
            }
        }
    }
    (pos, neg)
}

fn as_sets(m: &MinedIndices) -> (BTreeSet<(usize, usize)>, BTreeSet<(usize, usize)>) {
    (m.ap.iter().copied().zip(m.p.iter().copied()).collect(), m.an.iter().copied().zip(m.n.iter().copied()).collect())
}

pub fn mining_four_element_hand_matrix() {
    let sim = vec![
        vec![1.0, 0.7, 0.65, 0.1],
        vec![0.7, 1.0, 0.2, 0.9],
        vec![0.65, 0.2, 1.0, 0.5],
        vec![0.1, 0.9, 0.5, 1.0],
    ];
    let (labels, twin) = twin_labels(4);
    let m = ms_mine(&sim, &labels, &twin, 0.1);
    // Anchor 0: positive 0.7, threshold 0.6 → 2 (0.65) but not 3 (0.1).
    // Anchor 1: positive 0.7 → 3 (0.9). Anchor 2: positive 0.5 → 0 (0.65), 1 (0.2 no).
    // Anchor 3: positive 0.5 → 1 (0.9).
    let expected: BTreeSet<_> = [(0, 2), (1, 3), (2, 0), (3, 1)].into_iter().collect();
    assert_eq!(as_sets(&m).1, expected);
    assert_eq!(as_sets(&m), brute_force(&sim, &labels, &twin, 0.1));
    for k in 0..m.ap.len() {
        assert_eq!(labels[m.ap[k]], labels[m.p[k]]);
        assert_eq!(twin[m.ap[k]], m.p[k]);
    }
    for k in 0..m.an.len() {
        assert_ne!(labels[m.an[k]], labels[m.n[k]]);
    }
}

pub fn orthogonal_classes_mine_no_negatives() {
    let z = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 3.0], vec![0.0, 0.0, 1.0]];
    let (labels, twin) = twin_labels(6);
    let m = ms_mine(&cosine_matrix(&z).unwrap(), &labels, &twin, MS_EPSILON);
    assert!(m.an.is_empty());
    assert_eq!(as_sets(&m).0, (0..6).map(|a| (a, a ^ 1)).collect());
}

pub fn single_label_batch_mines_no_negatives() {
    let sim = vec![vec![1.0, 0.3], vec![0.3, 1.0]];
    let m = ms_mine(&sim, &[4, 4], &[1, 0], 0.1);
    assert!(m.an.is_empty());
    assert_eq!(m.ap.len(), 2);
}

pub fn cosine_matrix_rejects_zero_rows() {
    assert!(matches!(cosine_matrix(&[vec![0.0, 0.0], vec![1.0, 0.0]]), Err(Error::Numeric(_))));
}

proptest! {
    #[test]
    fn mining_matches_exhaustive_filter(half in 1usize..=4, seed in any::<u64>()) {
        let b = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let sim = cosine_matrix(&z).unwrap();
        let (labels, twin) = twin_labels(b);
        let m = ms_mine(&sim, &labels, &twin, MS_EPSILON);
        prop_assert_eq!(as_sets(&m), brute_force(&sim, &labels, &twin, MS_EPSILON));
    }

    #[test]
    fn mining_commutes_with_batch_permutation(half in 1usize..=4, seed in any::<u64>()) {
        let b = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let (labels, twin) = twin_labels(b);
        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        // New position k holds old view perm[k].
        let mut inv = vec![0; b];
        for (k, &o) in perm.iter().enumerate() { inv[o] = k; }
        let pz: Vec<Vec<f64>> = perm.iter().map(|&o| z[o].clone()).collect();
        let pl: Vec<usize> = perm.iter().map(|&o| labels[o]).collect();
        let pt: Vec<usize> = perm.iter().map(|&o| inv[twin[o]]).collect();
        let m = as_sets(&ms_mine(&cosine_matrix(&z).unwrap(), &labels, &twin, MS_EPSILON));
        let pm = as_sets(&ms_mine(&cosine_matrix(&pz).unwrap(), &pl, &pt, MS_EPSILON));
        let map = |s: &BTreeSet<(usize, usize)>| s.iter().map(|&(a, c)| (inv[a], inv[c])).collect::<BTreeSet<_>>();
        prop_assert_eq!(map(&m.0), pm.0);
        prop_assert_eq!(map(&m.1), pm.1);
    }
}

pub fn ntxent_orthogonal_pairs_oracle() {
    let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let (labels, twin) = twin_labels(4);
    let cfg = LossConfig::Ntxent { temperature: 1.0 };
    let got = eval_loss(&cfg, &z, &labels, &all_negatives(&labels, &twin), None);
    let e = 1f64.exp();
    let oracle = -(e / (e + 2.0)).ln();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    assert!((got - 0.5514).abs() < 1e-4);
}

pub fn ntxent_collapsed_embeddings() {
    for half in [2usize, 3, 5] {
        let b = 2 * half;
        let z = vec![vec![0.4, -0.2, 0.9]; b];
        let (labels, twin) = twin_labels(b);
        let got = eval_loss(&LossConfig::Ntxent { temperature: 0.07 }, &z, &labels, &all_negatives(&labels, &twin), None);
        let k = (b - 2) as f64;
        assert!((got - (k + 1.0).ln()).abs() < 1e-9, "{got}");
    }
}

pub fn ntxent_falls_as_positive_similarity_rises() {
    let (labels, twin) = twin_labels(4);
    let mined = all_negatives(&labels, &twin);
    let cfg = LossConfig::Ntxent { temperature: 0.5 };
    let mut last = f64::INFINITY;
    for angle in [1.2, 0.9, 0.6, 0.3, 0.0] {
        let z = vec![vec![1.0, 0.0, 0.0], vec![f64::cos(angle), f64::sin(angle), 0.0], vec![0.0, 0.0, 1.0], vec![0.3, 0.0, 1.0]];
        let l = eval_loss(&cfg, &z, &labels, &mined, None);
        assert!(l < last);
        last = l;
    }
}

pub fn ntxent_needs_positives() {
    let mut g = Graph::<f64>::new(false);
    let z = g.variable(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    assert!(ntxent(&mut g, z, &MinedIndices::default(), 0.1).is_err());
}

fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let s = cosine_matrix(z).unwrap();
    let b = z.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..b).filter(|&k| k != i).map(|k| (s[i][k] / tau).exp()).sum();
        total += -pos.iter().map(|&p| ((s[i][p] / tau).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        anchors += 1;
    }
    total / anchors as f64
}

pub fn supcon_matches_scalar_oracle() {
    let z = random_rows(8, 5, 11);
    let labels = vec![0, 0, 1, 1, 1, 2, 3, 3];
    for tau in [0.1, 0.5, 1.0] {
        let got = eval_loss(&LossConfig::Supcon { temperature: tau }, &z, &labels, &MinedIndices::default(), None);
        let want = supcon_oracle(&z, &labels, tau);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

pub fn supcon_falls_as_positive_similarity_rises() {
    let labels = vec![0, 0, 1, 1];
    let mut last = f64::INFINITY;
    for angle in [1.2, 0.8, 0.4, 0.0] {
        let z = vec![vec![1.0, 0.0, 0.0], vec![f64::cos(angle), f64::sin(angle), 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 0.3, 1.0]];
        let l = eval_loss(&LossConfig::Supcon { temperature: 0.1 }, &z, &labels, &MinedIndices::default(), None);
        assert!(l < last);
        last = l;
    }
}

pub fn proxy_anchor_single_sample_oracle() {
    let (delta, alpha) = (0.1, 32.0);
    let z = vec![vec![2.0, 0.0]];
    let proxies = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let got = eval_loss(&LossConfig::ProxyAnchor { margin: delta, alpha }, &z, &[0], &MinedIndices::default(), Some(&proxies));
    // One positive proxy with similarity 1; over both proxies only proxy 1
    // has a negative, at similarity 0.
    let pos = (1.0 + (-alpha * (1.0 - delta)).exp()).ln();
    let neg = (1.0 + (alpha * (0.0 + delta)).exp()).ln() / 2.0;
    assert!((got - (pos + neg)).abs() < 1e-9, "{got} vs {}", pos + neg);
}

pub fn proxy_anchor_gradient_pulls_sample_toward_its_proxy() {
    let proxies = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let x = vec![0.6, 0.8];
    let mut g = Graph::<f64>::new(false);
    let z = g.variable(rows(&[x.clone()]));
    let p = g.constant(proxies);
    let l = proxy_anchor(&mut g, z, &[0], p, 0.1, 32.0).unwrap();
    let grad = g.backward(l).get(z).unwrap().data.clone();
    // Descending moves toward proxy 0 (x grows) and away from proxy 1.
    assert!(grad[0] < 0.0 && grad[1] > 0.0, "{grad:?}");
    let step: Vec<f64> = x.iter().zip(&grad).map(|(v, d)| v - 1e-3 * d).collect();
    let cos0 = |v: &[f64]| v[0] / (v[0] * v[0] + v[1] * v[1]).sqrt();
    assert!(cos0(&step) > cos0(&x));
}

pub fn proxy_anchor_rejects_unknown_labels_and_empty_batches() {
    let mut g = Graph::<f64>::new(false);
    let p = g.constant(rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let z = g.variable(rows(&[vec![1.0, 0.0]]));
    assert!(matches!(proxy_anchor(&mut g, z, &[2], p, 0.1, 32.0), Err(Error::Input(_))));
    let empty = g.variable(Tensor::from_vec(&[0, 2], vec![]));
    assert!(matches!(proxy_anchor(&mut g, empty, &[], p, 0.1, 32.0), Err(Error::Input(_))));
    assert!(matches!(supcon(&mut g, empty, &[], 0.1), Err(Error::Input(_))));
}

pub fn registry_resolves_known_names() {
    assert_eq!(registry_get("ntxent").unwrap(), LossConfig::Ntxent { temperature: 0.07 });
    assert_eq!(registry_get("proxy_anchor").unwrap(), LossConfig::ProxyAnchor { margin: 0.1, alpha: 32.0 });
    for name in AVAILABLE_LOSSES {
        let cfg = registry_get(name).unwrap();
        assert_eq!(cfg.name(), name);
        cfg.validate().unwrap();
    }
    match registry_get("nosuch") {
        Err(Error::UnknownLoss { name, available }) => {
            assert_eq!(name, "nosuch");
            for n in AVAILABLE_LOSSES {
                assert!(available.contains(n));
            }
        }
        other => panic!("{other:?}"),
    }
    for name in UNAVAILABLE_LOSSES {
        assert!(matches!(registry_get(name), Err(Error::UnknownLoss { .. })));
    }
}

pub fn loss_config_rejects_unknown_keys() {
    let ok: LossConfig = toml::from_str("name = \"supcon\"\ntemperature = 0.2").unwrap();
    assert_eq!(ok, LossConfig::Supcon { temperature: 0.2 });
    assert!(toml::from_str::<LossConfig>("name = \"supcon\"\ntau = 0.2").is_err());
    assert!(LossConfig::Ntxent { temperature: 0.0 }.validate().is_err());
}

pub fn losses_are_permutation_invariant_and_finite() {
    let b = 8;
    let z = random_rows(b, 6, 5);
    let proxies = random_rows(4, 6, 6);
    let (labels, twin) = twin_labels(b);
    let perm = [5, 2, 7, 0, 3, 6, 1, 4];
    let mut inv = [0; 8];
    for (k, &o) in perm.iter().enumerate() {
        inv[o] = k;
    }
    let pz: Vec<Vec<f64>> = perm.iter().map(|&o| z[o].clone()).collect();
    let pl: Vec<usize> = perm.iter().map(|&o| labels[o]).collect();
    let pt: Vec<usize> = perm.iter().map(|&o| inv[twin[o]]).collect();
    for name in AVAILABLE_LOSSES {
        let cfg = registry_get(name).unwrap();
        let m = ms_mine(&cosine_matrix(&z).unwrap(), &labels, &twin, MS_EPSILON);
        let pm = ms_mine(&cosine_matrix(&pz).unwrap(), &pl, &pt, MS_EPSILON);
        let a = eval_loss(&cfg, &z, &labels, &m, Some(&proxies));
        let c = eval_loss(&cfg, &pz, &pl, &pm, Some(&proxies));
        assert!(a.is_finite(), "{name}");
        assert!((a - c).abs() < 1e-9 * a.abs().max(1.0), "{name}: {a} vs {c}");
    }
}

pub fn loss_gradients_match_finite_differences() {
    let b = 8;
    let (labels, twin) = twin_labels(b);
    let mut store = ParamStore::<f64>::new();
    let z_id = store.add("z", Tensor::from_vec(&[b, 5], random_rows(b, 5, 21).concat()));
    let p_id = store.add("proxies", Tensor::from_vec(&[4, 5], random_rows(4, 5, 22).concat()));
    let configs = [
        LossConfig::Ntxent { temperature: 0.5 },
        LossConfig::Supcon { temperature: 0.5 },
        LossConfig::ProxyAnchor { margin: 0.1, alpha: 4.0 },
    ];
    // Circle loss is left out: its self-paced weights are deliberately
    // detached, so its autodiff gradient is not the total derivative.
    for cfg in configs {
        // Mining is a discrete choice; hold it fixed while differencing.
        let mined = all_negatives(&labels, &twin);
        let report = check_params(&store, &[z_id, p_id], 40, 9, |s| {
            let mut g = Graph::new(true);
            let z = g.param(s, z_id);
            let p = g.param(s, p_id);
            let l = cfg.evaluate(&mut g, z, &labels, &mined, Some(p))?;
            Ok((g, l))
        })
        .unwrap();
        assert!(report.passed(), "{}: {:?}", cfg.name(), report.mismatches);
    }
}

cases! {
    pair_batch_from_ten_instances,
    pair_batch_rejects_odd_or_oversized_batches,
    epoch_chunks_cover_each_instance_once,
    mining_four_element_hand_matrix,
    orthogonal_classes_mine_no_negatives,
    single_label_batch_mines_no_negatives,
    cosine_matrix_rejects_zero_rows,
    ntxent_orthogonal_pairs_oracle,
    ntxent_collapsed_embeddings,
    ntxent_falls_as_positive_similarity_rises,
    ntxent_needs_positives,
    supcon_matches_scalar_oracle,
    supcon_falls_as_positive_similarity_rises,
    proxy_anchor_single_sample_oracle,
    proxy_anchor_gradient_pulls_sample_toward_its_proxy,
    proxy_anchor_rejects_unknown_labels_and_empty_batches,
    registry_resolves_known_names,
    loss_config_rejects_unknown_keys,
    losses_are_permutation_invariant_and_finite,
    loss_gradients_match_finite_differences,
}
