//! Central-difference verification of reverse-mode gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Absolute slack for entries whose true gradient is essentially zero.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Compares autodiff against central differences at up to `per_param`
/// randomly chosen entries of each listed parameter. `build` must create a
/// fresh graph from the store and return it with the scalar loss.
pub fn check_params(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    seed: u64,
    build: impl Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
) -> Result<GradReport> {
    let (g, loss) = build(store)?;
    let grads = g.backward(loss);
    let analytic = g.param_grads(&grads, store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let picks = sample(&mut rng, n, per_param.min(n)).into_vec();
        for j in picks {
            let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data[j]);
            let orig = store.get(id).data[j];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(id).data[j] = v;
                let (g, l) = build(&work)?;
                Ok(g.value(l).item())
            };
            let num = (eval(orig + STEP)? - eval(orig - STEP)?) / (2.0 * STEP);
            work.get_mut(id).data[j] = orig;
            let scale = a.abs().max(num.abs());
            let err = (a - num).abs();
            report.checked += 1;
            if scale > ABS_FLOOR {
                report.max_rel_err = report.max_rel_err.max(err / scale);
            }
            if err > REL_TOL * scale + ABS_FLOOR {
                report.mismatches.push(GradMismatch { param: store.name(id).to_string(), index: j, analytic: a, numeric: num });
            }
        }
    }
    Ok(report)
}
