//! Parameterised layers binding a [`ParamStore`] into a [`Graph`].

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnUpdate, Graph, Var};
use crate::conv::{ConvKind, ConvPlan, ConvShape};
use crate::error::Result;
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub plan: Arc<ConvPlan<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: ConvKind,
        shape: ConvShape,
        bias: bool,
    ) -> Result<Self> {
        let plan = ConvPlan::new(kind, shape)?;
        let ws = plan.weight_shape();
        let fan_in = ws[1] * ws[2] * ws[3];
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(rng, &ws, fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[shape.cout])));
        Ok(Self { weight, bias, plan: Arc::new(plan) })
    }

    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.plan.clone())
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.plan.out_h, self.plan.out_w)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub key: String,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        Self { gamma, beta, key: name.to_string() }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mean = &store.buffer(&format!("{}.running_mean", self.key)).data;
        let var = &store.buffer(&format!("{}.running_var", self.key)).data;
        g.batch_norm(x, gamma, beta, (mean, var), &self.key)
    }
}

/// Folds training-mode batch statistics into the running buffers.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64c(BN_MOMENTUM);
    for u in updates {
        for (suffix, vals) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let buf = store.buffer_mut(&format!("{}.{suffix}", u.key));
            for (r, &v) in buf.data.iter_mut().zip(vals.iter()) {
                *r = (T::one() - m) * *r + m * v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(rng, &[dout, din], din));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// PReLU with one shared slope, initialised to 0.25.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Self {
        Self { slope: store.add(format!("{name}.slope"), Tensor::from_f64(&[1], &[0.25])) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let a = g.param(store, self.slope);
        g.prelu(x, a)
    }
}

/// Generalised-mean pooling with a learnable exponent.
#[derive(Debug, Clone)]
pub struct Gem {
    pub p: ParamId,
}

pub const GEM_EPS: f64 = 1e-6;

impl Gem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, p_init: f64) -> Self {
        Self { p: store.add(format!("{name}.p"), Tensor::from_f64(&[1], &[p_init])) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let p = g.param(store, self.p);
        g.gem(x, p, T::from_f64c(GEM_EPS))
    }
}
