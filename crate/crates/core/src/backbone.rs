//! Desk-scale ResNeXt-style encoder with swappable convolution (standard or
//! rotation-invariant coordinate) and attention (squeeze-and-excitation or
//! coordinate attention), plus the GeM projection head.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conv::{ConvKind, ConvPlan, ConvShape};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Gem, Linear, PRelu};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Se,
    Ca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv_kind: ConvKind,
    pub attention_kind: AttentionKind,
    pub mars_enabled: bool,
    /// Output channels of each residual block; its length is the block count.
    pub channels: Vec<usize>,
    pub stem_channels: usize,
    pub cardinality: usize,
    pub in_channels: usize,
    pub input_resolution: usize,
    pub embedding_dim: usize,
    pub gem_p_init: f64,
    pub reduction_r: usize,
    pub gamma_ch: f64,
    pub gamma_sp: f64,
    pub se_reduction: usize,
    pub ca_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mars()
    }
}

impl ModelConfig {
    /// Standard convolution with squeeze-and-excitation, metric loss only.
    pub fn conv2d_se() -> Self {
        Self { conv_kind: ConvKind::Standard, attention_kind: AttentionKind::Se, mars_enabled: false, ..Self::mars() }
    }

    /// RIC-C convolution with coordinate attention, metric loss only.
    pub fn ric_ca() -> Self {
        Self { mars_enabled: false, ..Self::mars() }
    }

    /// RIC-C convolution, coordinate attention and attention regularisation.
    pub fn mars() -> Self {
        Self {
            conv_kind: ConvKind::Ric,
            attention_kind: AttentionKind::Ca,
            mars_enabled: true,
            channels: vec![32, 64, 128, 256],
            stem_channels: 16,
            cardinality: 4,
            in_channels: 1,
            input_resolution: 64,
            embedding_dim: 128,
            gem_p_init: 3.0,
            reduction_r: 4,
            gamma_ch: 0.15,
            gamma_sp: 0.15,
            se_reduction: 4,
            ca_reduction: 8,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() {
            return err("at least one block is required".into());
        }
        if self.channels.iter().any(|&c| c == 0) || self.stem_channels == 0 || self.in_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if self.mars_enabled && self.attention_kind != AttentionKind::Ca {
            return err("attention regularisation requires coordinate attention".into());
        }
        if self.reduction_r == 0 {
            return err("reduction factor must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.reduction_r != 0) {
            return err(format!("reduction factor {} does not divide {c} channels", self.reduction_r));
        }
        if self.cardinality == 0 {
            return err("cardinality must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % 2 != 0 || (c / 2) % self.cardinality != 0) {
            return err(format!("block width {c} must be even with a bottleneck divisible by the cardinality"));
        }
        let div = 1usize << (self.num_blocks() + 1);
        if self.input_resolution == 0 || self.input_resolution % div != 0 {
            return err(format!("input resolution {} must be a multiple of {div}", self.input_resolution));
        }
        if self.gem_p_init < 1.0 {
            return err(format!("GeM exponent {} must be at least 1", self.gem_p_init));
        }
        if self.gamma_ch < 0.0 || self.gamma_sp < 0.0 {
            return err("regularisation weights must be non-negative".into());
        }
        if self.embedding_dim == 0 || self.se_reduction == 0 || self.ca_reduction == 0 {
            return err("embedding and attention widths must be positive".into());
        }
        Ok(())
    }

    /// `(C_i, H_i, W_i)` of every block's attention map.
    pub fn attention_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let r = self.input_resolution >> (i + 2);
                (c, r, r)
            })
            .collect()
    }
}

/// Squeeze (global mean) → bottleneck → sigmoid channel gates.
#[derive(Debug, Clone)]
pub struct SeAttention {
    fc1: Linear,
    fc2: Linear,
}

impl SeAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, reduction: usize) -> Self {
        let hidden = (c / reduction).max(1);
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), c, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, c),
        }
    }

    /// Returns `(gated feature, gates)`; the gated feature doubles as the
    /// attention map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let pooled = g.mean_axis(x, 3);
        let pooled = g.mean_axis(pooled, 2);
        let flat = g.reshape(pooled, &[n, c]);
        let h = self.fc1.forward(g, store, flat);
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h);
        let gates = g.sigmoid(h);
        let gates = g.reshape(gates, &[n, c, 1, 1]);
        (g.mul(x, gates), gates)
    }
}

/// Coordinate attention: direction-aware pooling along H and W, a shared
/// bottleneck, and separate sigmoid gates per direction.
#[derive(Debug, Clone)]
pub struct CaAttention<T> {
    reduce: Conv2d<T>,
    bn: BatchNorm,
    conv_h: Conv2d<T>,
    conv_w: Conv2d<T>,
    h: usize,
    w: usize,
}

impl<T: Scalar> CaAttention<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        (h, w): (usize, usize),
        reduction: usize,
    ) -> Result<Self> {
        let mip = (c / reduction).max(8);
        let col = |cin, cout, len| ConvShape { cin, cout, kernel: 1, stride: 1, groups: 1, in_h: len, in_w: 1 };
        Ok(Self {
            reduce: Conv2d::new(store, rng, &format!("{name}.reduce"), ConvKind::Standard, col(c, mip, h + w), true)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), mip),
            conv_h: Conv2d::new(store, rng, &format!("{name}.conv_h"), ConvKind::Standard, col(mip, c, h), true)?,
            conv_w: Conv2d::new(store, rng, &format!("{name}.conv_w"), ConvKind::Standard, col(mip, c, w), true)?,
            h,
            w,
        })
    }

    /// Returns `(gated feature, gate_h (N,C,H,1), gate_w (N,C,1,W))`.
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var, Var) {
        let s = g.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let (h, w) = (self.h, self.w);
        let pool_h = g.mean_axis(x, 3); // (N, C, H, 1)
        let pool_w = g.mean_axis(x, 2); // (N, C, 1, W)
        let pool_w = g.reshape(pool_w, &[n, c, w, 1]);
        let y = g.concat(&[pool_h, pool_w], 2);
        let y = self.reduce.forward(g, store, y);
        let y = self.bn.forward(g, store, y);
        let y = g.relu(y);
        let yh = g.slice(y, 2, 0, h);
        let yw = g.slice(y, 2, h, w);
        let ah = self.conv_h.forward(g, store, yh);
        let gate_h = g.sigmoid(ah);
        let aw = self.conv_w.forward(g, store, yw);
        let gate_w = g.sigmoid(aw);
        let gate_w = g.reshape(gate_w, &[n, c, 1, w]);
        let out = g.mul(x, gate_h);
        (g.mul(out, gate_w), gate_h, gate_w)
    }
}

#[derive(Debug, Clone)]
pub enum Attention<T> {
    Se(SeAttention),
    Ca(CaAttention<T>),
}

impl<T: Scalar> Attention<T> {
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        match self {
            Attention::Se(se) => se.forward(g, store, x).0,
            Attention::Ca(ca) => ca.forward(g, store, x).0,
        }
    }
}

/// ResNeXt bottleneck with a stride-2 grouped 3×3, attention on the residual
/// branch and a projection shortcut.
#[derive(Debug, Clone)]
pub struct ResNeXtBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm,
    conv2: Conv2d<T>,
    bn2: BatchNorm,
    conv3: Conv2d<T>,
    bn3: BatchNorm,
    attention: Attention<T>,
    shortcut: Conv2d<T>,
    bn_sc: BatchNorm,
}

impl<T: Scalar> ResNeXtBlock<T> {
    fn new(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        (cin, cout): (usize, usize),
        in_res: usize,
    ) -> Result<Self> {
        let mid = cout / 2;
        let kind = cfg.conv_kind;
        let out_res = in_res / 2;
        let shape = |cin, cout, kernel, stride, groups, res| ConvShape {
            cin,
            cout,
            kernel,
            stride,
            groups,
            in_h: res,
            in_w: res,
        };
        let attention = match cfg.attention_kind {
            AttentionKind::Se => Attention::Se(SeAttention::new(store, rng, &format!("{name}.se"), cout, cfg.se_reduction)),
            AttentionKind::Ca => Attention::Ca(CaAttention::new(
                store,
                rng,
                &format!("{name}.ca"),
                cout,
                (out_res, out_res),
                cfg.ca_reduction,
            )?),
        };
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), kind, shape(cin, mid, 1, 1, 1, in_res), false)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), mid),
            conv2: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv2"),
                kind,
                shape(mid, mid, 3, 2, cfg.cardinality, in_res),
                false,
            )?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), mid),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), kind, shape(mid, cout, 1, 1, 1, out_res), false)?,
            bn3: BatchNorm::new(store, &format!("{name}.bn3"), cout),
            attention,
            shortcut: Conv2d::new(store, rng, &format!("{name}.shortcut"), kind, shape(cin, cout, 1, 2, 1, in_res), false)?,
            bn_sc: BatchNorm::new(store, &format!("{name}.bn_sc"), cout),
        })
    }

    /// Returns `(block output, attention map)`.
    fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let y = self.conv1.forward(g, store, x);
        let y = self.bn1.forward(g, store, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y);
        let y = self.bn2.forward(g, store, y);
        let y = g.relu(y);
        let y = self.conv3.forward(g, store, y);
        let y = self.bn3.forward(g, store, y);
        let attn = self.attention.forward(g, store, y);
        let sc = self.shortcut.forward(g, store, x);
        let sc = self.bn_sc.forward(g, store, sc);
        let out = g.add(attn, sc);
        (g.relu(out), attn)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    stem: Conv2d<T>,
    stem_bn: BatchNorm,
    blocks: Vec<ResNeXtBlock<T>>,
    resolution: usize,
    in_channels: usize,
}

pub struct EncoderOutput {
    pub h: Var,
    pub attention: Vec<Var>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let res = cfg.input_resolution;
        let stem = Conv2d::new(
            store,
            rng,
            "encoder.stem",
            cfg.conv_kind,
            ConvShape {
                cin: cfg.in_channels,
                cout: cfg.stem_channels,
                kernel: 3,
                stride: 2,
                groups: 1,
                in_h: res,
                in_w: res,
            },
            false,
        )?;
        let stem_bn = BatchNorm::new(store, "encoder.stem_bn", cfg.stem_channels);
        let mut blocks = Vec::new();
        let mut cin = cfg.stem_channels;
        let mut r = res / 2;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            blocks.push(ResNeXtBlock::new(store, rng, &format!("encoder.block{}", i + 1), cfg, (cin, cout), r)?);
            cin = cout;
            r /= 2;
        }
        Ok(Self { stem, stem_bn, blocks, resolution: res, in_channels: cfg.in_channels })
    }

    /// `x` is `(N, C_in, R, R)`; returns the final representation and the
    /// attention map of every block.
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<EncoderOutput> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::Input(format!(
                "encoder expects (N, {}, {r}, {r}) input, got {:?}",
                self.in_channels,
                s,
                r = self.resolution
            )));
        }
        let y = self.stem.forward(g, store, x);
        let y = self.stem_bn.forward(g, store, y);
        let mut y = g.relu(y);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, a) = b.forward(g, store, y);
            attention.push(a);
            y = out;
        }
        Ok(EncoderOutput { h: y, attention })
    }
}

/// GeM → linear → batch norm → PReLU.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    gem: Gem,
    linear: Linear,
    bn: BatchNorm,
    act: PRelu,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = *cfg.channels.last().expect("validated");
        Self {
            gem: Gem::new(store, "head.gem", cfg.gem_p_init),
            linear: Linear::new(store, rng, "head.linear", c, cfg.embedding_dim),
            bn: BatchNorm::new(store, "head.bn", cfg.embedding_dim),
            act: PRelu::new(store, "head.prelu"),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Var {
        let pooled = self.gem.forward(g, store, h);
        let z = self.linear.forward(g, store, pooled);
        let z = self.bn.forward(g, store, z);
        self.act.forward(g, store, z)
    }
}

/// Generalised mean of each channel of a `(C, H, W)` map.
pub fn gem_pool<T: Scalar>(feature: &Tensor<T>, p: f64) -> Result<Vec<T>> {
    if p < 1.0 {
        return Err(Error::Config(format!("GeM exponent {p} must be at least 1")));
    }
    if feature.ndim() < 2 || feature.is_empty() {
        return Err(Error::Input(format!("GeM expects (C, ...) input, got {:?}", feature.shape)));
    }
    let mut g = Graph::inference();
    let mut shape = vec![1];
    shape.extend_from_slice(&feature.shape);
    let x = g.constant(feature.clone().reshape(&shape));
    let pv = g.constant(Tensor::from_f64(&[1], &[p]));
    let y = g.gem(x, pv, T::from_f64c(crate::nn::GEM_EPS));
    Ok(g.value(y).data.clone())
}

/// Single convolution of a `(N, C, H, W)` feature with `(C_out, C, k, k)`
/// weights under the given convolution kind ("same" padding).
pub fn conv_forward<T: Scalar>(kind: ConvKind, feature: &Tensor<T>, weights: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if feature.ndim() != 4 || weights.ndim() != 4 || weights.dim(2) != weights.dim(3) {
        return Err(Error::Input("conv_forward expects (N,C,H,W) features and (O,C,k,k) weights".into()));
    }
    if weights.dim(1) != feature.dim(1) {
        return Err(Error::Input(format!("weights expect {} channels, feature has {}", weights.dim(1), feature.dim(1))));
    }
    let plan = ConvPlan::new(
        kind,
        ConvShape {
            cin: feature.dim(1),
            cout: weights.dim(0),
            kernel: weights.dim(2),
            stride,
            groups: 1,
            in_h: feature.dim(2),
            in_w: feature.dim(3),
        },
    )?;
    let mut g = Graph::inference();
    let x = g.constant(feature.clone());
    let w = g.constant(weights.clone());
    let y = g.conv2d(x, w, None, Arc::new(plan));
    Ok(g.value(y).clone())
}

/// Rotation-invariant coordinate convolution of one feature batch.
pub fn ric_conv_forward<T: Scalar>(feature: &Tensor<T>, weights: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    conv_forward(ConvKind::Ric, feature, weights, stride)
}
