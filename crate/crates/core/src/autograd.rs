//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients only into nodes that lead to a trainable leaf.

use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::ConvPlan;
use crate::params::{ParamId, ParamStore};
use crate::sampling::SampleGrid;
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, plan: Arc<ConvPlan<T>>, cols: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    PRelu { x: Var, a: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul { a: Var, b: Var, bmap: Option<Vec<u32>> },
    MeanAxis { x: Var, axis: usize },
    Gem { x: Var, p: Var, eps: T },
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Select { x: Var, indices: Vec<usize> },
    Warp { x: Var, grids: Vec<Arc<SampleGrid<T>>> },
    NormalizeRows { x: Var, norms: Vec<T> },
    MatMulNt(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    MulConst(Var, Vec<T>),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MaskedLse { x: Var, mask: Vec<bool> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch-norm statistics observed in a training-mode forward pass; the
/// owner folds them into its running buffers after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub key: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

const BN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training, grad_enabled: true, params: HashMap::new(), bn_updates: Vec::new() }
    }

    /// Evaluation-mode graph that binds parameters as constants.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new(false) }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a trainable leaf (once per graph).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let frozen = store.is_frozen(id) || !self.grad_enabled;
        let t = store.get(id).clone();
        let v = if frozen { self.constant(t) } else { self.variable(t) };
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Per-parameter gradients, indexed like the store.
    pub fn param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| self.params.get(&ParamId(i)).and_then(|&v| grads.get(v).cloned()))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    // ---------------------------------------------------------------- ops

    /// Grouped 2-D convolution over `(N, Cin, H, W)` following `plan`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, plan: Arc<ConvPlan<T>>) -> Var {
        let xs = self.shape(x).to_vec();
        let s = plan.shape;
        assert_eq!(xs, vec![xs[0], s.cin, s.in_h, s.in_w], "conv input shape");
        assert_eq!(self.shape(w), &plan.weight_shape()[..], "conv weight shape");
        let n = xs[0];
        let p = plan.out_positions();
        let kk = plan.kk();
        let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
        let keep_cols = plan.grid.is_some() && self.needs_grad(w);
        let mut cols_store = if keep_cols { vec![T::zero(); n * s.cin * kk * p] } else { Vec::new() };
        let mut scratch = vec![T::zero(); if plan.grid.is_some() { s.cin * kk * p } else { 0 }];
        let mut out = vec![T::zero(); n * s.cout * p];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let in_per = s.cin * s.in_h * s.in_w;
            for ni in 0..n {
                let xin = &xv[ni * in_per..(ni + 1) * in_per];
                let cols: &[T] = if plan.grid.is_some() {
                    let dst = if keep_cols {
                        &mut cols_store[ni * s.cin * kk * p..(ni + 1) * s.cin * kk * p]
                    } else {
                        &mut scratch[..]
                    };
                    plan.im2col(xin, dst);
                    dst
                } else {
                    xin
                };
                let o = &mut out[ni * s.cout * p..(ni + 1) * s.cout * p];
                for g in 0..s.groups {
                    let wg = &wv[g * cout_g * cin_g * kk..(g + 1) * cout_g * cin_g * kk];
                    let cg = &cols[g * cin_g * kk * p..(g + 1) * cin_g * kk * p];
                    matmul_acc(cout_g, cin_g * kk, p, wg, cg, &mut o[g * cout_g * p..(g + 1) * cout_g * p]);
                }
            }
        }
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value.data;
            for ni in 0..n {
                for co in 0..s.cout {
                    let bias = bv[co];
                    for v in &mut out[(ni * s.cout + co) * p..(ni * s.cout + co + 1) * p] {
                        *v += bias;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, s.cout, plan.out_h, plan.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv { x, w, b, plan, cols: cols_store }, &inputs)
    }

    /// Batch normalisation over every axis except axis 1. In training mode
    /// batch statistics are used and recorded under `key`; otherwise the
    /// provided running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: (&[T], &[T]), key: &str) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        let m = n * l;
        let eps = T::from_f64c(BN_EPS);
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if self.training {
            let inv_m = T::one() / T::from_usize(m).unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * l;
                    mean[ci] += xv[base..base + l].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|v| *v *= inv_m);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * l;
                    let mu = mean[ci];
                    var[ci] += xv[base..base + l].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
        } else {
            mean.copy_from_slice(running.0);
            var.copy_from_slice(running.1);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * l;
                for j in base..base + l {
                    let h = (xv[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = h;
                    out[j] = gv[ci] * h + bv[ci];
                }
            }
        }
        let train = self.training;
        if train {
            let unbias = if m > 1 {
                T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
            } else {
                T::one()
            };
            self.bn_updates.push(BnUpdate {
                key: key.to_string(),
                mean,
                var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        let value = Tensor::from_vec(&xs, out);
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// PReLU with a single shared slope `a` (shape `[1]`).
    pub fn prelu(&mut self, x: Var, a: Var) -> Var {
        let slope = self.value(a).data[0];
        let v = self.value(x).map(|v| if v > T::zero() { v } else { slope * v });
        self.push(v, Op::PRelu { x, a }, &[x, a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let bv = &self.value(b).data;
        let data = self.value(a).data.iter().zip(bv).map(|(&x, &y)| x - y).collect();
        let v = Tensor::from_vec(self.shape(a), data);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product; `b` may broadcast (size-1 axes) into `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bmap = if sa == sb { None } else { Some(broadcast_map(&sa, &sb)) };
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let data = match &bmap {
            None => av.iter().zip(bv).map(|(&x, &y)| x * y).collect(),
            Some(map) => av.iter().zip(map).map(|(&x, &j)| x * bv[j as usize]).collect(),
        };
        let v = Tensor::from_vec(&sa, data);
        self.push(v, Op::Mul { a, b, bmap }, &[a, b])
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&xs, axis);
        let xv = &self.value(x).data;
        let inv = T::one() / T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xv[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = xs;
        shape[axis] = 1;
        let v = Tensor::from_vec(&shape, out);
        self.push(v, Op::MeanAxis { x, axis }, &[x])
    }

    /// Generalised mean over every axis after the second: `(N, C, …) → (N, C)`.
    /// The exponent is clamped to at least 1.
    pub fn gem(&mut self, x: Var, p: Var, eps: T) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        let pv = self.value(p).data[0].max(T::one());
        let inv_l = T::one() / T::from_usize(l).unwrap();
        let xv = &self.value(x).data;
        let out: Vec<T> = (0..n * c)
            .map(|row| {
                let m = xv[row * l..(row + 1) * l].iter().map(|&v| v.max(eps).powf(pv)).sum::<T>() * inv_l;
                m.powf(T::one() / pv)
            })
            .collect();
        let v = Tensor::from_vec(&[n, c], out);
        self.push(v, Op::Gem { x, p, eps }, &[x, p])
    }

    /// `x (N, D) · wᵀ (D, E) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let e = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], d, "linear weight shape");
        let mut out = vec![T::zero(); n * e];
        matmul_nt_acc(n, d, e, &self.value(x).data, &self.value(w).data, &mut out);
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(e) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let v = Tensor::from_vec(&[n, e], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(v, Op::Linear { x, w, b }, &inputs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let first = self.shape(inputs[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let lens: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let src = &self.value(v).data;
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::from_vec(&shape, out);
        self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis(&xs, axis);
        assert!(start + len <= full, "slice out of range");
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let v = Tensor::from_vec(&shape, out);
        self.push(v, Op::Slice { x, axis, start }, &[x])
    }

    /// Rows of `x` along axis 0, in the order given.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        let per: usize = xs[1..].iter().product();
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = xs;
        shape[0] = indices.len();
        let v = Tensor::from_vec(&shape, out);
        self.push(v, Op::Select { x, indices: indices.to_vec() }, &[x])
    }

    /// Per-sample spatial resampling of `(N, C, H, W)`; each grid has
    /// `out_h · out_w` slots.
    pub fn warp(&mut self, x: Var, grids: Vec<Arc<SampleGrid<T>>>, out_h: usize, out_w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        assert_eq!(grids.len(), n, "one grid per sample");
        let p = out_h * out_w;
        let src = &self.value(x).data;
        let mut out = vec![T::zero(); n * c * p];
        for (ni, grid) in grids.iter().enumerate() {
            assert_eq!(grid.slots, p);
            for ci in 0..c {
                let s = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                grid.gather(s, &mut out[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
            }
        }
        let v = Tensor::from_vec(&[n, c, out_h, out_w], out);
        self.push(v, Op::Warp { x, grids }, &[x])
    }

    /// Row-wise L2 normalisation of `(M, D)` (norm clamped at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let d = self.shape(x)[1];
        let src = &self.value(x).data;
        let floor = T::from_f64c(1e-12);
        let norms: Vec<T> = src.chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor)).collect();
        let data = src.chunks(d).zip(&norms).flat_map(|(r, &nm)| r.iter().map(move |&v| v / nm)).collect();
        let v = Tensor::from_vec(self.shape(x), data);
        self.push(v, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `a (M, K) · bᵀ` with `b (N, K)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[0];
        assert_eq!(self.shape(b)[1], k);
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(m, k, n, &self.value(a).data, &self.value(b).data, &mut out);
        let v = Tensor::from_vec(&[m, n], out);
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|v| v + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.ln());
        self.push(v, Op::Log(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Var {
        assert_eq!(c.len(), self.value(x).len());
        let data = self.value(x).data.iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let v = Tensor::from_vec(self.shape(x), data);
        self.push(v, Op::MulConst(x, c), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data.iter().copied().sum::<T>() / T::from_usize(t.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Sum over the last axis of a 2-D tensor: `(M, K) → (M)`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let k = self.shape(x)[1];
        let data: Vec<T> = self.value(x).data.chunks(k).map(|r| r.iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[data.len()], data);
        self.push(v, Op::SumLast(x), &[x])
    }

    /// Row-wise `log Σ exp` over the masked entries of `(M, K)`; with
    /// `with_zero` an implicit extra entry equal to 0 joins every row, giving
    /// `log(1 + Σ exp)`. Rows with nothing to sum yield 0.
    pub fn masked_lse(&mut self, x: Var, mask: Vec<bool>, with_zero: bool) -> Var {
        let k = self.shape(x)[1];
        let src = &self.value(x).data;
        assert_eq!(mask.len(), src.len());
        let data: Vec<T> = src
            .chunks(k)
            .zip(mask.chunks(k))
            .map(|(row, m)| masked_lse_row(row, m, with_zero))
            .collect();
        let v = Tensor::from_vec(&[data.len()], data);
        self.push(v, Op::MaskedLse { x, mask }, &[x])
    }

    // ----------------------------------------------------------- backward

    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = &self.nodes[loss.0].value;
        grads[loss.0] = Some(Tensor::full(&lv.shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, plan, cols } => {
                let s = plan.shape;
                let n = self.shape(*x)[0];
                let p = plan.out_positions();
                let kk = plan.kk();
                let (cin_g, cout_g) = (s.cin / s.groups, s.cout / s.groups);
                let in_per = s.cin * s.in_h * s.in_w;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = grad_buf(grads, &self.nodes, *b);
                        for ni in 0..n {
                            for co in 0..s.cout {
                                db[co] += gd[(ni * s.cout + co) * p..(ni * s.cout + co + 1) * p].iter().copied().sum();
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let dw = grad_buf(grads, &self.nodes, *w);
                    for ni in 0..n {
                        let colv: &[T] = if plan.grid.is_some() {
                            &cols[ni * s.cin * kk * p..(ni + 1) * s.cin * kk * p]
                        } else {
                            &xv[ni * in_per..(ni + 1) * in_per]
                        };
                        let go = &gd[ni * s.cout * p..(ni + 1) * s.cout * p];
                        for gi in 0..s.groups {
                            matmul_nt_acc(
                                cout_g,
                                p,
                                cin_g * kk,
                                &go[gi * cout_g * p..(gi + 1) * cout_g * p],
                                &colv[gi * cin_g * kk * p..(gi + 1) * cin_g * kk * p],
                                &mut dw[gi * cout_g * cin_g * kk..(gi + 1) * cout_g * cin_g * kk],
                            );
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = grad_buf(grads, &self.nodes, *x);
                    let mut dcols = vec![T::zero(); s.cin * kk * p];
                    for ni in 0..n {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        let go = &gd[ni * s.cout * p..(ni + 1) * s.cout * p];
                        for gi in 0..s.groups {
                            matmul_tn_acc(
                                cin_g * kk,
                                cout_g,
                                p,
                                &wv[gi * cout_g * cin_g * kk..(gi + 1) * cout_g * cin_g * kk],
                                &go[gi * cout_g * p..(gi + 1) * cout_g * p],
                                &mut dcols[gi * cin_g * kk * p..(gi + 1) * cin_g * kk * p],
                            );
                        }
                        plan.col2im(&dcols, &mut dx[ni * in_per..(ni + 1) * in_per]);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let l: usize = xs[2..].iter().product();
                let m = T::from_usize(n * l).unwrap();
                let gv = &self.value(*gamma).data;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * l;
                        for j in base..base + l {
                            sum_g[ci] += gd[j];
                            sum_gx[ci] += gd[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*gamma) {
                    add_into(grad_buf(grads, &self.nodes, *gamma), &sum_gx);
                }
                if self.wants(*beta) {
                    add_into(grad_buf(grads, &self.nodes, *beta), &sum_g);
                }
                if self.wants(*x) {
                    let dx = grad_buf(grads, &self.nodes, *x);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * l;
                            let k = gv[ci] * inv_std[ci];
                            for j in base..base + l {
                                dx[j] += if *train {
                                    k * (gd[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m)
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for j in 0..gd.len() {
                    if xv[j] > T::zero() {
                        dx[j] += gd[j];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = &node.value.data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for j in 0..gd.len() {
                    dx[j] += gd[j] * yv[j] * (T::one() - yv[j]);
                }
            }
            Op::PRelu { x, a } => {
                let xv = &self.value(*x).data;
                let slope = self.value(*a).data[0];
                if self.wants(*a) {
                    let da: T = xv.iter().zip(gd).filter(|(&v, _)| v <= T::zero()).map(|(&v, &gg)| v * gg).sum();
                    grad_buf(grads, &self.nodes, *a)[0] += da;
                }
                if self.wants(*x) {
                    let dx = grad_buf(grads, &self.nodes, *x);
                    for j in 0..gd.len() {
                        dx[j] += if xv[j] > T::zero() { gd[j] } else { slope * gd[j] };
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(grad_buf(grads, &self.nodes, v), gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(grad_buf(grads, &self.nodes, *a), gd);
                }
                if self.wants(*b) {
                    let db = grad_buf(grads, &self.nodes, *b);
                    for (d, &gg) in db.iter_mut().zip(gd) {
                        *d -= gg;
                    }
                }
            }
            Op::Mul { a, b, bmap } => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if self.wants(*a) {
                    let da = grad_buf(grads, &self.nodes, *a);
                    match bmap {
                        None => (0..gd.len()).for_each(|j| da[j] += gd[j] * bv[j]),
                        Some(map) => (0..gd.len()).for_each(|j| da[j] += gd[j] * bv[map[j] as usize]),
                    }
                }
                if self.wants(*b) {
                    let db = grad_buf(grads, &self.nodes, *b);
                    match bmap {
                        None => (0..gd.len()).for_each(|j| db[j] += gd[j] * av[j]),
                        Some(map) => (0..gd.len()).for_each(|j| db[map[j] as usize] += gd[j] * av[j]),
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&xs, *axis);
                let inv = T::one() / T::from_usize(len).unwrap();
                let dx = grad_buf(grads, &self.nodes, *x);
                for o in 0..outer {
                    for k in 0..len {
                        let dst = &mut dx[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (d, &gg) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d += gg * inv;
                        }
                    }
                }
            }
            Op::Gem { x, p, eps } => {
                let xs = self.shape(*x);
                let l: usize = xs[2..].iter().product();
                let raw_p = self.value(*p).data[0];
                let pv = raw_p.max(T::one());
                let inv_l = T::one() / T::from_usize(l).unwrap();
                let xv = &self.value(*x).data;
                let yv = &node.value.data;
                let mut dp = T::zero();
                let want_x = self.wants(*x);
                let mut dxs = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                for (row, (&y, &gg)) in yv.iter().zip(gd).enumerate() {
                    let xr = &xv[row * l..(row + 1) * l];
                    let m = y.powf(pv);
                    if want_x {
                        let coef = gg * m.powf(T::one() / pv - T::one()) * inv_l;
                        for (j, &v) in xr.iter().enumerate() {
                            if v > *eps {
                                dxs[row * l + j] = coef * v.powf(pv - T::one());
                            }
                        }
                    }
                    let s: T = xr.iter().map(|&v| {
                        let c = v.max(*eps);
                        c.powf(pv) * c.ln()
                    }).sum::<T>()
                        * inv_l;
                    dp += gg * y * (-(m.ln()) / (pv * pv) + s / (pv * m));
                }
                if want_x {
                    add_into(grad_buf(grads, &self.nodes, *x), &dxs);
                }
                if self.wants(*p) && raw_p >= T::one() {
                    grad_buf(grads, &self.nodes, *p)[0] += dp;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let e = self.shape(*w)[0];
                if self.wants(*x) {
                    matmul_acc(n, e, d, gd, &self.value(*w).data, grad_buf(grads, &self.nodes, *x));
                }
                if self.wants(*w) {
                    matmul_tn_acc(e, n, d, gd, &self.value(*x).data, grad_buf(grads, &self.nodes, *w));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = grad_buf(grads, &self.nodes, *b);
                        for row in gd.chunks(e) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(grad_buf(grads, &self.nodes, *x), gd),
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let dv = grad_buf(grads, &self.nodes, v);
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut dv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&xs, *axis);
                let len = node.value.shape[*axis];
                let dx = grad_buf(grads, &self.nodes, *x);
                for o in 0..outer {
                    add_into(
                        &mut dx[(o * full + start) * inner..(o * full + start + len) * inner],
                        &gd[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }
            Op::Select { x, indices } => {
                let per: usize = self.shape(*x)[1..].iter().product();
                let dx = grad_buf(grads, &self.nodes, *x);
                for (k, &idx) in indices.iter().enumerate() {
                    add_into(&mut dx[idx * per..(idx + 1) * per], &gd[k * per..(k + 1) * per]);
                }
            }
            Op::Warp { x, grids } => {
                let xs = self.shape(*x);
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let p = node.value.shape[2] * node.value.shape[3];
                let dx = grad_buf(grads, &self.nodes, *x);
                for (ni, grid) in grids.iter().enumerate() {
                    for ci in 0..c {
                        grid.scatter(
                            &gd[(ni * c + ci) * p..(ni * c + ci + 1) * p],
                            &mut dx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw],
                        );
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.value.shape[1];
                let yv = &node.value.data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for (r, &nm) in norms.iter().enumerate() {
                    let y = &yv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] += (gr[j] - y[j] * dot) / nm;
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.wants(*a) {
                    matmul_acc(m, n, k, gd, &self.value(*b).data, grad_buf(grads, &self.nodes, *a));
                }
                if self.wants(*b) {
                    matmul_tn_acc(n, m, k, gd, &self.value(*a).data, grad_buf(grads, &self.nodes, *b));
                }
            }
            Op::Scale(x, c) => {
                let dx = grad_buf(grads, &self.nodes, *x);
                for (d, &gg) in dx.iter_mut().zip(gd) {
                    *d += gg * *c;
                }
            }
            Op::AddScalar(x) => add_into(grad_buf(grads, &self.nodes, *x), gd),
            Op::Exp(x) => {
                let yv = &node.value.data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for j in 0..gd.len() {
                    dx[j] += gd[j] * yv[j];
                }
            }
            Op::Log(x) => {
                let xv = &self.value(*x).data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for j in 0..gd.len() {
                    dx[j] += gd[j] / xv[j];
                }
            }
            Op::Softplus(x) => {
                let xv = &self.value(*x).data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for j in 0..gd.len() {
                    dx[j] += gd[j] * sigmoid(xv[j]);
                }
            }
            Op::MulConst(x, c) => {
                let dx = grad_buf(grads, &self.nodes, *x);
                for j in 0..gd.len() {
                    dx[j] += gd[j] * c[j];
                }
            }
            Op::SumAll(x) => {
                let gg = gd[0];
                grad_buf(grads, &self.nodes, *x).iter_mut().for_each(|d| *d += gg);
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len().max(1);
                let gg = gd[0] / T::from_usize(len).unwrap();
                grad_buf(grads, &self.nodes, *x).iter_mut().for_each(|d| *d += gg);
            }
            Op::SumLast(x) => {
                let k = self.shape(*x)[1];
                let dx = grad_buf(grads, &self.nodes, *x);
                for (r, &gg) in gd.iter().enumerate() {
                    dx[r * k..(r + 1) * k].iter_mut().for_each(|d| *d += gg);
                }
            }
            Op::MaskedLse { x, mask } => {
                let k = self.shape(*x)[1];
                let xv = &self.value(*x).data;
                let yv = &node.value.data;
                let dx = grad_buf(grads, &self.nodes, *x);
                for (r, (&y, &gg)) in yv.iter().zip(gd).enumerate() {
                    for j in r * k..(r + 1) * k {
                        if mask[j] {
                            dx[j] += gg * (xv[j] - y).exp();
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> &'a mut [T] {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(&nodes[v.0].value.shape));
    }
    &mut slot.as_mut().unwrap().data
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    if v > T::from_f64c(30.0) {
        v
    } else {
        v.max(T::zero()) + (-(v.abs())).exp().ln_1p()
    }
}

fn masked_lse_row<T: Scalar>(row: &[T], mask: &[bool], with_zero: bool) -> T {
    let mut mx = if with_zero { T::zero() } else { T::neg_infinity() };
    let mut any = with_zero;
    for (&v, &m) in row.iter().zip(mask) {
        if m {
            mx = mx.max(v);
            any = true;
        }
    }
    if !any {
        return T::zero();
    }
    let mut s = if with_zero { (-mx).exp() } else { T::zero() };
    for (&v, &m) in row.iter().zip(mask) {
        if m {
            s += (v - mx).exp();
        }
    }
    mx + s.ln()
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each flat index of `full`, the flat index of `small` it broadcasts from.
fn broadcast_map(full: &[usize], small: &[usize]) -> Vec<u32> {
    assert_eq!(full.len(), small.len(), "broadcast requires equal rank");
    for (&f, &s) in full.iter().zip(small) {
        assert!(s == f || s == 1, "cannot broadcast {small:?} into {full:?}");
    }
    let rank = full.len();
    let mut sstride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        sstride[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let total: usize = full.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&sstride).map(|(i, s)| i * s).sum::<usize>() as u32);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < full[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
