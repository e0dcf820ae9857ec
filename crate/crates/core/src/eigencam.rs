//! EigenCAM: the first principal direction of a layer's activations as a
//! heatmap.

use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 2000;
const TOL: f64 = 1e-13;

/// Leading unit eigenvector of the symmetric PSD `n × n` matrix `g`
/// (row-major), by power iteration from a fixed start.
fn leading_eigenvector(g: &[f64], n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64 / n as f64).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    for _ in 0..MAX_ITERS {
        let mut w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g[i * n + j] * v[j]).sum()).collect();
        let nw = norm(&w);
        if nw == 0.0 {
            return v;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < TOL {
            break;
        }
    }
    v
}

/// Projection of every spatial position of a `(C, H, W)` activation onto
/// the leading right-singular direction of the `(H·W) × C` matrix, signed
/// so the projection has non-negative mean. Returns `H·W` values.
pub fn principal_projection(act: &Tensor<f64>) -> Result<Vec<f64>> {
    if act.ndim() != 3 || act.is_empty() {
        return Err(Error::Input(format!("EigenCAM expects a non-empty (C, H, W) tensor, got {:?}", act.shape)));
    }
    let (c, hw) = (act.dim(0), act.dim(1) * act.dim(2));
    let a = &act.data;
    // C × C Gram matrix of the channel rows.
    let mut gram = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = (0..hw).map(|p| a[i * hw + p] * a[j * hw + p]).sum();
            gram[i * c + j] = s;
            gram[j * c + i] = s;
        }
    }
    let v = leading_eigenvector(&gram, c);
    let mut proj: Vec<f64> = (0..hw).map(|p| (0..c).map(|i| a[i * hw + p] * v[i]).sum()).collect();
    if proj.iter().sum::<f64>() < 0.0 {
        proj.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(proj)
}

/// `(1, out, out)` heatmap in `[0, 1]` (min 0, max 1 unless degenerate),
/// bilinearly upsampled from the activation grid when `out` is given.
/// All-zero or constant activations give an all-zero map with a warning.
pub fn eigencam(act: &Tensor<f64>, out: Option<usize>) -> Result<Tensor<f32>> {
    let proj = principal_projection(act)?;
    let (h, w) = (act.dim(1), act.dim(2));
    let (oh, ow) = out.map_or((h, w), |r| (r, r));
    let small = Tensor::from_vec(&[1, h, w], proj.iter().map(|&v| v as f32).collect());
    let map = if (oh, ow) == (h, w) { small } else { resize_bilinear(&small, oh, ow) };
    let lo = map.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi - lo > 1e-12 * hi.abs().max(1.0)) {
        log::warn!("EigenCAM input has no spatial variation; emitting a zero heatmap");
        return Ok(Tensor::zeros(&[1, oh, ow]));
    }
    Ok(map.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
}
