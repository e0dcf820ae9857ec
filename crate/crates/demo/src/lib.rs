//! Browser demo: synthetic crater views, quarter-turn equivariance of a
//! single rotation-invariant conv layer, and per-block attention heatmaps of
//! a freshly initialised encoder.

use mars_core::backbone::{conv_forward, ModelConfig};
use mars_core::conv::ConvKind;
use mars_core::data::synth_patch;
use mars_core::eigencam::eigencam;
use mars_core::mars::pose_normalize_map;
use mars_core::model::Model;
use mars_core::tensor::Tensor;
use mars_core::transforms::{apply_transform, valid_mask, TransformSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Grey-scale images for the page, each with a caption.
#[wasm_bindgen]
#[derive(Default)]
pub struct Panels {
    images: Vec<(String, usize, usize, Vec<f32>)>,
    note: String,
    metrics: Vec<f64>,
}

#[wasm_bindgen]
impl Panels {
    pub fn count(&self) -> usize {
        self.images.len()
    }

    pub fn label(&self, i: usize) -> String {
        self.images[i].0.clone()
    }

    pub fn width(&self, i: usize) -> usize {
        self.images[i].2
    }

    pub fn height(&self, i: usize) -> usize {
        self.images[i].1
    }

    /// RGBA bytes, values clamped to [0, 1] before scaling.
    pub fn rgba(&self, i: usize) -> Vec<u8> {
        self.images[i].3.iter().flat_map(|v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        }).collect()
    }

    pub fn note(&self) -> String {
        self.note.clone()
    }

    /// The numbers behind the note, in the order it lists them.
    pub fn metrics(&self) -> Vec<f64> {
        self.metrics.clone()
    }
}

impl Panels {
    fn push(&mut self, label: impl Into<String>, t: &Tensor<f32>) {
        let (h, w) = (t.dim(t.ndim() - 2), t.dim(t.ndim() - 1));
        self.images.push((label.into(), h, w, t.data[..h * w].to_vec()));
    }
}

fn err(e: mars_core::Error) -> String {
    e.to_string()
}

fn spec(res: usize, rotation_deg: f64, tx: f64, ty: f64, brightness: f64) -> TransformSpec {
    TransformSpec { brightness, rotation_deg: rotation_deg.rem_euclid(360.0), translate_x: tx, translate_y: ty, ref_resolution: (res, res) }
}

/// A synthetic crater patch, its transformed view, and the pixels the
/// inverse warp can recover.
pub fn render_views(seed: u64, id: u64, res: usize, rotation_deg: f64, tx: f64, ty: f64, brightness: f64) -> Result<Panels, String> {
    let patch = synth_patch(seed, id, res);
    let t = spec(res, rotation_deg, tx, ty, brightness);
    let moved = apply_transform(&patch, &t).map_err(err)?;
    let mask = valid_mask(&t, (res, res));
    let mask_img = Tensor::from_vec(&[1, res, res], mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
    let back = apply_transform(&moved, &t.invert_geometric()).map_err(err)?;
    let worst = (0..res * res).filter(|&i| mask.mask[i]).map(|i| (back.data[i] - patch.data[i]).abs()).fold(0.0f32, f32::max);
    let mut p = Panels::default();
    p.push("source", &patch);
    p.push("transformed view", &moved);
    p.push("valid mask", &mask_img);
    p.push("inverse warp", &back);
    p.note = format!("{} of {} pixels recoverable; worst round-trip error on them {worst:.4}", mask.count(), res * res);
    p.metrics = vec![mask.count() as f64, worst as f64];
    Ok(p)
}

/// Counter-clockwise quarter turns of every plane, by index permutation:
/// conv outputs are signed, and the image warp clamps to [0, 1].
fn quarter_turn(t: &Tensor<f32>, quarters: u32) -> Tensor<f32> {
    let n = t.dim(t.ndim() - 1);
    let mut cur = t.clone();
    for _ in 0..quarters % 4 {
        let mut out = cur.clone();
        for (po, pi) in out.data.chunks_mut(n * n).zip(cur.data.chunks(n * n)) {
            for y in 0..n {
                for x in 0..n {
                    po[y * n + x] = pi[x * n + (n - 1 - y)];
                }
            }
        }
        cur = out;
    }
    cur
}

fn normalised_plane(t: &Tensor<f32>, lo: f32, hi: f32) -> Tensor<f32> {
    let n = t.dim(3);
    Tensor::from_vec(&[1, n, n], t.data[..n * n].iter().map(|v| (v - lo) / (hi - lo).max(1e-6)).collect())
}

/// Rotates the patch by `quarters` quarter turns before and after one random
/// 3×3 layer and compares, for the rotation-invariant and the standard conv.
pub fn render_equivariance(seed: u64, id: u64, res: usize, quarters: u32) -> Result<Panels, String> {
    if res % 2 != 0 {
        return Err("use an even resolution: odd maps put a pixel on the rotation centre".into());
    }
    let x = Tensor::from_vec(&[1, 1, res, res], synth_patch(seed, id, res).data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0);
    let w = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
    let rx = quarter_turn(&x, quarters);
    let mut p = Panels::default();
    let mut errors = Vec::new();
    for (kind, name) in [(ConvKind::Ric, "RIC"), (ConvKind::Standard, "standard")] {
        let turned_after = quarter_turn(&conv_forward(kind, &x, &w, 1).map_err(err)?, quarters);
        let turned_before = conv_forward(kind, &rx, &w, 1).map_err(err)?;
        let lo = turned_after.data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = turned_after.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        // Interior only: the zero padding breaks symmetry at the border.
        let mut worst = 0.0f32;
        for c in 0..2 {
            for y in 2..res - 2 {
                for xi in 2..res - 2 {
                    let i = (c * res + y) * res + xi;
                    worst = worst.max((turned_after.data[i] - turned_before.data[i]).abs());
                }
            }
        }
        errors.push(format!("{name}: {worst:.4}"));
        p.metrics.push(worst as f64);
        p.push(format!("{name}: rotate output"), &normalised_plane(&turned_after, lo, hi));
        p.push(format!("{name}: rotate input"), &normalised_plane(&turned_before, lo, hi));
    }
    p.note = format!("worst interior difference after {} quarter turn(s) — {}", quarters % 4, errors.join(", "));
    Ok(p)
}

/// EigenCAM heatmaps of every block's attention for the source patch and
/// its transformed view, the latter warped back into the source frame.
pub fn render_attention(
    seed: u64,
    id: u64,
    model_seed: u64,
    rotation_deg: f64,
    tx: f64,
    ty: f64,
    brightness: f64,
) -> Result<Panels, String> {
    let cfg = ModelConfig::mars();
    let res = cfg.input_resolution;
    let model = Model::<f32>::new(&cfg, model_seed, None).map_err(err)?;
    let patch = synth_patch(seed, id, res);
    let ts = [TransformSpec::identity((res, res)), spec(res, rotation_deg, tx, ty, brightness)];
    let mut batch = Vec::new();
    for t in &ts {
        batch.extend_from_slice(&apply_transform(&patch, t).map_err(err)?.data);
    }
    let attention = model.attention(&Tensor::from_vec(&[2, 1, res, res], batch)).map_err(err)?;
    let mut p = Panels::default();
    let mut gaps = Vec::new();
    for (b, a) in attention.iter().enumerate() {
        let per = a.len() / 2;
        let shape = &a.shape[1..];
        let mut maps = Vec::new();
        for (v, t) in ts.iter().enumerate() {
            let view = Tensor::from_vec(shape, a.data[v * per..(v + 1) * per].iter().map(|&x| x as f64).collect());
            let (normed, _) = pose_normalize_map(&view, t).map_err(err)?;
            maps.push(eigencam(&normed, Some(res)).map_err(err)?);
        }
        let gap = maps[0].data.iter().zip(&maps[1].data).map(|(u, v)| (u - v).abs()).sum::<f32>() / (res * res) as f32;
        gaps.push(format!("block {}: {gap:.3}", b + 1));
        p.metrics.push(gap as f64);
        p.push(format!("block {} source", b + 1), &maps[0]);
        p.push(format!("block {} view", b + 1), &maps[1]);
    }
    p.note = format!("mean absolute heatmap difference per block — {}", gaps.join(", "));
    Ok(p)
}

fn js(r: Result<Panels, String>) -> Result<Panels, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn views(seed: u64, id: u64, res: usize, rotation_deg: f64, tx: f64, ty: f64, brightness: f64) -> Result<Panels, JsError> {
    js(render_views(seed, id, res, rotation_deg, tx, ty, brightness))
}

#[wasm_bindgen]
pub fn equivariance(seed: u64, id: u64, res: usize, quarters: u32) -> Result<Panels, JsError> {
    js(render_equivariance(seed, id, res, quarters))
}

#[wasm_bindgen]
pub fn attention_heatmaps(
    seed: u64,
    id: u64,
    model_seed: u64,
    rotation_deg: f64,
    tx: f64,
    ty: f64,
    brightness: f64,
) -> Result<Panels, JsError> {
    js(render_attention(seed, id, model_seed, rotation_deg, tx, ty, brightness))
}
