//! Precomputed bilinear sampling grids.
//!
//! Convolutions (standard and rotation-invariant coordinate), image warps and
//! pose normalization all reduce to gathering each destination value from at
//! most four weighted source pixels. A [`SampleGrid`] stores those gathers so
//! the forward pass is a weighted gather and the backward pass the matching
//! scatter.

use crate::tensor::Scalar;

const SNAP: f64 = 1e-9;

/// Bilinear gather table: `slots` destinations, `taps` sources each.
#[derive(Debug, Clone)]
pub struct SampleGrid<T> {
    pub slots: usize,
    /// 1 for nearest/integer grids, 4 for bilinear.
    pub taps: usize,
    pub idx: Vec<u32>,
    pub wt: Vec<T>,
}

/// Bilinear taps of the point `(x, y)` (x = column, y = row) on an `h × w`
/// grid with zero fill outside the support.
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(u32, f64); 4] {
    let x = snap(x);
    let y = snap(y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut out = [(0u32, 0.0f64); 4];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, &(cx, cy, wgt)) in out.iter_mut().zip(corners.iter()) {
        if wgt != 0.0 && cx >= 0.0 && cy >= 0.0 && (cx as usize) < w && (cy as usize) < h {
            *slot = ((cy as usize * w + cx as usize) as u32, wgt);
        }
    }
    out
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Cosine and sine of an angle in degrees, exact at multiples of 90°.
pub fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let q = deg / 90.0;
    if (q - q.round()).abs() < 1e-12 {
        match (q.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

impl<T: Scalar> SampleGrid<T> {
    /// Builds a bilinear grid from a list of source points (one per slot);
    /// `None` marks a slot sampling entirely outside the support.
    pub fn from_points(points: impl IntoIterator<Item = Option<(f64, f64)>>, h: usize, w: usize) -> Self {
        let mut idx = Vec::new();
        let mut wt = Vec::new();
        let mut slots = 0;
        for p in points {
            slots += 1;
            let taps = match p {
                Some((x, y)) => bilinear_taps(x, y, h, w),
                None => [(0, 0.0); 4],
            };
            for (i, v) in taps {
                idx.push(i);
                wt.push(T::from_f64c(v));
            }
        }
        Self { slots, taps: 4, idx, wt }
    }

    /// Integer-offset grid; `None` reads as zero.
    pub fn from_indices(indices: impl IntoIterator<Item = Option<u32>>) -> Self {
        let mut idx = Vec::new();
        let mut wt = Vec::new();
        for i in indices {
            match i {
                Some(i) => {
                    idx.push(i);
                    wt.push(T::one());
                }
                None => {
                    idx.push(0);
                    wt.push(T::zero());
                }
            }
        }
        Self { slots: idx.len(), taps: 1, idx, wt }
    }

    /// `dst[s] = Σ wt · src[idx]` for every slot.
    pub fn gather(&self, src: &[T], dst: &mut [T]) {
        debug_assert_eq!(dst.len(), self.slots);
        let k = self.taps;
        for (s, d) in dst.iter_mut().enumerate() {
            let base = s * k;
            let mut acc = T::zero();
            for j in base..base + k {
                acc += self.wt[j] * src[self.idx[j] as usize];
            }
            *d = acc;
        }
    }

    /// Adjoint of [`gather`](Self::gather): `src_grad[idx] += wt · dst_grad[s]`.
    pub fn scatter(&self, dst_grad: &[T], src_grad: &mut [T]) {
        let k = self.taps;
        for (s, &g) in dst_grad.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let base = s * k;
            for j in base..base + k {
                src_grad[self.idx[j] as usize] += self.wt[j] * g;
            }
        }
    }
}
