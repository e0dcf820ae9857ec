//! Convolution plans: standard zero-padded convolution and the
//! rotation-invariant coordinate convolution (RIC-C), both expressed as a
//! gather into column form followed by a grouped matrix product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::SampleGrid;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    Ric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
}

#[derive(Debug, Clone)]
pub struct ConvPlan<T> {
    pub kind: ConvKind,
    pub shape: ConvShape,
    pub out_h: usize,
    pub out_w: usize,
    /// `None` when columns equal the input (1×1, stride 1).
    pub grid: Option<SampleGrid<T>>,
}

impl<T: Scalar> ConvPlan<T> {
    pub fn new(kind: ConvKind, shape: ConvShape) -> Result<Self> {
        let ConvShape { cin, cout, kernel, stride, groups, in_h, in_w } = shape;
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel must be odd, got {kernel}")));
        }
        if stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "invalid convolution: cin {cin}, cout {cout}, groups {groups}, stride {stride}"
            )));
        }
        if in_h % stride != 0 || in_w % stride != 0 {
            return Err(Error::Config(format!("input {in_h}x{in_w} not divisible by stride {stride}")));
        }
        let (out_h, out_w) = (in_h / stride, in_w / stride);
        let r = (kernel / 2) as isize;
        let identity = kernel == 1 && stride == 1;
        let grid = if identity {
            None
        } else {
            Some(match kind {
                ConvKind::Standard => standard_grid(in_h, in_w, out_h, out_w, kernel, stride, r),
                ConvKind::Ric => ric_grid(in_h, in_w, out_h, out_w, kernel, stride, r),
            })
        };
        Ok(Self { kind, shape, out_h, out_w, grid })
    }

    pub fn kk(&self) -> usize {
        self.shape.kernel * self.shape.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Weight tensor shape `(cout, cin / groups, k, k)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        let s = &self.shape;
        [s.cout, s.cin / s.groups, s.kernel, s.kernel]
    }

    /// Column matrix `(cin·k², P)` for one sample.
    pub fn im2col(&self, x: &[T], cols: &mut [T]) {
        let hw = self.shape.in_h * self.shape.in_w;
        match &self.grid {
            None => cols.copy_from_slice(x),
            Some(grid) => {
                let per = grid.slots;
                for ci in 0..self.shape.cin {
                    grid.gather(&x[ci * hw..(ci + 1) * hw], &mut cols[ci * per..(ci + 1) * per]);
                }
            }
        }
    }

    pub fn col2im(&self, dcols: &[T], dx: &mut [T]) {
        let hw = self.shape.in_h * self.shape.in_w;
        match &self.grid {
            None => {
                for (a, &b) in dx.iter_mut().zip(dcols) {
                    *a += b;
                }
            }
            Some(grid) => {
                let per = grid.slots;
                for ci in 0..self.shape.cin {
                    grid.scatter(&dcols[ci * per..(ci + 1) * per], &mut dx[ci * hw..(ci + 1) * hw]);
                }
            }
        }
    }
}

// Standard convolutions use "same" padding with the PyTorch stride
// convention: output pixel i reads input rows i·s − r .. i·s + r.
fn standard_grid<T: Scalar>(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    r: isize,
) -> SampleGrid<T> {
    let mut idx = Vec::with_capacity(k * k * out_h * out_w);
    for u in 0..k as isize {
        for v in 0..k as isize {
            for i in 0..out_h as isize {
                for j in 0..out_w as isize {
                    let y = i * stride as isize + u - r;
                    let x = j * stride as isize + v - r;
                    idx.push(if y >= 0 && x >= 0 && (y as usize) < in_h && (x as usize) < in_w {
                        Some((y as usize * in_w + x as usize) as u32)
                    } else {
                        None
                    });
                }
            }
        }
    }
    SampleGrid::from_indices(idx)
}

/// RIC-C sampling: output pixel centres sit at `(i + ½)·s − ½` in input
/// coordinates, and each k×k grid is rotated by the polar angle of the
/// centre about the map centre (axis-aligned exactly at the centre).
fn ric_grid<T: Scalar>(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    r: isize,
) -> SampleGrid<T> {
    let s = stride as f64;
    let (mcx, mcy) = ((in_w as f64 - 1.0) / 2.0, (in_h as f64 - 1.0) / 2.0);
    let mut angles = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let cy = (i as f64 + 0.5) * s - 0.5;
            let cx = (j as f64 + 0.5) * s - 0.5;
            let (dx, dy) = (cx - mcx, cy - mcy);
            let (c, sn) = if dx.abs() < 1e-9 && dy.abs() < 1e-9 {
                (1.0, 0.0)
            } else {
                polar_cos_sin(dx, dy)
            };
            angles.push((cx, cy, c, sn));
        }
    }
    let mut points = Vec::with_capacity(k * k * out_h * out_w);
    for u in -r..=r {
        for v in -r..=r {
            for &(cx, cy, c, sn) in &angles {
                let (ox, oy) = (v as f64, u as f64);
                points.push(Some((cx + c * ox - sn * oy, cy + sn * ox + c * oy)));
            }
        }
    }
    SampleGrid::from_points(points, in_h, in_w)
}

// Exact on the axes so that 90° rotations of the grid map
// sampling points onto each other without rounding drift.
fn polar_cos_sin(dx: f64, dy: f64) -> (f64, f64) {
    let n = dx.hypot(dy);
    if dy.abs() < 1e-12 {
        return if dx > 0.0 { (1.0, 0.0) } else { (-1.0, 0.0) };
    }
    if dx.abs() < 1e-12 {
        return if dy > 0.0 { (0.0, 1.0) } else { (0.0, -1.0) };
    }
    (dx / n, dy / n)
}
