//! The augmentation family: brightness, rotation and translation, their
//! geometric inverses and resolution rescaling for pose normalization.
//!
//! Coordinates are `(x, y)` = (column, row) with the origin at the top-left
//! pixel centre; rotations turn content counter-clockwise as displayed.
//! The forward warp of a transform translates first, then rotates about the centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{bilinear_taps, cos_sin_deg, SampleGrid};
use crate::tensor::{Scalar, Tensor};

const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub brightness: f64,
    pub rotation_deg: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    /// `(height, width)` at which the translations are expressed.
    pub ref_resolution: (usize, usize),
}

impl TransformSpec {
    pub fn identity(res: (usize, usize)) -> Self {
        Self { brightness: 1.0, rotation_deg: 0.0, translate_x: 0.0, translate_y: 0.0, ref_resolution: res }
    }

    pub fn rotation(deg: f64, res: (usize, usize)) -> Self {
        Self { rotation_deg: deg.rem_euclid(360.0), ..Self::identity(res) }
    }

    pub fn translation(dx: f64, dy: f64, res: (usize, usize)) -> Self {
        Self { translate_x: dx, translate_y: dy, ..Self::identity(res) }
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translate_x == 0.0 && self.translate_y == 0.0
    }

    /// Inverse of the geometric part; brightness of the result is 1.
    pub fn invert_geometric(&self) -> Self {
        let (c, s) = cos_sin_deg(-self.rotation_deg);
        let (dx, dy) = (self.translate_x, self.translate_y);
        Self {
            brightness: 1.0,
            rotation_deg: (360.0 - self.rotation_deg).rem_euclid(360.0),
            translate_x: -(c * dx - s * dy) + 0.0,
            translate_y: -(s * dx + c * dy) + 0.0,
            ref_resolution: self.ref_resolution,
        }
    }

    pub fn rescale_to_resolution(&self, target: (usize, usize)) -> Result<Self> {
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::Input(format!("target resolution {target:?} has a zero dimension")));
        }
        let (rh, rw) = self.ref_resolution;
        Ok(Self {
            translate_x: self.translate_x * target.1 as f64 / rw as f64,
            translate_y: self.translate_y * target.0 as f64 / rh as f64,
            ref_resolution: target,
            ..*self
        })
    }

    /// Source point sampled by output pixel `(x, y)` at resolution `res`
    /// (translations must already be expressed at `res`).
    fn source_point(&self, x: f64, y: f64, res: (usize, usize)) -> (f64, f64) {
        let (h, w) = res;
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (c, s) = cos_sin_deg(self.rotation_deg);
        let (qx, qy) = (x - cx, y - cy);
        (cx + c * qx - s * qy - self.translate_x, cy + s * qx + c * qy - self.translate_y)
    }

    /// Bilinear gather grid realising the geometric warp at `res`.
    pub fn warp_grid<T: Scalar>(&self, res: (usize, usize)) -> Result<SampleGrid<T>> {
        let t = self.rescale_to_resolution(res)?;
        let (h, w) = res;
        let pts = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| {
            Some(t.source_point(x as f64, y as f64, res))
        });
        Ok(SampleGrid::from_points(pts, h, w))
    }
}

/// Sampling ranges for the augmentation family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRanges {
    pub brightness: (f64, f64),
    pub rotation_deg: (f64, f64),
    /// Maximum translation as a fraction of the patch side.
    pub max_translate_frac: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self { brightness: (0.6, 1.4), rotation_deg: (0.0, 360.0), max_translate_frac: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSubset {
    All,
    Brightness,
    Rotation,
    Translation,
    Identity,
}

impl TransformSubset {
    pub const ABLATION: [TransformSubset; 4] =
        [TransformSubset::Brightness, TransformSubset::Rotation, TransformSubset::Translation, TransformSubset::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Brightness => "brightness",
            Self::Rotation => "rotation",
            Self::Translation => "translation",
            Self::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "brightness" => Ok(Self::Brightness),
            "rotation" => Ok(Self::Rotation),
            "translation" => Ok(Self::Translation),
            "identity" => Ok(Self::Identity),
            _ => Err(Error::Input(format!(
                "unknown transform subset `{s}` (expected all | brightness | rotation | translation | identity)"
            ))),
        }
    }
}

impl TransformRanges {
    pub fn identity() -> Self {
        Self { brightness: (1.0, 1.0), rotation_deg: (0.0, 0.0), max_translate_frac: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (b_lo, b_hi) = self.brightness;
        if !(b_lo > 0.0 && b_lo <= b_hi && b_hi.is_finite()) {
            return Err(Error::Config(format!("brightness range {:?} must satisfy 0 < lo <= hi", self.brightness)));
        }
        let (r_lo, r_hi) = self.rotation_deg;
        if !(r_lo >= 0.0 && r_lo <= r_hi && r_hi <= 360.0) {
            return Err(Error::Config(format!("rotation range {:?} must lie within [0, 360]", self.rotation_deg)));
        }
        if !(0.0..=0.25).contains(&self.max_translate_frac) {
            return Err(Error::Config(format!(
                "translation fraction {} must lie within [0, 0.25]",
                self.max_translate_frac
            )));
        }
        Ok(())
    }

    /// Keeps only one component of the family (others collapse to identity).
    pub fn restricted(&self, subset: TransformSubset) -> Self {
        let id = Self::identity();
        match subset {
            TransformSubset::All => *self,
            TransformSubset::Brightness => Self { brightness: self.brightness, ..id },
            TransformSubset::Rotation => Self { rotation_deg: self.rotation_deg, ..id },
            TransformSubset::Translation => Self { max_translate_frac: self.max_translate_frac, ..id },
            TransformSubset::Identity => id,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, res: (usize, usize)) -> TransformSpec {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| if lo < hi { rng.gen_range(lo..hi) } else { lo };
        let brightness = uniform(rng, self.brightness);
        let rotation_deg = uniform(rng, self.rotation_deg).rem_euclid(360.0);
        let tx = self.max_translate_frac * res.1 as f64;
        let ty = self.max_translate_frac * res.0 as f64;
        let translate_x = uniform(rng, (-tx, tx));
        let translate_y = uniform(rng, (-ty, ty));
        TransformSpec { brightness, rotation_deg, translate_x, translate_y, ref_resolution: res }
    }
}

/// Draws one transform from `ranges` using a dedicated generator seeded by `seed`.
pub fn sample_transform(seed: u64, ranges: &TransformRanges, res: (usize, usize)) -> Result<TransformSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ranges.sample(&mut rng, res))
}

/// Applies `t` to a `(C, H, W)` image with intensities in `[0, 1]`:
/// brightness (clipped), then the bilinear geometric warp with zero fill.
pub fn apply_transform(image: &Tensor<f32>, t: &TransformSpec) -> Result<Tensor<f32>> {
    if image.is_empty() || image.ndim() != 3 {
        return Err(Error::Input(format!("expected a non-empty (C, H, W) image, got shape {:?}", image.shape)));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let b = t.brightness as f32;
    let bright: Vec<f32> = image.data.iter().map(|&v| (v * b).clamp(0.0, 1.0)).collect();
    if t.is_geometric_identity() {
        return Ok(Tensor::from_vec(&image.shape, bright));
    }
    let grid = t.warp_grid::<f32>((h, w))?;
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        grid.gather(&bright[ci * h * w..(ci + 1) * h * w], &mut out[ci * h * w..(ci + 1) * h * w]);
    }
    Ok(Tensor::from_vec(&image.shape, out))
}

/// Pixels of a `res` map that survive `t` followed by its inverse using only
/// in-support samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl ValidMask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn valid_mask(t: &TransformSpec, res: (usize, usize)) -> ValidMask {
    let (h, w) = res;
    let fwd = t.rescale_to_resolution(res).expect("non-zero resolution");
    let inv = fwd.invert_geometric();
    let inside = |(x, y): (f64, f64)| {
        x >= -EDGE_TOL && y >= -EDGE_TOL && x <= w as f64 - 1.0 + EDGE_TOL && y <= h as f64 - 1.0 + EDGE_TOL
    };
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s1 = inv.source_point(x as f64, y as f64, res);
            let ok = inside(s1)
                && bilinear_taps(s1.0, s1.1, h, w).iter().filter(|t| t.1 != 0.0).all(|&(idx, _)| {
                    let (nx, ny) = ((idx as usize % w) as f64, (idx as usize / w) as f64);
                    inside(fwd.source_point(nx, ny, res))
                });
            mask.push(ok);
        }
    }
    ValidMask { height: h, width: w, mask }
}
