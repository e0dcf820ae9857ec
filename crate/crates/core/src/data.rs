//! Patch datasets, navigation sequences, instance-disjoint splitting and the
//! procedural crater generator.
//!
//! On-disk layouts:
//! - patches: `<root>/<instance_id>/<image>.png`
//! - navigation: `<root>/frames/<k>.png`, `<root>/frames/<k>.txt` with one
//!   `crater_id x y w h` line per box, and `<root>/manifest.json`.
//!
//! Pixels are 8-bit grayscale mapped to `[0, 1]`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchSource {
    /// Generated on demand from `(seed, id)`.
    Synthetic { seed: u64 },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: u64,
    pub images: Vec<PatchSource>,
}

/// Landmark instances; the record index is the contiguous label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDataset {
    pub resolution: usize,
    pub records: Vec<PatchRecord>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn label_of(&self, id: u64) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Every image of every instance as `(1, R, R)`, grouped by label.
    pub fn load_images(&self) -> Result<Vec<Vec<Tensor<f32>>>> {
        self.records
            .iter()
            .map(|r| r.images.iter().map(|s| self.load_source(r.id, s)).collect())
            .collect()
    }

    /// First image of every instance.
    pub fn first_images(&self) -> Result<Vec<Tensor<f32>>> {
        self.records
            .iter()
            .map(|r| match r.images.first() {
                Some(s) => self.load_source(r.id, s),
                None => Err(Error::Input(format!("instance {} has no images", r.id))),
            })
            .collect()
    }

    fn load_source(&self, id: u64, s: &PatchSource) -> Result<Tensor<f32>> {
        match s {
            PatchSource::Synthetic { seed } => Ok(synth_patch(*seed, id, self.resolution)),
            PatchSource::File(p) => load_gray(p, Some((self.resolution, self.resolution))),
        }
    }

    pub fn subset(&self, ids: &BTreeSet<u64>) -> PatchDataset {
        PatchDataset {
            resolution: self.resolution,
            records: self.records.iter().filter(|r| ids.contains(&r.id)).cloned().collect(),
        }
    }

    /// Writes the dataset in the directory layout, one PNG per image.
    pub fn save(&self, root: &Path) -> Result<()> {
        for r in &self.records {
            let dir = root.join(r.id.to_string());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (k, s) in r.images.iter().enumerate() {
                save_gray(&dir.join(format!("{k}.png")), &self.load_source(r.id, s)?)?;
            }
        }
        Ok(())
    }
}

/// Loads a grayscale PNG (or any decodable image) as `(1, H, W)` in `[0, 1]`,
/// bilinearly resized to `size` when given.
pub fn load_gray(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8();
    let img = match size {
        Some((h, w)) if (img.height() as usize, img.width() as usize) != (h, w) => {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        }
        _ => img,
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[1, h, w], data))
}

pub fn save_gray(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.dim(t.ndim() - 2), t.dim(t.ndim() - 1));
    let bytes = t.data[..h * w].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions");
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "tif" | "tiff" | "bmp")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Reads `<root>/<instance_id>/<image>` into a dataset at `resolution`.
/// Non-image files and non-numeric directories are skipped with a warning.
pub fn load_patch_dataset(root: &Path, resolution: usize) -> Result<PatchDataset> {
    let mut records = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            log::warn!("skipping non-directory {}", dir.display());
            continue;
        }
        let Some(id) = dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok()) else {
            log::warn!("skipping directory with non-numeric instance id {}", dir.display());
            continue;
        };
        let mut images = Vec::new();
        for f in sorted_entries(&dir)? {
            if f.is_file() && is_image(&f) {
                images.push(PatchSource::File(f));
            } else {
                log::warn!("skipping non-image file {}", f.display());
            }
        }
        if images.is_empty() {
            log::warn!("instance {id} has no images; skipped");
            continue;
        }
        records.push(PatchRecord { id, images });
    }
    if records.is_empty() {
        return Err(Error::Input(format!("no instances found under {}", root.display())));
    }
    records.sort_by_key(|r| r.id);
    Ok(PatchDataset { resolution, records })
}

fn instance_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.wrapping_add(0xD1B5_4A32_D192_ED03))
}

/// Height field of one synthetic crater patch on the unit square
/// `[-1, 1]²`, evaluated at `(u, v)`.
struct CraterField {
    terrain: Vec<(f64, f64, f64, f64)>,
    main: Bowl,
    small: Vec<Bowl>,
    bumps: Vec<(f64, f64, f64, f64)>,
}

struct Bowl {
    cx: f64,
    cy: f64,
    radius: f64,
    depth: f64,
    rim: f64,
    sharpness: f64,
}

impl Bowl {
    fn height(&self, u: f64, v: f64) -> f64 {
        let r = ((u - self.cx).powi(2) + (v - self.cy).powi(2)).sqrt() / self.radius;
        let bowl = if r < 1.0 { self.depth * (r * r - 1.0) } else { 0.0 };
        bowl + self.rim * (-((r - 1.0) * self.sharpness).powi(2)).exp()
    }
}

impl CraterField {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let terrain = (0..4)
            .map(|_| {
                let f = rng.gen_range(0.5..2.0);
                let a = rng.gen_range(0.0..2.0 * PI);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.02..0.06))
            })
            .collect();
        let main = Bowl {
            cx: rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(-0.05..0.05),
            radius: rng.gen_range(0.4..0.7),
            depth: rng.gen_range(0.15..0.35),
            rim: rng.gen_range(0.03..0.12),
            sharpness: rng.gen_range(3.0..8.0),
        };
        let small = (0..rng.gen_range(3..7))
            .map(|_| {
                let ang = rng.gen_range(0.0..2.0 * PI);
                let dist = rng.gen_range(0.1..0.85);
                Bowl {
                    cx: dist * ang.cos(),
                    cy: dist * ang.sin(),
                    radius: rng.gen_range(0.06..0.18),
                    depth: rng.gen_range(0.05..0.15),
                    rim: rng.gen_range(0.01..0.04),
                    sharpness: rng.gen_range(4.0..9.0),
                }
            })
            .collect();
        let bumps = (0..rng.gen_range(6..12))
            .map(|_| {
                (rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95), rng.gen_range(0.04..0.1), rng.gen_range(-0.05..0.05))
            })
            .collect();
        Self { terrain, main, small, bumps }
    }

    fn height(&self, u: f64, v: f64) -> f64 {
        let t: f64 = self.terrain.iter().map(|&(fx, fy, ph, a)| a * (PI * (fx * u + fy * v) + ph).sin()).sum();
        let b: f64 = self.bumps.iter().map(|&(x, y, s, a)| a * (-((u - x).powi(2) + (v - y).powi(2)) / (s * s)).exp()).sum();
        t + b + self.main.height(u, v) + self.small.iter().map(|c| c.height(u, v)).sum::<f64>()
    }
}

/// Sun direction (unit, pointing towards the light) shared by every patch.
const SUN: (f64, f64, f64) = (-0.5, -0.5, 0.7071067811865476);

/// One deterministic `(1, R, R)` crater patch for `(seed, id)` in `[0, 1]`:
/// a bowl with a rim over low-frequency terrain, small secondary craters and
/// bumps as per-instance detail, shaded by a fixed light direction.
pub fn synth_patch(seed: u64, id: u64, res: usize) -> Tensor<f32> {
    let mut rng = instance_rng(seed, id);
    let field = CraterField::new(&mut rng);
    let albedo = rng.gen_range(0.85..1.15);
    let step = 2.0 / res as f64;
    let e = 0.5 * step;
    let mut data = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let u = -1.0 + (x as f64 + 0.5) * step;
            let v = -1.0 + (y as f64 + 0.5) * step;
            let dhdu = (field.height(u + e, v) - field.height(u - e, v)) / (2.0 * e);
            let dhdv = (field.height(u, v + e) - field.height(u, v - e)) / (2.0 * e);
            let n = (1.0 + dhdu * dhdu + dhdv * dhdv).sqrt();
            let lambert = (-dhdu * SUN.0 - dhdv * SUN.1 + SUN.2) / n;
            let val = albedo * (0.15 + 0.6 * lambert.max(0.0));
            data.push(val.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::from_vec(&[1, res, res], data)
}

/// `n` synthetic instances with ids `0..n`.
pub fn synth_landmarks(n: usize, res: usize, seed: u64) -> Result<PatchDataset> {
    if n == 0 || res < 8 {
        return Err(Error::Input(format!("need at least one instance and resolution >= 8 (got {n}, {res})")));
    }
    let records = (0..n as u64).map(|id| PatchRecord { id, images: vec![PatchSource::Synthetic { seed }] }).collect();
    Ok(PatchDataset { resolution: res, records })
}

/// Instance-disjoint halves. Navigation-visible ids go to the test side
/// first; the rest are shuffled and split so that test holds half of all
/// instances (more if the navigation ids alone exceed half).
pub fn split_train_test(ds: &PatchDataset, nav_ids: &BTreeSet<u64>, seed: u64) -> Result<(PatchDataset, PatchDataset)> {
    let all: BTreeSet<u64> = ds.ids().into_iter().collect();
    if let Some(missing) = nav_ids.iter().find(|id| !all.contains(id)) {
        return Err(Error::Input(format!("navigation crater {missing} is not in the dataset")));
    }
    let half = ds.len() / 2;
    if nav_ids.len() > half {
        log::warn!("{} navigation ids exceed half of {} instances; test split grows", nav_ids.len(), ds.len());
    }
    let mut rest: Vec<u64> = all.difference(nav_ids).copied().collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let extra = half.saturating_sub(nav_ids.len());
    let mut test: BTreeSet<u64> = nav_ids.clone();
    test.extend(rest.iter().take(extra));
    let train: BTreeSet<u64> = all.difference(&test).copied().collect();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub crater_id: u64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: Option<f64>,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, o: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let iy = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        let inter = ix.max(0.0) * iy.max(0.0);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Intersection with `[0, w) × [0, h)`, or `None` if nothing remains.
    pub fn clipped(&self, (fh, fw): (usize, usize)) -> Option<BoundingBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(fw as f64);
        let y1 = (self.y + self.h).min(fh as f64);
        (x1 > x0 && y1 > y0).then(|| BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0, ..*self })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavFrame {
    /// `(1, H, W)`.
    pub image: Tensor<f32>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavSequence {
    pub frames: Vec<NavFrame>,
    /// First frame index of every orbit, starting with 0.
    pub orbit_boundaries: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavManifest {
    pub num_frames: usize,
    pub orbit_boundaries: Vec<usize>,
}

impl NavSequence {
    pub fn num_orbits(&self) -> usize {
        self.orbit_boundaries.len()
    }

    /// Frame index range of orbit `o`.
    pub fn orbit(&self, o: usize) -> std::ops::Range<usize> {
        let start = self.orbit_boundaries[o];
        let end = self.orbit_boundaries.get(o + 1).copied().unwrap_or(self.frames.len());
        start..end
    }

    pub fn crater_ids(&self) -> BTreeSet<u64> {
        self.frames.iter().flat_map(|f| f.boxes.iter().map(|b| b.crater_id)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.orbit_boundaries;
        if b.first() != Some(&0) || b.windows(2).any(|w| w[0] >= w[1]) || b.last().is_some_and(|&l| l >= self.frames.len()) {
            return Err(Error::Input(format!("invalid orbit boundaries {b:?} for {} frames", self.frames.len())));
        }
        Ok(())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let frames = root.join("frames");
        fs::create_dir_all(&frames).map_err(io_err(&frames))?;
        for (k, f) in self.frames.iter().enumerate() {
            save_gray(&frames.join(format!("{k}.png")), &f.image)?;
            let text: String =
                f.boxes.iter().map(|b| format!("{} {} {} {} {}\n", b.crater_id, b.x, b.y, b.w, b.h)).collect();
            let p = frames.join(format!("{k}.txt"));
            fs::write(&p, text).map_err(io_err(&p))?;
        }
        let manifest = NavManifest { num_frames: self.frames.len(), orbit_boundaries: self.orbit_boundaries.clone() };
        let p = root.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&p))
    }
}

fn parse_annotation(path: &Path, frame: (usize, usize)) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { file: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(perr(format!("expected `crater_id x y w h`, found {} fields", fields.len())));
        }
        let crater_id = fields[0].parse::<u64>().map_err(|e| perr(format!("crater id: {e}")))?;
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| perr(format!("`{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if nums.iter().any(|v| !v.is_finite()) || nums[2] <= 0.0 || nums[3] <= 0.0 {
            return Err(perr("box must be finite with positive width and height".into()));
        }
        let b = BoundingBox { crater_id, x: nums[0], y: nums[1], w: nums[2], h: nums[3], score: None };
        match b.clipped(frame) {
            Some(c) => {
                if c != b {
                    log::warn!("{}:{}: box for crater {crater_id} exceeds the frame; clipped", path.display(), i + 1);
                }
                boxes.push(c);
            }
            None => log::warn!("{}:{}: box for crater {crater_id} lies outside the frame; dropped", path.display(), i + 1),
        }
    }
    Ok(boxes)
}

pub fn load_nav_sequence(root: &Path) -> Result<NavSequence> {
    let mpath = root.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: NavManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse { file: mpath.clone(), line: e.line(), msg: e.to_string() })?;
    let mut frames = Vec::with_capacity(manifest.num_frames);
    for k in 0..manifest.num_frames {
        let img = root.join("frames").join(format!("{k}.png"));
        let image = load_gray(&img, None)?;
        let boxes = parse_annotation(&root.join("frames").join(format!("{k}.txt")), (image.dim(1), image.dim(2)))?;
        frames.push(NavFrame { image, boxes });
    }
    let seq = NavSequence { frames, orbit_boundaries: manifest.orbit_boundaries };
    seq.validate()?;
    Ok(seq)
}

/// Along-track spacing of craters on the synthetic strip, in pixels.
const STRIP_SPACING: usize = 40;
const MAX_BOXES: usize = 6;

/// Emulated multi-orbit navigation over a wrap-around strip holding every
/// instance of `ds` once. Each orbit sweeps the same ground track with the
/// same frame windows; orbits differ in sensor noise and exposure.
pub fn synth_navigation(
    ds: &PatchDataset,
    n_frames: usize,
    n_orbits: usize,
    frame_res: usize,
    seed: u64,
) -> Result<NavSequence> {
    if ds.is_empty() || n_orbits == 0 || n_frames < n_orbits {
        return Err(Error::Input(format!(
            "need instances and at least one frame per orbit (frames {n_frames}, orbits {n_orbits})"
        )));
    }
    if frame_res < 2 * STRIP_SPACING + 8 {
        return Err(Error::Input(format!("frame resolution must be at least {}", 2 * STRIP_SPACING + 8)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = ds.first_images()?;
    let strip_len = ds.len() * STRIP_SPACING;
    // (along-track centre, cross-track centre, diameter)
    let craters: Vec<(f64, f64, usize)> = (0..ds.len())
        .map(|k| {
            let d = rng.gen_range(24..=STRIP_SPACING);
            let half = d as f64 / 2.0;
            let cross = rng.gen_range(half + 2.0..frame_res as f64 - half - 2.0);
            ((k * STRIP_SPACING) as f64 + STRIP_SPACING as f64 / 2.0, cross, d)
        })
        .collect();
    let ground = CraterField::new(&mut rng);
    let per_orbit = n_frames / n_orbits;
    let mut frames = Vec::with_capacity(per_orbit * n_orbits);
    let mut boundaries = Vec::new();
    for orbit in 0..n_orbits {
        boundaries.push(frames.len());
        let exposure = rng.gen_range(0.9..1.1);
        for f in 0..per_orbit {
            let start = (f * strip_len) / per_orbit;
            let mut img = vec![0f32; frame_res * frame_res];
            for y in 0..frame_res {
                for x in 0..frame_res {
                    let u = ((start + x) % strip_len) as f64 / 200.0;
                    let v = y as f64 / 200.0;
                    img[y * frame_res + x] = (0.35 + 2.0 * ground.height(u, v)) as f32;
                }
            }
            let mut boxes = Vec::new();
            for (k, &(along, cross, d)) in craters.iter().enumerate() {
                // Offset of the crater centre inside the window, with wrap.
                let rel = (along - start as f64).rem_euclid(strip_len as f64);
                let half = d as f64 / 2.0;
                let x0 = rel - half;
                if x0 < -(d as f64) || x0 >= frame_res as f64 {
                    continue;
                }
                paste(&mut img, frame_res, &patches[k], x0.round() as i64, (cross - half).round() as i64, d);
                if x0 >= 0.0 && rel + half <= frame_res as f64 && boxes.len() < MAX_BOXES {
                    boxes.push(BoundingBox {
                        crater_id: ds.records[k].id,
                        x: x0.round(),
                        y: (cross - half).round(),
                        w: d as f64,
                        h: d as f64,
                        score: None,
                    });
                }
            }
            let mut noise = instance_rng(seed ^ 0xA5A5, (orbit * per_orbit + f) as u64);
            for p in img.iter_mut() {
                *p = (*p * exposure + noise.gen_range(-0.02f32..0.02)).clamp(0.0, 1.0);
            }
            frames.push(NavFrame { image: Tensor::from_vec(&[1, frame_res, frame_res], img), boxes });
        }
    }
    let seq = NavSequence { frames, orbit_boundaries: boundaries };
    seq.validate()?;
    Ok(seq)
}

/// Blends a patch resized to `d × d` into the frame with a soft circular
/// mask, clipping at the frame edges.
fn paste(img: &mut [f32], res: usize, patch: &Tensor<f32>, x0: i64, y0: i64, d: usize) {
    let small = resize_bilinear(patch, d, d);
    let r = d as f64 / 2.0;
    for y in 0..d {
        for x in 0..d {
            let (fx, fy) = (x0 + x as i64, y0 + y as i64);
            if fx < 0 || fy < 0 || fx >= res as i64 || fy >= res as i64 {
                continue;
            }
            let dist = ((x as f64 + 0.5 - r).powi(2) + (y as f64 + 0.5 - r).powi(2)).sqrt() / r;
            let alpha = (1.0 - ((dist - 0.85) / 0.15).clamp(0.0, 1.0)) as f32;
            let idx = fy as usize * res + fx as usize;
            img[idx] = alpha * small.data[y * d + x] + (1.0 - alpha) * img[idx];
        }
    }
}

/// Bilinear resize of the first channel of a `(C, H, W)` map to `(1, h, w)`
/// with pixel-centre alignment.
pub fn resize_bilinear(src: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (sh, sw) = (src.dim(src.ndim() - 2), src.dim(src.ndim() - 1));
    crop_resize(src, (0.0, 0.0, sw as f64, sh as f64), h, w)
}

/// Bilinear resample of the region `(x, y, w, h)` (pixel units, edges
/// clamped) of the first channel of `src` into `(1, out_h, out_w)`.
pub fn crop_resize(src: &Tensor<f32>, (bx, by, bw, bh): (f64, f64, f64, f64), out_h: usize, out_w: usize) -> Tensor<f32> {
    let (sh, sw) = (src.dim(src.ndim() - 2), src.dim(src.ndim() - 1));
    let at = |y: usize, x: usize| src.data[y * sw + x] as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let sx = (bx + (ox as f64 + 0.5) * bw / out_w as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let sy = (by + (oy as f64 + 0.5) * bh / out_h as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Tensor::from_vec(&[1, out_h, out_w], out)
}
