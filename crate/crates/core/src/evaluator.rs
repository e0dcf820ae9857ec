//! Embedding database and the sequential recognition protocols: Recall@1,
//! incremental recall, Moon navigation and lost-in-space, plus the
//! per-transform ablation driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_resize, BoundingBox, NavSequence, PatchDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::transforms::{apply_transform, TransformRanges, TransformSubset};

pub const MATCH_THRESHOLD: f64 = 0.9;
pub const NMS_IOU: f64 = 0.5;

/// One view handed to an embedder. `instance` is ground truth for test
/// embedders; learned models never look at it.
#[derive(Debug, Clone)]
pub struct View {
    /// `(1, R, R)`.
    pub image: Tensor<f32>,
    pub instance: u64,
}

pub trait Embedder {
    /// Side length of the square views this embedder consumes.
    fn resolution(&self) -> usize;
    /// One embedding per view, in order.
    fn embed(&self, views: &[View]) -> Result<Vec<Vec<f64>>>;
}

impl Embedder for Model<f32> {
    fn resolution(&self) -> usize {
        self.config.input_resolution
    }

    fn embed(&self, views: &[View]) -> Result<Vec<Vec<f64>>> {
        if views.is_empty() {
            return Ok(Vec::new());
        }
        let r = self.resolution();
        let c = self.config.in_channels;
        let mut data = Vec::with_capacity(views.len() * c * r * r);
        for v in views {
            if v.image.shape != [c, r, r] {
                return Err(Error::Input(format!("view has shape {:?}, model expects {:?}", v.image.shape, [c, r, r])));
            }
            data.extend_from_slice(&v.image.data);
        }
        let z = Model::embed(self, &Tensor::from_vec(&[views.len(), c, r, r], data))?;
        Ok(z.into_iter().map(|row| row.into_iter().map(f64::from).collect()).collect())
    }
}

/// Perfect embedder: one-hot by instance over `dim` slots.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    pub resolution: usize,
    pub dim: usize,
}

impl Embedder for OracleEmbedder {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn embed(&self, views: &[View]) -> Result<Vec<Vec<f64>>> {
        Ok(views
            .iter()
            .map(|v| {
                let mut z = vec![0.0; self.dim];
                z[(v.instance % self.dim as u64) as usize] = 1.0;
                z
            })
            .collect())
    }
}

/// Maps every view to the same vector.
#[derive(Debug, Clone)]
pub struct ConstantEmbedder {
    pub resolution: usize,
}

impl Embedder for ConstantEmbedder {
    fn resolution(&self) -> usize {
        self.resolution
    }

    fn embed(&self, views: &[View]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0, 0.5, -0.25]; views.len()])
    }
}

fn unit(z: &[f64]) -> Result<Vec<f64>> {
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::Input("embedding has zero (or non-finite) norm".into()));
    }
    Ok(z.iter().map(|v| v / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub id: u64,
    /// Unit-normalised.
    pub embedding: Vec<f64>,
    pub order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbMatch {
    pub id: u64,
    pub similarity: f64,
}

/// Flat exact-search gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDB {
    pub entries: Vec<DbEntry>,
    pub match_threshold: f64,
}

impl Default for EmbeddingDB {
    fn default() -> Self {
        Self { entries: Vec::new(), match_threshold: MATCH_THRESHOLD }
    }
}

impl EmbeddingDB {
    pub fn new(match_threshold: f64) -> Result<Self> {
        if !(match_threshold > 0.0 && match_threshold <= 1.0) {
            return Err(Error::Config(format!("match threshold {match_threshold} must lie in (0, 1]")));
        }
        Ok(Self { entries: Vec::new(), match_threshold })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn enroll(&mut self, id: u64, z: &[f64]) -> Result<()> {
        let embedding = unit(z)?;
        let order = self.entries.len();
        self.entries.push(DbEntry { id, embedding, order });
        Ok(())
    }

    pub fn contains(&self, id: u64) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    /// Most similar entry regardless of the threshold; earliest wins ties.
    pub fn nearest(&self, z: &[f64]) -> Result<Option<DbMatch>> {
        let q = unit(z)?;
        let mut best: Option<DbMatch> = None;
        for e in &self.entries {
            let s = dot(&q, &e.embedding);
            if best.map_or(true, |b| s > b.similarity) {
                best = Some(DbMatch { id: e.id, similarity: s });
            }
        }
        Ok(best)
    }

    /// Best entry at or above the threshold, if any.
    pub fn query(&self, z: &[f64]) -> Result<Option<DbMatch>> {
        Ok(self.nearest(z)?.filter(|m| m.similarity >= self.match_threshold))
    }
}

/// Free-function form of [`EmbeddingDB::query`].
pub fn db_query(db: &EmbeddingDB, z: &[f64]) -> Result<Option<DbMatch>> {
    db.query(z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub incorrect: usize,
    pub missed: usize,
}

impl Counts {
    pub fn scored(&self) -> usize {
        self.correct + self.incorrect + self.missed
    }

    /// `100·correct / scored`, or 0 when nothing was scored.
    pub fn ra(&self) -> f64 {
        match self.scored() {
            0 => 0.0,
            n => 100.0 * self.correct as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RAReport {
    pub protocol: String,
    pub seed: u64,
    pub transform_subset: String,
    pub correct: usize,
    pub incorrect: usize,
    pub missed: usize,
    pub ra: f64,
}

impl RAReport {
    pub fn new(protocol: Protocol, seed: u64, subset: TransformSubset, c: Counts) -> Self {
        Self {
            protocol: protocol.name().to_string(),
            seed,
            transform_subset: subset.name().to_string(),
            correct: c.correct,
            incorrect: c.incorrect,
            missed: c.missed,
            ra: c.ra(),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts { correct: self.correct, incorrect: self.incorrect, missed: self.missed }
    }
}

/// Incremental scoring: a match is correct or incorrect; a no-match enrolls
/// the item and counts as missed only if its id was already enrolled.
pub fn score_incremental(db: &mut EmbeddingDB, items: &[(u64, Vec<f64>)]) -> Result<Counts> {
    let mut c = Counts::default();
    for (id, z) in items {
        match db.query(z)? {
            Some(m) if m.id == *id => c.correct += 1,
            Some(_) => c.incorrect += 1,
            None => {
                if db.contains(*id) {
                    c.missed += 1;
                }
                db.enroll(*id, z)?;
            }
        }
    }
    Ok(c)
}

/// Frozen-gallery scoring: no-match queries are missed, nothing is enrolled.
pub fn score_frozen(db: &EmbeddingDB, items: &[(u64, Vec<f64>)]) -> Result<Counts> {
    let mut c = Counts::default();
    for (id, z) in items {
        match db.query(z)? {
            Some(m) if m.id == *id => c.correct += 1,
            Some(_) => c.incorrect += 1,
            None => c.missed += 1,
        }
    }
    Ok(c)
}

/// Test landmarks: one source image per instance id.
#[derive(Debug, Clone)]
pub struct LandmarkSet {
    pub ids: Vec<u64>,
    pub images: Vec<Tensor<f32>>,
}

impl LandmarkSet {
    pub fn from_dataset(ds: &PatchDataset) -> Result<Self> {
        Ok(Self { ids: ds.ids(), images: ds.first_images()? })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_resolution(img: &Tensor<f32>, res: usize) -> Result<()> {
    if img.ndim() != 3 || img.dim(1) != res || img.dim(2) != res {
        return Err(Error::Input(format!("landmark image {:?} does not match embedder resolution {res}", img.shape)));
    }
    Ok(())
}

fn augmented(img: &Tensor<f32>, id: u64, ranges: &TransformRanges, rng: &mut ChaCha8Rng) -> Result<View> {
    let res = (img.dim(1), img.dim(2));
    let t = ranges.sample(rng, res);
    Ok(View { image: apply_transform(img, &t)?, instance: id })
}

fn embed_items(embedder: &dyn Embedder, views: Vec<View>) -> Result<Vec<(u64, Vec<f64>)>> {
    let z = embedder.embed(&views)?;
    if z.len() != views.len() {
        return Err(Error::Input(format!("embedder returned {} rows for {} views", z.len(), views.len())));
    }
    Ok(views.iter().map(|v| v.instance).zip(z).collect())
}

/// Gallery of one augmented view per instance, queried by a second
/// independently augmented view; nearest neighbour without threshold.
pub fn recall_at_1(embedder: &dyn Embedder, set: &LandmarkSet, ranges: &TransformRanges, seed: u64) -> Result<Counts> {
    if set.is_empty() {
        return Err(Error::Input("Recall@1 needs at least one landmark".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gallery = Vec::with_capacity(set.len());
    let mut queries = Vec::with_capacity(set.len());
    for (img, &id) in set.images.iter().zip(&set.ids) {
        check_resolution(img, embedder.resolution())?;
        gallery.push(augmented(img, id, ranges, &mut rng)?);
        queries.push(augmented(img, id, ranges, &mut rng)?);
    }
    let mut db = EmbeddingDB::default();
    for (id, z) in embed_items(embedder, gallery)? {
        db.enroll(id, &z)?;
    }
    let mut c = Counts::default();
    for (id, z) in embed_items(embedder, queries)? {
        match db.nearest(&z)? {
            Some(m) if m.id == id => c.correct += 1,
            _ => c.incorrect += 1,
        }
    }
    Ok(c)
}

/// Every landmark twice in shuffled order, each occurrence freshly
/// augmented, scored incrementally against a gallery that starts empty.
pub fn incremental_recall(
    embedder: &dyn Embedder,
    set: &LandmarkSet,
    ranges: &TransformRanges,
    seed: u64,
) -> Result<Counts> {
    if set.is_empty() {
        return Err(Error::Input("incremental recall needs at least one landmark".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream: Vec<usize> = (0..set.len()).chain(0..set.len()).collect();
    stream.shuffle(&mut rng);
    let mut views = Vec::with_capacity(stream.len());
    for &k in &stream {
        check_resolution(&set.images[k], embedder.resolution())?;
        views.push(augmented(&set.images[k], set.ids[k], ranges, &mut rng)?);
    }
    let items = embed_items(embedder, views)?;
    score_incremental(&mut EmbeddingDB::default(), &items)
}

/// Greedy suppression in descending score (missing scores rank by area);
/// a box is dropped when its IoU with a kept box exceeds `iou_threshold`.
/// Equal scores keep input order.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let score = |b: &BoundingBox| b.score.unwrap_or_else(|| b.area());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| score(&boxes[b]).total_cmp(&score(&boxes[a])).then(a.cmp(&b)));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| k.iou(&boxes[i]) <= iou_threshold) {
            kept.push(boxes[i]);
        }
    }
    kept
}

/// Boxes of one frame scored by area and reduced by NMS, in kept order.
pub fn frame_detections(boxes: &[BoundingBox]) -> Vec<BoundingBox> {
    let scored: Vec<BoundingBox> = boxes.iter().map(|b| BoundingBox { score: Some(b.area()), ..*b }).collect();
    nms(&scored, NMS_IOU)
}

fn detection_views(
    seq: &NavSequence,
    frames: &[usize],
    res: usize,
    ranges: &TransformRanges,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<View>> {
    let mut views = Vec::new();
    for &k in frames {
        let frame = &seq.frames[k];
        for b in frame_detections(&frame.boxes) {
            let crop = crop_resize(&frame.image, (b.x, b.y, b.w, b.h), res, res);
            views.push(augmented(&crop, b.crater_id, ranges, rng)?);
        }
    }
    Ok(views)
}

fn check_annotated(seq: &NavSequence) -> Result<()> {
    if seq.frames.iter().all(|f| f.boxes.is_empty()) {
        return Err(Error::Input("navigation sequence has no annotated craters".into()));
    }
    Ok(())
}

/// Frames in order; each frame's detections are cropped, augmented and
/// scored incrementally against a gallery that starts empty.
pub fn moon_navigation_eval(
    embedder: &dyn Embedder,
    seq: &NavSequence,
    ranges: &TransformRanges,
    seed: u64,
) -> Result<Counts> {
    check_annotated(seq)?;
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<usize> = (0..seq.frames.len()).collect();
    let views = detection_views(seq, &frames, embedder.resolution(), ranges, &mut rng)?;
    let items = embed_items(embedder, views)?;
    score_incremental(&mut EmbeddingDB::default(), &items)
}

/// Gallery built from every first-orbit detection, then frozen and queried
/// with the final orbit's frames in random order.
pub fn lost_in_space_eval(
    embedder: &dyn Embedder,
    seq: &NavSequence,
    ranges: &TransformRanges,
    seed: u64,
) -> Result<Counts> {
    check_annotated(seq)?;
    seq.validate()?;
    if seq.num_orbits() < 2 {
        return Err(Error::Input(format!("lost-in-space needs at least 2 orbits, sequence has {}", seq.num_orbits())));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first: Vec<usize> = seq.orbit(0).collect();
    let mut db = EmbeddingDB::default();
    for (id, z) in embed_items(embedder, detection_views(seq, &first, embedder.resolution(), ranges, &mut rng)?)? {
        db.enroll(id, &z)?;
    }
    let mut last: Vec<usize> = seq.orbit(seq.num_orbits() - 1).collect();
    last.shuffle(&mut rng);
    let items = embed_items(embedder, detection_views(seq, &last, embedder.resolution(), ranges, &mut rng)?)?;
    score_frozen(&db, &items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Recall1,
    Incremental,
    Navigation,
    LostInSpace,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Recall1, Protocol::Incremental, Protocol::Navigation, Protocol::LostInSpace];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Recall1 => "recall1",
            Protocol::Incremental => "incremental",
            Protocol::Navigation => "navigation",
            Protocol::LostInSpace => "lost-in-space",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::Input(format!(
                "unknown protocol `{s}` (expected recall1 | incremental | navigation | lost-in-space | ablation)"
            ))
        })
    }
}

/// Inputs shared by the protocols.
pub struct EvalData<'a> {
    pub landmarks: Option<&'a LandmarkSet>,
    pub navigation: Option<&'a NavSequence>,
}

pub fn run_protocol(
    embedder: &dyn Embedder,
    protocol: Protocol,
    data: &EvalData,
    ranges: &TransformRanges,
    subset: TransformSubset,
    seed: u64,
) -> Result<RAReport> {
    let r = ranges.restricted(subset);
    let need_set = || data.landmarks.ok_or_else(|| Error::Input(format!("{} needs a landmark set", protocol.name())));
    let need_seq = || data.navigation.ok_or_else(|| Error::Input(format!("{} needs a navigation sequence", protocol.name())));
    let counts = match protocol {
        Protocol::Recall1 => recall_at_1(embedder, need_set()?, &r, seed)?,
        Protocol::Incremental => incremental_recall(embedder, need_set()?, &r, seed)?,
        Protocol::Navigation => moon_navigation_eval(embedder, need_seq()?, &r, seed)?,
        Protocol::LostInSpace => lost_in_space_eval(embedder, need_seq()?, &r, seed)?,
    };
    Ok(RAReport::new(protocol, seed, subset, counts))
}

/// Reruns `protocol` once per transform subset.
pub fn ablation_driver(
    embedder: &dyn Embedder,
    protocol: Protocol,
    data: &EvalData,
    ranges: &TransformRanges,
    subsets: &[TransformSubset],
    seed: u64,
) -> Result<Vec<RAReport>> {
    subsets.iter().map(|&s| run_protocol(embedder, protocol, data, ranges, s, seed)).collect()
}
