//! Two-view training loop, checkpoints and per-step metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::mars::{total_objective, MarsLossRecord};
use crate::metric_losses::{cosine_matrix, epoch_chunks, make_pair_batch, ms_mine, LossConfig, MS_EPSILON};
use crate::model::Model;
use crate::nn::apply_bn_updates;
use crate::optim::{Adam, OptimizerKind};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::transforms::TransformRanges;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Patch dataset root; the synthetic generator is used when absent.
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub transforms: TransformRanges,
    pub miner_epsilon: f64,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            dataset: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            transforms: TransformRanges::default(),
            miner_epsilon: MS_EPSILON,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch size {} must be even and at least 4", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.miner_epsilon < 0.0 {
            return Err(Error::Config("miner epsilon must be non-negative".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.transforms.validate()
    }
}

/// One metrics-log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub ml_loss: f64,
    pub mars: Option<MarsLossRecord>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
}

/// Instance-grouped training images: `instances[label]` holds every
/// `(C, R, R)` image of that instance.
pub type InstanceImages = [Vec<Tensor<f32>>];

impl TrainState {
    pub fn new(config: &TrainConfig, num_instances: usize) -> Result<Self> {
        config.validate()?;
        let proxies = config.loss.uses_proxies().then_some(num_instances);
        let model = Model::new(&config.model, config.seed, proxies)?;
        let optimizer = Adam::new(&model.params, config.learning_rate);
        Ok(Self { config: config.clone(), model, optimizer, epoch: 0, step: 0, metrics: Vec::new() })
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One pass over the instances in shuffled half-batches. Returns the rows
/// appended to `state.metrics`.
pub fn train_epoch(state: &mut TrainState, data: &InstanceImages) -> Result<Vec<MetricsRow>> {
    let cfg = state.config.clone();
    if data.len() < 2 {
        return Err(Error::Input(format!("training needs at least 2 instances, got {}", data.len())));
    }
    if let Some(i) = data.iter().position(|imgs| imgs.is_empty()) {
        return Err(Error::Input(format!("instance {i} has no images")));
    }
    let epoch = state.epoch + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
    let mut rows = Vec::new();
    for chunk in epoch_chunks(data.len(), cfg.batch_size, &mut rng) {
        let batch_seed: u64 = rng.gen();
        let sources: Vec<&Tensor<f32>> =
            chunk.iter().map(|&i| &data[i][rng.gen_range(0..data[i].len())]).collect();
        let batch = make_pair_batch(&sources, &chunk, &cfg.transforms, batch_seed)?;
        state.step += 1;
        let row = train_step(state, &batch, epoch)?;
        state.metrics.push(row.clone());
        rows.push(row);
    }
    state.epoch = epoch;
    Ok(rows)
}

fn train_step(state: &mut TrainState, batch: &crate::metric_losses::PairBatch, epoch: usize) -> Result<MetricsRow> {
    let model = &state.model;
    let cfg = &state.config;
    let mut g = Graph::new(true);
    let x = g.constant(batch.images.clone());
    let f = model.forward(&mut g, x)?;
    let z = g.value(f.z);
    let d = z.shape[1];
    let rows: Vec<Vec<f64>> = z.data.chunks(d).map(|r| r.iter().map(|v| v.to_f64c()).collect()).collect();
    let non_finite = || Error::NonFinite { epoch, step: state.step, batch_seed: batch.seed };
    if !z.all_finite() {
        return Err(non_finite());
    }
    let sim = cosine_matrix(&rows)?;
    let mined = ms_mine(&sim, &batch.labels, &batch.twin_index, cfg.miner_epsilon);
    let proxies = model.proxies.map(|p| g.param(&model.params, p));
    let ml = cfg.loss.evaluate(&mut g, f.z, &batch.labels, &mined, proxies)?;
    let mars = model.mars.as_ref().map(|m| (m, &model.params));
    let (total, terms) =
        total_objective(&mut g, ml, mars, &f.encoder.attention, &batch.transforms, &batch.unique_pairs())?;
    let loss_value = g.value(total).item();
    if !loss_value.is_finite() {
        log::error!("non-finite loss; batch labels {:?}", batch.labels);
        return Err(non_finite());
    }
    let record = model.mars.as_ref().map(|m| m.record(&g, &terms, epoch, state.step));
    let ml_loss = g.value(ml).item().to_f64c();
    let grads = g.backward(total);
    let param_grads = g.param_grads(&grads, &model.params);
    if param_grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(non_finite());
    }
    let updates = g.take_bn_updates();
    apply_bn_updates(&mut state.model.params, &updates);
    state.optimizer.step(&mut state.model.params, &param_grads);
    Ok(MetricsRow { step: state.step, epoch, ml_loss, mars: record })
}

/// Runs the remaining epochs of `state`, writing periodic and final
/// checkpoints plus the metrics log into `out` when given.
pub fn fit(state: &mut TrainState, data: &InstanceImages, out: Option<&Path>) -> Result<()> {
    let total = state.config.epochs;
    if state.epoch >= total {
        log::info!("checkpoint already at epoch {}; nothing to train", state.epoch);
    }
    while state.epoch < total {
        let rows = train_epoch(state, data)?;
        let mean_ml = rows.iter().map(|r| r.ml_loss).sum::<f64>() / rows.len().max(1) as f64;
        log::info!("epoch {}/{total}: {} steps, mean metric loss {mean_ml:.4}", state.epoch, rows.len());
        if let Some(dir) = out {
            let every = state.config.checkpoint_every;
            if every > 0 && state.epoch % every == 0 && state.epoch < total {
                Checkpoint::capture(state).save(&dir.join("checkpoint.json"))?;
            }
        }
    }
    if let Some(dir) = out {
        Checkpoint::capture(state).save(&dir.join("checkpoint.json"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &state.metrics, state.config.model.num_blocks())?;
    }
    Ok(())
}

/// Convenience: fresh state trained for `config.epochs`.
pub fn train(config: &TrainConfig, data: &InstanceImages, out: Option<&Path>) -> Result<TrainState> {
    let mut state = TrainState::new(config, data.len())?;
    fit(&mut state, data, out)?;
    Ok(state)
}

pub fn metrics_header(num_blocks: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "epoch".into(), "ml_loss".into()];
    for i in 1..=num_blocks {
        h.push(format!("mars_block_{i}_ch"));
        h.push(format!("mars_block_{i}_sp"));
    }
    h
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow], num_blocks: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(metrics_header(num_blocks)).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.epoch.to_string(), r.ml_loss.to_string()];
        for i in 0..num_blocks {
            match &r.mars {
                Some(m) => {
                    rec.push(m.channel[i].to_string());
                    rec.push(m.spatial[i].to_string());
                }
                None => rec.extend(["".to_string(), "".to_string()]),
            }
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) }
}

/// Reads per-block channel/spatial columns back from a metrics log.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let blocks = (header.len().saturating_sub(3)) / 2;
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i).unwrap_or("").parse::<f64>().map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                line: line + 2,
                msg: format!("column {}: {e}", header.get(i).unwrap_or("?")),
            })
        };
        let step = parse(0)? as usize;
        let epoch = parse(1)? as usize;
        let ml_loss = parse(2)?;
        let mars = if blocks > 0 && !rec.get(3).unwrap_or("").is_empty() {
            let channel: Vec<f64> = (0..blocks).map(|i| parse(3 + 2 * i)).collect::<Result<_>>()?;
            let spatial: Vec<f64> = (0..blocks).map(|i| parse(4 + 2 * i)).collect::<Result<_>>()?;
            Some(MarsLossRecord { epoch, step, combined: Vec::new(), total: 0.0, channel, spatial })
        } else {
            None
        };
        rows.push(MetricsRow { step, epoch, ml_loss, mars });
    }
    Ok(rows)
}

/// Mean per-block `(channel, spatial)` losses of one epoch.
pub fn epoch_block_means(rows: &[MetricsRow], epoch: usize) -> Option<Vec<(f64, f64)>> {
    let sel: Vec<&MarsLossRecord> = rows.iter().filter(|r| r.epoch == epoch).filter_map(|r| r.mars.as_ref()).collect();
    let first = sel.first()?;
    let n = sel.len() as f64;
    Some(
        (0..first.channel.len())
            .map(|i| {
                (sel.iter().map(|r| r.channel[i]).sum::<f64>() / n, sel.iter().map(|r| r.spatial[i]).sum::<f64>() / n)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedTensor {
    name: String,
    shape: Vec<usize>,
    /// Little-endian f32 bytes, base64.
    data: String,
}

fn encode(name: &str, t: &Tensor<f32>) -> EncodedTensor {
    let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedTensor { name: name.to_string(), shape: t.shape.clone(), data: B64.encode(bytes) }
}

fn decode(e: &EncodedTensor) -> Result<Tensor<f32>> {
    let bytes = B64.decode(&e.data).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
    let n: usize = e.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Checkpoint(format!("tensor {} has {} bytes, expected {}", e.name, bytes.len(), 4 * n)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::from_vec(&e.shape, data))
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Self-describing training snapshot. Batch randomness is derived from
/// `(config.seed, epoch)`, so the seed and epoch counter are the full RNG
/// state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub config: TrainConfig,
    pub num_instances: usize,
    pub epoch: usize,
    pub step: usize,
    pub rng_seed: u64,
    pub metrics_offset: usize,
    params: Vec<EncodedTensor>,
    buffers: Vec<EncodedTensor>,
    adam_t: u64,
    adam_m: Vec<EncodedTensor>,
    adam_v: Vec<EncodedTensor>,
    metrics: Vec<MetricsRow>,
}

impl Checkpoint {
    pub fn capture(state: &TrainState) -> Self {
        let store = &state.model.params;
        let num_instances = state.model.proxies.map_or(0, |p| store.get(p).dim(0));
        Self {
            format: CHECKPOINT_FORMAT,
            config: state.config.clone(),
            num_instances,
            epoch: state.epoch,
            step: state.step,
            rng_seed: state.config.seed,
            metrics_offset: state.metrics.len(),
            params: store.iter().map(|(_, n, t)| encode(n, t)).collect(),
            buffers: store.buffers().map(|(n, t)| encode(n, t)).collect(),
            adam_t: state.optimizer.t,
            adam_m: state.optimizer.m.iter().zip(store.iter()).map(|(t, (_, n, _))| encode(n, t)).collect(),
            adam_v: state.optimizer.v.iter().zip(store.iter()).map(|(t, (_, n, _))| encode(n, t)).collect(),
            metrics: state.metrics.clone(),
        }
    }

    /// Rebuilds the training state, checking that the stored layout matches
    /// the architecture described by the stored config.
    pub fn restore(&self) -> Result<TrainState> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", self.format)));
        }
        let mut state = TrainState::new(&self.config, self.num_instances)?;
        load_tensors(&mut state.model.params, &self.params, &self.buffers)?;
        let opt = &mut state.optimizer;
        opt.t = self.adam_t;
        for (slot, enc) in [(&mut opt.m, &self.adam_m), (&mut opt.v, &self.adam_v)] {
            if slot.len() != enc.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            for (dst, e) in slot.iter_mut().zip(enc) {
                let t = decode(e)?;
                if t.shape != dst.shape {
                    return Err(Error::Checkpoint(format!("optimizer moment {} has wrong shape", e.name)));
                }
                *dst = t;
            }
        }
        if self.metrics.len() != self.metrics_offset {
            return Err(Error::Checkpoint("metrics log length does not match its offset".into()));
        }
        state.epoch = self.epoch;
        state.step = self.step;
        state.metrics = self.metrics.clone();
        Ok(state)
    }

    /// Model only, for evaluation.
    pub fn model(&self) -> Result<Model<f32>> {
        Ok(self.restore()?.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        serde_json::to_writer(&mut f, self)?;
        f.flush().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn load_tensors(store: &mut ParamStore<f32>, params: &[EncodedTensor], buffers: &[EncodedTensor]) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!("{} parameters stored, model has {}", params.len(), store.len())));
    }
    for (i, e) in params.iter().enumerate() {
        let id = crate::params::ParamId(i);
        if store.name(id) != e.name {
            return Err(Error::Checkpoint(format!("parameter {i} is `{}`, expected `{}`", e.name, store.name(id))));
        }
        let t = decode(e)?;
        if t.shape != store.get(id).shape {
            return Err(Error::Checkpoint(format!("parameter `{}` has shape {:?}", e.name, t.shape)));
        }
        *store.get_mut(id) = t;
    }
    let expected = store.buffers().count();
    if buffers.len() != expected {
        return Err(Error::Checkpoint(format!("{} buffers stored, model has {expected}", buffers.len())));
    }
    for e in buffers {
        let t = decode(e)?;
        let known = store.buffers().any(|(n, b)| n == e.name && b.shape == t.shape);
        if !known {
            return Err(Error::Checkpoint(format!("unexpected buffer `{}`", e.name)));
        }
        *store.buffer_mut(&e.name) = t;
    }
    Ok(())
}
