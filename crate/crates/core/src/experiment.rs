//! Run configuration and the train → evaluate pipeline shared by the CLI and
//! the desk-scale experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_nav_sequence, load_patch_dataset, split_train_test, synth_landmarks, synth_navigation, NavSequence, PatchDataset};
use crate::error::{io_err, Error, Result};
use crate::evaluator::{run_protocol, EvalData, LandmarkSet, Protocol, RAReport};
use crate::model::Model;
use crate::trainer::{train, TrainConfig, TrainState};
use crate::transforms::TransformSubset;

/// Where the landmark and navigation data come from. The patch dataset
/// path lives in `train.dataset`; without it a synthetic set is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic_instances: usize,
    pub data_seed: u64,
    pub split_seed: u64,
    /// Navigation sequence root; synthetic when absent.
    pub navigation: Option<PathBuf>,
    pub nav_craters: usize,
    pub nav_frames: usize,
    pub nav_orbits: usize,
    pub frame_resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_instances: 60,
            data_seed: 0,
            split_seed: 0,
            navigation: None,
            nav_craters: 12,
            nav_frames: 24,
            nav_orbits: 3,
            frame_resolution: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    pub transform_subset: TransformSubset,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocols: vec![Protocol::Incremental], transform_subset: TransformSubset::All, seed: 0 }
    }
}

/// Everything needed to reproduce a run; archived into every output
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if self.train.dataset.is_none() && d.synthetic_instances < 4 {
            return Err(Error::Config("synthetic dataset needs at least 4 instances".into()));
        }
        if d.navigation.is_none() && (d.nav_orbits == 0 || d.nav_frames < d.nav_orbits || d.nav_craters == 0) {
            return Err(Error::Config("synthetic navigation needs craters, orbits and a frame per orbit".into()));
        }
        Ok(())
    }
}

/// Instance-disjoint train/test landmarks and the navigation sequence.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: PatchDataset,
    pub test: PatchDataset,
    pub navigation: NavSequence,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let res = cfg.train.model.input_resolution;
    let d = &cfg.data;
    let dataset = match &cfg.train.dataset {
        Some(root) => {
            if !root.is_dir() {
                return Err(Error::Input(format!("dataset path {} does not exist", root.display())));
            }
            load_patch_dataset(root, res)?
        }
        None => synth_landmarks(d.synthetic_instances, res, d.data_seed)?,
    };
    let navigation = match &d.navigation {
        Some(root) => load_nav_sequence(root)?,
        None => {
            // Craters on the ground track are a random subset of the ids.
            let mut rng = ChaCha8Rng::seed_from_u64(d.data_seed ^ 0x6E61_7669);
            let k = d.nav_craters.min(dataset.len() / 2).max(1);
            let ids = dataset.ids();
            let chosen: BTreeSet<u64> = sample(&mut rng, ids.len(), k).into_iter().map(|i| ids[i]).collect();
            synth_navigation(&dataset.subset(&chosen), d.nav_frames, d.nav_orbits, d.frame_resolution, d.data_seed)?
        }
    };
    let (train, test) = split_train_test(&dataset, &navigation.crater_ids(), d.split_seed)?;
    Ok(Prepared { train, test, navigation })
}

pub fn train_model(cfg: &RunConfig, data: &Prepared, out: Option<&Path>) -> Result<TrainState> {
    let images = data.train.load_images()?;
    train(&cfg.train, &images, out)
}

/// Runs the configured protocols on the test split.
pub fn evaluate(model: &Model<f32>, cfg: &RunConfig, data: &Prepared, protocols: &[Protocol], subset: TransformSubset) -> Result<Vec<RAReport>> {
    let landmarks = LandmarkSet::from_dataset(&data.test)?;
    let eval = EvalData { landmarks: Some(&landmarks), navigation: Some(&data.navigation) };
    protocols.iter().map(|&p| run_protocol(model, p, &eval, &cfg.train.transforms, subset, cfg.eval.seed)).collect()
}
