use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mars_core::data::{load_gray, save_gray, synth_landmarks, synth_navigation};
use mars_core::eigencam::eigencam;
use mars_core::evaluator::{
    ablation_driver, run_protocol, ConstantEmbedder, Embedder, EvalData, LandmarkSet, OracleEmbedder, Protocol, RAReport,
};
use mars_core::experiment::{prepare_data, train_model, RunConfig};
use mars_core::mars::pose_normalize_map;
use mars_core::plot::mars_loss_svg;
use mars_core::tensor::Tensor;
use mars_core::trainer::{read_metrics_csv, Checkpoint};
use mars_core::transforms::{apply_transform, TransformSpec, TransformSubset};
use mars_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mars", version, about = "Attention-regularised landmark embeddings for terrain relative navigation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint, metrics log and loss plot.
    Train,
    /// Run an evaluation protocol and emit RA reports.
    Eval {
        /// Trained checkpoint; required unless --embedder is oracle or constant.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// recall1 | incremental | navigation | lost-in-space | ablation
        #[arg(long, default_value = "incremental")]
        protocol: String,
        /// all | brightness | rotation | translation | identity
        #[arg(long, default_value = "all")]
        transform_subset: String,
        /// Embedding source; oracle and constant are protocol diagnostics.
        #[arg(long, value_enum, default_value_t = EmbedderKind::Model)]
        embedder: EmbedderKind,
    },
    /// Generate a synthetic landmark set and navigation sequence.
    Synth {
        /// Landmark instances (crater ids).
        #[arg(long, default_value_t = 60)]
        instances: usize,
        /// Navigation frames across all orbits.
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        orbits: usize,
        /// Patch side in pixels.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Navigation frame side in pixels.
        #[arg(long, default_value_t = 128)]
        frame_resolution: usize,
    },
    /// Pose-normalised EigenCAM heatmaps of two views, one image per block.
    Cam {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grey-scale patch; resized to the model's input resolution.
        #[arg(long)]
        image: PathBuf,
        /// Second image; defaults to the first.
        #[arg(long)]
        image2: Option<PathBuf>,
        /// Transform of the first view, e.g. `rot=30,tx=2,ty=-1,b=1.1`.
        #[arg(long, default_value = "")]
        t1: String,
        /// Transform of the second view; empty means identity.
        #[arg(long, default_value = "")]
        t2: String,
    },
    /// Summarise a training run directory.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmbedderKind {
    Model,
    Oracle,
    Constant,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    match cli.command {
        Command::Train => cmd_train(&cfg, cli.force),
        Command::Eval { checkpoint, protocol, transform_subset, embedder } => {
            cmd_eval(&cfg, cli.config.is_some(), checkpoint.as_deref(), &protocol, &transform_subset, embedder)
        }
        Command::Synth { instances, frames, orbits, resolution, frame_resolution } => {
            let seed = cli.seed.unwrap_or(0);
            cmd_synth(cfg.out.as_deref(), cli.force, instances, frames, orbits, resolution, frame_resolution, seed)
        }
        Command::Cam { checkpoint, image, image2, t1, t2 } => {
            cmd_cam(&checkpoint, &image, image2.as_deref(), &t1, &t2, cfg.out.as_deref(), cli.force)
        }
        Command::Report => cmd_report(cfg.out.as_deref()),
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless forced.
fn prepare_out(dir: Option<&Path>, force: bool) -> CliResult<PathBuf> {
    let dir = dir.ok_or_else(|| Failure::Usage("an output directory is required (--out or `out` in the config)".into()))?;
    if dir.is_dir() && fs::read_dir(dir).map_err(|e| io(dir, e))?.next().is_some() && !force {
        return Err(Failure::Usage(format!("output directory {} is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    Ok(dir.to_path_buf())
}

fn io(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn cmd_train(cfg: &RunConfig, force: bool) -> CliResult {
    cfg.validate()?;
    let out = prepare_out(cfg.out.as_deref(), force)?;
    write(&out.join("run_config.toml"), &cfg.to_toml())?;
    let data = prepare_data(cfg)?;
    log::info!("training on {} instances ({} held out)", data.train.len(), data.test.len());
    let state = train_model(cfg, &data, Some(&out))?;
    if let Some(svg) = mars_loss_svg(&state.metrics) {
        write(&out.join("mars_loss.svg"), &svg)?;
    }
    println!("trained {} epochs ({} steps); artifacts in {}", state.epoch, state.step, out.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    explicit_config: bool,
    checkpoint: Option<&Path>,
    protocol: &str,
    subset: &str,
    kind: EmbedderKind,
) -> CliResult {
    let ablation = protocol == "ablation";
    let proto = if ablation { Protocol::Incremental } else { Protocol::parse(protocol).map_err(|e| Failure::Usage(e.to_string()))? };
    let subset = TransformSubset::parse(subset).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut cfg = cfg.clone();
    let model = match (kind, checkpoint) {
        (EmbedderKind::Model, None) => return Err(Failure::Usage("--checkpoint is required for the model embedder".into())),
        (_, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            // The archived run configuration carries the data settings.
            let archived = path.with_file_name("run_config.toml");
            if !explicit_config && archived.is_file() {
                cfg = RunConfig { out: cfg.out.clone(), eval: cfg.eval.clone(), ..RunConfig::load(&archived)? };
            }
            cfg.train = ck.config.clone();
            Some(ck.model()?)
        }
        _ => None,
    };
    let data = prepare_data(&cfg)?;
    let res = cfg.train.model.input_resolution;
    let oracle = OracleEmbedder { resolution: res, dim: data.test.ids().iter().max().map_or(1, |m| *m as usize + 1) };
    let constant = ConstantEmbedder { resolution: res };
    let embedder: &dyn Embedder = match kind {
        EmbedderKind::Model => model.as_ref().expect("checked above"),
        EmbedderKind::Oracle => &oracle,
        EmbedderKind::Constant => &constant,
    };
    let landmarks = LandmarkSet::from_dataset(&data.test)?;
    let eval = EvalData { landmarks: Some(&landmarks), navigation: Some(&data.navigation) };
    let reports: Vec<RAReport> = if ablation {
        ablation_driver(embedder, proto, &eval, &cfg.train.transforms, &TransformSubset::ABLATION, cfg.eval.seed)?
    } else {
        vec![run_protocol(embedder, proto, &eval, &cfg.train.transforms, subset, cfg.eval.seed)?]
    };
    let json = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
    match cfg.out.as_deref() {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            let name = if ablation { "ablation".to_string() } else { proto.name().to_string() };
            write(&dir.join(format!("report_{name}.json")), &(json + "\n"))?;
        }
        None => println!("{json}"),
    }
    println!("{:<14} {:<12} {:>8} {:>10} {:>7} {:>7}", "protocol", "transforms", "correct", "incorrect", "missed", "RA");
    for r in &reports {
        println!(
            "{:<14} {:<12} {:>8} {:>10} {:>7} {:>7.2}",
            r.protocol, r.transform_subset, r.correct, r.incorrect, r.missed, r.ra
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: Option<&Path>,
    force: bool,
    instances: usize,
    frames: usize,
    orbits: usize,
    res: usize,
    frame_res: usize,
    seed: u64,
) -> CliResult {
    let out = prepare_out(out, force)?;
    let ds = synth_landmarks(instances, res, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E61_7669);
    let k = (instances / 2).clamp(1, 12);
    let chosen: BTreeSet<u64> = sample(&mut rng, instances, k).into_iter().map(|i| i as u64).collect();
    let nav = synth_navigation(&ds.subset(&chosen), frames, orbits, frame_res, seed)?;
    ds.save(&out.join("patches"))?;
    nav.save(&out.join("navigation"))?;
    println!(
        "wrote {instances} landmarks to {} and {} frames over {orbits} orbits to {}",
        out.join("patches").display(),
        nav.frames.len(),
        out.join("navigation").display()
    );
    Ok(())
}

/// `rot=30,tx=2,ty=-1,b=1.1`; missing keys keep their identity values.
fn parse_transform(s: &str, res: usize) -> CliResult<TransformSpec> {
    let mut t = TransformSpec::identity((res, res));
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Failure::Usage(format!("transform term `{part}` is not key=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| Failure::Usage(format!("transform value `{v}` is not a number")))?;
        match k.trim() {
            "rot" => t.rotation_deg = v.rem_euclid(360.0),
            "tx" => t.translate_x = v,
            "ty" => t.translate_y = v,
            "b" => t.brightness = v,
            other => return Err(Failure::Usage(format!("unknown transform key `{other}` (expected rot, tx, ty, b)"))),
        }
    }
    Ok(t)
}

fn cmd_cam(
    checkpoint: &Path,
    image: &Path,
    image2: Option<&Path>,
    t1: &str,
    t2: &str,
    out: Option<&Path>,
    force: bool,
) -> CliResult {
    let model = Checkpoint::load(checkpoint)?.model()?;
    let res = model.config.input_resolution;
    let ts = [parse_transform(t1, res)?, parse_transform(t2, res)?];
    let out = prepare_out(out, force)?;
    let sources = [load_gray(image, Some((res, res)))?, load_gray(image2.unwrap_or(image), Some((res, res)))?];
    let mut batch = Vec::new();
    for (src, t) in sources.iter().zip(&ts) {
        batch.extend_from_slice(&apply_transform(src, t)?.data);
    }
    let attention = model.attention(&Tensor::from_vec(&[2, 1, res, res], batch))?;
    for (i, a) in attention.iter().enumerate() {
        let per = a.len() / 2;
        let shape = &a.shape[1..];
        let mut maps = Vec::new();
        for (v, t) in ts.iter().enumerate() {
            let view = Tensor::from_vec(shape, a.data[v * per..(v + 1) * per].iter().map(|&x| x as f64).collect());
            let (normed, _) = pose_normalize_map(&view, t)?;
            maps.push(eigencam(&normed, Some(res))?);
        }
        // Side by side with a 2-pixel gap.
        let w = 2 * res + 2;
        let mut pair = vec![0.0f32; res * w];
        for y in 0..res {
            pair[y * w..y * w + res].copy_from_slice(&maps[0].data[y * res..(y + 1) * res]);
            pair[y * w + res + 2..(y + 1) * w].copy_from_slice(&maps[1].data[y * res..(y + 1) * res]);
        }
        save_gray(&out.join(format!("block_{}.png", i + 1)), &Tensor::from_vec(&[1, res, w], pair))?;
    }
    println!("wrote {} heatmap pairs to {}", attention.len(), out.display());
    Ok(())
}

fn cmd_report(out: Option<&Path>) -> CliResult {
    let dir = out.ok_or_else(|| Failure::Usage("report needs the run directory via --out".into()))?;
    let rows = read_metrics_csv(&dir.join("metrics.csv"))?;
    let mut epochs: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    epochs.dedup();
    println!("{:>6} {:>10}  per-block regularisation (channel/spatial)", "epoch", "ml_loss");
    for e in epochs {
        let sel: Vec<_> = rows.iter().filter(|r| r.epoch == e).collect();
        let ml = sel.iter().map(|r| r.ml_loss).sum::<f64>() / sel.len() as f64;
        let blocks = mars_core::trainer::epoch_block_means(&rows, e)
            .map(|m| m.iter().map(|(c, s)| format!("{c:.3}/{s:.3}")).collect::<Vec<_>>().join("  "))
            .unwrap_or_default();
        println!("{e:>6} {ml:>10.4}  {blocks}");
    }
    if let Some(svg) = mars_loss_svg(&rows) {
        write(&dir.join("mars_loss.svg"), &svg)?;
    }
    let mut reports: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("report_") && n.ends_with(".json")))
        .collect();
    reports.sort();
    for p in reports {
        let text = fs::read_to_string(&p).map_err(|e| io(&p, e))?;
        let rs: Vec<RAReport> = serde_json::from_str(&text).map_err(Error::from)?;
        for r in rs {
            println!("{:<14} {:<12} RA {:>6.2} ({} / {} / {})", r.protocol, r.transform_subset, r.ra, r.correct, r.incorrect, r.missed);
        }
    }
    Ok(())
}
