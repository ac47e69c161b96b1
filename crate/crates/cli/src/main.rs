use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cascadeseg::geometry::{FaceSample, LandmarkSet};
use cascadeseg::metrics::landmark_error_report;
use cascadeseg::network::NetworkInstance;
use cascadeseg::noise::{fit_noise_model, NoiseModel};
use cascadeseg::pipeline::experiment::{
    derive_seed, detect_all, evaluate_methods, init_network, seeded_config, synthetic_dataset, write_results,
    OutputLayout,
};
use cascadeseg::pipeline::{
    load_dataset, run_four_method_experiment, write_dataset, Dataset, DatasetManifest, ExperimentConfig, Split,
};
use cascadeseg::training::{train_guided_seg, train_landmark_net, train_unguided_seg};
use cascadeseg::NUM_LANDMARKS;

const THREADS_VAR: &str = "CASCADESEG_THREADS";

#[derive(Parser)]
#[command(name = "cascadeseg", version, about = "Landmark-guided facial part segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG images, pts files, masks, manifest.txt).
    Synth(Common),
    /// Train the landmark detector.
    TrainLandmarks(StageArgs),
    /// Train the segmentation network on images alone.
    TrainUnguided(StageArgs),
    /// Fit the landmark noise model on validation detections.
    FitNoise(StageArgs),
    /// Train the guided network starting from the unguided one.
    TrainGuided(StageArgs),
    /// Evaluate all four methods on the test split.
    Eval(StageArgs),
    /// Run every stage and the comparison.
    Experiment(StageArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file with key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; every stage derives its own seed from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run on a single worker thread and default the seed to 0.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest (`<image> <pts> <split>` lines). Without it the
    /// synthetic benchmark is generated from the configuration and seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Crop and rescale every face to this height when loading `--data`.
    #[arg(long)]
    height: Option<usize>,
}

struct Run {
    cfg: ExperimentConfig,
    seed: u64,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        configure_threads(common.deterministic)?;
        let cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::from_text(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        cfg.validate()?;
        let seed = match common.seed {
            Some(s) => s,
            None if common.deterministic => 0,
            None => {
                let s = rand::random();
                log::info!("no --seed given, using {s}");
                s
            }
        };
        Ok(Self { cfg, seed })
    }

    fn dataset(&self, args: &StageArgs) -> Result<Dataset> {
        let Some(path) = &args.data else {
            return Ok(synthetic_dataset(&self.cfg, self.seed)?);
        };
        let manifest = DatasetManifest::read(path).with_context(|| format!("reading {}", path.display()))?;
        let stride = self
            .cfg
            .seg_net
            .total_stride()
            .max(self.cfg.landmark_net.total_stride());
        let mut data = load_dataset(&manifest, args.height, stride)?;
        if data.indices(Split::Val).is_empty() {
            data.hold_out_validation(self.cfg.val_fraction, derive_seed(self.seed, "val_split"));
        }
        log::info!(
            "loaded {} samples: {} train, {} val, {} test",
            data.len(),
            data.indices(Split::Train).len(),
            data.indices(Split::Val).len(),
            data.indices(Split::Test).len()
        );
        Ok(data)
    }
}

fn configure_threads(deterministic: bool) -> Result<()> {
    let threads = if deterministic {
        Some(1)
    } else {
        match std::env::var(THREADS_VAR) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .with_context(|| format!("{THREADS_VAR} must be a positive integer, got {v:?}"))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn output_layout(common: &Common) -> Result<OutputLayout> {
    OutputLayout::create(&common.out).with_context(|| format!("creating output directory {}", common.out.display()))
}

fn subset(data: &Dataset, split: Split) -> Result<Vec<FaceSample>> {
    let s = data.subset(split);
    if s.is_empty() {
        bail!("the {split} split is empty");
    }
    Ok(s)
}

fn synth(common: &Common) -> Result<()> {
    let run = Run::new(common)?;
    let data = synthetic_dataset(&run.cfg, run.seed)?;
    let manifest = write_dataset(&common.out, &data.samples, &data.splits)?;
    println!("wrote {} samples to {}", manifest.entries.len(), common.out.display());
    Ok(())
}

fn train_landmarks(args: &StageArgs) -> Result<()> {
    let run = Run::new(&args.common)?;
    let layout = output_layout(&args.common)?;
    let train = subset(&run.dataset(args)?, Split::Train)?;
    let mut net = init_network(&run.cfg.landmark_net, run.seed, "init_landmarks")?;
    let cfg = seeded_config(&run.cfg.landmark, run.seed, "train_landmarks");
    let log = train_landmark_net(&mut net, &train, &cfg, Some(&layout.sink("landmarks")))?;
    layout.save_net("landmarks", &net)?;
    layout.save_log("landmarks", &log)?;
    println!("final loss {:.6e}", log.losses().last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_unguided(args: &StageArgs) -> Result<()> {
    let run = Run::new(&args.common)?;
    let layout = output_layout(&args.common)?;
    let train = subset(&run.dataset(args)?, Split::Train)?;
    let mut net = init_network(&run.cfg.seg_net, run.seed, "init_unguided")?;
    let cfg = seeded_config(&run.cfg.unguided, run.seed, "train_unguided");
    let log = train_unguided_seg(&mut net, &train, &cfg, Some(&layout.sink("unguided")))?;
    layout.save_net("unguided", &net)?;
    layout.save_log("unguided", &log)?;
    println!("final loss {:.6e}", log.losses().last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn load(layout: &OutputLayout, name: &str) -> Result<NetworkInstance<f32>> {
    layout
        .load_net(name)
        .with_context(|| format!("loading the {name} network from {}", layout.checkpoints().display()))
}

fn groundtruth(samples: &[FaceSample]) -> Vec<LandmarkSet> {
    samples.iter().map(|s| s.landmarks.clone()).collect()
}

fn fit_noise(args: &StageArgs) -> Result<()> {
    let run = Run::new(&args.common)?;
    let layout = output_layout(&args.common)?;
    let val = subset(&run.dataset(args)?, Split::Val)?;
    let net = load(&layout, "landmarks")?;
    let model = fit_noise_model(&detect_all(&net, &val)?, &groundtruth(&val))?;
    model.save(&layout.noise_model())?;
    println!("noise model fitted on {} validation faces", val.len());
    Ok(())
}

fn train_guided(args: &StageArgs) -> Result<()> {
    let run = Run::new(&args.common)?;
    let layout = output_layout(&args.common)?;
    let train = subset(&run.dataset(args)?, Split::Train)?;
    let unguided = load(&layout, "unguided")?;
    let noise = NoiseModel::load(&layout.noise_model())
        .with_context(|| format!("loading {}", layout.noise_model().display()))?;
    let mut net = unguided.expand_first_layer(NUM_LANDMARKS)?;
    let cfg = seeded_config(&run.cfg.guided, run.seed, "train_guided");
    let log = train_guided_seg(&mut net, &train, &noise, &cfg, Some(&layout.sink("guided")))?;
    layout.save_net("guided", &net)?;
    layout.save_log("guided", &log)?;
    println!("final loss {:.6e}", log.losses().last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn eval(args: &StageArgs) -> Result<()> {
    let run = Run::new(&args.common)?;
    let layout = output_layout(&args.common)?;
    let data = run.dataset(args)?;
    let test = subset(&data, Split::Test)?;
    let landmarks = load(&layout, "landmarks")?;
    let unguided = load(&layout, "unguided")?;
    let guided = load(&layout, "guided")?;
    let detected = detect_all(&landmarks, &test)?;
    let error = landmark_error_report(&detected, &groundtruth(&test))?;
    let table = evaluate_methods(&unguided, &guided, &test, &detected, run.cfg.guided.sigma)?;
    let names: Vec<String> = data
        .indices(Split::Test)
        .iter()
        .map(|&i| data.names[i].clone())
        .collect();
    write_results(&layout, &table, &error, &names)?;
    print!("{}", table.to_wide_csv());
    println!("landmark error {:.4}", error.mean);
    Ok(())
}

fn experiment(args: &StageArgs) -> Result<()> {
    let run = Run::new(&args.common)?;
    let layout = output_layout(&args.common)?;
    let data = run.dataset(args)?;
    let outcome = run_four_method_experiment(&run.cfg, &data, run.seed, Some(&layout.root))?;
    print!("{}", outcome.table.to_wide_csv());
    println!("landmark error {:.4}", outcome.landmark_error.mean);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(c) => synth(c),
        Command::TrainLandmarks(a) => train_landmarks(a),
        Command::TrainUnguided(a) => train_unguided(a),
        Command::FitNoise(a) => fit_noise(a),
        Command::TrainGuided(a) => train_guided(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
    }
}
