//! The four-method comparison: unguided segmentation, connected landmarks,
//! and the guided network fed groundtruth or detected landmarks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{parse_key_values, read_into, train_config_from_map, train_config_to_text};
use super::dataset::{Dataset, Split};
use super::synth::{synth_faces, SynthSpec};
use super::{detect_landmarks, guided_input, segment};
use crate::error::{invalid_input, Error, Result};
use crate::geometry::{landmarks_to_mask, FaceSample, LandmarkSet, SegMask, DEFAULT_EYEBROW_WIDTH_FRAC};
use crate::heatmap::image_tensor;
use crate::metrics::{compare_methods, iou, landmark_error_report, ComparisonTable, LandmarkErrorReport, Method};
use crate::network::{build_fcn, FcnConfig, NetworkInstance};
use crate::noise::{fit_noise_model, NoiseModel};
use crate::training::{
    train_guided_seg, train_landmark_net, train_unguided_seg, CheckpointSink, TrainConfig, TrainingLog,
};
use crate::{NUM_CLASSES, NUM_LANDMARKS};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Share of the training entries held out for noise fitting.
    pub val_fraction: f64,
    pub image_size: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub landmark_net: FcnConfig,
    pub seg_net: FcnConfig,
    pub landmark: TrainConfig,
    pub unguided: TrainConfig,
    pub guided: TrainConfig,
}

impl Default for ExperimentConfig {
    /// The 200/50 synthetic benchmark with the mini networks.
    fn default() -> Self {
        let landmark = TrainConfig {
            iterations: 3000,
            learning_rate: 3e-5,
            loss_scale: 1.0,
            ..TrainConfig::default()
        };
        let unguided = TrainConfig {
            iterations: 1500,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let guided = TrainConfig {
            iterations: 1000,
            learning_rate: 1e-2,
            warmup_iterations: 200,
            ..TrainConfig::default()
        };
        Self {
            train_count: 200,
            test_count: 50,
            val_fraction: 0.1,
            image_size: 64,
            amplitude: 0.1,
            noise: 0.1,
            landmark_net: FcnConfig::mini(3, NUM_LANDMARKS),
            seg_net: FcnConfig::mini(3, NUM_CLASSES),
            landmark,
            unguided,
            guided,
        }
    }
}

impl ExperimentConfig {
    /// Reads overrides from `key=value` text. Keys: `train_count`,
    /// `test_count`, `val_fraction`, `image_size`, `amplitude`, `noise`,
    /// plus `landmark_net.*`, `seg_net.*` (network) and `landmark.*`,
    /// `unguided.*`, `guided.*` (training).
    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        let mut c = Self::default();
        read_into(&map, "", "train_count", &mut c.train_count)?;
        read_into(&map, "", "test_count", &mut c.test_count)?;
        read_into(&map, "", "val_fraction", &mut c.val_fraction)?;
        read_into(&map, "", "image_size", &mut c.image_size)?;
        read_into(&map, "", "amplitude", &mut c.amplitude)?;
        read_into(&map, "", "noise", &mut c.noise)?;
        if map.keys().any(|k| k.starts_with("landmark_net.")) {
            c.landmark_net = net_from_map(&map, "landmark_net.", &c.landmark_net)?;
        }
        if map.keys().any(|k| k.starts_with("seg_net.")) {
            c.seg_net = net_from_map(&map, "seg_net.", &c.seg_net)?;
        }
        c.landmark = train_config_from_map(&map, "landmark.", &c.landmark)?;
        c.unguided = train_config_from_map(&map, "unguided.", &c.unguided)?;
        c.guided = train_config_from_map(&map, "guided.", &c.guided)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let net = |cfg: &FcnConfig, prefix: &str| {
            cfg.to_text()
                .lines()
                .map(|l| format!("{prefix}{l}\n"))
                .collect::<String>()
        };
        format!(
            "train_count={}\ntest_count={}\nval_fraction={}\nimage_size={}\namplitude={}\nnoise={}\n{}{}{}{}{}",
            self.train_count,
            self.test_count,
            self.val_fraction,
            self.image_size,
            self.amplitude,
            self.noise,
            net(&self.landmark_net, "landmark_net."),
            net(&self.seg_net, "seg_net."),
            train_config_to_text(&self.landmark, "landmark."),
            train_config_to_text(&self.unguided, "unguided."),
            train_config_to_text(&self.guided, "guided."),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(invalid_input("train and test counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid_input(format!(
                "val fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.landmark_net.input_channels != 3 || self.landmark_net.output_channels != NUM_LANDMARKS {
            return Err(invalid_input("the landmark network must map 3 to 68 channels"));
        }
        if self.seg_net.input_channels != 3 || self.seg_net.output_channels != NUM_CLASSES {
            return Err(invalid_input("the segmentation network must map 3 to 8 channels"));
        }
        self.landmark_net.validate()?;
        self.seg_net.validate()?;
        self.synth_spec(0)
            .validate(self.seg_net.total_stride().max(self.landmark_net.total_stride()))
    }

    fn synth_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            count: self.train_count + self.test_count,
            size: self.image_size,
            amplitude: self.amplitude,
            noise: self.noise,
            seed,
        }
    }
}

fn net_from_map(map: &BTreeMap<String, String>, prefix: &str, base: &FcnConfig) -> Result<FcnConfig> {
    // fill unspecified keys from `base` so partial overrides keep its shape
    let mut merged: BTreeMap<String, String> = parse_key_values(&base.to_text())?
        .into_iter()
        .map(|(k, v)| (format!("{prefix}{k}"), v))
        .collect();
    for (k, v) in map.iter().filter(|(k, _)| k.starts_with(prefix)) {
        merged.insert(k.clone(), v.clone());
    }
    FcnConfig::from_map(&merged, prefix)
}

/// A seed for one purpose, derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(purpose.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        // divergence already names its stage
        e @ Error::Diverged { .. } => e,
        e => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        },
    })
}

/// Predicted masks of all four methods for one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodMasks {
    pub unguided: SegMask,
    pub connected_landmarks: SegMask,
    pub guided_gt: SegMask,
    pub guided_detected: SegMask,
}

impl MethodMasks {
    pub fn get(&self, method: Method) -> &SegMask {
        match method {
            Method::Unguided => &self.unguided,
            Method::ConnectedLandmarks => &self.connected_landmarks,
            Method::GuidedGt => &self.guided_gt,
            Method::GuidedDetected => &self.guided_detected,
        }
    }
}

/// Runs the four methods on one sample. `detected` are the landmark
/// network's predictions for it; `sigma` is the guidance heatmap width.
pub fn predict_methods(
    unguided: &NetworkInstance<f32>,
    guided: &NetworkInstance<f32>,
    sample: &FaceSample,
    detected: &LandmarkSet,
    sigma: f64,
) -> Result<MethodMasks> {
    let (w, h) = (sample.image.width(), sample.image.height());
    Ok(MethodMasks {
        unguided: segment(unguided, &image_tensor(&sample.image))?,
        connected_landmarks: landmarks_to_mask(detected, w, h, DEFAULT_EYEBROW_WIDTH_FRAC),
        guided_gt: segment(guided, &guided_input(&sample.image, &sample.landmarks, sigma)?)?,
        guided_detected: segment(guided, &guided_input(&sample.image, detected, sigma)?)?,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub table: ComparisonTable,
    pub landmark_error: LandmarkErrorReport,
    pub noise_model: NoiseModel,
    pub landmark_log: TrainingLog,
    pub unguided_log: TrainingLog,
    pub guided_log: TrainingLog,
    /// Dataset indices used for training, noise fitting and testing.
    pub splits: BTreeMap<Split, Vec<usize>>,
}

/// Directory layout of a run: `checkpoints/`, `logs/` and `results/`.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "results"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn noise_model(&self) -> PathBuf {
        self.checkpoints().join("noise_model.txt")
    }

    pub fn sink(&self, prefix: &str) -> CheckpointSink {
        CheckpointSink {
            dir: self.checkpoints(),
            prefix: prefix.to_string(),
        }
    }

    /// Writes `<name>.cseg` (weights) and `<name>.net` (architecture).
    pub fn save_net(&self, name: &str, net: &NetworkInstance<f32>) -> Result<()> {
        net.save(&self.checkpoints().join(format!("{name}.cseg")))?;
        fs::write(self.checkpoints().join(format!("{name}.net")), net.config().to_text())?;
        Ok(())
    }

    pub fn load_net(&self, name: &str) -> Result<NetworkInstance<f32>> {
        let text = fs::read_to_string(self.checkpoints().join(format!("{name}.net")))?;
        let config = FcnConfig::from_text(&text)?;
        NetworkInstance::load(&config, &self.checkpoints().join(format!("{name}.cseg")))
    }

    pub fn save_log(&self, name: &str, log: &TrainingLog) -> Result<()> {
        log.save(&self.logs().join(format!("loss_{name}.csv")))
    }
}

/// Copy of `cfg` with its seed derived from the run seed.
pub fn seeded_config(cfg: &TrainConfig, seed: u64, purpose: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, purpose),
        ..cfg.clone()
    }
}

/// Fresh network initialised from the seed derived for `purpose`.
pub fn init_network(config: &FcnConfig, seed: u64, purpose: &str) -> Result<NetworkInstance<f32>> {
    build_fcn(config, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose)))
}

pub fn detect_all(net: &NetworkInstance<f32>, samples: &[FaceSample]) -> Result<Vec<LandmarkSet>> {
    samples.par_iter().map(|s| detect_landmarks(net, &s.image)).collect()
}

/// Scores the four methods on `test`, given detections for the same samples.
pub fn evaluate_methods(
    unguided: &NetworkInstance<f32>,
    guided: &NetworkInstance<f32>,
    test: &[FaceSample],
    detected: &[LandmarkSet],
    sigma: f64,
) -> Result<ComparisonTable> {
    if test.len() != detected.len() {
        return Err(invalid_input(format!(
            "{} test samples but {} detections",
            test.len(),
            detected.len()
        )));
    }
    let masks = test
        .par_iter()
        .zip(detected)
        .map(|(s, d)| predict_methods(unguided, guided, s, d, sigma))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = BTreeMap::new();
    for method in Method::ALL {
        let r = masks
            .iter()
            .zip(test)
            .map(|(m, s)| iou(m.get(method), &s.mask))
            .collect::<Result<Vec<_>>>()?;
        reports.insert(method, r);
    }
    compare_methods(&reports)
}

/// Writes `comparison.csv`, `comparison_wide.csv`, `per_image.csv` and
/// `landmark_error.csv` under `results/`.
pub fn write_results(
    layout: &OutputLayout,
    table: &ComparisonTable,
    landmark_error: &LandmarkErrorReport,
    test_names: &[String],
) -> Result<()> {
    let results = layout.results();
    fs::write(results.join("comparison.csv"), table.to_csv())?;
    fs::write(results.join("comparison_wide.csv"), table.to_wide_csv())?;
    fs::write(results.join("per_image.csv"), table.per_image_csv())?;
    let mut lm = String::from("image,error\n");
    for (name, e) in test_names.iter().zip(&landmark_error.per_image) {
        lm.push_str(&format!("{name},{e:.6}\n"));
    }
    lm.push_str(&format!("MEAN,{:.6}\n", landmark_error.mean));
    fs::write(results.join("landmark_error.csv"), lm)?;
    Ok(())
}

/// Builds the synthetic benchmark: the first `train_count` samples train
/// (a seeded `val_fraction` of them held out), the rest test.
pub fn synthetic_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let samples = synth_faces(&cfg.synth_spec(derive_seed(seed, "synth")))?;
    let splits = (0..samples.len())
        .map(|i| if i < cfg.train_count { Split::Train } else { Split::Test })
        .collect();
    let names = (0..samples.len()).map(|i| format!("face_{i:04}")).collect();
    let mut data = Dataset { samples, splits, names };
    data.hold_out_validation(cfg.val_fraction, derive_seed(seed, "val_split"));
    Ok(data)
}

/// Trains and evaluates all four methods. With `out`, checkpoints, loss
/// logs, result tables and a run manifest are written there.
pub fn run_four_method_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let layout = out.map(OutputLayout::create).transpose()?;
    let sink = |name: &str| layout.as_ref().map(|l| l.sink(name));

    let splits: BTreeMap<Split, Vec<usize>> = [Split::Train, Split::Val, Split::Test]
        .into_iter()
        .map(|s| (s, data.indices(s)))
        .collect();
    let train = data.subset(Split::Train);
    let val = data.subset(Split::Val);
    let test = data.subset(Split::Test);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(invalid_input(format!(
            "need non-empty train/val/test splits, got {}/{}/{}",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    log::info!("splits: {} train, {} val, {} test", train.len(), val.len(), test.len());

    // landmark detector
    let mut lm_net = in_stage(
        "build-landmarks",
        init_network(&cfg.landmark_net, seed, "init_landmarks"),
    )?;
    let landmark_log = in_stage(
        "train-landmarks",
        train_landmark_net(
            &mut lm_net,
            &train,
            &seeded_config(&cfg.landmark, seed, "train_landmarks"),
            sink("landmarks").as_ref(),
        ),
    )?;
    let detected_test = in_stage("detect-test", detect_all(&lm_net, &test))?;
    let gt_test: Vec<LandmarkSet> = test.iter().map(|s| s.landmarks.clone()).collect();
    let landmark_error = in_stage("landmark-error", landmark_error_report(&detected_test, &gt_test))?;
    log::info!("test landmark error {:.4}", landmark_error.mean);

    // unguided segmentation
    let mut ug_net = in_stage("build-unguided", init_network(&cfg.seg_net, seed, "init_unguided"))?;
    let unguided_log = in_stage(
        "train-unguided",
        train_unguided_seg(
            &mut ug_net,
            &train,
            &seeded_config(&cfg.unguided, seed, "train_unguided"),
            sink("unguided").as_ref(),
        ),
    )?;

    // noise model from validation detections
    let detected_val = in_stage("detect-val", detect_all(&lm_net, &val))?;
    let gt_val: Vec<LandmarkSet> = val.iter().map(|s| s.landmarks.clone()).collect();
    let noise_model = in_stage("fit-noise", fit_noise_model(&detected_val, &gt_val))?;

    // guided segmentation, initialised from the unguided network
    let mut gd_net = in_stage("expand", ug_net.expand_first_layer(NUM_LANDMARKS))?;
    let guided_log = in_stage(
        "train-guided",
        train_guided_seg(
            &mut gd_net,
            &train,
            &noise_model,
            &seeded_config(&cfg.guided, seed, "train_guided"),
            sink("guided").as_ref(),
        ),
    )?;

    let table = in_stage(
        "evaluate",
        evaluate_methods(&ug_net, &gd_net, &test, &detected_test, cfg.guided.sigma),
    )?;
    for row in &table.rows {
        log::info!("{}: mean IoU {:.4}", row.method.name(), row.mean);
    }

    if let Some(layout) = &layout {
        layout.save_net("landmarks", &lm_net)?;
        layout.save_net("unguided", &ug_net)?;
        layout.save_net("guided", &gd_net)?;
        noise_model.save(&layout.noise_model())?;
        layout.save_log("landmarks", &landmark_log)?;
        layout.save_log("unguided", &unguided_log)?;
        layout.save_log("guided", &guided_log)?;
        let names: Vec<String> = splits[&Split::Test].iter().map(|&i| data.names[i].clone()).collect();
        write_results(layout, &table, &landmark_error, &names)?;
        fs::write(layout.root.join("run_manifest.txt"), run_manifest(cfg, seed, &splits))?;
    }

    Ok(ExperimentOutcome {
        table,
        landmark_error,
        noise_model,
        landmark_log,
        unguided_log,
        guided_log,
        splits,
    })
}

pub fn run_manifest(cfg: &ExperimentConfig, seed: u64, splits: &BTreeMap<Split, Vec<usize>>) -> String {
    let text = cfg.to_text();
    let mut m = format!("seed={seed}\nconfig_sha256={}\n", sha256_hex(text.as_bytes()));
    for purpose in [
        "synth",
        "val_split",
        "init_landmarks",
        "train_landmarks",
        "init_unguided",
        "train_unguided",
        "train_guided",
    ] {
        m.push_str(&format!("seed.{purpose}={}\n", derive_seed(seed, purpose)));
    }
    for (split, idx) in splits {
        m.push_str(&format!("split.{split}={}\n", idx.len()));
    }
    m.push_str("# configuration\n");
    m.push_str(&text);
    m
}
