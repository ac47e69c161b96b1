//! SGD training loops for the landmark network and the unguided and guided
//! segmentation networks.
//!
//! Each iteration draws `batch_size` samples, applies occlusion and
//! translation augmentation, accumulates gradients and takes one momentum
//! step with the averaged gradient. All randomness comes from one seeded
//! ChaCha generator, so a run is reproducible for a given seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::geometry::{occlusion_augment, ClassId, FaceSample, Image, Point2, SegMask};
use crate::heatmap::{encode_landmarks, image_tensor, stack_input};
use crate::network::{NetworkInstance, Stage};
use crate::noise::{perturb, NoiseModel};
use crate::tensor::{sgd_momentum_step, Graph, Scalar, Tensor};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Share of iterations spent at stride 32, 16 and 8.
pub const STAGE_FRACTIONS: [f64; 3] = [0.4, 0.3, 0.3];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Multiplier of the landmark sigmoid cross-entropy.
    pub loss_scale: f64,
    /// Heatmap σ in pixels for landmark targets and guidance channels.
    pub sigma: f64,
    pub occlusion_prob: f64,
    /// Maximum integer shift in pixels applied to each drawn sample.
    pub translate: usize,
    /// Guided training only: iterations during which only the first
    /// convolution is updated.
    pub warmup_iterations: usize,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 1,
            loss_scale: 1e-5,
            sigma: crate::heatmap::REFERENCE_SIGMA,
            occlusion_prob: 0.5,
            translate: 4,
            warmup_iterations: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(invalid_config(format!("sigma {} must be positive", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(invalid_config(format!(
                "occlusion probability {} outside [0, 1]",
                self.occlusion_prob
            )));
        }
        if self.warmup_iterations > self.iterations {
            return Err(invalid_config("warm-up is longer than training"));
        }
        Ok(())
    }
}

/// Splits `iterations` over the three stages by [`STAGE_FRACTIONS`]; the last
/// stage takes the rounding remainder.
pub fn stage_schedule(iterations: usize) -> Vec<(Stage, usize)> {
    let first = (iterations as f64 * STAGE_FRACTIONS[0]).round() as usize;
    let second = ((iterations as f64 * STAGE_FRACTIONS[1]).round() as usize).min(iterations - first);
    vec![
        (Stage::Stride32, first),
        (Stage::Stride16, second),
        (Stage::Stride8, iterations - first - second),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: String,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LossRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,stage,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.6e}\n", r.iteration, r.stage, r.loss));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Where and under which name periodic checkpoints are written.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub prefix: String,
}

impl CheckpointSink {
    fn path(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("{}_iter{iteration:06}.cseg", self.prefix))
    }
}

/// Shifts image, mask and landmarks by whole pixels; uncovered pixels are
/// black background.
pub fn translate_sample(sample: &FaceSample, dx: isize, dy: isize) -> Result<FaceSample> {
    let (w, h) = (sample.image.width(), sample.image.height());
    let mut image = Image::zeros(w, h);
    let mut mask = SegMask::filled(w, h, ClassId::Background);
    for y in 0..h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            image.set_pixel(x, y, sample.image.pixel(sx as usize, sy as usize));
            mask.set(x, y, sample.mask.get(sx as usize, sy as usize));
        }
    }
    let landmarks = sample
        .landmarks
        .map(|p| Point2::new(p.x + dx as f64, p.y + dy as f64))?;
    FaceSample::new(image, landmarks, mask)
}

enum Target<T> {
    Heatmaps(Tensor<T>),
    Mask(SegMask),
}

struct Loop<'a, T> {
    cfg: &'a TrainConfig,
    samples: &'a [FaceSample],
    rng: ChaCha8Rng,
    log: TrainingLog,
    iteration: usize,
    sink: Option<&'a CheckpointSink>,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Loop<'a, T> {
    fn new(cfg: &'a TrainConfig, samples: &'a [FaceSample], sink: Option<&'a CheckpointSink>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(invalid_input("no training samples"));
        }
        Ok(Self {
            cfg,
            samples,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            log: TrainingLog::default(),
            iteration: 0,
            sink,
            _marker: std::marker::PhantomData,
        })
    }

    fn draw(&mut self) -> Result<FaceSample> {
        let idx = self.rng.random_range(0..self.samples.len());
        let mut sample = self.samples[idx].clone();
        let t = self.cfg.translate as i64;
        if t > 0 {
            let dx = self.rng.random_range(-t..=t);
            let dy = self.rng.random_range(-t..=t);
            sample = translate_sample(&sample, dx as isize, dy as isize)?;
        }
        let (image, _) = occlusion_augment(&sample.image, self.cfg.occlusion_prob, &mut self.rng)?;
        sample.image = image;
        Ok(sample)
    }

    /// Runs `count` iterations labelled `stage`. `example` turns an augmented
    /// sample into a network input and target.
    fn run(
        &mut self,
        net: &mut NetworkInstance<T>,
        stage: &str,
        count: usize,
        mut example: impl FnMut(&FaceSample, &mut ChaCha8Rng) -> Result<(Tensor<T>, Target<T>)>,
    ) -> Result<()> {
        let lr = T::cast(self.cfg.learning_rate);
        let momentum = T::cast(self.cfg.momentum);
        let inv_batch = T::cast(1.0 / self.cfg.batch_size as f64);
        let scale = T::cast(self.cfg.loss_scale);
        for _ in 0..count {
            self.iteration += 1;
            let mut total = 0.0;
            for _ in 0..self.cfg.batch_size {
                let sample = self.draw()?;
                let (input, target) = example(&sample, &mut self.rng)?;
                let mut graph = Graph::new();
                let x = graph.constant(input);
                let pass = net.forward(&mut graph, x)?;
                let loss = match &target {
                    Target::Heatmaps(t) => graph.sigmoid_ce_loss(pass.output, t, scale)?,
                    Target::Mask(m) => graph.softmax_ce_loss(pass.output, m)?,
                };
                total += graph.scalar(loss);
                graph.backward(loss)?;
                net.accumulate_grads(&graph, &pass)?;
            }
            let loss = total / self.cfg.batch_size as f64;
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    iteration: self.iteration,
                    stage: stage.to_string(),
                    loss,
                });
            }
            for p in net.params_mut() {
                p.scale_grad(inv_batch);
            }
            sgd_momentum_step(net.params_mut(), lr, momentum)?;
            self.log.records.push(LossRecord {
                iteration: self.iteration,
                stage: stage.to_string(),
                loss,
            });
            if self.iteration.is_multiple_of(50) {
                log::info!("{stage} iteration {} loss {loss:.5}", self.iteration);
            }
            if let Some(sink) = self.sink {
                if self.cfg.checkpoint_every > 0 && self.iteration.is_multiple_of(self.cfg.checkpoint_every) {
                    fs::create_dir_all(&sink.dir)?;
                    net.save(&sink.path(self.iteration))?;
                }
            }
        }
        Ok(())
    }
}

/// Runs the three-stage schedule, enabling each stage's skip before its
/// iterations start.
fn staged<T: Scalar>(
    net: &mut NetworkInstance<T>,
    lp: &mut Loop<'_, T>,
    mut example: impl FnMut(&FaceSample, &mut ChaCha8Rng) -> Result<(Tensor<T>, Target<T>)>,
) -> Result<()> {
    for (stage, count) in stage_schedule(lp.cfg.iterations) {
        net.enable_stage(stage)?;
        lp.run(net, stage.name(), count, &mut example)?;
    }
    Ok(())
}

/// Trains a 3→68 network on Gaussian heatmap targets.
pub fn train_landmark_net<T: Scalar>(
    net: &mut NetworkInstance<T>,
    samples: &[FaceSample],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainingLog> {
    let mut lp = Loop::new(cfg, samples, sink)?;
    let sigma = cfg.sigma;
    staged(net, &mut lp, |s, _| {
        let (w, h) = (s.image.width(), s.image.height());
        let target = encode_landmarks(&s.landmarks, w, h, sigma)?.to_tensor();
        Ok((image_tensor(&s.image), Target::Heatmaps(target)))
    })?;
    Ok(lp.log)
}

/// Trains a 3→8 segmentation network on the part masks.
pub fn train_unguided_seg<T: Scalar>(
    net: &mut NetworkInstance<T>,
    samples: &[FaceSample],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainingLog> {
    let mut lp = Loop::new(cfg, samples, sink)?;
    staged(net, &mut lp, |s, _| {
        Ok((image_tensor(&s.image), Target::Mask(s.mask.clone())))
    })?;
    Ok(lp.log)
}

/// Trains a 71-channel network whose landmark channels are rendered from
/// ground truth perturbed by `noise`, redrawn every time a sample is used.
/// During the first `warmup_iterations` only the first convolution learns.
pub fn train_guided_seg<T: Scalar>(
    net: &mut NetworkInstance<T>,
    samples: &[FaceSample],
    noise: &NoiseModel,
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainingLog> {
    let mut lp = Loop::new(cfg, samples, sink)?;
    let sigma = cfg.sigma;
    let mut example = |s: &FaceSample, rng: &mut ChaCha8Rng| {
        let noisy = perturb(&s.landmarks, noise, rng)?;
        let heatmaps = encode_landmarks(&noisy, s.image.width(), s.image.height(), sigma)?;
        Ok((stack_input(&s.image, &heatmaps)?, Target::Mask(s.mask.clone())))
    };
    net.enable_stage(Stage::Stride8)?;
    let first = net.params()[0].layer().to_string();
    let trainable: Vec<bool> = net.params().iter().map(|p| p.trainable).collect();
    if cfg.warmup_iterations > 0 {
        net.set_trainable(|layer| layer == first);
        lp.run(net, "warmup", cfg.warmup_iterations, &mut example)?;
        for (p, t) in net.params_mut().iter_mut().zip(trainable) {
            p.trainable = t;
        }
    }
    lp.run(net, "finetune", cfg.iterations - cfg.warmup_iterations, &mut example)?;
    Ok(lp.log)
}
