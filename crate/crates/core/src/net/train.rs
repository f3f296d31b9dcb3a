//! SGD-with-momentum training loop, learning-rate schedule and
//! checkpoint conversion.

use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, ModelConfig, NamedTensor, Real, TinyNet};
use crate::dataset::ExampleRecord;
use crate::error::{Error, Result};
use crate::image::{decode_image, RgbImage};
use crate::loss::{total_loss, GroundTruth, LossBreakdown, MultiboxConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Linear ramp from `base_lr / 10` to `base_lr`.
    pub warmup_steps: u64,
    /// Step at which the cosine decay reaches zero.
    pub cosine_horizon: u64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    pub loss: MultiboxConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 8,
            base_lr: 0.08,
            warmup_steps: 1000,
            cosine_horizon: 50_000,
            momentum: 0.9,
            max_grad_norm: 10.0,
            checkpoint_interval: 1000,
            log_interval: 100,
            seed: 0,
            loss: MultiboxConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base learning rate must be positive");
        }
        if self.cosine_horizon < self.steps || self.warmup_steps >= self.cosine_horizon {
            return bad("need warmup_steps < cosine_horizon and cosine_horizon >= steps");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return bad("log and checkpoint intervals must be positive");
        }
        Ok(())
    }
}

/// Learning rate used for the update that starts at `step`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps.max(cfg.cosine_horizon) {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond schedule end {}",
            cfg.steps.max(cfg.cosine_horizon)
        )));
    }
    let base = cfg.base_lr;
    if step < cfg.warmup_steps {
        let frac = step as f64 / cfg.warmup_steps as f64;
        return Ok(base * (0.1 + 0.9 * frac));
    }
    if step >= cfg.cosine_horizon {
        return Ok(0.0);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.cosine_horizon - cfg.warmup_steps) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub image: RgbImage,
    pub gt: GroundTruth,
}

impl TrainExample {
    /// Decodes a record's image, resizes it to `input_size` square and
    /// keeps the normalized boxes as ground truth.
    pub fn from_record(rec: &ExampleRecord, input_size: usize, num_classes: usize) -> Result<Self> {
        let image = decode_image(&rec.format, &rec.encoded)?;
        if image.width as i64 != rec.width || image.height as i64 != rec.height {
            return Err(Error::ValidationError(format!(
                "{}: record says {}x{}, image is {}x{}",
                rec.filename, rec.width, rec.height, image.width, image.height
            )));
        }
        Ok(TrainExample {
            image: image.resize(input_size, input_size),
            gt: rec.ground_truth(num_classes)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub step: u64,
    /// Mean wall-clock seconds per step since the previous event.
    pub per_step_time: f64,
    pub breakdown: LossBreakdown,
}

impl<T: Real> TinyNet<T> {
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape.clone(),
                values: p.tensor.values.iter().map(|&v| Into::<f64>::into(v) as f32).collect(),
            })
            .collect();
        Checkpoint::new(step, tensors)
    }

    /// Builds a network for `config` and overwrites its parameters from `ckpt`.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut net = TinyNet::new(config)?;
        for p in net.params.iter_mut() {
            let t = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape != p.tensor.shape {
                return Err(Error::ShapeError(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name, t.shape, p.tensor.shape
                )));
            }
            p.tensor.values = t.values.iter().map(|&v| T::from_f64(v as f64)).collect();
        }
        Ok(net)
    }
}

const MOMENTUM_PREFIX: &str = "momentum/";

pub struct Trainer {
    model: TinyNet<f32>,
    config: TrainConfig,
    velocity: Vec<Vec<f32>>,
    step: u64,
}

impl Trainer {
    pub fn new(model: TinyNet<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Ok(Trainer {
            model,
            config,
            velocity,
            step: 0,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(model_config: ModelConfig, config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let model = TinyNet::from_checkpoint(model_config, ckpt)?;
        let mut trainer = Trainer::new(model, config)?;
        for (p, v) in trainer.model.params.iter().zip(trainer.velocity.iter_mut()) {
            if let Some(t) = ckpt.get(&format!("{MOMENTUM_PREFIX}{}", p.name)) {
                if t.values.len() != v.len() {
                    return Err(Error::ShapeError(format!("momentum for {} has wrong size", p.name)));
                }
                v.copy_from_slice(&t.values);
            }
        }
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(self.step);
        for (p, v) in self.model.params.iter().zip(&self.velocity) {
            ckpt.tensors.push(NamedTensor {
                name: format!("{MOMENTUM_PREFIX}{}", p.name),
                shape: p.tensor.shape.clone(),
                values: v.clone(),
            });
        }
        ckpt
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &TinyNet<f32> {
        &self.model
    }

    pub fn into_model(self) -> TinyNet<f32> {
        self.model
    }

    fn batch_indices(&self, len: usize) -> Vec<usize> {
        let mix = (self.step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ mix);
        if self.config.batch_size <= len {
            sample(&mut rng, len, self.config.batch_size).into_vec()
        } else {
            (0..self.config.batch_size).map(|_| rng.random_range(0..len)).collect()
        }
    }

    /// Runs one update and returns the losses measured before it.
    pub fn train_step(&mut self, data: &[TrainExample]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let lr = lr_at(self.step, &self.config)?;
        let idx = self.batch_indices(data.len());
        let images: Vec<RgbImage> = idx.iter().map(|&i| data[i].image.clone()).collect();
        let gts: Vec<GroundTruth> = idx.iter().map(|&i| data[i].gt.clone()).collect();
        let step_no = self.step + 1;
        let (cls, loc, reg) = self
            .model
            .loss_and_gradients(&images, &gts, &self.config.loss)
            .map_err(|e| match e {
                Error::NonFiniteResult(m) => Error::NonFiniteResult(format!("step {step_no}: {m}")),
                other => other,
            })?;
        let breakdown = total_loss(cls, loc, reg, lr)
            .map_err(|e| Error::NonFiniteResult(format!("step {step_no}: {e}")))?;

        let mut norm_sq = 0.0f64;
        for p in &self.model.params {
            for &g in p.tensor.grad.as_ref().expect("backward ran") {
                norm_sq += (g as f64) * (g as f64);
            }
        }
        if !norm_sq.is_finite() {
            return Err(Error::NonFiniteResult(format!("step {step_no}: gradient")));
        }
        let norm = norm_sq.sqrt();
        let clip = if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
            (self.config.max_grad_norm / norm) as f32
        } else {
            1.0
        };
        let mu = self.config.momentum as f32;
        let lr32 = lr as f32;
        for (p, v) in self.model.params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.tensor.grad.take().expect("backward ran");
            for ((w, vel), gv) in p.tensor.values.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mu * *vel + clip * gv;
                *w -= lr32 * *vel;
            }
        }
        self.step = step_no;
        Ok(breakdown)
    }

    /// Trains until the configured step count, logging every
    /// `log_interval` steps (and at the last step) and checkpointing every
    /// `checkpoint_interval` steps (and at the end) when `checkpoint_dir` is set.
    pub fn run(
        &mut self,
        data: &[TrainExample],
        checkpoint_dir: Option<&Path>,
        sink: &mut dyn FnMut(&LogEvent),
    ) -> Result<Checkpoint> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let mut since = Instant::now();
        let mut steps_since = 0u64;
        while self.step < self.config.steps {
            let breakdown = self.train_step(data)?;
            steps_since += 1;
            let done = self.step == self.config.steps;
            if self.step.is_multiple_of(self.config.log_interval) || done {
                let per_step_time = since.elapsed().as_secs_f64() / steps_since as f64;
                sink(&LogEvent {
                    step: self.step,
                    per_step_time,
                    breakdown,
                });
                since = Instant::now();
                steps_since = 0;
            }
            if let Some(dir) = checkpoint_dir {
                if self.step.is_multiple_of(self.config.checkpoint_interval) || done {
                    super::save_checkpoint(&self.checkpoint(), dir)?;
                }
            }
        }
        Ok(self.checkpoint())
    }
}

/// Trains `model` from step 0 and returns the final checkpoint.
pub fn train(
    model: TinyNet<f32>,
    data: &[TrainExample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    sink: &mut dyn FnMut(&LogEvent),
) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.run(data, checkpoint_dir, sink)
}
