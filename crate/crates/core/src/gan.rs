//! Conditional GAN pretraining with the non-saturating generator loss.

use condensegan_tensor::{grad, OptimizerState, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::models::{Discriminator, Generator, ModelWeights};
use crate::rng;

/// Logits are clamped to this magnitude before entering the losses.
pub const LOGIT_CLAMP: f64 = 30.0;

/// `−mean log σ(real) − mean log(1 − σ(fake))` on clamped logits.
pub fn d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = real_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?.neg()?.softplus()?.mean()?;
    let fake = fake_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?.softplus()?.mean()?;
    Ok(real.add(&fake)?)
}

/// Non-saturating generator loss `−mean log σ(fake)`.
pub fn g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?.neg()?.softplus()?.mean()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub d_z: usize,
    pub g_width: usize,
    pub d_width: usize,
    /// Checkpoint callback cadence in epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Latents used to fix the generator's normalization statistics.
    pub calibration_samples: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            epochs: 30,
            batch: 64,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            d_z: 64,
            g_width: 128,
            d_width: 64,
            checkpoint_every: 10,
            calibration_samples: 2000,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.d_z == 0 || self.g_width == 0 || self.d_width == 0 {
            return Err(CoreError::Config("GAN batch and widths must be positive".into()));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(CoreError::Config("GAN learning rates must be positive".into()));
        }
        if self.calibration_samples == 0 {
            return Err(CoreError::Config("gan.calibration_samples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanEpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

pub struct GanOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub history: Vec<GanEpochRecord>,
}

fn step(opt: &mut OptimizerState, w: &mut ModelWeights, loss: &Tensor, what: &str) -> Result<()> {
    let leaves = w.tensors();
    let refs: Vec<_> = leaves.iter().collect();
    let grads = grad(loss, &refs, false)?;
    let mut updated = leaves.clone();
    opt.step(&mut updated, &grads)
        .map_err(|e| CoreError::Numeric(format!("{what} update: {e}")))?;
    w.set_tensors(updated)
}

/// Alternating 1:1 discriminator/generator Adam steps over `train`. The
/// returned generator is calibrated. `on_checkpoint` sees the uncalibrated
/// networks every `checkpoint_every` epochs.
pub fn pretrain(
    train: &ImageSet,
    cfg: &GanTrainConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &Generator, &Discriminator) -> Result<()>,
) -> Result<GanOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoreError::Config("GAN pretraining needs a non-empty train split".into()));
    }
    let spec = train.spec;
    let mut gen = Generator::init(spec, cfg.d_z, cfg.g_width, rng::derive(seed, 1))?;
    let mut disc = Discriminator::init(spec, cfg.d_width, rng::derive(seed, 2))?;
    let mut gw = gen.weights.trainable();
    let mut dw = disc.weights.trainable();
    let mut opt_g = OptimizerState::adam_with(cfg.lr_g, cfg.beta1, cfg.beta2, 1e-8);
    let mut opt_d = OptimizerState::adam_with(cfg.lr_d, cfg.beta1, cfg.beta2, 1e-8);
    let mut order_rng = rng::stream(seed, 41);
    let mut z_rng = rng::stream(seed, 42);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut dl_sum, mut gl_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let n = chunk.len();
            let real = train.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let fake_labels: Vec<usize> = (0..n).map(|_| z_rng.gen_range(0..spec.classes)).collect();
            let z = Tensor::from_vec(rng::normal_vec(&mut z_rng, n * cfg.d_z), &[n, cfg.d_z])?;

            let fake = gen.generate_with(&gw, &z, &fake_labels)?.detach();
            let dl = d_loss(
                &disc.logits_with(&dw, &real, &labels)?,
                &disc.logits_with(&dw, &fake, &fake_labels)?,
            )?;
            step(&mut opt_d, &mut dw, &dl, "discriminator")?;

            let fake = gen.generate_with(&gw, &z, &fake_labels)?;
            let gl = g_loss(&disc.logits_with(&dw.detached(), &fake, &fake_labels)?)?;
            step(&mut opt_g, &mut gw, &gl, "generator")?;

            let (d, g) = (dl.item()?, gl.item()?);
            if !d.is_finite() || !g.is_finite() {
                return Err(CoreError::Numeric(format!("GAN loss diverged in epoch {}", epoch + 1)));
            }
            dl_sum += d;
            gl_sum += g;
            steps += 1;
        }
        history.push(GanEpochRecord {
            epoch: epoch + 1,
            d_loss: dl_sum / steps as f64,
            g_loss: gl_sum / steps as f64,
        });
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            gen.weights = gw.detached();
            disc.weights = dw.detached();
            on_checkpoint(epoch + 1, &gen, &disc)?;
        }
    }
    gen.weights = gw.detached();
    disc.weights = dw.detached();
    gen.calibrate(cfg.calibration_samples, rng::derive(seed, 3))?;
    Ok(GanOutcome {
        generator: gen,
        discriminator: disc,
        history,
    })
}
