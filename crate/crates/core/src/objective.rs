//! Dequantization, the negative log-likelihood objective, and the flow
//! training loop.
//!
//! Losses are reported in nats per item without the discretization constant
//! `c = −M·log a`, and in bits per dimension with it:
//! `bits_per_dim = (nll_nats + c) / (M · ln 2)`.

use std::f64::consts::LN_2;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::optim::{warmup_polynomial_lr, Adam};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Adds `u ~ U[0, a)` to discrete data so it admits a density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dequantizer {
    level: f64,
}

impl Dequantizer {
    pub fn new(level: f64) -> Result<Self> {
        if !(level > 0.0 && level.is_finite()) {
            return Err(Error::Config(format!(
                "discretization level must be positive and finite, got {level}"
            )));
        }
        Ok(Self { level })
    }

    /// 8-bit data scaled to `[0, 1)`: `a = 1/256`.
    pub fn eight_bit() -> Self {
        Self { level: 1.0 / 256.0 }
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// `c = −M · log a` for `M`-dimensional samples.
    pub fn constant(&self, dims: usize) -> f64 {
        -(dims as f64) * self.level.ln()
    }

    pub fn apply(&self, x: &Tensor, rng: &mut SeededRng) -> Tensor {
        let mut out = x.clone();
        for v in out.data_mut() {
            *v += rng.uniform(0.0, self.level);
        }
        out
    }

    /// Snaps continuous values back to the grid: `floor(v / a)·a`, clamped to
    /// `[0, 1 − a]`.
    pub fn quantize(&self, x: &Tensor) -> Tensor {
        let top = 1.0 - self.level;
        x.map(|v| ((v / self.level).floor() * self.level).clamp(0.0, top))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    /// Mean `−log p(x̃)` over the batch, in nats.
    pub nll_nats: f64,
    pub bits_per_dim: f64,
    /// Learning rate used for the update that followed this evaluation.
    pub lr: f64,
}

/// `(nll_nats + c) / (dims · ln 2)`.
pub fn bits_per_dim(nll_nats: f64, dims: usize, c: f64) -> f64 {
    (nll_nats + c) / (dims as f64 * LN_2)
}

/// Mean negative log-likelihood of an already-dequantized batch. The
/// dequantizer, if any, only supplies the constant for bits/dim.
pub fn nll_loss(model: &FlowModel, batch: &Tensor, dequantizer: Option<&Dequantizer>) -> Result<LossReport> {
    let lp = model.log_prob(batch)?;
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite("nll_loss".into()));
    }
    let m = model.dimension();
    let c = dequantizer.map_or(0.0, |d| d.constant(m));
    Ok(LossReport {
        step: 0,
        nll_nats: nll,
        bits_per_dim: bits_per_dim(nll, m, c),
        lr: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub max_lr: f64,
    pub lr_power: f64,
    pub seed: u64,
    pub gradient_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            warmup_steps: 500,
            max_lr: 1e-3,
            lr_power: 1.0,
            seed: 0,
            gradient_clip_norm: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.max_lr > 0.0 && self.lr_power > 0.0 && self.gradient_clip_norm > 0.0) {
            return Err(Error::Config("max_lr, lr_power and gradient_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// One entry per optimizer step.
    pub curve: Vec<LossReport>,
    /// Mean training NLL per epoch.
    pub epoch_nll: Vec<f64>,
}

/// Number of consecutive steps above the divergence threshold that aborts
/// training.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Upper bound on the batch used for ActNorm initialization.
const INIT_BATCH: usize = 256;

/// Trains `model` on `data` (`N×H×W×C`) by minimizing the mean NLL with Adam,
/// gradient-norm clipping and the warm-up/polynomial schedule.
///
/// Uninitialized ActNorm layers are initialized on a seeded subset of up to
/// 256 dequantized samples first. Epochs reshuffle with the run seed and
/// every batch gets fresh dequantization noise.
///
/// A warm-up longer than the whole run is shortened to a fifth of the total
/// step count. Training aborts with [`Error::Diverged`] after
/// [`DIVERGENCE_PATIENCE`] consecutive steps whose loss exceeds
/// `initial + 9·max(|initial|, 1)` (ten times the initial loss when that is
/// at least 1).
pub fn fit(
    model: &mut FlowModel,
    data: &Tensor,
    config: &TrainConfig,
    dequantizer: Option<&Dequantizer>,
) -> Result<TrainReport> {
    config.validate()?;
    let n = data.batch();
    if n == 0 || data.rank() != 4 {
        return Err(Error::InvalidArgument("training data must be a nonempty N×H×W×C tensor".into()));
    }
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    if !model.is_initialized() {
        let mut init_rng = rng.fork(0x1417);
        init_rng.shuffle(&mut order);
        let take = n.min(config.batch_size.max(INIT_BATCH));
        let mut batch = data.select(&order[..take]);
        if let Some(d) = dequantizer {
            batch = d.apply(&batch, &mut init_rng);
        }
        model.initialize(&batch)?;
    }

    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let warmup = if config.warmup_steps >= total {
        let w = total / 5;
        log::warn!("warmup of {} steps exceeds run of {total}; using {w}", config.warmup_steps);
        w
    } else {
        config.warmup_steps
    };
    let m = model.dimension();
    let c = dequantizer.map_or(0.0, |d| d.constant(m));
    let mut adam = Adam::default();
    let mut initial: Option<f64> = None;
    let mut above = 0usize;
    let mut step = 0usize;

    for _epoch in 0..config.epochs {
        order = (0..n).collect();
        rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = data.select(chunk);
            if let Some(d) = dequantizer {
                batch = d.apply(&batch, &mut rng);
            }
            let lr = warmup_polynomial_lr(step, warmup, config.max_lr, total, config.lr_power)?;

            let mut tape = Tape::new();
            let bound = model.store().bind(&mut tape);
            let x = tape.constant(batch);
            let lp = model.log_prob_tape(&mut tape, &bound, x)?;
            let mean = tape.mean_all(lp)?;
            let loss = tape.scale(mean, -1.0)?;
            let nll = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            store.accumulate(&grads, &bound);
            store.clip_grad_norm(config.gradient_clip_norm);
            adam.step(store, lr)?;

            let init = *initial.get_or_insert(nll);
            if nll > init + 9.0 * init.abs().max(1.0) {
                above += 1;
                if above >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged {
                        step,
                        loss: nll,
                        initial: init,
                    });
                }
            } else {
                above = 0;
            }
            epoch_sum += nll * chunk.len() as f64;
            report.curve.push(LossReport {
                step,
                nll_nats: nll,
                bits_per_dim: bits_per_dim(nll, m, c),
                lr,
            });
            step += 1;
        }
        report.epoch_nll.push(epoch_sum / n as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{AttentionPlacement, FlowConfig};

    #[test]
    fn zero_level_rejected() {
        assert!(Dequantizer::new(0.0).is_err());
        assert!(Dequantizer::new(-1.0).is_err());
    }

    #[test]
    fn dequantized_values_stay_in_cell() {
        let d = Dequantizer::new(0.25).unwrap();
        let mut rng = SeededRng::new(1);
        let x = Tensor::full(&[1000], 0.5);
        let y = d.apply(&x, &mut rng);
        assert!(y.data().iter().all(|&v| (0.5..0.75).contains(&v)));
        assert_eq!(d.quantize(&y), x);
    }

    #[test]
    fn dequantized_zero_mean_is_half_level() {
        let a = 1.0 / 256.0;
        let d = Dequantizer::new(a).unwrap();
        let mut rng = SeededRng::new(2);
        let n = 100_000;
        let y = d.apply(&Tensor::zeros(&[n]), &mut rng);
        let sigma = a / 12f64.sqrt() / (n as f64).sqrt();
        assert!((y.mean() - a / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn constant_is_linear_in_dimension() {
        let d = Dequantizer::eight_bit();
        assert_eq!(d.constant(2048), 2.0 * d.constant(1024));
        let bpd = bits_per_dim(10.0, 4, d.constant(4));
        assert!((bpd * 4.0 * LN_2 - 10.0 - d.constant(4)).abs() < 1e-12);
    }

    #[test]
    fn identity_model_on_gaussian_data_matches_entropy() {
        let cfg = FlowConfig {
            levels: 1,
            steps_per_level: 2,
            hidden: 8,
            attention: AttentionPlacement::None,
            invconv_init: crate::flow::InvConvInit::Identity,
            ..FlowConfig::default()
        };
        let mut model = FlowModel::new(cfg, [2, 2, 1]).unwrap();
        model.mark_initialized();
        let mut rng = SeededRng::new(3);
        let x = Tensor::randn(&[1024, 2, 2, 1], 1.0, &mut rng);
        let r = nll_loss(&model, &x, None).unwrap();
        let expect = 4.0 / 2.0 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((r.nll_nats - expect).abs() < 0.02 * expect, "{} vs {expect}", r.nll_nats);

        let mut perm: Vec<usize> = (0..1024).collect();
        rng.shuffle(&mut perm);
        let r2 = nll_loss(&model, &x.select(&perm), None).unwrap();
        assert!((r.nll_nats - r2.nll_nats).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_only_initializes() {
        let cfg = FlowConfig {
            levels: 1,
            steps_per_level: 1,
            hidden: 4,
            attention: AttentionPlacement::None,
            ..FlowConfig::default()
        };
        let mut model = FlowModel::new(cfg, [2, 2, 1]).unwrap();
        let fresh = model.store().clone();
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(&[16, 2, 2, 1], 1.0, &mut rng);
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &x, &tc, None).unwrap();
        assert!(report.curve.is_empty());
        assert!(model.is_initialized());
        for (a, b) in fresh.iter().zip(model.store().iter()) {
            if !a.name.contains("actnorm") {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }
}
