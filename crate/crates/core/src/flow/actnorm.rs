use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::{per_item_logdet, Bijector};

/// Standard deviations below this are treated as degenerate during
/// initialization.
const DEGENERATE_STD: f64 = 1e-6;

/// Per-channel affine map `y = s ⊙ x + b` with data-dependent initialization.
#[derive(Debug, Clone)]
pub struct ActNorm {
    name: String,
    scale: ParamId,
    bias: ParamId,
    initialized: bool,
}

impl ActNorm {
    /// Registers `{prefix}/scale` and `{prefix}/bias`. The layer refuses
    /// forward passes until [`ActNorm::initialize`] or
    /// [`ActNorm::mark_initialized`] is called.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: prefix.to_string(),
            scale: store.add(format!("{prefix}/scale"), Tensor::ones(&[channels]))?,
            bias: store.add(format!("{prefix}/bias"), Tensor::zeros(&[channels]))?,
            initialized: false,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Accept the current parameter values (e.g. loaded from a checkpoint, or
    /// the unit scale / zero bias defaults) as initialized.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn scale_id(&self) -> ParamId {
        self.scale
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Sets `s` and `b` so that `batch` maps to per-channel zero mean and unit
    /// variance. Channels with (near) zero spread use `s = 1/(std + 1e-6)`.
    pub fn initialize(&mut self, store: &mut ParamStore, batch: &Tensor) -> Result<()> {
        let c = store.value(self.scale).len();
        if batch.channels() != c || batch.rank() != 4 {
            return Err(Error::Shape {
                op: "actnorm_initialize",
                lhs: batch.shape().to_vec(),
                rhs: vec![c],
            });
        }
        if batch.batch() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{}: data-dependent init needs at least 2 samples, got {}",
                self.name,
                batch.batch()
            )));
        }
        let rows = batch.len() / c;
        let mut mean = vec![0.0; c];
        for (i, v) in batch.data().iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for (i, v) in batch.data().iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        let mut scale = vec![0.0; c];
        let mut bias = vec![0.0; c];
        for ch in 0..c {
            let std = (var[ch] / rows as f64).sqrt();
            scale[ch] = if std < DEGENERATE_STD {
                log::warn!("{}: channel {ch} has std {std:e}; adding epsilon", self.name);
                1.0 / (std + DEGENERATE_STD)
            } else {
                1.0 / std
            };
            bias[ch] = -mean[ch] * scale[ch];
        }
        *store.value_mut(self.scale) = Tensor::from_parts(vec![c], scale);
        *store.value_mut(self.bias) = Tensor::from_parts(vec![c], bias);
        self.initialized = true;
        Ok(())
    }

    fn check_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::Uninitialized(self.name.clone()))
        }
    }
}

impl Bijector for ActNorm {
    /// `logdet = h · w · Σ_c log|s_c|`, identical for every batch item.
    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_ready()?;
        let (b, h, w, _) = tape.value(x).dims4()?;
        let s = params.var(self.scale);
        let scaled = tape.mul_channel(x, s)?;
        let y = tape.add_channel(scaled, params.var(self.bias))?;
        let log_s = tape.log_abs(s)?;
        let sum = tape.sum_all(log_s)?;
        let logdet = per_item_logdet(tape, sum, h * w, b)?;
        Ok((y, logdet))
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        self.check_ready()?;
        let s = store.value(self.scale).data();
        let b = store.value(self.bias).data();
        let c = s.len();
        if y.channels() != c {
            return Err(Error::Shape {
                op: "actnorm_inverse",
                lhs: y.shape().to_vec(),
                rhs: vec![c],
            });
        }
        Ok(Tensor::from_fn(y.shape(), |i| (y.data()[i] - b[i % c]) / s[i % c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn channel_stats(t: &Tensor) -> Vec<(f64, f64)> {
        let c = t.channels();
        let n = (t.len() / c) as f64;
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = t.data().iter().skip(ch).step_by(c).cloned().collect();
                let m = vals.iter().sum::<f64>() / n;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn refuses_forward_before_init() {
        let mut store = ParamStore::new();
        let layer = ActNorm::new(&mut store, "an", 2).unwrap();
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            layer.forward_values(&store, &x),
            Err(Error::Uninitialized(_))
        ));
    }

    #[test]
    fn init_standardizes_batch() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::from_fn(&[8, 4, 4, 3], |i| 5.0 + 2.0 * rng.normal() + (i % 3) as f64);
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 3).unwrap();
        layer.initialize(&mut store, &x).unwrap();
        let (y, _) = layer.forward_values(&store, &x).unwrap();
        for (m, v) in channel_stats(&y) {
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn init_closed_form_mean5_std2() {
        // Two values per channel at mean ± std give exact population stats.
        let x = Tensor::new(&[2, 1, 1, 1], vec![3.0, 7.0]).unwrap();
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 1).unwrap();
        layer.initialize(&mut store, &x).unwrap();
        assert!((store.value(layer.scale).item() - 0.5).abs() < 1e-12);
        assert!((store.value(layer.bias).item() + 2.5).abs() < 1e-12);
    }

    #[test]
    fn init_constant_channel_is_finite() {
        let x = Tensor::full(&[4, 2, 2, 1], 0.25);
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 1).unwrap();
        layer.initialize(&mut store, &x).unwrap();
        assert!(store.value(layer.scale).item().is_finite());
        assert!(layer.initialize(&mut store, &Tensor::zeros(&[1, 2, 2, 1])).is_err());
    }

    #[test]
    fn logdet_closed_form() {
        let mut store = ParamStore::new();
        let mut layer = ActNorm::new(&mut store, "an", 2).unwrap();
        *store.value_mut(layer.scale) = Tensor::full(&[2], 2.0);
        layer.mark_initialized();
        let x = Tensor::ones(&[3, 4, 4, 2]);
        let (y, ld) = layer.forward_values(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        for l in ld {
            assert!((l - 16.0 * 2.0 * 2f64.ln()).abs() < 1e-12);
        }
    }
}
