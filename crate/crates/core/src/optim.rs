//! Adam and the warm-up + polynomial-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the gradients held in `store`.
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(bad) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", bad.name)));
        }
        if self.first.len() != store.len() {
            self.first = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `max_lr` over `warmup_steps`, then
/// `max_lr · ((total − step)/(total − warmup))^power`, floored at 0.
pub fn warmup_polynomial_lr(
    step: usize,
    warmup_steps: usize,
    max_lr: f64,
    total_steps: usize,
    power: f64,
) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
        )));
    }
    if step < warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    if step >= total_steps {
        return Ok(0.0);
    }
    let frac = (total_steps - step) as f64 / (total_steps - warmup_steps) as f64;
    Ok((max_lr * frac.powf(power)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(&[1.0, 1.0, 1.0]);
        for p in s.iter_mut() {
            p.grad = Tensor::new(&[3], vec![0.3, -2.0, 1e-3]).unwrap();
        }
        let mut adam = Adam::default();
        adam.step(&mut s, 0.01).unwrap();
        let v = s.iter().next().unwrap().value.data().to_vec();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] - 1.01).abs() < 1e-6);
        assert!((v[2] - 0.99).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[0.5, -0.5]);
        let before = s.clone();
        Adam::default().step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().value, before.iter().next().unwrap().value);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store_with(&[0.0]);
        for p in s.iter_mut() {
            p.grad = Tensor::new(&[1], vec![f64::INFINITY]).unwrap();
        }
        let err = Adam::default().step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.0]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut s = store_with(&[0.0]);
        let mut adam = Adam::default();
        for _ in 0..100 {
            s.zero_grad();
            let mut tape = Tape::new();
            let b = s.bind(&mut tape);
            let p = b.var(s.ids().next().unwrap());
            let d = tape.add_const(p, -3.0).unwrap();
            let sq = tape.square(d).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let g = tape.backward(loss).unwrap();
            s.accumulate(&g, &b);
            adam.step(&mut s, 0.1).unwrap();
        }
        let p = s.iter().next().unwrap().value.item();
        assert!((p - 3.0).abs() < 0.1, "p = {p}");
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(warmup_polynomial_lr(0, 10, 1e-3, 100, 1.0).unwrap(), 0.0);
        assert_eq!(warmup_polynomial_lr(10, 10, 1e-3, 100, 1.0).unwrap(), 1e-3);
        assert_eq!(warmup_polynomial_lr(100, 10, 1e-3, 100, 1.0).unwrap(), 0.0);
        assert_eq!(warmup_polynomial_lr(150, 10, 1e-3, 100, 2.0).unwrap(), 0.0);
        let mid = warmup_polynomial_lr(55, 10, 1e-3, 100, 2.0).unwrap();
        assert!((mid - 1e-3 * 0.25).abs() < 1e-15);
        assert!(warmup_polynomial_lr(0, 100, 1e-3, 100, 1.0).is_err());
    }
}
