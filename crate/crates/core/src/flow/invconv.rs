use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::{per_item_logdet, Bijector};

/// Forward and inverse passes fail when `|det W|` drops to this value or below.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvConvInit {
    /// Haar-random rotation (det = +1).
    Rotation,
    Identity,
}

/// Learned channel mixing `y = W x` at every spatial position, with a dense
/// `c×c` weight.
#[derive(Debug, Clone)]
pub struct InvConv1x1 {
    name: String,
    weight: ParamId,
}

/// QR of a Gaussian matrix with the signs of `diag(R)` folded into `Q`, then a
/// column flip if needed so that `det Q = +1`.
pub fn random_rotation(n: usize, rng: &mut SeededRng) -> Tensor {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Tensor::from_fn(&[n, n], |k| q[(k / n, k % n)])
}

impl InvConv1x1 {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        init: InvConvInit,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = match init {
            InvConvInit::Rotation => random_rotation(channels, rng),
            InvConvInit::Identity => {
                Tensor::from_fn(&[channels, channels], |k| if k / channels == k % channels { 1.0 } else { 0.0 })
            }
        };
        Ok(Self {
            name: prefix.to_string(),
            weight: store.add(format!("{prefix}/weight"), w)?,
        })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }
}

impl Bijector for InvConv1x1 {
    /// `logdet = h · w · log|det W|`.
    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<(Var, Var)> {
        let (b, h, w, _) = tape.value(x).dims4()?;
        let wv = params.var(self.weight);
        let lad = tape.log_abs_det(wv, MIN_ABS_DET, &self.name)?;
        let y = tape.channel_mix(x, wv)?;
        let logdet = per_item_logdet(tape, lad, h * w, b)?;
        Ok((y, logdet))
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let wt = store.value(self.weight);
        let n = wt.shape()[0];
        let m = DMatrix::from_row_slice(n, n, wt.data());
        let lu = m.lu();
        let det = lu.determinant();
        if !(det.abs() > MIN_ABS_DET) {
            return Err(Error::Singular {
                layer: self.name.clone(),
                det,
            });
        }
        let inv = lu.try_inverse().ok_or_else(|| Error::Singular {
            layer: self.name.clone(),
            det,
        })?;
        let inv = Tensor::from_fn(&[n, n], |k| inv[(k / n, k % n)]);
        kernels::channel_mix(y, &inv)
    }
}
