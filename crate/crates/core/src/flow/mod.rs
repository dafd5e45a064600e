//! Invertible layers and the multi-scale flow built from them.
//!
//! Every layer maps a BHWC tensor to one of the same size and reports the
//! per-item `log|det J|` of that map. Forward passes run on a [`Tape`] so the
//! negative log-likelihood can be differentiated; inverses operate on plain
//! tensors.

mod actnorm;
mod coupling;
mod invconv;
mod model;
mod squeeze;

pub use actnorm::ActNorm;
pub use coupling::{affine_forward, affine_inverse, AffineCoupling, CouplingNet, NetKind};
pub use invconv::{InvConv1x1, InvConvInit, MIN_ABS_DET};
pub use model::{AttentionPlacement, FlowConfig, FlowModel, LatentCode, FlowStep};
pub use squeeze::{factor_out, merge, squeeze, unsqueeze, Squeeze};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{Bound, ParamStore};
use crate::tensor::Tensor;

/// A bijection with a tractable log-determinant.
pub trait Bijector {
    /// Returns `(y, logdet)` where `logdet` has shape `[batch]`.
    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<(Var, Var)>;

    fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor>;

    /// Forward pass on plain tensors.
    fn forward_values(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (y, ld) = self.forward(&mut tape, &bound, xv)?;
        Ok((tape.value(y).clone(), tape.value(ld).data().to_vec()))
    }
}

/// A `[batch]` vector of zeros, the log-det of a volume-preserving map.
pub(crate) fn zero_logdet(tape: &mut Tape, batch: usize) -> Var {
    tape.constant(Tensor::zeros(&[batch]))
}

/// Broadcasts a scalar log-det term (scaled by `spatial`) over the batch.
pub(crate) fn per_item_logdet(tape: &mut Tape, scalar: Var, spatial: usize, batch: usize) -> Result<Var> {
    let scaled = tape.scale(scalar, spatial as f64)?;
    tape.broadcast_items(scaled, batch)
}
