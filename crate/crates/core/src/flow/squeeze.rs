use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::param::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::{zero_logdet, Bijector};

/// `B×s×s×c → B×s/2×s/2×4c`; see [`kernels::squeeze2`] for the sub-pixel order.
pub fn squeeze(x: &Tensor) -> Result<Tensor> {
    kernels::squeeze2(x)
}

pub fn unsqueeze(x: &Tensor) -> Result<Tensor> {
    kernels::unsqueeze2(x)
}

/// Splits channels into `(kept, emitted)`: the first half stays in the flow,
/// the second half leaves as a latent part.
pub fn factor_out(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = x.channels();
    if c % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "factor_out",
            detail: format!("channel count {c} is odd"),
        });
    }
    Ok((x.slice_channels(0, c / 2), x.slice_channels(c / 2, c)))
}

/// Inverse of [`factor_out`].
pub fn merge(kept: &Tensor, emitted: &Tensor) -> Result<Tensor> {
    Tensor::concat_channels(kept, emitted)
}

/// Squeeze as a layer. Volume preserving: its log-det is exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Squeeze;

impl Bijector for Squeeze {
    fn forward(&self, tape: &mut Tape, _params: &Bound, x: Var) -> Result<(Var, Var)> {
        let b = tape.value(x).batch();
        let y = tape.squeeze2(x)?;
        Ok((y, zero_logdet(tape, b)))
    }

    fn inverse(&self, _store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        unsqueeze(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn factor_out_and_merge_are_exact() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(&[2, 3, 3, 8], 1.0, &mut rng);
        let (k, e) = factor_out(&x).unwrap();
        assert_eq!(k.shape(), &[2, 3, 3, 4]);
        assert_eq!(e.shape(), &[2, 3, 3, 4]);
        assert_eq!(k.data()[..4], x.data()[..4]);
        assert_eq!(e.data()[..4], x.data()[4..8]);
        assert_eq!(merge(&k, &e).unwrap(), x);
        assert!(factor_out(&Tensor::zeros(&[1, 2, 2, 3])).is_err());
    }

    #[test]
    fn squeeze_preserves_multiset() {
        let mut rng = SeededRng::new(8);
        let x = Tensor::randn(&[2, 4, 6, 3], 1.0, &mut rng);
        let y = squeeze(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 12]);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(unsqueeze(&y).unwrap(), x);
        let (_, ld) = Squeeze.forward_values(&ParamStore::new(), &x).unwrap();
        assert_eq!(ld, vec![0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn squeeze_round_trips_any_even_shape(b in 1usize..3, h in 1usize..4, w in 1usize..4, c in 1usize..4, seed: u64) {
            let x = Tensor::randn(&[b, 2 * h, 2 * w, c], 1.0, &mut SeededRng::new(seed));
            let y = squeeze(&x).unwrap();
            proptest::prop_assert_eq!(y.shape(), &[b, h, w, 4 * c][..]);
            proptest::prop_assert_eq!(unsqueeze(&y).unwrap(), x);
        }
    }
}
