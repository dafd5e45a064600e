use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::Bijector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    /// 3×3 conv → ReLU → 1×1 conv → ReLU → layer norm → zero-init 3×3 conv.
    Conv,
    /// Multi-head self-attention → layer norm → 3×3 conv → ReLU → zero-init 3×3 conv.
    Attention,
}

/// The conditioner `NN()` of an affine coupling: maps the conditioning half
/// to raw scale and translation maps. Its last layer starts at zero.
#[derive(Debug, Clone)]
pub enum CouplingNet {
    Conv {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        ln_gain: ParamId,
        ln_bias: ParamId,
        w_out: ParamId,
        b_out: ParamId,
    },
    Attention {
        heads: usize,
        query: ParamId,
        key: ParamId,
        value: ParamId,
        output: ParamId,
        ln_gain: ParamId,
        ln_bias: ParamId,
        w1: ParamId,
        b1: ParamId,
        w_out: ParamId,
        b_out: ParamId,
    },
}

fn init_conv(k: usize, cin: usize, cout: usize, rng: &mut SeededRng) -> Tensor {
    let fan_in = (k * k * cin) as f64;
    Tensor::randn(&[k, k, cin, cout], (1.0 / fan_in).sqrt(), rng)
}

impl CouplingNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: NetKind,
        in_ch: usize,
        out_ch: usize,
        hidden: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}/{name}"), t);
        Ok(match kind {
            NetKind::Conv => CouplingNet::Conv {
                w1: add("conv1/weight", init_conv(3, in_ch, hidden, rng))?,
                b1: add("conv1/bias", Tensor::zeros(&[hidden]))?,
                w2: add("conv2/weight", init_conv(1, hidden, hidden, rng))?,
                b2: add("conv2/bias", Tensor::zeros(&[hidden]))?,
                ln_gain: add("norm/gain", Tensor::ones(&[hidden]))?,
                ln_bias: add("norm/bias", Tensor::zeros(&[hidden]))?,
                w_out: add("conv_out/weight", Tensor::zeros(&[3, 3, hidden, out_ch]))?,
                b_out: add("conv_out/bias", Tensor::zeros(&[out_ch]))?,
            },
            NetKind::Attention => {
                if heads == 0 || hidden % heads != 0 {
                    return Err(Error::Config(format!(
                        "{prefix}: hidden width {hidden} not divisible by {heads} heads"
                    )));
                }
                let std_in = (1.0 / in_ch as f64).sqrt();
                let std_h = (1.0 / hidden as f64).sqrt();
                CouplingNet::Attention {
                    heads,
                    query: add("attn/query", Tensor::randn(&[in_ch, hidden], std_in, rng))?,
                    key: add("attn/key", Tensor::randn(&[in_ch, hidden], std_in, rng))?,
                    value: add("attn/value", Tensor::randn(&[in_ch, hidden], std_in, rng))?,
                    output: add("attn/output", Tensor::randn(&[hidden, hidden], std_h, rng))?,
                    ln_gain: add("norm/gain", Tensor::ones(&[hidden]))?,
                    ln_bias: add("norm/bias", Tensor::zeros(&[hidden]))?,
                    w1: add("conv1/weight", init_conv(3, hidden, hidden, rng))?,
                    b1: add("conv1/bias", Tensor::zeros(&[hidden]))?,
                    w_out: add("conv_out/weight", Tensor::zeros(&[3, 3, hidden, out_ch]))?,
                    b_out: add("conv_out/bias", Tensor::zeros(&[out_ch]))?,
                }
            }
        })
    }

    pub fn kind(&self) -> NetKind {
        match self {
            CouplingNet::Conv { .. } => NetKind::Conv,
            CouplingNet::Attention { .. } => NetKind::Attention,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match *self {
            CouplingNet::Conv {
                w1,
                b1,
                w2,
                b2,
                ln_gain,
                ln_bias,
                w_out,
                b_out,
            } => {
                let h = tape.conv2d(x, p.var(w1))?;
                let h = tape.add_channel(h, p.var(b1))?;
                let h = tape.relu(h)?;
                let h = tape.conv2d(h, p.var(w2))?;
                let h = tape.add_channel(h, p.var(b2))?;
                let h = tape.relu(h)?;
                let h = tape.layer_norm(h, p.var(ln_gain), p.var(ln_bias))?;
                let h = tape.conv2d(h, p.var(w_out))?;
                tape.add_channel(h, p.var(b_out))
            }
            CouplingNet::Attention {
                heads,
                query,
                key,
                value,
                output,
                ln_gain,
                ln_bias,
                w1,
                b1,
                w_out,
                b_out,
            } => {
                let (b, hh, ww, c) = tape.value(x).dims4()?;
                let seq = tape.reshape(x, &[b, hh * ww, c])?;
                let weights = [p.var(query), p.var(key), p.var(value), p.var(output)];
                let a = tape.attention(seq, weights, heads)?;
                let width = tape.shape(a)[2];
                let a = tape.reshape(a, &[b, hh, ww, width])?;
                let h = tape.layer_norm(a, p.var(ln_gain), p.var(ln_bias))?;
                let h = tape.conv2d(h, p.var(w1))?;
                let h = tape.add_channel(h, p.var(b1))?;
                let h = tape.relu(h)?;
                let h = tape.conv2d(h, p.var(w_out))?;
                tape.add_channel(h, p.var(b_out))
            }
        }
    }
}

/// `y₂ = x₂ ⊙ exp(s) + t`, with `logdet = Σ s` per batch item.
pub fn affine_forward(tape: &mut Tape, x2: Var, s: Var, t: Var) -> Result<(Var, Var)> {
    let es = tape.exp(s)?;
    let scaled = tape.mul(x2, es)?;
    let y2 = tape.add(scaled, t)?;
    let logdet = tape.sum_per_item(s)?;
    Ok((y2, logdet))
}

/// `x₂ = (y₂ − t) ⊙ exp(−s)`.
pub fn affine_inverse(y2: &Tensor, s: &Tensor, t: &Tensor) -> Result<Tensor> {
    y2.expect_same_shape(s, "affine_inverse")?;
    y2.expect_same_shape(t, "affine_inverse")?;
    Ok(Tensor::from_fn(y2.shape(), |i| {
        (y2.data()[i] - t.data()[i]) * (-s.data()[i]).exp()
    }))
}

/// Affine coupling along the channel axis. The first `D/2` channels pass
/// through and condition the scale and shift applied to the remaining ones.
///
/// The conditioner's raw scale `r` is squashed to `s = log σ(r + 2) − log σ(2)`,
/// so `exp(s) ∈ (0, 1/σ(2))` and a zero conditioner output gives `s = 0`.
#[derive(Debug, Clone)]
pub struct AffineCoupling {
    name: String,
    channels: usize,
    net: CouplingNet,
}

impl AffineCoupling {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        kind: NetKind,
        hidden: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "affine_coupling",
                detail: format!("{prefix}: needs an even channel count, got {channels}"),
            });
        }
        let d = channels / 2;
        let net = CouplingNet::new(store, &format!("{prefix}/net"), kind, d, 2 * (channels - d), hidden, heads, rng)?;
        Ok(Self {
            name: prefix.to_string(),
            channels,
            net,
        })
    }

    pub fn split(&self) -> usize {
        self.channels / 2
    }

    pub fn net(&self) -> &CouplingNet {
        &self.net
    }

    /// `(s, t)` for a conditioning half, on the tape.
    fn scale_shift(&self, tape: &mut Tape, p: &Bound, x1: Var) -> Result<(Var, Var)> {
        let rest = self.channels - self.split();
        let wrap = |e: Error| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{}/net ({op})", self.name)),
            e => e,
        };
        let h = self.net.forward(tape, p, x1).map_err(wrap)?;
        let raw = tape.slice_channels(h, 0, rest)?;
        let t = tape.slice_channels(h, rest, 2 * rest)?;
        let s = tape.stable_log_scale(raw).map_err(wrap)?;
        Ok((s, t))
    }

    fn check_channels(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::Shape {
                op: "affine_coupling",
                lhs: shape.to_vec(),
                rhs: vec![self.channels],
            });
        }
        Ok(())
    }
}

impl Bijector for AffineCoupling {
    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<(Var, Var)> {
        self.check_channels(tape.shape(x))?;
        let d = self.split();
        let x1 = tape.slice_channels(x, 0, d)?;
        let x2 = tape.slice_channels(x, d, self.channels)?;
        let (s, t) = self.scale_shift(tape, params, x1)?;
        let (y2, logdet) = affine_forward(tape, x2, s, t)?;
        let y = tape.concat_channels(x1, y2)?;
        Ok((y, logdet))
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        self.check_channels(y.shape())?;
        let d = self.split();
        let y1 = y.slice_channels(0, d);
        let y2 = y.slice_channels(d, self.channels);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let y1v = tape.constant(y1.clone());
        let (s, t) = self.scale_shift(&mut tape, &bound, y1v)?;
        let x2 = affine_inverse(&y2, tape.value(s), tape.value(t))?;
        Tensor::concat_channels(&y1, &x2)
    }
}
