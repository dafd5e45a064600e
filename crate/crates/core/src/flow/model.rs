use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::{factor_out, merge, unsqueeze, ActNorm, AffineCoupling, Bijector, InvConv1x1, InvConvInit, NetKind};

/// Which scale levels use the attention conditioner in their couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPlacement {
    None,
    LastLevel,
    LastTwoLevels,
}

impl AttentionPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionPlacement::None => "none",
            AttentionPlacement::LastLevel => "last",
            AttentionPlacement::LastTwoLevels => "last_two",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "last" => Ok(Self::LastLevel),
            "last_two" => Ok(Self::LastTwoLevels),
            _ => Err(Error::Config(format!("unknown attention placement {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Number of scale levels.
    pub levels: usize,
    pub steps_per_level: usize,
    /// Hidden width of coupling conditioners.
    pub hidden: usize,
    /// Attention heads in attention conditioners.
    pub heads: usize,
    /// Squeeze at the start of each level. Disable for inputs with 1×1
    /// spatial extent.
    pub squeeze: bool,
    pub attention: AttentionPlacement,
    pub invconv_init: InvConvInit,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            steps_per_level: 4,
            hidden: 16,
            heads: 4,
            squeeze: true,
            attention: AttentionPlacement::LastLevel,
            invconv_init: InvConvInit::Rotation,
            seed: 0,
        }
    }
}

impl FlowConfig {
    /// Coupling conditioner used at `level`.
    pub fn net_kind(&self, level: usize) -> NetKind {
        let last = self.levels - 1;
        let attn = match self.attention {
            AttentionPlacement::None => false,
            AttentionPlacement::LastLevel => level == last,
            AttentionPlacement::LastTwoLevels => level + 1 >= last,
        };
        if attn {
            NetKind::Attention
        } else {
            NetKind::Conv
        }
    }
}

/// ActNorm → invertible 1×1 convolution → affine coupling.
#[derive(Debug, Clone)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1,
    pub coupling: AffineCoupling,
}

impl Bijector for FlowStep {
    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<(Var, Var)> {
        let (h, ld1) = self.actnorm.forward(tape, params, x)?;
        let (h, ld2) = self.invconv.forward(tape, params, h)?;
        let (y, ld3) = self.coupling.forward(tape, params, h)?;
        let ld = tape.add(ld1, ld2)?;
        let ld = tape.add(ld, ld3)?;
        Ok((y, ld))
    }

    fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let h = self.coupling.inverse(store, y)?;
        let h = self.invconv.inverse(store, &h)?;
        self.actnorm.inverse(store, &h)
    }
}

#[derive(Debug, Clone)]
struct Level {
    steps: Vec<FlowStep>,
    factor_out: bool,
}

/// Latent representation of a batch: one tensor per factor-out point, then
/// the output of the last level.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub parts: Vec<Tensor>,
}

impl LatentCode {
    pub fn batch(&self) -> usize {
        self.parts.first().map_or(0, |p| p.batch())
    }

    /// Elements per batch item across all parts.
    pub fn item_len(&self) -> usize {
        self.parts.iter().map(|p| p.item_len()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.parts.iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn item(&self, i: usize) -> LatentCode {
        LatentCode {
            parts: self.parts.iter().map(|p| p.item_at(i)).collect(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> LatentCode {
        LatentCode {
            parts: self.parts.iter().map(|p| p.select(indices)).collect(),
        }
    }

    /// Concatenates codes along the batch axis.
    pub fn stack(codes: &[LatentCode]) -> Result<LatentCode> {
        let n = codes.first().map_or(0, |c| c.parts.len());
        let parts = (0..n)
            .map(|k| Tensor::stack(&codes.iter().map(|c| c.parts[k].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentCode { parts })
    }

    /// All elements of item `i` concatenated in part order.
    pub fn flat_item(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.item_len());
        for p in &self.parts {
            let m = p.item_len();
            out.extend_from_slice(&p.data()[i * m..(i + 1) * m]);
        }
        out
    }
}

/// Multi-scale flow. Each level squeezes (when enabled), applies
/// `steps_per_level` flow steps, and (except the last level) factors out half
/// of its channels as a latent part scored against a unit Gaussian.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    input_shape: [usize; 3],
    store: ParamStore,
    levels: Vec<Level>,
}

fn gaussian_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * (2.0 * PI).ln() * z.len() as f64
}

impl FlowModel {
    /// Builds a model for `[height, width, channels]` inputs.
    pub fn new(config: FlowConfig, input_shape: [usize; 3]) -> Result<Self> {
        if config.levels == 0 || config.steps_per_level == 0 || config.hidden == 0 {
            return Err(Error::Config("levels, steps_per_level and hidden must be positive".into()));
        }
        let [h, w, c] = input_shape;
        if config.squeeze {
            let div = 1usize << config.levels;
            if h % div != 0 || w % div != 0 {
                return Err(Error::InvalidShape {
                    op: "FlowModel::new",
                    detail: format!(
                        "input {h}×{w} must have spatial dims divisible by 2^{} = {div}",
                        config.levels
                    ),
                });
            }
        }
        let mut rng = SeededRng::new(config.seed);
        let mut store = ParamStore::new();
        let mut levels = Vec::with_capacity(config.levels);
        let mut ch = c;
        for l in 0..config.levels {
            if config.squeeze {
                ch *= 4;
            }
            let last = l + 1 == config.levels;
            if ch % 2 != 0 {
                return Err(Error::InvalidShape {
                    op: "FlowModel::new",
                    detail: format!("level {l} has odd channel count {ch}; couplings need even"),
                });
            }
            let kind = config.net_kind(l);
            let steps = (0..config.steps_per_level)
                .map(|s| {
                    let p = format!("level{l}/step{s}");
                    Ok(FlowStep {
                        actnorm: ActNorm::new(&mut store, &format!("{p}/actnorm"), ch)?,
                        invconv: InvConv1x1::new(&mut store, &format!("{p}/invconv"), ch, config.invconv_init, &mut rng)?,
                        coupling: AffineCoupling::new(
                            &mut store,
                            &format!("{p}/coupling"),
                            ch,
                            kind,
                            config.hidden,
                            config.heads,
                            &mut rng,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(Level {
                steps,
                factor_out: !last,
            });
            if !last {
                ch /= 2;
            }
        }
        Ok(Self {
            config,
            input_shape,
            store,
            levels,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Elements per input item.
    pub fn dimension(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep> {
        self.levels.iter().flat_map(|l| l.steps.iter())
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.is_initialized())
    }

    /// Treats every ActNorm's current parameters as initialized.
    pub fn mark_initialized(&mut self) {
        for l in &mut self.levels {
            for s in &mut l.steps {
                s.actnorm.mark_initialized();
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape[..] {
            return Err(Error::Shape {
                op: "FlowModel",
                lhs: shape.to_vec(),
                rhs: self.input_shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Data-dependent ActNorm initialization: walks `batch` through the flow,
    /// initializing each ActNorm on the activations that reach it.
    pub fn initialize(&mut self, batch: &Tensor) -> Result<()> {
        self.check_input(batch.shape())?;
        let mut h = batch.clone();
        for li in 0..self.levels.len() {
            if self.config.squeeze {
                h = super::squeeze(&h)?;
            }
            for si in 0..self.levels[li].steps.len() {
                let (levels, store) = (&mut self.levels, &mut self.store);
                levels[li].steps[si].actnorm.initialize(store, &h)?;
                h = levels[li].steps[si].forward_values(store, &h)?.0;
            }
            if self.levels[li].factor_out {
                h = factor_out(&h)?.0;
            }
        }
        Ok(())
    }

    /// Forward pass on a tape: latent parts and the per-item total log-det.
    pub fn forward_tape(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<(Vec<Var>, Var)> {
        self.check_input(tape.shape(x))?;
        let batch = tape.shape(x)[0];
        let mut logdet = super::zero_logdet(tape, batch);
        let mut parts = Vec::with_capacity(self.levels.len());
        let mut h = x;
        for level in &self.levels {
            if self.config.squeeze {
                h = tape.squeeze2(h)?;
            }
            for step in &level.steps {
                let (y, ld) = step.forward(tape, params, h)?;
                logdet = tape.add(logdet, ld)?;
                h = y;
            }
            if level.factor_out {
                let c = tape.value(h).channels();
                let emitted = tape.slice_channels(h, c / 2, c)?;
                h = tape.slice_channels(h, 0, c / 2)?;
                parts.push(emitted);
            }
        }
        parts.push(h);
        Ok((parts, logdet))
    }

    /// Per-item `log p(x)` on a tape: unit-Gaussian density of every latent
    /// part plus the total log-det.
    pub fn log_prob_tape(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let (parts, logdet) = self.forward_tape(tape, params, x)?;
        let mut total = logdet;
        for z in parts {
            let m = tape.value(z).item_len() as f64;
            let sq = tape.square(z)?;
            let s = tape.sum_per_item(sq)?;
            let s = tape.scale(s, -0.5)?;
            let lp = tape.add_const(s, -0.5 * (2.0 * PI).ln() * m)?;
            total = tape.add(total, lp)?;
        }
        Ok(total)
    }

    /// Encodes `x` and returns the per-item total log-det.
    pub fn forward(&self, x: &Tensor) -> Result<(LatentCode, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (parts, ld) = self.forward_tape(&mut tape, &bound, xv)?;
        Ok((
            LatentCode {
                parts: parts.into_iter().map(|p| tape.value(p).clone()).collect(),
            },
            tape.value(ld).data().to_vec(),
        ))
    }

    /// Exact inverse of [`FlowModel::forward`].
    pub fn inverse(&self, latent: &LatentCode) -> Result<Tensor> {
        let expected = self.latent_shapes(latent.batch());
        if latent.shapes() != expected {
            return Err(Error::InvalidShape {
                op: "FlowModel::inverse",
                detail: format!("latent shapes {:?}, model expects {:?}", latent.shapes(), expected),
            });
        }
        let mut h = latent.parts.last().cloned().expect("at least one part");
        let mut emitted = latent.parts[..latent.parts.len() - 1].iter().rev();
        for level in self.levels.iter().rev() {
            if level.factor_out {
                h = merge(&h, emitted.next().expect("part per factor-out"))?;
            }
            for step in level.steps.iter().rev() {
                h = step.inverse(&self.store, &h)?;
            }
            if self.config.squeeze {
                h = unsqueeze(&h)?;
            }
        }
        Ok(h)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, ld) = self.forward(x)?;
        Ok((0..x.batch())
            .map(|i| ld[i] + gaussian_log_density(&z.flat_item(i)))
            .collect())
    }

    /// Shapes of the latent parts for a batch of `batch` inputs.
    pub fn latent_shapes(&self, batch: usize) -> Vec<Vec<usize>> {
        let [mut h, mut w, mut c] = self.input_shape;
        let mut shapes = Vec::new();
        for level in &self.levels {
            if self.config.squeeze {
                h /= 2;
                w /= 2;
                c *= 4;
            }
            if level.factor_out {
                c /= 2;
                shapes.push(vec![batch, h, w, c]);
            }
        }
        shapes.push(vec![batch, h, w, c]);
        shapes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(levels: usize, attention: AttentionPlacement) -> FlowConfig {
        FlowConfig {
            levels,
            steps_per_level: 2,
            hidden: 8,
            attention,
            ..FlowConfig::default()
        }
    }

    #[test]
    fn latent_size_matches_input() {
        let model = FlowModel::new(FlowConfig::default(), [32, 32, 1]).unwrap();
        let shapes = model.latent_shapes(1);
        assert_eq!(shapes, vec![vec![1, 16, 16, 2], vec![1, 8, 8, 4], vec![1, 4, 4, 16]]);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(total, 32 * 32);
    }

    #[test]
    fn indivisible_input_names_requirement() {
        let err = FlowModel::new(small(3, AttentionPlacement::LastLevel), [12, 12, 1]).unwrap_err();
        assert!(err.to_string().contains("divisible by 2^3"), "{err}");
    }

    #[test]
    fn uninitialized_model_refuses_forward() {
        let model = FlowModel::new(small(2, AttentionPlacement::LastLevel), [8, 8, 1]).unwrap();
        assert!(!model.is_initialized());
        assert!(model.forward(&Tensor::zeros(&[1, 8, 8, 1])).is_err());
    }

    #[test]
    fn attention_placement() {
        let cfg = small(3, AttentionPlacement::LastLevel);
        assert_eq!(cfg.net_kind(0), NetKind::Conv);
        assert_eq!(cfg.net_kind(1), NetKind::Conv);
        assert_eq!(cfg.net_kind(2), NetKind::Attention);
        let cfg = small(3, AttentionPlacement::LastTwoLevels);
        assert_eq!(cfg.net_kind(1), NetKind::Attention);
        assert_eq!(cfg.net_kind(0), NetKind::Conv);
    }

    #[test]
    fn round_trip_after_init() {
        let mut rng = SeededRng::new(12);
        let mut model = FlowModel::new(small(2, AttentionPlacement::LastLevel), [8, 8, 2]).unwrap();
        let x = Tensor::randn(&[4, 8, 8, 2], 1.0, &mut rng);
        model.initialize(&x).unwrap();
        model.store_mut().jitter(&mut rng, 0.05, |_| true);
        let (z, _) = model.forward(&x).unwrap();
        assert_eq!(z.item_len(), 128);
        let back = model.inverse(&z).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);
    }
}
