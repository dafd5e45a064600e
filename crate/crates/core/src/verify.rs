//! Numerical self-checks of the flow: exact invertibility, log-determinants
//! against dense Jacobians, gradients against finite differences, density
//! normalization, identity at initialization and ActNorm standardization.
//!
//! Every check reports the measured quantity next to its pinned tolerance so
//! callers can print or assert on it.

use nalgebra::DMatrix;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::flow::{
    factor_out, merge, ActNorm, AffineCoupling, AttentionPlacement, Bijector, FlowConfig, FlowModel,
    InvConv1x1, InvConvInit, NetKind, Squeeze,
};
use crate::objective::{fit, TrainConfig, TrainReport};
use crate::param::ParamStore;
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;
use crate::toy::two_moons;

pub const ROUND_TRIP_TOL: f64 = 1e-6;
pub const TRAINED_ROUND_TRIP_TOL: f64 = 1e-5;
pub const LOGDET_TOL: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor for relative gradient errors, so entries whose true
/// value is essentially zero are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const NORMALIZATION_TOL: f64 = 0.01;
pub const ACTNORM_MEAN_TOL: f64 = 1e-6;
pub const ACTNORM_VAR_RANGE: (f64, f64) = (0.99, 1.01);
pub const TOY_GAIN_NATS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against the tolerance.
    pub value: f64,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            detail: detail.into(),
        }
    }

    fn at_most(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self::new(name, value < tol, value, format!("{value:.3e} < {tol:e}"))
    }
}

/// A layer with its parameters, behind the common interface.
struct Layer {
    store: ParamStore,
    bijector: Box<dyn Bijector>,
}

const LAYER_KINDS: [&str; 5] = ["actnorm", "invconv", "coupling_conv", "coupling_attention", "squeeze"];

/// A randomly parameterized layer of `kind` acting on `channels` channels.
/// Couplings get their zero-initialized output weights perturbed so they are
/// not the identity.
fn random_layer(kind: &str, channels: usize, rng: &mut SeededRng) -> Result<Layer> {
    let mut store = ParamStore::new();
    let bijector: Box<dyn Bijector> = match kind {
        "actnorm" => {
            let mut a = ActNorm::new(&mut store, "actnorm", channels)?;
            for v in store.value_mut(a.scale_id()).data_mut() {
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                *v = sign * rng.uniform(0.5, 2.0);
            }
            for v in store.value_mut(a.bias_id()).data_mut() {
                *v = rng.normal();
            }
            a.mark_initialized();
            Box::new(a)
        }
        "invconv" => {
            let l = InvConv1x1::new(&mut store, "invconv", channels, InvConvInit::Rotation, rng)?;
            store.jitter(rng, 0.3, |_| true);
            Box::new(l)
        }
        "coupling_conv" | "coupling_attention" => {
            let net = if kind == "coupling_conv" { NetKind::Conv } else { NetKind::Attention };
            let l = AffineCoupling::new(&mut store, "coupling", channels, net, 8, 2, rng)?;
            store.jitter(rng, 0.1, |_| true);
            Box::new(l)
        }
        "squeeze" => Box::new(Squeeze),
        _ => unreachable!("unknown layer kind {kind}"),
    };
    Ok(Layer { store, bijector })
}

fn model_config(levels: usize, steps: usize, seed: u64) -> FlowConfig {
    FlowConfig {
        levels,
        steps_per_level: steps,
        hidden: 8,
        heads: 2,
        attention: AttentionPlacement::LastLevel,
        seed,
        ..FlowConfig::default()
    }
}

/// A 2-level, 4-step model on `8×8×4` inputs, data-initialized and with every
/// parameter perturbed.
fn random_model(seed: u64) -> Result<FlowModel> {
    let mut rng = SeededRng::new(seed);
    let mut m = FlowModel::new(model_config(2, 4, seed), [8, 8, 4])?;
    m.initialize(&Tensor::randn(&[16, 8, 8, 4], 1.0, &mut rng))?;
    m.store_mut().jitter(&mut rng, 0.05, |_| true);
    Ok(m)
}

/// Smooth, correlated `8×8×4` images for the trained-model round trip.
fn structured_images(n: usize, rng: &mut SeededRng) -> Tensor {
    let mut out = Vec::with_capacity(n * 256);
    for _ in 0..n {
        let (a, b, phase) = (rng.normal(), rng.normal(), rng.uniform(0.0, 6.3));
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..4 {
                    let base = a * ((x as f64 + phase) * 0.7).sin() + b * ((y + c) as f64 * 0.5).cos();
                    out.push(base + 0.1 * rng.normal());
                }
            }
        }
    }
    Tensor::from_parts(vec![n, 8, 8, 4], out)
}

/// Worst `|x − f⁻¹(f(x))|` over `trials` random layers and `1×8×8×4` inputs,
/// per layer kind, plus factor-out, a random full model and a briefly trained
/// one.
pub fn round_trip_suite(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (k, kind) in LAYER_KINDS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for t in 0..trials {
            let mut rng = SeededRng::new(derive_seed(seed, (k * 10_000 + t) as u64));
            let layer = random_layer(kind, 4, &mut rng)?;
            let x = Tensor::randn(&[1, 8, 8, 4], 1.0, &mut rng);
            let (y, _) = layer.bijector.forward_values(&layer.store, &x)?;
            worst = worst.max(layer.bijector.inverse(&layer.store, &y)?.max_abs_diff(&x));
        }
        checks.push(Check::at_most(format!("round_trip/{kind}"), worst, ROUND_TRIP_TOL));
    }

    let mut worst: f64 = 0.0;
    let mut rng = SeededRng::new(derive_seed(seed, 50_000));
    for _ in 0..trials {
        let x = Tensor::randn(&[1, 8, 8, 4], 1.0, &mut rng);
        let (kept, emitted) = factor_out(&x)?;
        worst = worst.max(merge(&kept, &emitted)?.max_abs_diff(&x));
    }
    checks.push(Check::at_most("round_trip/factor_out", worst, ROUND_TRIP_TOL));

    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let m = random_model(derive_seed(seed, 60_000 + t as u64))?;
        let x = Tensor::randn(&[1, 8, 8, 4], 1.0, &mut SeededRng::new(derive_seed(seed, 70_000 + t as u64)));
        worst = worst.max(m.inverse(&m.forward(&x)?.0)?.max_abs_diff(&x));
    }
    checks.push(Check::at_most("round_trip/model", worst, ROUND_TRIP_TOL));

    let mut rng = SeededRng::new(derive_seed(seed, 80_000));
    let mut m = FlowModel::new(model_config(2, 4, seed), [8, 8, 4])?;
    let data = structured_images(64, &mut rng);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        warmup_steps: 4,
        max_lr: 2e-3,
        seed,
        ..TrainConfig::default()
    };
    fit(&mut m, &data, &cfg, None)?;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = structured_images(1, &mut rng);
        worst = worst.max(m.inverse(&m.forward(&x)?.0)?.max_abs_diff(&x));
    }
    checks.push(Check::at_most("round_trip/trained_model", worst, TRAINED_ROUND_TRIP_TOL));
    Ok(checks)
}

/// `log|det J|` of `f` at `x` from central differences, via LU.
fn numeric_logdet(x: &Tensor, f: impl Fn(&Tensor) -> Result<Vec<f64>>) -> Result<f64> {
    const H: f64 = 1e-5;
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[j] += H;
        let mut xm = x.clone();
        xm.data_mut()[j] -= H;
        let (fp, fm) = (f(&xp)?, f(&xm)?);
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * H);
        }
    }
    let lu = jac.lu();
    Ok(lu.u().diagonal().iter().map(|d| d.abs().ln()).sum())
}

/// Analytic log-det against the dense finite-difference Jacobian for every
/// layer kind on `1×4×4×4` inputs and a 1-level model on `8×8×1`.
pub fn logdet_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (k, kind) in LAYER_KINDS.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed(seed, 100 + k as u64));
        let layer = random_layer(kind, 4, &mut rng)?;
        let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let analytic = layer.bijector.forward_values(&layer.store, &x)?.1[0];
        let numeric = numeric_logdet(&x, |v| Ok(layer.bijector.forward_values(&layer.store, v)?.0.into_data()))?;
        checks.push(Check::at_most(format!("logdet/{kind}"), (analytic - numeric).abs(), LOGDET_TOL));
    }

    let mut rng = SeededRng::new(derive_seed(seed, 200));
    let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
    let numeric = numeric_logdet(&x, |v| {
        let (a, b) = factor_out(v)?;
        Ok(a.data().iter().chain(b.data()).copied().collect())
    })?;
    checks.push(Check::at_most("logdet/factor_out", numeric.abs(), LOGDET_TOL));

    let mut m = FlowModel::new(model_config(1, 2, seed), [8, 8, 1])?;
    m.initialize(&Tensor::randn(&[16, 8, 8, 1], 1.0, &mut rng))?;
    m.store_mut().jitter(&mut rng, 0.05, |_| true);
    let x = Tensor::randn(&[1, 8, 8, 1], 1.0, &mut rng);
    let analytic = m.forward(&x)?.1[0];
    let numeric = numeric_logdet(&x, |v| Ok(m.forward(v)?.0.flat_item(0)))?;
    checks.push(Check::at_most("logdet/model", (analytic - numeric).abs(), LOGDET_TOL));
    Ok(checks)
}

fn mean_nll(model: &FlowModel, x: &Tensor) -> Result<f64> {
    let lp = model.log_prob(x)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Backpropagated `∂NLL/∂θ` against central differences for `per_kind`
/// random scalar parameters of each layer kind in a perturbed 2-level model
/// whose second level uses attention conditioners. Reports the largest
/// relative error per kind.
pub fn gradient_suite(per_kind: usize, seed: u64) -> Result<Vec<Check>> {
    const H: f64 = 1e-5;
    let mut rng = SeededRng::new(derive_seed(seed, 300));
    let mut m = FlowModel::new(model_config(2, 2, seed), [8, 8, 1])?;
    let x = Tensor::randn(&[3, 8, 8, 1], 1.0, &mut rng);
    m.initialize(&x)?;
    m.store_mut().jitter(&mut rng, 0.1, |_| true);

    let mut tape = Tape::new();
    let bound = m.store().bind(&mut tape);
    let xv = tape.constant(x.clone());
    let lp = m.log_prob_tape(&mut tape, &bound, xv)?;
    let mean = tape.mean_all(lp)?;
    let loss = tape.scale(mean, -1.0)?;
    let grads = tape.backward(loss)?;
    m.store_mut().zero_grad();
    m.store_mut().accumulate(&grads, &bound);

    let kinds: [(&str, fn(&str) -> bool); 4] = [
        ("actnorm", |n| n.contains("/actnorm/")),
        ("invconv", |n| n.contains("/invconv/")),
        ("coupling_conv", |n| n.starts_with("level0/") && n.contains("/coupling/")),
        ("coupling_attention", |n| n.starts_with("level1/") && n.contains("/coupling/")),
    ];
    let mut checks = Vec::new();
    for (kind, select) in kinds {
        let ids: Vec<_> = m.store().ids().filter(|&id| select(m.store().name(id))).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..per_kind {
            let id = ids[rng.below(ids.len())];
            let k = rng.below(m.store().value(id).len());
            let analytic = m.store().get(id).grad.data()[k];
            let orig = m.store().value(id).data()[k];
            m.store_mut().value_mut(id).data_mut()[k] = orig + H;
            let up = mean_nll(&m, &x)?;
            m.store_mut().value_mut(id).data_mut()[k] = orig - H;
            let down = mean_nll(&m, &x)?;
            m.store_mut().value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * H);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
        checks.push(Check::at_most(format!("gradient/{kind}"), worst, GRAD_REL_TOL));
    }
    Ok(checks)
}

/// A freshly built model with identity 1×1 convolutions (and ActNorm at its
/// unit/zero defaults) only rearranges its input, with log-det exactly 0.
pub fn zero_init_identity(seed: u64) -> Result<Check> {
    let cfg = FlowConfig {
        invconv_init: InvConvInit::Identity,
        seed,
        ..FlowConfig::default()
    };
    let mut m = FlowModel::new(cfg, [8, 8, 1])?;
    m.mark_initialized();
    let x = Tensor::randn(&[2, 8, 8, 1], 1.0, &mut SeededRng::new(seed));
    let (z, ld) = m.forward(&x)?;
    let mut mismatched = 0usize;
    for i in 0..x.batch() {
        let mut a = x.item_at(i).into_data();
        let mut b = z.flat_item(i);
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        mismatched += a.iter().zip(&b).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
    }
    let ld_max = ld.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let passed = mismatched == 0 && ld.iter().all(|&v| v == 0.0);
    Ok(Check::new(
        "zero_init_identity",
        passed,
        ld_max,
        format!("{mismatched} values not preserved, max |logdet| {ld_max:e}"),
    ))
}

/// After data-dependent initialization, every ActNorm output on the
/// initialization batch has per-channel `|mean| < 1e-6` and population
/// variance within `[0.99, 1.01]`.
pub fn actnorm_init_check(seed: u64) -> Result<Check> {
    let mut rng = SeededRng::new(seed);
    let cfg = model_config(2, 2, seed);
    let mut m = FlowModel::new(cfg.clone(), [8, 8, 1])?;
    let batch = Tensor::randn(&[64, 8, 8, 1], 2.5, &mut rng).map(|v| v + 3.0);
    m.initialize(&batch)?;

    let (mut worst_mean, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    let mut h = batch;
    let mut steps = m.steps();
    for level in 0..cfg.levels {
        if cfg.squeeze {
            h = crate::flow::squeeze(&h)?;
        }
        for _ in 0..cfg.steps_per_level {
            let step = steps.next().expect("model has levels × steps steps");
            let (a, _) = step.actnorm.forward_values(m.store(), &h)?;
            let c = a.channels();
            let rows = (a.len() / c) as f64;
            for ch in 0..c {
                let vals: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
                let mean = vals.iter().sum::<f64>() / rows;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
                worst_mean = worst_mean.max(mean.abs());
                lo = lo.min(var);
                hi = hi.max(var);
            }
            h = step.forward_values(m.store(), &h)?.0;
        }
        if level + 1 < cfg.levels {
            h = factor_out(&h)?.0;
        }
    }
    let passed = worst_mean < ACTNORM_MEAN_TOL && lo >= ACTNORM_VAR_RANGE.0 && hi <= ACTNORM_VAR_RANGE.1;
    Ok(Check::new(
        "actnorm_init",
        passed,
        worst_mean,
        format!("max |mean| {worst_mean:.2e}, variance in [{lo:.6}, {hi:.6}]"),
    ))
}

/// The 2-D toy flow: no squeezing, one level of conv couplings.
pub fn toy_flow_config(seed: u64) -> FlowConfig {
    FlowConfig {
        levels: 1,
        steps_per_level: 6,
        hidden: 32,
        heads: 1,
        squeeze: false,
        attention: AttentionPlacement::None,
        seed,
        ..FlowConfig::default()
    }
}

pub fn toy_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        warmup_steps: 50,
        max_lr: 5e-3,
        seed,
        ..TrainConfig::default()
    }
}

pub const TOY_POINTS: usize = 1000;
pub const TOY_NOISE: f64 = 0.1;

/// Two-moons data and a toy flow fitted to it for `epochs` epochs
/// (initialization only when `epochs` is 0).
pub fn train_toy(epochs: usize, seed: u64) -> Result<(Tensor, FlowModel, TrainReport)> {
    let data = two_moons(TOY_POINTS, TOY_NOISE, &mut SeededRng::new(derive_seed(seed, 400)));
    let mut m = FlowModel::new(toy_flow_config(seed), [1, 1, 2])?;
    let report = fit(&mut m, &data, &toy_train_config(epochs, seed), None)?;
    Ok((data, m, report))
}

/// Midpoint-rule integral of `exp(log p)` over `[−4, 4]²` at step 0.05.
pub fn quadrature_mass(model: &FlowModel) -> Result<f64> {
    const STEP: f64 = 0.05;
    let n = (8.0 / STEP).round() as usize;
    let mut points = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            points.push(-4.0 + (i as f64 + 0.5) * STEP);
            points.push(-4.0 + (j as f64 + 0.5) * STEP);
        }
    }
    let mut mass = 0.0;
    for chunk in points.chunks(2 * 1024) {
        let x = Tensor::new(&[chunk.len() / 2, 1, 1, 2], chunk.to_vec())?;
        mass += model.log_prob(&x)?.iter().map(|lp| lp.exp()).sum::<f64>();
    }
    Ok(mass * STEP * STEP)
}

/// Mean NLL of a unit Gaussian on the same points.
pub fn unit_gaussian_nll(data: &Tensor) -> f64 {
    let d = data.item_len() as f64;
    let sq = data.sq_norm() / data.batch() as f64;
    0.5 * sq + 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// Quadrature normalization before and after training, the NLL gain over a
/// unit Gaussian, and bit-identical loss curves across two runs.
pub fn toy_suite(epochs: usize, seed: u64) -> Result<Vec<Check>> {
    let (_, untrained, _) = train_toy(0, seed)?;
    let before = quadrature_mass(&untrained)?;
    let (data, trained, report) = train_toy(epochs, seed)?;
    let after = quadrature_mass(&trained)?;
    let (_, _, again) = train_toy(epochs, seed)?;

    let nll = mean_nll(&trained, &data)?;
    let baseline = unit_gaussian_nll(&data);
    let gain = baseline - nll;
    let same = report.curve.len() == again.curve.len()
        && report
            .curve
            .iter()
            .zip(&again.curve)
            .all(|(a, b)| a.nll_nats.to_bits() == b.nll_nats.to_bits() && a.lr.to_bits() == b.lr.to_bits());
    Ok(vec![
        Check::new(
            "normalization/before_training",
            (before - 1.0).abs() <= NORMALIZATION_TOL,
            before,
            format!("mass {before:.5}"),
        ),
        Check::new(
            "normalization/after_training",
            (after - 1.0).abs() <= NORMALIZATION_TOL,
            after,
            format!("mass {after:.5}"),
        ),
        Check::new(
            "toy/nll_gain",
            gain >= TOY_GAIN_NATS,
            gain,
            format!("NLL {nll:.4} vs unit Gaussian {baseline:.4}: gain {gain:.4} nats"),
        ),
        Check::new(
            "toy/deterministic_curve",
            same,
            report.curve.len() as f64,
            format!("{} steps, identical = {same}", report.curve.len()),
        ),
    ])
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = round_trip_suite(100, seed)?;
    checks.extend(logdet_suite(seed)?);
    checks.extend(gradient_suite(10, seed)?);
    checks.push(zero_init_identity(seed)?);
    checks.push(actnorm_init_check(seed)?);
    checks.extend(toy_suite(50, seed)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_logdet_of_linear_map() {
        // f(x) = A x with A = [[2, 1], [0, 3]]: log|det| = ln 6.
        let x = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let ld = numeric_logdet(&x, |v| {
            let d = v.data();
            Ok(vec![2.0 * d[0] + d[1], 3.0 * d[1]])
        })
        .unwrap();
        assert!((ld - 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn quadrature_of_standard_gaussian_model() {
        // An identity-initialized toy flow is the unit Gaussian itself.
        let mut m = FlowModel::new(
            FlowConfig {
                invconv_init: InvConvInit::Identity,
                ..toy_flow_config(0)
            },
            [1, 1, 2],
        )
        .unwrap();
        m.mark_initialized();
        // P(|Z| > 4) = 6.334248e-5 for a standard normal.
        let inside = (1.0 - 6.334248e-5f64).powi(2);
        assert!((quadrature_mass(&m).unwrap() - inside).abs() < 1e-6);
    }

    #[test]
    fn unit_gaussian_nll_at_origin() {
        let x = Tensor::zeros(&[3, 1, 1, 2]);
        assert!((unit_gaussian_nll(&x) - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn quick_checks_pass() {
        for c in round_trip_suite(3, 1)
            .unwrap()
            .into_iter()
            .chain(logdet_suite(1).unwrap())
            .chain(gradient_suite(3, 1).unwrap())
            .chain([zero_init_identity(1).unwrap(), actnorm_init_check(1).unwrap()])
        {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
