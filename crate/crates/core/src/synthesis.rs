//! Sampling from a trained flow and rare-class oversampling by latent
//! interpolation between pairs of same-class training images.

use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentCode};
use crate::objective::Dequantizer;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Batch size for encoding and decoding many images.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolationMode {
    Linear,
    Spherical,
}

impl InterpolationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InterpolationMode::Linear => "linear",
            InterpolationMode::Spherical => "spherical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(InterpolationMode::Linear),
            "spherical" => Ok(InterpolationMode::Spherical),
            _ => Err(Error::Config(format!("unknown interpolation mode {s:?}; expected linear or spherical"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationSpec {
    pub mode: InterpolationMode,
    /// `t` is drawn uniformly from `[t_min, t_max)`, which must lie strictly
    /// inside `(0, 1)`.
    pub t_min: f64,
    pub t_max: f64,
    /// Prior scale for pure sampling.
    pub temperature: f64,
}

impl Default for InterpolationSpec {
    fn default() -> Self {
        Self {
            mode: InterpolationMode::Linear,
            t_min: 0.2,
            t_max: 0.8,
            temperature: 1.0,
        }
    }
}

impl InterpolationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "interpolation range [{}, {}) must satisfy 0 < t_min < t_max < 1",
                self.t_min, self.t_max
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn encode(model: &FlowModel, x: &Tensor) -> Result<LatentCode> {
    let n = x.batch();
    let mut codes = Vec::with_capacity(n.div_ceil(CHUNK));
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        codes.push(model.forward(&x.select(&idx))?.0);
    }
    LatentCode::stack(&codes)
}

pub fn decode(model: &FlowModel, z: &LatentCode) -> Result<Tensor> {
    let n = z.batch();
    let mut out = Vec::with_capacity(n.div_ceil(CHUNK));
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        out.push(model.inverse(&z.select(&idx))?);
    }
    Tensor::stack(&out)
}

/// Decodes `n` draws of `z ~ N(0, temperature²·I)`; each image has a
/// leading extent of 1.
pub fn sample(model: &FlowModel, n: usize, temperature: f64, rng: &mut SeededRng) -> Result<Vec<Tensor>> {
    if !(temperature >= 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be non-negative, got {temperature}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let parts = model
        .latent_shapes(n)
        .iter()
        .map(|s| Tensor::randn(s, temperature, rng))
        .collect();
    let x = decode(model, &LatentCode { parts })?;
    Ok((0..n).map(|i| x.item_at(i)).collect())
}

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("interpolation t = {t} must lie in (0, 1)")));
    }
    Ok(())
}

fn slerp(a: &[f64], b: &[f64], t: f64, out: &mut Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos = if na > 0.0 && nb > 0.0 {
        (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    let omega = cos.acos();
    let so = omega.sin();
    let (wa, wb) = if so < 1e-8 {
        (1.0 - t, t)
    } else {
        (((1.0 - t) * omega).sin() / so, (t * omega).sin() / so)
    };
    out.extend(a.iter().zip(b).map(|(x, y)| wa * x + wb * y));
}

/// Interpolates `za` and `zb` item by item and part by part.
/// Spherical mode treats each part of an item as one vector.
pub fn interpolate_latent(za: &LatentCode, zb: &LatentCode, t: f64, mode: InterpolationMode) -> Result<LatentCode> {
    check_t(t)?;
    if za.shapes() != zb.shapes() {
        return Err(Error::InvalidShape {
            op: "interpolate_latent",
            detail: format!("latent shapes {:?} and {:?} differ", za.shapes(), zb.shapes()),
        });
    }
    let parts = za
        .parts
        .iter()
        .zip(&zb.parts)
        .map(|(a, b)| match mode {
            InterpolationMode::Linear => a.zip_map(b, |x, y| x * (1.0 - t) + y * t),
            InterpolationMode::Spherical => {
                let m = a.item_len();
                let mut data = Vec::with_capacity(a.len());
                for i in 0..a.batch() {
                    let r = i * m..(i + 1) * m;
                    slerp(&a.data()[r.clone()], &b.data()[r], t, &mut data);
                }
                Tensor::new(a.shape(), data)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentCode { parts })
}

/// Decodes the interpolation of the latents of single images `x_a`, `x_b`.
pub fn interpolate(model: &FlowModel, x_a: &Tensor, x_b: &Tensor, t: f64, mode: InterpolationMode) -> Result<Tensor> {
    check_t(t)?;
    let za = model.forward(x_a)?.0;
    let zb = model.forward(x_b)?.0;
    model.inverse(&interpolate_latent(&za, &zb, t, mode)?)
}

/// Where a synthetic image came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    /// Dataset-level ids of the two source images.
    pub source_a: usize,
    pub source_b: usize,
    /// Positions of the sources within the slice passed to
    /// [`generate_augmentations`].
    pub local_a: usize,
    pub local_b: usize,
    pub t: f64,
    pub fold_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentationSet {
    /// `count × H × W × C`, on the data grid.
    pub images: Option<Tensor>,
    pub provenance: Vec<Provenance>,
}

impl AugmentationSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Dataset ids of every image used as an interpolation endpoint.
    pub fn source_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.provenance.iter().flat_map(|p| [p.source_a, p.source_b]).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Synthesizes `count` images by interpolating latents of pairs drawn from
/// `sources` (same-class training images whose dataset ids are `source_ids`).
///
/// Pairs come in rounds: each round shuffles the sources and pairs them off
/// consecutively, so no image appears twice within a round. Every output
/// is clamped to `[0, 1)` and snapped to the `quantizer` grid.
#[allow(clippy::too_many_arguments)]
pub fn generate_augmentations(
    model: &FlowModel,
    sources: &Tensor,
    source_ids: &[usize],
    count: usize,
    spec: &InterpolationSpec,
    quantizer: &Dequantizer,
    fold_id: usize,
    rng: &mut SeededRng,
) -> Result<AugmentationSet> {
    spec.validate()?;
    let n = sources.batch();
    if source_ids.len() != n {
        return Err(Error::InvalidArgument(format!("{} ids for {n} source images", source_ids.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "augmentation needs at least 2 source images, got {n}"
        )));
    }
    if count == 0 {
        return Ok(AugmentationSet::default());
    }
    let mut pairs = Vec::with_capacity(count);
    let mut order: Vec<usize> = (0..n).collect();
    while pairs.len() < count {
        rng.shuffle(&mut order);
        for pair in order.chunks_exact(2) {
            if pairs.len() == count {
                break;
            }
            pairs.push((pair[0], pair[1], rng.uniform(spec.t_min, spec.t_max)));
        }
    }

    let z = encode(model, sources)?;
    let mut images = Vec::with_capacity(count.div_ceil(CHUNK));
    for chunk in pairs.chunks(CHUNK) {
        let mixed = chunk
            .iter()
            .map(|&(a, b, t)| interpolate_latent(&z.item(a), &z.item(b), t, spec.mode))
            .collect::<Result<Vec<_>>>()?;
        let x = model.inverse(&LatentCode::stack(&mixed)?)?;
        x.check_finite("decoded augmentation")?;
        images.push(quantizer.quantize(&x));
    }
    let provenance = pairs
        .iter()
        .map(|&(a, b, t)| Provenance {
            source_a: source_ids[a],
            source_b: source_ids[b],
            local_a: a,
            local_b: b,
            t,
            fold_id,
        })
        .collect();
    Ok(AugmentationSet {
        images: Some(Tensor::stack(&images)?),
        provenance,
    })
}
