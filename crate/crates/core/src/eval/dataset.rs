use super::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

/// Degradation applied on top of the clean reflection texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Nominal amplitude of the low-frequency swell band; each image draws
    /// its own amplitude from `[0.5, 1.5]` times this value.
    pub swell_amplitude: f64,
    /// Per-pixel probability of an anomalous-amplitude spike.
    pub spike_rate: f64,
    /// Per-column probability of a dead (zeroed) trace.
    pub dead_trace_prob: f64,
}

impl NoiseParams {
    pub const CLEAN: NoiseParams = NoiseParams {
        swell_amplitude: 0.0,
        spike_rate: 0.0,
        dead_trace_prob: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeismoConfig {
    /// Square image side; a power of two.
    pub size: usize,
    /// Class proportions (good, medium, bad).
    pub ratios: [f64; NUM_CLASSES],
    pub count: usize,
    /// Per-class noise, indexed like `ratios`.
    pub noise: [NoiseParams; NUM_CLASSES],
    /// White-noise standard deviation shared by all classes.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSeismoConfig {
    fn default() -> Self {
        Self {
            size: 32,
            ratios: [0.70, 0.22, 0.08],
            count: 3000,
            noise: [
                NoiseParams::CLEAN,
                NoiseParams {
                    swell_amplitude: 0.3,
                    spike_rate: 0.0,
                    dead_trace_prob: 0.0,
                },
                NoiseParams {
                    swell_amplitude: 0.9,
                    spike_rate: 0.002,
                    dead_trace_prob: 0.02,
                },
            ],
            background_noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSeismoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || !self.size.is_power_of_two() {
            return Err(Error::Config(format!("image size must be a power of two ≥ 4, got {}", self.size)));
        }
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class ratios {:?} must be non-negative and sum to 1", self.ratios)));
        }
        let [g, m, b] = self.ratios;
        if !(b < g && b < m) {
            return Err(Error::Config(format!("the bad class must be the strict minority, got ratios {:?}", self.ratios)));
        }
        for n in &self.noise {
            let ok = n.swell_amplitude >= 0.0
                && (0.0..=1.0).contains(&n.spike_rate)
                && (0.0..=1.0).contains(&n.dead_trace_prob);
            if !ok {
                return Err(Error::Config(format!("invalid noise parameters {n:?}")));
            }
        }
        if !(self.background_noise >= 0.0) {
            return Err(Error::Config("background_noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-class counts: floors of `ratio·count`, with the remainder handed
    /// to the largest fractional parts (ties to the earlier class).
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let exact: Vec<f64> = self.ratios.iter().map(|r| r * self.count as f64).collect();
        // Guard against 0.29·100 = 28.999… style representation error.
        let mut counts: [usize; NUM_CLASSES] = std::array::from_fn(|i| (exact[i] + 1e-9).floor() as usize);
        let mut left = self.count - counts.iter().sum::<usize>().min(self.count);
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - counts[a] as f64;
            let fb = exact[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// Images with labels. `ids` records each item's index in the dataset it was
/// originally generated as, and survives subsetting.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<Class>,
    pub ids: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<Class>) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for l in &self.labels {
            c[l.index()] += 1;
        }
        c
    }

    /// Positions (not ids) of items with label `class`.
    pub fn positions_of(&self, class: Class) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Items at `positions`, keeping their ids.
    pub fn subset(&self, positions: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(positions),
            labels: positions.iter().map(|&i| self.labels[i]).collect(),
            ids: positions.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

/// Generates shot-gather-like images: hyperbolic reflection events built
/// from Ricker wavelets, degraded per class by swell noise, amplitude
/// spikes and dead traces. Pixels are `0.5 + 0.4·amplitude`, clamped and
/// quantized to multiples of 1/256. Labels are assigned in a seeded random
/// order with exact per-class counts.
pub fn generate_synthetic_dataset(config: &SyntheticSeismoConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let counts = config.class_counts();
    let mut labels: Vec<Class> = Class::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    SeededRng::new(config.seed).shuffle(&mut labels);

    let s = config.size;
    let mut data = Vec::with_capacity(config.count * s * s);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed(config.seed, i as u64 + 1));
        data.extend(render(s, &config.noise[label.index()], config.background_noise, &mut rng));
    }
    LabeledDataset::new(Tensor::new(&[config.count, s, s, 1], data)?, labels)
}

fn ricker(tau: f64, width: f64) -> f64 {
    let u = (tau / width).powi(2);
    (1.0 - 2.0 * u) * (-u).exp()
}

fn render(s: usize, noise: &NoiseParams, background: f64, rng: &mut SeededRng) -> Vec<f64> {
    let sf = s as f64;
    let mut img = vec![0.0; s * s];
    let events = 2 + rng.below(3);
    for _ in 0..events {
        let t0 = rng.uniform(0.1, 0.9) * sf;
        let x0 = rng.uniform(0.0, sf);
        let v = rng.uniform(0.6, 2.0);
        let amp = rng.uniform(0.5, 1.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let width = rng.uniform(1.0, 2.0);
        for x in 0..s {
            let t = (t0 * t0 + ((x as f64 - x0) / v).powi(2)).sqrt();
            for y in 0..s {
                img[y * s + x] += amp * ricker(y as f64 - t, width);
            }
        }
    }
    let peak = img.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        img.iter_mut().for_each(|v| *v /= peak);
    }

    if noise.swell_amplitude > 0.0 {
        let a = noise.swell_amplitude * rng.uniform(0.5, 1.5);
        for _ in 0..2 {
            let fx = rng.uniform(0.0, 1.5);
            let fy = rng.uniform(0.5, 2.5);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            for y in 0..s {
                for x in 0..s {
                    let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / sf + phase;
                    img[y * s + x] += 0.5 * a * arg.sin();
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v += background * rng.normal();
    }
    if noise.spike_rate > 0.0 {
        for v in img.iter_mut() {
            if rng.bernoulli(noise.spike_rate) {
                *v += rng.uniform(1.0, 2.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            }
        }
    }
    if noise.dead_trace_prob > 0.0 {
        for x in 0..s {
            if rng.bernoulli(noise.dead_trace_prob) {
                for y in 0..s {
                    img[y * s + x] = 0.0;
                }
            }
        }
    }
    img.into_iter()
        .map(|v| ((0.5 + 0.4 * v).clamp(0.0, 255.0 / 256.0) * 256.0).floor() / 256.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize, seed: u64) -> SyntheticSeismoConfig {
        SyntheticSeismoConfig {
            size: 8,
            count,
            seed,
            ..SyntheticSeismoConfig::default()
        }
    }

    #[test]
    fn exact_counts() {
        let cfg = SyntheticSeismoConfig {
            count: 1000,
            ..SyntheticSeismoConfig::default()
        };
        assert_eq!(cfg.class_counts(), [700, 220, 80]);
        let cfg = SyntheticSeismoConfig {
            count: 3000,
            ..SyntheticSeismoConfig::default()
        };
        assert_eq!(cfg.class_counts(), [2100, 660, 240]);
        let cfg = SyntheticSeismoConfig {
            count: 7,
            ..SyntheticSeismoConfig::default()
        };
        assert_eq!(cfg.class_counts().iter().sum::<usize>(), 7);
        let ds = generate_synthetic_dataset(&small(100, 1)).unwrap();
        assert_eq!(ds.class_counts(), [70, 22, 8]);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate_synthetic_dataset(&small(40, 9)).unwrap();
        let b = generate_synthetic_dataset(&small(40, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(40, 10)).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn pixels_on_grid() {
        let ds = generate_synthetic_dataset(&small(30, 2)).unwrap();
        for &v in ds.images.data() {
            assert!((0.0..1.0).contains(&v));
            assert_eq!((v * 256.0).fract(), 0.0);
        }
    }

    #[test]
    fn bad_ratios_rejected() {
        let mut cfg = small(10, 0);
        cfg.ratios = [0.5, 0.3, 0.3];
        assert!(generate_synthetic_dataset(&cfg).is_err());
        cfg.ratios = [0.1, 0.3, 0.6];
        assert!(cfg.validate().is_err());
        cfg.ratios = [0.7, 0.22, 0.08];
        cfg.size = 12;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn subset_keeps_ids() {
        let ds = generate_synthetic_dataset(&small(20, 3)).unwrap();
        let sub = ds.subset(&[5, 2]);
        assert_eq!(sub.ids, vec![5, 2]);
        let sub2 = sub.subset(&[1]);
        assert_eq!(sub2.ids, vec![2]);
        assert_eq!(sub2.images, ds.images.select(&[2]));
    }
}
