use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{AugmentRecipe, ClassifierConfig, CrossValConfig, Pooling, SweepConfig, SyntheticSeismoConfig};
use crate::flow::{AttentionPlacement, FlowConfig, InvConvInit};
use crate::objective::TrainConfig;
use crate::synthesis::{InterpolationMode, InterpolationSpec};

/// Name of the effective-config echo written into every run directory.
pub const CONFIG_FILE: &str = "config.txt";

/// Every knob of a run, read from and written to flat `key = value` text.
///
/// Blank lines and `#` comments are ignored. Unknown keys and malformed values
/// are errors. [`RunConfig::to_text`] lists every key, so the echo of a run
/// reproduces it when read back.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dataset: SyntheticSeismoConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub interpolation: InterpolationSpec,
    pub augment_count: usize,
    pub classifier: ClassifierConfig,
    pub cv_k: usize,
    pub cv_valid_fraction: f64,
    pub sweep_sizes: Vec<usize>,
    pub sweep_runs: usize,
    pub sweep_valid_fraction: f64,
    pub sweep_test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cv = CrossValConfig::default();
        let sweep = SweepConfig::default();
        Self {
            seed: None,
            dataset: SyntheticSeismoConfig::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            interpolation: InterpolationSpec::default(),
            augment_count: cv.augment.count,
            classifier: ClassifierConfig::default(),
            cv_k: cv.k,
            cv_valid_fraction: cv.valid_fraction,
            sweep_sizes: sweep.sizes,
            sweep_runs: sweep.runs,
            sweep_valid_fraction: sweep.valid_fraction,
            sweep_test_fraction: sweep.test_fraction,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

const CLASS_KEYS: [&str; 3] = ["good", "medium", "bad"];

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(())
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("dataset.noise.") {
            let (class, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
            let idx = CLASS_KEYS
                .iter()
                .position(|c| *c == class)
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
            let noise = &mut self.dataset.noise[idx];
            match field {
                "swell_amplitude" => noise.swell_amplitude = parse(key, value)?,
                "spike_rate" => noise.spike_rate = parse(key, value)?,
                "dead_trace_prob" => noise.dead_trace_prob = parse(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
            return Ok(());
        }
        match key {
            "seed" => self.seed = Some(parse(key, value)?),
            "dataset.size" => self.dataset.size = parse(key, value)?,
            "dataset.count" => self.dataset.count = parse(key, value)?,
            "dataset.ratios" => {
                let r: Vec<f64> = parse_list(key, value)?;
                self.dataset.ratios = r
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three comma-separated ratios")))?;
            }
            "dataset.background_noise" => self.dataset.background_noise = parse(key, value)?,
            "flow.levels" => self.flow.levels = parse(key, value)?,
            "flow.steps_per_level" => self.flow.steps_per_level = parse(key, value)?,
            "flow.hidden" => self.flow.hidden = parse(key, value)?,
            "flow.heads" => self.flow.heads = parse(key, value)?,
            "flow.squeeze" => self.flow.squeeze = parse(key, value)?,
            "flow.attention" => self.flow.attention = AttentionPlacement::parse(value)?,
            "flow.invconv_init" => {
                self.flow.invconv_init = match value {
                    "rotation" => InvConvInit::Rotation,
                    "identity" => InvConvInit::Identity,
                    _ => return Err(Error::Config(format!("{key}: expected rotation or identity"))),
                }
            }
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "train.max_lr" => self.train.max_lr = parse(key, value)?,
            "train.lr_power" => self.train.lr_power = parse(key, value)?,
            "train.gradient_clip_norm" => self.train.gradient_clip_norm = parse(key, value)?,
            "augment.mode" => self.interpolation.mode = InterpolationMode::parse(value)?,
            "augment.t_min" => self.interpolation.t_min = parse(key, value)?,
            "augment.t_max" => self.interpolation.t_max = parse(key, value)?,
            "augment.temperature" => self.interpolation.temperature = parse(key, value)?,
            "augment.count" => self.augment_count = parse(key, value)?,
            "classifier.filters" => {
                let f: Vec<usize> = parse_list(key, value)?;
                self.classifier.filters = f
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected two comma-separated widths")))?;
            }
            "classifier.pooling" => self.classifier.pooling = Pooling::parse(value)?,
            "classifier.learning_rate" => self.classifier.learning_rate = parse(key, value)?,
            "classifier.batch_size" => self.classifier.batch_size = parse(key, value)?,
            "classifier.max_epochs" => self.classifier.max_epochs = parse(key, value)?,
            "classifier.patience" => self.classifier.patience = parse(key, value)?,
            "cv.k" => self.cv_k = parse(key, value)?,
            "cv.valid_fraction" => self.cv_valid_fraction = parse(key, value)?,
            "sweep.sizes" => self.sweep_sizes = parse_list(key, value)?,
            "sweep.runs" => self.sweep_runs = parse(key, value)?,
            "sweep.valid_fraction" => self.sweep_valid_fraction = parse(key, value)?,
            "sweep.test_fraction" => self.sweep_test_fraction = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks ranges that individual setters cannot.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.interpolation.validate()?;
        self.classifier.validate()?;
        if self.cv_k < 2 {
            return Err(Error::Config("cv.k must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.cv_valid_fraction) {
            return Err(Error::Config("cv.valid_fraction must lie in [0, 1)".into()));
        }
        if self.sweep_runs == 0 || self.sweep_sizes.is_empty() {
            return Err(Error::Config("sweep.runs and sweep.sizes must be nonempty".into()));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("this command is stochastic and needs a seed".into()))
    }

    /// Every key with its effective value, one per line.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| lines.push((k.to_string(), v));
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        let d = &self.dataset;
        put("dataset.size", d.size.to_string());
        put("dataset.count", d.count.to_string());
        put("dataset.ratios", join(&d.ratios));
        put("dataset.background_noise", d.background_noise.to_string());
        for (class, n) in CLASS_KEYS.iter().zip(&d.noise) {
            put(&format!("dataset.noise.{class}.swell_amplitude"), n.swell_amplitude.to_string());
            put(&format!("dataset.noise.{class}.spike_rate"), n.spike_rate.to_string());
            put(&format!("dataset.noise.{class}.dead_trace_prob"), n.dead_trace_prob.to_string());
        }
        let f = &self.flow;
        put("flow.levels", f.levels.to_string());
        put("flow.steps_per_level", f.steps_per_level.to_string());
        put("flow.hidden", f.hidden.to_string());
        put("flow.heads", f.heads.to_string());
        put("flow.squeeze", f.squeeze.to_string());
        put("flow.attention", f.attention.as_str().to_string());
        put(
            "flow.invconv_init",
            match f.invconv_init {
                InvConvInit::Rotation => "rotation",
                InvConvInit::Identity => "identity",
            }
            .to_string(),
        );
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.max_lr", t.max_lr.to_string());
        put("train.lr_power", t.lr_power.to_string());
        put("train.gradient_clip_norm", t.gradient_clip_norm.to_string());
        let i = &self.interpolation;
        put("augment.mode", i.mode.as_str().to_string());
        put("augment.t_min", i.t_min.to_string());
        put("augment.t_max", i.t_max.to_string());
        put("augment.temperature", i.temperature.to_string());
        put("augment.count", self.augment_count.to_string());
        let c = &self.classifier;
        put("classifier.filters", join(&c.filters));
        put("classifier.pooling", c.pooling.as_str().to_string());
        put("classifier.learning_rate", c.learning_rate.to_string());
        put("classifier.batch_size", c.batch_size.to_string());
        put("classifier.max_epochs", c.max_epochs.to_string());
        put("classifier.patience", c.patience.to_string());
        put("cv.k", self.cv_k.to_string());
        put("cv.valid_fraction", self.cv_valid_fraction.to_string());
        put("sweep.sizes", join(&self.sweep_sizes));
        put("sweep.runs", self.sweep_runs.to_string());
        put("sweep.valid_fraction", self.sweep_valid_fraction.to_string());
        put("sweep.test_fraction", self.sweep_test_fraction.to_string());
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Flow recipe for a run; weight and batch seeds come from the run seed.
    pub fn augment_recipe(&self) -> AugmentRecipe {
        AugmentRecipe {
            flow: self.flow.clone(),
            training: self.train.clone(),
            interpolation: self.interpolation.clone(),
            count: self.augment_count,
        }
    }

    pub fn crossval_config(&self, seed: u64) -> CrossValConfig {
        CrossValConfig {
            k: self.cv_k,
            seed,
            valid_fraction: self.cv_valid_fraction,
            classifier: self.classifier.clone(),
            augment: self.augment_recipe(),
        }
    }

    pub fn sweep_config(&self, seed: u64) -> SweepConfig {
        SweepConfig {
            sizes: self.sweep_sizes.clone(),
            runs: self.sweep_runs,
            valid_fraction: self.sweep_valid_fraction,
            test_fraction: self.sweep_test_fraction,
            seed,
            classifier: self.classifier.clone(),
            augment: self.augment_recipe(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(42);
        cfg.flow.levels = 2;
        cfg.train.max_lr = 0.1 + 0.2;
        cfg.dataset.noise[2].spike_rate = 1.0 / 3.0;
        cfg.sweep_sizes = vec![0, 7];
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse_text("# reduced\nflow.hidden = 4  # narrow\n\naugment.mode=spherical\n").unwrap();
        assert_eq!(cfg.flow.hidden, 4);
        assert_eq!(cfg.interpolation.mode, InterpolationMode::Spherical);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in ["flow.depth = 3", "flow.levels = three", "dataset.noise.ugly.spike_rate = 0", "no equals sign", "dataset.ratios = 0.5,0.5"] {
            assert!(matches!(RunConfig::parse_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn seed_is_required_on_demand() {
        assert!(RunConfig::default().require_seed().is_err());
        assert_eq!(RunConfig::parse_text("seed = 9").unwrap().require_seed().unwrap(), 9);
    }
}
