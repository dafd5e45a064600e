//! The experimental protocol: a synthetic imbalanced image dataset,
//! stratified folds, a baseline CNN, per-class metrics, paired
//! cross-validation with and without flow augmentation, and the
//! augmentation-size sweep.

mod classifier;
mod crossval;
mod dataset;
mod folds;
mod metrics;
mod stats;
mod sweep;

pub use classifier::{evaluate, train_classifier, BaselineCnn, ClassifierConfig, Pooling, TrainedClassifier};
pub use crossval::{
    cross_validate, fit_flow, run_fold, AugmentRecipe, CrossValConfig, CrossValResult, FoldRecord, PairedSummary, SYNTHETIC_ID,
};
pub use dataset::{generate_synthetic_dataset, LabeledDataset, NoiseParams, SyntheticSeismoConfig};
pub use folds::{stratified_kfold, stratified_split, FoldPlan, Split};
pub use metrics::{ClassMetrics, ConfusionMatrix, MetricSummary, PerClass};
pub use stats::{mean_sd, median, sign_test, SignTest};
pub use sweep::{augmentation_size_sweep, recommend_size, SweepConfig, SweepResult, SweepRow, NO_HARM_TOLERANCE};

use std::fmt;

use crate::error::{Error, Result};

/// Image quality label. `Bad` is the rare class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Good = 0,
    Medium = 1,
    Bad = 2,
}

pub const NUM_CLASSES: usize = 3;

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Good, Class::Medium, Class::Bad];
    pub const RARE: Class = Class::Bad;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Class> {
        Class::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Good => "good",
            Class::Medium => "medium",
            Class::Bad => "bad",
        }
    }

    pub fn parse(s: &str) -> Result<Class> {
        Class::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class label {s:?}")))
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
