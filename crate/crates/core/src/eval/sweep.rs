use super::classifier::{evaluate, train_classifier, ClassifierConfig};
use super::crossval::{augment_from, AugmentRecipe, SYNTHETIC_ID};
use super::folds::{stratified_split, Split};
use super::stats::mean_sd;
use super::{Class, LabeledDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Largest tolerated drop in a non-rare class's mean F₁ relative to the
/// zero-augmentation mean when recommending a size (one F₁ point).
pub const NO_HARM_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    /// Flow and interpolation settings; `count` is ignored.
    pub augment: AugmentRecipe,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![0, 100, 250, 500, 1000],
            runs: 10,
            valid_fraction: 0.15,
            test_fraction: 0.15,
            seed: 0,
            classifier: ClassifierConfig::default(),
            augment: AugmentRecipe::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub run: usize,
    pub f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub split: Split,
    /// One row per (size, run), sizes ascending.
    pub rows: Vec<SweepRow>,
    /// `(size, per-class (mean, sd) F₁)` in ascending size order.
    pub curves: Vec<(usize, [(f64, f64); NUM_CLASSES])>,
    pub recommended: usize,
    /// Ids of the rare-class training images the flow was fitted on.
    pub flow_train_ids: Vec<usize>,
}

fn curves(rows: &[SweepRow]) -> Vec<(usize, [(f64, f64); NUM_CLASSES])> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|s| {
            let per: [(f64, f64); NUM_CLASSES] = std::array::from_fn(|k| {
                mean_sd(&rows.iter().filter(|r| r.size == s).map(|r| r.f1[k]).collect::<Vec<_>>())
            });
            (s, per)
        })
        .collect()
}

/// The size with the highest mean rare-class F₁ among sizes where no other
/// class's mean F₁ falls more than [`NO_HARM_TOLERANCE`] below its
/// zero-augmentation mean. Ties go to the smaller size; size 0 always
/// qualifies.
pub fn recommend_size(rows: &[SweepRow]) -> Result<usize> {
    let c = curves(rows);
    let base = c
        .iter()
        .find(|(s, _)| *s == 0)
        .ok_or_else(|| Error::InvalidArgument("sweep rows lack the zero-augmentation reference".into()))?
        .1;
    let rare = Class::RARE.index();
    let mut best = (0usize, base[rare].0);
    for (size, per) in &c {
        let harmless = (0..NUM_CLASSES)
            .filter(|&k| k != rare)
            .all(|k| per[k].0 >= base[k].0 - NO_HARM_TOLERANCE);
        if harmless && per[rare].0 > best.1 {
            best = (*size, per[rare].0);
        }
    }
    Ok(best.0)
}

/// Fixed stratified train/validation/test split; one flow fitted to the
/// training split's rare-class images; `runs` classifier trainings per size.
/// Run `r` draws `max(sizes)` augmentations with its own seed and uses the
/// first `size` of them, so the sets are nested across sizes. Size 0 is
/// always included as the reference.
pub fn augmentation_size_sweep(dataset: &LabeledDataset, config: &SweepConfig) -> Result<SweepResult> {
    if config.sizes.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one size".into()));
    }
    if config.runs == 0 {
        return Err(Error::InvalidArgument("sweep needs at least one run".into()));
    }
    let mut sizes = config.sizes.clone();
    sizes.push(0);
    sizes.sort_unstable();
    sizes.dedup();
    let max_size = *sizes.last().unwrap();

    let split = stratified_split(dataset, None, config.valid_fraction, config.test_fraction, config.seed)?;
    let train = dataset.subset(&split.train);
    let valid = dataset.subset(&split.valid);
    let test = dataset.subset(&split.test);
    let rare = train.subset(&train.positions_of(Class::RARE));

    let mut pools: Vec<Option<Tensor>> = Vec::with_capacity(config.runs);
    if max_size > 0 {
        // One flow for the whole sweep; only the interpolation draws vary.
        let recipe = AugmentRecipe {
            count: max_size * config.runs,
            ..config.augment.clone()
        };
        let (set, _) = augment_from(&rare, &recipe, 0, derive_seed(config.seed, 7))?;
        let all = set.images.expect("nonzero count yields images");
        for r in 0..config.runs {
            let idx: Vec<usize> = (r * max_size..(r + 1) * max_size).collect();
            pools.push(Some(all.select(&idx)));
        }
    } else {
        pools.resize(config.runs, None);
    }

    let mut rows = Vec::with_capacity(sizes.len() * config.runs);
    for &size in &sizes {
        for (run, pool) in pools.iter().enumerate() {
            let clf_cfg = ClassifierConfig {
                seed: derive_seed(config.seed, 100 + run as u64),
                ..config.classifier.clone()
            };
            let train_set = match pool {
                Some(p) if size > 0 => {
                    let extra = p.select(&(0..size).collect::<Vec<_>>());
                    LabeledDataset {
                        images: Tensor::stack(&[train.images.clone(), extra])?,
                        labels: train.labels.iter().copied().chain(std::iter::repeat_n(Class::RARE, size)).collect(),
                        ids: train.ids.iter().copied().chain(std::iter::repeat_n(SYNTHETIC_ID, size)).collect(),
                    }
                }
                _ => train.clone(),
            };
            let m = evaluate(&train_classifier(&train_set, &valid, &clf_cfg)?.model, &test)?;
            log::info!("sweep size {size} run {run}: rare F1 {:.3}", m.class(Class::RARE).f1);
            rows.push(SweepRow {
                size,
                run,
                f1: std::array::from_fn(|k| m.per_class[k].f1),
                macro_f1: m.macro_f1,
            });
        }
    }
    let recommended = recommend_size(&rows)?;
    Ok(SweepResult {
        split,
        curves: curves(&rows),
        recommended,
        flow_train_ids: if max_size > 0 { rare.ids } else { Vec::new() },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(size: usize, run: usize, f1: [f64; 3]) -> SweepRow {
        SweepRow {
            size,
            run,
            f1,
            macro_f1: f1.iter().sum::<f64>() / 3.0,
        }
    }

    #[test]
    fn recommendation_respects_no_harm() {
        let rows = vec![
            row(0, 0, [0.9, 0.8, 0.3]),
            row(100, 0, [0.9, 0.795, 0.5]),
            row(250, 0, [0.9, 0.7, 0.8]),
        ];
        // 250 has the best rare F1 but costs medium 10 points.
        assert_eq!(recommend_size(&rows).unwrap(), 100);
        let rows = vec![row(0, 0, [0.9, 0.8, 0.3]), row(100, 0, [0.9, 0.8, 0.2])];
        assert_eq!(recommend_size(&rows).unwrap(), 0);
        assert!(recommend_size(&[row(5, 0, [0.0; 3])]).is_err());
    }

    #[test]
    fn curve_means_and_sds() {
        let rows = vec![row(0, 0, [1.0, 0.5, 0.2]), row(0, 1, [1.0, 0.7, 0.4])];
        let c = curves(&rows);
        assert_eq!(c.len(), 1);
        assert!((c[0].1[1].0 - 0.6).abs() < 1e-12);
        assert!((c[0].1[2].1 - (0.02f64).sqrt()).abs() < 1e-12);
    }
}
