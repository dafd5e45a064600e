use super::classifier::{evaluate, train_classifier, ClassifierConfig};
use super::folds::{stratified_kfold, stratified_split, FoldPlan};
use super::metrics::{ClassMetrics, MetricSummary};
use super::stats::{mean_sd, median, sign_test, SignTest};
use super::{Class, LabeledDataset};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::objective::{fit, nll_loss, Dequantizer, TrainConfig, TrainReport};
use crate::rng::{derive_seed, SeededRng};
use crate::synthesis::{generate_augmentations, AugmentationSet, InterpolationSpec};
use crate::tensor::Tensor;

/// How the augmented arm trains its flow and how many images it adds.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRecipe {
    pub flow: FlowConfig,
    pub training: TrainConfig,
    pub interpolation: InterpolationSpec,
    pub count: usize,
}

impl Default for AugmentRecipe {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            training: TrainConfig::default(),
            interpolation: InterpolationSpec::default(),
            count: 250,
        }
    }
}

/// Id given to synthetic training images, which have no dataset index.
pub const SYNTHETIC_ID: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValConfig {
    pub k: usize,
    pub seed: u64,
    /// Share of each class in the training folds held out for early stopping.
    pub valid_fraction: f64,
    pub classifier: ClassifierConfig,
    pub augment: AugmentRecipe,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 0,
            valid_fraction: 1.0 / 9.0,
            classifier: ClassifierConfig::default(),
            augment: AugmentRecipe::default(),
        }
    }
}

/// Everything one iteration used and produced. All id lists are dataset ids.
#[derive(Debug, Clone)]
pub struct FoldRecord {
    pub fold: usize,
    pub test_ids: Vec<usize>,
    pub classifier_train_ids: Vec<usize>,
    pub valid_ids: Vec<usize>,
    /// Rare-class images the flow was fitted on and interpolated between.
    pub flow_train_ids: Vec<usize>,
    pub augmentations: AugmentationSet,
    /// Final per-item NLL of the fold's flow on its own training images.
    pub flow_nll: Option<f64>,
    pub baseline: ClassMetrics,
    pub augmented: ClassMetrics,
}

impl FoldRecord {
    /// Ids that any training artifact of this fold depends on and that also
    /// belong to the test fold. Empty when there is no leakage.
    pub fn leaked_ids(&self) -> Vec<usize> {
        let mut test = self.test_ids.clone();
        test.sort_unstable();
        let used = self
            .classifier_train_ids
            .iter()
            .chain(&self.valid_ids)
            .chain(&self.flow_train_ids)
            .copied()
            .chain(self.augmentations.source_ids());
        let mut leaked: Vec<usize> = used.filter(|i| test.binary_search(i).is_ok()).collect();
        leaked.sort_unstable();
        leaked.dedup();
        leaked
    }

    pub fn rare_f1_delta(&self) -> f64 {
        self.augmented.class(Class::RARE).f1 - self.baseline.class(Class::RARE).f1
    }
}

#[derive(Debug, Clone)]
pub struct PairedSummary {
    pub baseline: MetricSummary,
    pub augmented: MetricSummary,
    /// Augmented minus baseline rare-class F₁, per fold.
    pub rare_f1_deltas: Vec<f64>,
    pub median_rare_delta: f64,
    pub mean_rare_delta: f64,
    pub sd_rare_delta: f64,
    pub sign_test: SignTest,
    /// Mean augmented minus mean baseline macro-F₁.
    pub macro_f1_delta: f64,
}

impl PairedSummary {
    pub fn from_folds(folds: &[FoldRecord]) -> Self {
        let base: Vec<ClassMetrics> = folds.iter().map(|f| f.baseline).collect();
        let aug: Vec<ClassMetrics> = folds.iter().map(|f| f.augmented).collect();
        let baseline = MetricSummary::from_folds(&base);
        let augmented = MetricSummary::from_folds(&aug);
        let deltas: Vec<f64> = folds.iter().map(FoldRecord::rare_f1_delta).collect();
        let (mean, sd) = mean_sd(&deltas);
        Self {
            baseline,
            augmented,
            median_rare_delta: median(&deltas),
            mean_rare_delta: mean,
            sd_rare_delta: sd,
            sign_test: sign_test(&deltas),
            rare_f1_deltas: deltas,
            macro_f1_delta: augmented.macro_f1.0 - baseline.macro_f1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossValResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldRecord>,
    pub summary: PairedSummary,
}

impl CrossValResult {
    /// Fails with the first fold whose training artifacts touch its test fold.
    pub fn audit(&self) -> Result<()> {
        for f in &self.folds {
            let leaked = f.leaked_ids();
            if !leaked.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "fold {} leaks {} test ids, first {}",
                    f.fold,
                    leaked.len(),
                    leaked[0]
                )));
            }
        }
        Ok(())
    }
}

/// Appends synthetic rare-class images to a training set.
fn with_synthetic(train: &LabeledDataset, images: &Tensor) -> Result<LabeledDataset> {
    let n = images.batch();
    Ok(LabeledDataset {
        images: Tensor::stack(&[train.images.clone(), images.clone()])?,
        labels: train.labels.iter().copied().chain(std::iter::repeat_n(Class::RARE, n)).collect(),
        ids: train.ids.iter().copied().chain(std::iter::repeat_n(SYNTHETIC_ID, n)).collect(),
    })
}

/// Builds a flow for `images` and fits it with eight-bit dequantization.
/// Weight and batch seeds are derived from `seed`, replacing those in
/// `recipe`.
pub fn fit_flow(images: &Tensor, recipe: &AugmentRecipe, seed: u64) -> Result<(FlowModel, TrainReport)> {
    let flow_cfg = FlowConfig {
        seed: derive_seed(seed, 1),
        ..recipe.flow.clone()
    };
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, 2),
        ..recipe.training.clone()
    };
    let (_, h, w, c) = images.dims4()?;
    let mut flow = FlowModel::new(flow_cfg, [h, w, c])?;
    let report = fit(&mut flow, images, &train_cfg, Some(&Dequantizer::eight_bit()))?;
    Ok((flow, report))
}

/// Fits a fresh flow to `images` and draws `count` interpolations between
/// them. Returns the set and the flow's final NLL on `images`.
pub(crate) fn augment_from(
    images: &LabeledDataset,
    recipe: &AugmentRecipe,
    fold_id: usize,
    seed: u64,
) -> Result<(AugmentationSet, Option<f64>)> {
    if recipe.count == 0 {
        return Ok((AugmentationSet::default(), None));
    }
    if images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fold {fold_id} has {} rare-class training images; augmentation needs at least 2",
            images.len()
        )));
    }
    let (flow, _) = fit_flow(&images.images, recipe, seed)?;
    let dq = Dequantizer::eight_bit();
    let mut rng = SeededRng::new(derive_seed(seed, 3));
    let nll = nll_loss(&flow, &dq.apply(&images.images, &mut rng), Some(&dq))?.nll_nats;
    let set = generate_augmentations(
        &flow,
        &images.images,
        &images.ids,
        recipe.count,
        &recipe.interpolation,
        &dq,
        fold_id,
        &mut rng,
    )?;
    Ok((set, Some(nll)))
}

/// Paired stratified k-fold cross-validation.
///
/// Every iteration holds out one fold for testing and splits the remaining
/// folds into classifier-train and validation parts. The baseline arm trains
/// the classifier on the classifier-train part. The augmented arm fits a
/// flow to the rare-class images of that same part, appends
/// `augment.count` interpolations to it, and trains the classifier with the
/// same seed and configuration. When no augmentations are requested the
/// augmented arm is the baseline arm.
pub fn cross_validate(dataset: &LabeledDataset, config: &CrossValConfig) -> Result<CrossValResult> {
    let plan = stratified_kfold(dataset, config.k, config.seed)?;
    let folds = (0..config.k)
        .map(|fold| run_fold(dataset, &plan, fold, config))
        .collect::<Result<Vec<_>>>()?;
    let result = CrossValResult {
        summary: PairedSummary::from_folds(&folds),
        plan,
        folds,
    };
    result.audit()?;
    Ok(result)
}

/// One iteration of [`cross_validate`]: both arms with `fold` held out.
pub fn run_fold(dataset: &LabeledDataset, plan: &FoldPlan, fold: usize, config: &CrossValConfig) -> Result<FoldRecord> {
    let fold_seed = derive_seed(config.seed, fold as u64 + 1);
    let test = dataset.subset(plan.test(fold));
    let rest = plan.train(fold);
    let split = stratified_split(dataset, Some(&rest), config.valid_fraction, 0.0, fold_seed)?;
    let train = dataset.subset(&split.train);
    let valid = dataset.subset(&split.valid);
    let clf_cfg = ClassifierConfig {
        seed: derive_seed(fold_seed, 10),
        ..config.classifier.clone()
    };

    let baseline_model = train_classifier(&train, &valid, &clf_cfg)?;
    let baseline = evaluate(&baseline_model.model, &test)?;

    let rare = train.subset(&train.positions_of(Class::RARE));
    let (augmentations, flow_nll) = augment_from(&rare, &config.augment, fold, derive_seed(fold_seed, 20))?;
    let augmented = match &augmentations.images {
        Some(images) => {
            let boosted = with_synthetic(&train, images)?;
            evaluate(&train_classifier(&boosted, &valid, &clf_cfg)?.model, &test)?
        }
        None => baseline,
    };
    let record = FoldRecord {
        fold,
        test_ids: test.ids,
        classifier_train_ids: train.ids,
        valid_ids: valid.ids,
        flow_train_ids: if config.augment.count > 0 { rare.ids } else { Vec::new() },
        augmentations,
        flow_nll,
        baseline,
        augmented,
    };
    log::info!(
        "fold {fold}: rare F1 {:.3} -> {:.3}, macro F1 {:.3} -> {:.3}",
        record.baseline.class(Class::RARE).f1,
        record.augmented.class(Class::RARE).f1,
        record.baseline.macro_f1,
        record.augmented.macro_f1,
    );
    Ok(record)
}
