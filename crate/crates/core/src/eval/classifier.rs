use super::metrics::ClassMetrics;
use super::{Class, LabeledDataset, NUM_CLASSES};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::param::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// How the head reduces the last feature map to one vector per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Average,
    Max,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Average => "average",
            Pooling::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Pooling::Average),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::Config(format!("unknown pooling {s:?}, expected average or max"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// Filters in the first and second 3×3 convolution blocks.
    pub filters: [usize; 2],
    pub pooling: Pooling,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            filters: [8, 16],
            pooling: Pooling::Average,
            learning_rate: 1e-2,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.contains(&0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("classifier filters, batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("classifier learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Two conv blocks (3×3 conv, ReLU, 2×2 max-pool) followed by global
/// pooling and a dense layer to three logits. Inputs in `[0, 1]` are
/// mapped to `[−1, 1]` first.
#[derive(Debug, Clone)]
pub struct BaselineCnn {
    store: ParamStore,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    dense: (ParamId, ParamId),
    pooling: Pooling,
}

const EVAL_CHUNK: usize = 256;

impl BaselineCnn {
    pub fn new(config: &ClassifierConfig, in_channels: usize, rng: &mut SeededRng) -> Result<Self> {
        let [f1, f2] = config.filters;
        let mut store = ParamStore::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let conv1 = (
            store.add("conv1/w", Tensor::randn(&[3, 3, in_channels, f1], he(9 * in_channels), rng))?,
            store.add("conv1/b", Tensor::zeros(&[f1]))?,
        );
        let conv2 = (
            store.add("conv2/w", Tensor::randn(&[3, 3, f1, f2], he(9 * f1), rng))?,
            store.add("conv2/b", Tensor::zeros(&[f2]))?,
        );
        let dense = (
            store.add("dense/w", Tensor::randn(&[f2, NUM_CLASSES], (1.0 / f2 as f64).sqrt(), rng))?,
            store.add("dense/b", Tensor::zeros(&[NUM_CLASSES]))?,
        );
        Ok(Self {
            store,
            conv1,
            conv2,
            dense,
            pooling: config.pooling,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `[B, 3]` logits.
    pub fn logits_tape(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.add_const(x, -0.5)?;
        let mut h = tape.scale(h, 2.0)?;
        for (w, b) in [self.conv1, self.conv2] {
            h = tape.conv2d(h, p.var(w))?;
            h = tape.add_channel(h, p.var(b))?;
            h = tape.relu(h)?;
            h = tape.max_pool2(h)?;
        }
        let pooled = match self.pooling {
            Pooling::Average => tape.global_avg_pool(h)?,
            Pooling::Max => tape.global_max_pool(h)?,
        };
        let logits = tape.matmul(pooled, p.var(self.dense.0))?;
        tape.add_channel(logits, p.var(self.dense.1))
    }

    fn loss_tape(&self, tape: &mut Tape, p: &Bound, images: &Tensor, labels: &[usize]) -> Result<Var> {
        let x = tape.constant(images.clone());
        let logits = self.logits_tape(tape, p, x)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// Mean cross-entropy over a dataset.
    pub fn loss(&self, data: &LabeledDataset) -> Result<f64> {
        let labels = data.label_indices();
        let mut total = 0.0;
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(data.len());
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let l = self.loss_tape(&mut tape, &p, &data.images.select(&idx), &labels[start..end])?;
            total += tape.value(l).item() * (end - start) as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Row-wise logits for `N×H×W×C` images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.batch();
        let mut out = Vec::with_capacity(n * NUM_CLASSES);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let x = tape.constant(images.select(&idx));
            let l = self.logits_tape(&mut tape, &p, x)?;
            out.extend_from_slice(tape.value(l).data());
        }
        Tensor::new(&[n, NUM_CLASSES], out)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<Class>> {
        let logits = self.logits(images)?;
        logits
            .data()
            .chunks(NUM_CLASSES)
            .map(|row| {
                let best = (0..NUM_CLASSES).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                Class::from_index(best)
            })
            .collect()
    }
}

/// Confusion-matrix metrics of `classifier` on `test`.
pub fn evaluate(classifier: &BaselineCnn, test: &LabeledDataset) -> Result<ClassMetrics> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty test set".into()));
    }
    let predicted = classifier.predict(&test.images)?;
    Ok(ClassMetrics::from_predictions(&test.labels, &predicted))
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    /// Weights from the epoch with the lowest validation loss.
    pub model: BaselineCnn,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// `(train_loss, valid_loss)` per completed epoch; train loss is the mean
    /// over the epoch's minibatches.
    pub history: Vec<(f64, f64)>,
}

/// Trains a [`BaselineCnn`] with Adam at a constant learning rate, stopping
/// once the validation loss has not improved for `patience` epochs. Weights
/// are initialized and batches shuffled from `config.seed` alone, so the
/// result is a deterministic function of the inputs.
pub fn train_classifier(
    train: &LabeledDataset,
    valid: &LabeledDataset,
    config: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    if train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidArgument("training set contains a single class".into()));
    }
    let mut rng = SeededRng::new(config.seed);
    let mut model = BaselineCnn::new(config, train.image_shape()[2], &mut rng)?;
    let labels = train.label_indices();
    let mut adam = Adam::default();
    let mut best = (model.store.clone(), 0usize, model.loss(valid)?);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let loss = model.loss_tape(&mut tape, &p, &train.images.select(chunk), &batch_labels)?;
            sum += tape.value(loss).item() * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads, &p);
            adam.step(&mut model.store, config.learning_rate)?;
        }
        let valid_loss = model.loss(valid)?;
        history.push((sum / train.len() as f64, valid_loss));
        if valid_loss < best.2 {
            best = (model.store.clone(), epoch, valid_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.store = best.0;
    Ok(TrainedClassifier {
        model,
        best_epoch: best.1,
        best_valid_loss: best.2,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_synthetic_dataset, SyntheticSeismoConfig};

    fn tiny() -> LabeledDataset {
        generate_synthetic_dataset(&SyntheticSeismoConfig {
            size: 16,
            count: 60,
            ratios: [0.4, 0.35, 0.25],
            seed: 5,
            ..SyntheticSeismoConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn overfits_ten_samples() {
        let ds = tiny();
        let pick: Vec<usize> = (0..10).collect();
        let train = ds.subset(&pick);
        let cfg = ClassifierConfig {
            learning_rate: 1e-2,
            batch_size: 10,
            max_epochs: 300,
            patience: 300,
            ..ClassifierConfig::default()
        };
        let trained = train_classifier(&train, &train, &cfg).unwrap();
        let m = evaluate(&trained.model, &train).unwrap();
        assert_eq!(m.accuracy, 1.0, "history tail {:?}", trained.history.last());
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = tiny();
        let train = ds.subset(&(0..40).collect::<Vec<_>>());
        let valid = ds.subset(&(40..60).collect::<Vec<_>>());
        let cfg = ClassifierConfig {
            max_epochs: 3,
            ..ClassifierConfig::default()
        };
        let a = train_classifier(&train, &valid, &cfg).unwrap();
        let b = train_classifier(&train, &valid, &cfg).unwrap();
        for (x, y) in a.model.store().iter().zip(b.model.store().iter()) {
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn single_class_rejected() {
        let ds = tiny();
        let goods = ds.positions_of(Class::Good);
        let train = ds.subset(&goods);
        assert!(train_classifier(&train, &train, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn early_stopping_keeps_best() {
        let ds = tiny();
        let train = ds.subset(&(0..40).collect::<Vec<_>>());
        let valid = ds.subset(&(40..60).collect::<Vec<_>>());
        let cfg = ClassifierConfig {
            max_epochs: 30,
            patience: 2,
            ..ClassifierConfig::default()
        };
        let t = train_classifier(&train, &valid, &cfg).unwrap();
        let min = t.history.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
        assert!(t.best_valid_loss <= min);
        assert!((t.model.loss(&valid).unwrap() - t.best_valid_loss).abs() < 1e-12);
        if t.history.len() < 30 {
            assert_eq!(t.history.len() - t.best_epoch, 2);
        }
    }
}
