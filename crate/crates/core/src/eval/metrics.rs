use super::stats::mean_sd;
use super::{Class, NUM_CLASSES};

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[Class], predicted: &[Class]) -> Self {
        debug_assert_eq!(truth.len(), predicted.len());
        let mut counts = [[0; NUM_CLASSES]; NUM_CLASSES];
        for (t, p) in truth.iter().zip(predicted) {
            counts[t.index()][p.index()] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `a / b`, with 0/0 taken as 0.
fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class and macro-averaged precision, recall and F₁ plus accuracy.
/// Any 0/0 (no predictions of a class, no members of a class, or P = R = 0)
/// evaluates to 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub per_class: [PerClass; NUM_CLASSES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl ClassMetrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let c = &confusion.counts;
        let per_class: [PerClass; NUM_CLASSES] = std::array::from_fn(|k| {
            let tp = c[k][k];
            let predicted: usize = (0..NUM_CLASSES).map(|t| c[t][k]).sum();
            let actual: usize = c[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            PerClass { precision, recall, f1 }
        });
        let avg = |f: fn(&PerClass) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
        Self {
            per_class,
            macro_precision: avg(|p| p.precision),
            macro_recall: avg(|p| p.recall),
            macro_f1: avg(|p| p.f1),
            accuracy: ratio(confusion.trace(), confusion.total()),
            confusion,
        }
    }

    pub fn from_predictions(truth: &[Class], predicted: &[Class]) -> Self {
        Self::from_confusion(ConfusionMatrix::from_predictions(truth, predicted))
    }

    pub fn class(&self, c: Class) -> &PerClass {
        &self.per_class[c.index()]
    }
}

/// Cross-fold `(mean, sd)` of every metric in [`ClassMetrics`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSummary {
    pub precision: [(f64, f64); NUM_CLASSES],
    pub recall: [(f64, f64); NUM_CLASSES],
    pub f1: [(f64, f64); NUM_CLASSES],
    pub macro_precision: (f64, f64),
    pub macro_recall: (f64, f64),
    pub macro_f1: (f64, f64),
    pub accuracy: (f64, f64),
}

impl MetricSummary {
    pub fn from_folds(folds: &[ClassMetrics]) -> Self {
        let col = |f: &dyn Fn(&ClassMetrics) -> f64| mean_sd(&folds.iter().map(f).collect::<Vec<_>>());
        Self {
            precision: std::array::from_fn(|k| col(&|m| m.per_class[k].precision)),
            recall: std::array::from_fn(|k| col(&|m| m.per_class[k].recall)),
            f1: std::array::from_fn(|k| col(&|m| m.per_class[k].f1)),
            macro_precision: col(&|m| m.macro_precision),
            macro_recall: col(&|m| m.macro_recall),
            macro_f1: col(&|m| m.macro_f1),
            accuracy: col(&|m| m.accuracy),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn labels(counts: [usize; 3]) -> Vec<Class> {
        Class::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let t = labels([5, 3, 2]);
        let m = ClassMetrics::from_predictions(&t, &t);
        for p in m.per_class {
            assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!((m.macro_f1, m.accuracy), (1.0, 1.0));
    }

    #[test]
    fn majority_predictor() {
        let t = labels([70, 22, 8]);
        let p = vec![Class::Good; 100];
        let m = ClassMetrics::from_predictions(&t, &p);
        assert_eq!(m.class(Class::Good).recall, 1.0);
        assert!((m.class(Class::Good).precision - 0.7).abs() < 1e-15);
        assert_eq!(m.class(Class::Bad).recall, 0.0);
        assert_eq!(m.class(Class::Bad).precision, 0.0);
        assert_eq!(m.class(Class::Bad).f1, 0.0);
        assert!((m.accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_matrix() {
        // truth rows, predicted columns
        let cm = ConfusionMatrix {
            counts: [[5, 2, 1], [1, 3, 0], [0, 1, 2]],
        };
        let m = ClassMetrics::from_confusion(cm);
        let p_med = 3.0 / 6.0;
        let r_med = 3.0 / 4.0;
        assert!((m.class(Class::Medium).precision - p_med).abs() < 1e-15);
        assert!((m.class(Class::Medium).recall - r_med).abs() < 1e-15);
        assert!((m.class(Class::Medium).f1 - 2.0 * p_med * r_med / (p_med + r_med)).abs() < 1e-15);
        assert!((m.class(Class::Bad).precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 10.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn summary_of_identical_folds_has_zero_sd() {
        let t = labels([4, 4, 4]);
        let m = ClassMetrics::from_predictions(&t, &t);
        let s = MetricSummary::from_folds(&[m, m, m]);
        assert_eq!(s.macro_f1, (1.0, 0.0));
    }

    proptest! {
        #[test]
        fn metric_identities(seed in any::<u64>(), n in 1usize..200) {
            let mut rng = SeededRng::new(seed);
            let t: Vec<Class> = (0..n).map(|_| Class::ALL[rng.below(3)]).collect();
            let p: Vec<Class> = (0..n).map(|_| Class::ALL[rng.below(3)]).collect();
            let m = ClassMetrics::from_predictions(&t, &p);
            let mean_f1 = m.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
            prop_assert!((m.macro_f1 - mean_f1).abs() < 1e-15);
            let hits = t.iter().zip(&p).filter(|(a, b)| a == b).count();
            prop_assert!((m.accuracy - hits as f64 / n as f64).abs() < 1e-15);
            prop_assert_eq!(m.confusion.total(), n);
            for c in m.per_class {
                prop_assert!((0.0..=1.0).contains(&c.f1));
                prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-15);
            }
        }
    }
}
