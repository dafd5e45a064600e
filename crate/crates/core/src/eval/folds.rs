use super::{Class, LabeledDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// `k` disjoint folds of dataset positions covering every item once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Sorted positions of every fold except `fold`.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut t: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        t.sort_unstable();
        t
    }

    /// Checks disjointness and that the folds cover `0..n` exactly.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for f in &self.folds {
            for &i in f {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("fold plan repeats or overruns index {i}")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("fold plan does not cover every index".into()));
        }
        Ok(())
    }
}

/// Stratified k-fold assignment.
///
/// Every fold receives `⌊n_c/k⌋` shuffled items of each class `c`. The
/// `n_c mod k` leftovers of each class go to a cyclic block of consecutive
/// folds; the block offsets are chosen to minimize the largest
/// `|count − proportion·fold_size|` over folds and classes, so per-fold class
/// counts differ by at most one and sit within one sample of the global
/// proportion.
pub fn stratified_kfold(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let counts = dataset.class_counts();
    for c in Class::ALL {
        if counts[c.index()] < k {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, fewer than k = {k}",
                counts[c.index()]
            )));
        }
    }
    let offsets = best_offsets(&counts, k);
    let mut rng = SeededRng::new(seed);
    let mut folds = vec![Vec::new(); k];
    for c in Class::ALL {
        let mut pos = dataset.positions_of(c);
        rng.shuffle(&mut pos);
        let sizes = class_fold_counts(counts[c.index()], k, offsets[c.index()]);
        let mut it = pos.into_iter();
        for (fold, n) in folds.iter_mut().zip(sizes) {
            fold.extend(it.by_ref().take(n));
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds })
}

/// Items of a class with `n` members per fold when its leftovers start at
/// fold `offset`.
fn class_fold_counts(n: usize, k: usize, offset: usize) -> Vec<usize> {
    let (base, extra) = (n / k, n % k);
    (0..k).map(|f| base + usize::from((f + k - offset) % k < extra)).collect()
}

fn best_offsets(counts: &[usize; NUM_CLASSES], k: usize) -> [usize; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    let worst = |offsets: &[usize; NUM_CLASSES]| {
        let per: Vec<Vec<usize>> = (0..NUM_CLASSES)
            .map(|c| class_fold_counts(counts[c], k, offsets[c]))
            .collect();
        (0..k)
            .flat_map(|f| {
                let size: usize = per.iter().map(|p| p[f]).sum();
                let per = &per;
                (0..NUM_CLASSES).map(move |c| {
                    (per[c][f] as f64 - counts[c] as f64 / total as f64 * size as f64).abs()
                })
            })
            .fold(0.0, f64::max)
    };
    let mut best = ([0; NUM_CLASSES], f64::INFINITY);
    // The first class's offset is fixed by rotational symmetry.
    for o1 in 0..k {
        for o2 in 0..k {
            let cand = [0, o1, o2];
            let w = worst(&cand);
            if w < best.1 - 1e-12 {
                best = (cand, w);
            }
        }
    }
    best.0
}

/// Disjoint train/validation/test positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class stratified split of `positions` (or of the whole dataset when
/// `positions` is `None`). Within each class the validation and test shares
/// are `round(fraction·n_class)`; the rest is training data.
pub fn stratified_split(
    dataset: &LabeledDataset,
    positions: Option<&[usize]>,
    valid_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Split> {
    if !(valid_fraction >= 0.0 && test_fraction >= 0.0 && valid_fraction + test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fractions valid={valid_fraction} test={test_fraction} must be non-negative with sum < 1"
        )));
    }
    let all: Vec<usize>;
    let positions = match positions {
        Some(p) => p,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    let mut rng = SeededRng::new(seed);
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for c in Class::ALL {
        let mut pos: Vec<usize> = positions.iter().copied().filter(|&p| dataset.labels[p] == c).collect();
        rng.shuffle(&mut pos);
        let n = pos.len() as f64;
        let nv = (valid_fraction * n).round() as usize;
        let nt = ((test_fraction * n).round() as usize).min(pos.len() - nv.min(pos.len()));
        let nv = nv.min(pos.len());
        split.valid.extend_from_slice(&pos[..nv]);
        split.test.extend_from_slice(&pos[nv..nv + nt]);
        split.train.extend_from_slice(&pos[nv + nt..]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn with_counts(counts: [usize; 3]) -> LabeledDataset {
        let labels: Vec<Class> = Class::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
            .collect();
        let n = labels.len();
        LabeledDataset::new(Tensor::zeros(&[n, 1, 1, 1]), labels).unwrap()
    }

    fn per_fold_counts(ds: &LabeledDataset, plan: &FoldPlan) -> Vec<[usize; 3]> {
        plan.folds
            .iter()
            .map(|f| {
                let mut c = [0; 3];
                for &i in f {
                    c[ds.labels[i].index()] += 1;
                }
                c
            })
            .collect()
    }

    #[test]
    fn divisible_case_is_exact() {
        let ds = with_counts([700, 220, 80]);
        let plan = stratified_kfold(&ds, 10, 3).unwrap();
        plan.check_partition(ds.len()).unwrap();
        for c in per_fold_counts(&ds, &plan) {
            assert_eq!(c, [70, 22, 8]);
        }
    }

    #[test]
    fn small_case_counts_differ_by_at_most_one() {
        let ds = with_counts([7, 4, 3]);
        let plan = stratified_kfold(&ds, 3, 0).unwrap();
        let counts = per_fold_counts(&ds, &plan);
        for cls in 0..3 {
            let lo = counts.iter().map(|c| c[cls]).min().unwrap();
            let hi = counts.iter().map(|c| c[cls]).max().unwrap();
            assert!(hi - lo <= 1, "{counts:?}");
        }
        // A class smaller than k is refused.
        assert!(stratified_kfold(&with_counts([7, 4, 2]), 3, 0).is_err());
    }

    #[test]
    fn train_excludes_test() {
        let ds = with_counts([20, 10, 5]);
        let plan = stratified_kfold(&ds, 5, 1).unwrap();
        for f in 0..5 {
            let train = plan.train(f);
            assert_eq!(train.len() + plan.test(f).len(), ds.len());
            assert!(plan.test(f).iter().all(|i| train.binary_search(i).is_err()));
        }
    }

    #[test]
    fn split_is_disjoint_and_stratified() {
        let ds = with_counts([700, 220, 80]);
        let s = stratified_split(&ds, None, 0.15, 0.15, 4).unwrap();
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 1000);
        let test_bad = s.test.iter().filter(|&&i| ds.labels[i] == Class::Bad).count();
        assert_eq!(test_bad, 12);
        let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1000);
        assert!(stratified_split(&ds, None, 0.6, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn fold_plan_invariants(g in 5usize..60, m in 5usize..40, b in 5usize..20, k in 2usize..6, seed in any::<u64>()) {
            let ds = with_counts([g, m, b]);
            let plan = stratified_kfold(&ds, k, seed).unwrap();
            prop_assert!(plan.check_partition(ds.len()).is_ok());
            let total = ds.len() as f64;
            let global = ds.class_counts();
            for (f, counts) in plan.folds.iter().zip(per_fold_counts(&ds, &plan)) {
                let size = f.len() as f64;
                for cls in 0..3 {
                    let dev = (counts[cls] as f64 / size - global[cls] as f64 / total).abs();
                    prop_assert!(dev <= 1.0 / size + 1e-12, "fold dev {dev} size {size}");
                }
            }
        }
    }
}
