use std::path::Path;

use super::images::write_pgm;
use super::{atomic_write, create_dir, csv_bytes};
use crate::error::Result;
use crate::eval::{Class, ClassMetrics, CrossValResult, MetricSummary, SweepResult, NUM_CLASSES};
use crate::objective::LossReport;
use crate::synthesis::AugmentationSet;
use crate::tensor::Tensor;

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

/// `step, nll_nats, bits_per_dim, lr` per optimizer step.
pub fn write_loss_curve(path: &Path, curve: &[LossReport]) -> Result<()> {
    let rows = curve
        .iter()
        .map(|r| vec![s(r.step), s(r.nll_nats), s(r.bits_per_dim), s(r.lr)]);
    atomic_write(path, &csv_bytes(&["step", "nll_nats", "bits_per_dim", "lr"], rows)?)
}

fn provenance_rows(set: &AugmentationSet) -> impl Iterator<Item = Vec<String>> + '_ {
    set.provenance
        .iter()
        .map(|p| vec![s(p.source_a), s(p.source_b), s(p.t), s(p.fold_id)])
}

const PROVENANCE_HEADER: [&str; 4] = ["source_a", "source_b", "t", "fold_id"];

/// Images as `images/aug_<i>.pgm` plus `provenance.csv`, row `i` describing
/// image `i`.
pub fn write_augmentations(dir: &Path, set: &AugmentationSet) -> Result<()> {
    create_dir(&dir.join("images"))?;
    if let Some(images) = &set.images {
        for i in 0..images.batch() {
            write_pgm(&dir.join(format!("images/aug_{i:05}.pgm")), &images.item_at(i))?;
        }
    }
    atomic_write(&dir.join("provenance.csv"), &csv_bytes(&PROVENANCE_HEADER, provenance_rows(set))?)
}

fn metric_rows<'a>(fold: usize, arm: &'a str, m: &'a ClassMetrics) -> impl Iterator<Item = Vec<String>> + 'a {
    Class::ALL.into_iter().map(move |c| {
        let p = m.class(c);
        vec![s(fold), s(c), s(p.precision), s(p.recall), s(p.f1), arm.to_string()]
    })
}

fn summary_rows<'a>(arm: &'a str, m: &'a MetricSummary) -> impl Iterator<Item = Vec<String>> + 'a {
    Class::ALL.into_iter().map(move |c| {
        let k = c.index();
        vec![
            arm.to_string(),
            s(c),
            s(m.precision[k].0),
            s(m.precision[k].1),
            s(m.recall[k].0),
            s(m.recall[k].1),
            s(m.f1[k].0),
            s(m.f1[k].1),
        ]
    })
}

/// Cross-validation artifacts in `dir`:
///
/// * `metrics.csv`: per fold, class and arm
/// * `summary.csv`: mean and sd over folds, one row per class and arm
/// * `paired.csv`: per-fold rare-class F₁ of both arms and their difference
/// * `paired_summary.txt`: median delta, sign test, macro-F₁ difference
/// * `folds.csv`: the fold assignment
/// * `provenance.csv`: every augmentation of every fold
pub fn write_crossval(dir: &Path, result: &CrossValResult) -> Result<()> {
    create_dir(dir)?;
    let metrics = result.folds.iter().flat_map(|f| {
        metric_rows(f.fold, "baseline", &f.baseline).chain(metric_rows(f.fold, "augmented", &f.augmented))
    });
    atomic_write(
        &dir.join("metrics.csv"),
        &csv_bytes(&["fold", "class", "precision", "recall", "f1", "arm"], metrics)?,
    )?;

    let sm = &result.summary;
    let summary = summary_rows("baseline", &sm.baseline).chain(summary_rows("augmented", &sm.augmented));
    atomic_write(
        &dir.join("summary.csv"),
        &csv_bytes(
            &["arm", "class", "precision_mean", "precision_sd", "recall_mean", "recall_sd", "f1_mean", "f1_sd"],
            summary,
        )?,
    )?;

    let rare = Class::RARE;
    let paired = result.folds.iter().map(|f| {
        vec![
            s(f.fold),
            s(f.baseline.class(rare).f1),
            s(f.augmented.class(rare).f1),
            s(f.rare_f1_delta()),
            s(f.baseline.macro_f1),
            s(f.augmented.macro_f1),
            f.flow_nll.map(s).unwrap_or_default(),
        ]
    });
    atomic_write(
        &dir.join("paired.csv"),
        &csv_bytes(
            &["fold", "baseline_rare_f1", "augmented_rare_f1", "delta", "baseline_macro_f1", "augmented_macro_f1", "flow_nll"],
            paired,
        )?,
    )?;
    let st = &sm.sign_test;
    let text = format!(
        "median_rare_f1_delta = {}\nmean_rare_f1_delta = {}\nsd_rare_f1_delta = {}\n\
         sign_test_positive = {}\nsign_test_negative = {}\nsign_test_ties = {}\nsign_test_p = {}\n\
         baseline_macro_f1 = {}\naugmented_macro_f1 = {}\nmacro_f1_delta = {}\n",
        sm.median_rare_delta,
        sm.mean_rare_delta,
        sm.sd_rare_delta,
        st.positive,
        st.negative,
        st.ties,
        st.p_value,
        sm.baseline.macro_f1.0,
        sm.augmented.macro_f1.0,
        sm.macro_f1_delta,
    );
    atomic_write(&dir.join("paired_summary.txt"), text.as_bytes())?;

    let folds = result
        .plan
        .folds
        .iter()
        .enumerate()
        .flat_map(|(f, ids)| ids.iter().map(move |&i| vec![s(f), s(i)]));
    atomic_write(&dir.join("folds.csv"), &csv_bytes(&["fold", "position"], folds)?)?;

    let prov = result.folds.iter().flat_map(|f| provenance_rows(&f.augmentations));
    atomic_write(&dir.join("provenance.csv"), &csv_bytes(&PROVENANCE_HEADER, prov)?)
}

/// `sweep.csv` (one row per size and run), `sweep_summary.csv` (mean and sd
/// per size), `recommendation.txt`, and `sweep.pgm`, a plot of mean F₁
/// against size.
pub fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    create_dir(dir)?;
    let rows = result.rows.iter().map(|r| {
        let mut v = vec![s(r.size), s(r.run)];
        v.extend(r.f1.iter().map(|&x| s(x)));
        v.push(s(r.macro_f1));
        v
    });
    atomic_write(
        &dir.join("sweep.csv"),
        &csv_bytes(&["size", "run", "f1_good", "f1_medium", "f1_bad", "macro_f1"], rows)?,
    )?;
    let summary = result.curves.iter().map(|(size, per)| {
        let mut v = vec![s(size)];
        for (m, sd) in per {
            v.push(s(m));
            v.push(s(sd));
        }
        v
    });
    atomic_write(
        &dir.join("sweep_summary.csv"),
        &csv_bytes(
            &["size", "f1_good_mean", "f1_good_sd", "f1_medium_mean", "f1_medium_sd", "f1_bad_mean", "f1_bad_sd"],
            summary,
        )?,
    )?;
    atomic_write(
        &dir.join("recommendation.txt"),
        format!("recommended_size = {}\n", result.recommended).as_bytes(),
    )?;
    write_sweep_plot(&dir.join("sweep.pgm"), &result.curves)
}

const PLOT_W: usize = 320;
const PLOT_H: usize = 200;
const MARGIN: usize = 12;

/// Mean F₁ per class against augmentation size on a linear size axis, F₁ in
/// `[0, 1]` bottom to top. Good, medium and bad are drawn in decreasing
/// gray levels, the rare class black; the recommended size is not marked.
pub fn write_sweep_plot(path: &Path, curves: &[(usize, [(f64, f64); NUM_CLASSES])]) -> Result<()> {
    let white = 255.0 / 256.0;
    let mut px = vec![white; PLOT_W * PLOT_H];
    let max_size = curves.iter().map(|c| c.0).max().unwrap_or(0).max(1) as f64;
    let to_xy = |size: usize, f1: f64| {
        let x = MARGIN as f64 + size as f64 / max_size * (PLOT_W - 2 * MARGIN) as f64;
        let y = (PLOT_H - MARGIN) as f64 - f1.clamp(0.0, 1.0) * (PLOT_H - 2 * MARGIN) as f64;
        (x.round() as i64, y.round() as i64)
    };
    let mut plot = |x: i64, y: i64, v: f64| {
        if (0..PLOT_W as i64).contains(&x) && (0..PLOT_H as i64).contains(&y) {
            px[y as usize * PLOT_W + x as usize] = v;
        }
    };
    // Axes with ticks at F₁ = 0, 0.25, ..., 1.
    for x in MARGIN..=PLOT_W - MARGIN {
        plot(x as i64, (PLOT_H - MARGIN) as i64, 0.0);
    }
    for y in MARGIN..=PLOT_H - MARGIN {
        plot(MARGIN as i64, y as i64, 0.0);
    }
    for q in 0..=4 {
        let (_, y) = to_xy(0, q as f64 / 4.0);
        for dx in 1..4 {
            plot(MARGIN as i64 - dx, y, 0.0);
        }
    }
    let shades = [0.6, 0.35, 0.0];
    for k in 0..NUM_CLASSES {
        let pts: Vec<(i64, i64)> = curves.iter().map(|(size, per)| to_xy(*size, per[k].0)).collect();
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for i in 0..=n {
                let x = x0 + (x1 - x0) * i / n;
                let y = y0 + (y1 - y0) * i / n;
                plot(x, y, shades[k]);
            }
        }
        for &(x, y) in &pts {
            for d in -2..=2 {
                plot(x + d, y, shades[k]);
                plot(x, y + d, shades[k]);
            }
        }
    }
    write_pgm(path, &Tensor::new(&[PLOT_H, PLOT_W, 1], px)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_pgm;

    #[test]
    fn loss_curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let curve = [LossReport {
            step: 0,
            nll_nats: 1.5,
            bits_per_dim: 0.25,
            lr: 1e-3,
        }];
        write_loss_curve(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "step,nll_nats,bits_per_dim,lr\n0,1.5,0.25,0.001\n");
    }

    #[test]
    fn plot_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.pgm");
        let curves = vec![(0, [(0.9, 0.0), (0.7, 0.0), (0.3, 0.0)]), (100, [(0.9, 0.0), (0.7, 0.0), (0.5, 0.0)])];
        write_sweep_plot(&p, &curves).unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!(img.shape(), &[PLOT_H, PLOT_W, 1]);
        assert!(img.data().iter().any(|&v| v == 0.0));
    }
}
