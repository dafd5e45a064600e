/// Mean and sample standard deviation (`n − 1` denominator; 0 for fewer
/// than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of a paired sign test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// One-sided `P(X ≥ positive)` for `X ~ Binomial(positive + negative, ½)`.
    pub p_value: f64,
}

/// One-sided exact sign test of "deltas tend to be positive". Zero deltas are
/// dropped; with no non-zero deltas the p-value is 1.
pub fn sign_test(deltas: &[f64]) -> SignTest {
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let negative = deltas.iter().filter(|&&d| d < 0.0).count();
    let ties = deltas.len() - positive - negative;
    let n = positive + negative;
    let mut tail = 0.0;
    let mut binom = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            binom = binom * (n - k + 1) as f64 / k as f64;
        }
        if k >= positive {
            tail += binom;
        }
    }
    SignTest {
        positive,
        negative,
        ties,
        p_value: (tail / 2f64.powi(n as i32)).min(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_tail_probabilities() {
        // 8 of 10: (45 + 10 + 1) / 1024.
        let d: Vec<f64> = (0..10).map(|i| if i < 8 { 1.0 } else { -1.0 }).collect();
        let t = sign_test(&d);
        assert!((t.p_value - 56.0 / 1024.0).abs() < 1e-15);
        assert_eq!((t.positive, t.negative, t.ties), (8, 2, 0));
        assert_eq!(sign_test(&[0.0, 0.0]).p_value, 1.0);
        assert!((sign_test(&[1.0, 0.0, -1.0]).p_value - 0.75).abs() < 1e-15);
        assert!((sign_test(&[1.0; 10]).p_value - 1.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn summary_statistics() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    proptest::proptest! {
        #[test]
        fn sign_test_is_a_probability_and_flips_with_the_deltas(d in proptest::collection::vec(-1.0f64..1.0, 0..30)) {
            let up = sign_test(&d);
            let down = sign_test(&d.iter().map(|x| -x).collect::<Vec<_>>());
            proptest::prop_assert!((0.0..=1.0).contains(&up.p_value));
            proptest::prop_assert_eq!((up.positive, up.negative), (down.negative, down.positive));
            // P(X ≥ k) + P(X ≤ k) = 1 + P(X = k) ≥ 1 by symmetry of Bin(n, ½).
            proptest::prop_assert!(up.p_value + down.p_value >= 1.0 - 1e-12);
        }
    }
}
