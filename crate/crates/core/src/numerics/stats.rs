use crate::error::{ensure, Result};

/// Nearest-rank percentile: the element at index `ceil(p/100·n) − 1` of the
/// ascending sort, clamped to `[0, n−1]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    ensure!(!values.is_empty(), "percentile of an empty list");
    ensure!(p > 0.0 && p < 100.0, "percentile rank {p} outside (0, 100)");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank_index(sorted.len(), p)])
}

pub(crate) fn nearest_rank_index(n: usize, p: f64) -> usize {
    let rank = (p / 100.0 * n as f64).ceil() as isize - 1;
    rank.clamp(0, n as isize - 1) as usize
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn uniform_ranks() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.0);
    }

    #[test]
    fn single_element() {
        for p in [0.1, 50.0, 99.9] {
            assert_eq!(percentile(&[3.25], p).unwrap(), 3.25);
        }
    }

    #[test]
    fn empty_is_an_error() {
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn matches_sort_oracle_at_99_5() {
        let mut rng = Rng::new(99);
        let v: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // ceil(0.995 * 1000) - 1 = 994
        assert_eq!(percentile(&v, 99.5).unwrap(), sorted[994]);
    }

    #[test]
    fn std_of_constant_is_zero() {
        assert_eq!(std_dev(&[2.0, 2.0, 2.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn monotone_in_rank(v in prop::collection::vec(-1e6f64..1e6, 1..200), a in 0.01f64..99.99, b in 0.01f64..99.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
        }
    }
}
