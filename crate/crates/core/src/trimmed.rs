//! Trimmed inner products and the trimmed second-moment matrix built from them.

use std::cmp::Ordering;

use nalgebra::DMatrix;

use crate::error::{check_dim, invalid, Result};
use crate::par;

/// Number of largest-magnitude products to discard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrimSpec {
    pub drop_count: usize,
}

impl TrimSpec {
    pub fn new(drop_count: usize) -> Self {
        Self { drop_count }
    }

    /// `floor(lambda * n)` products dropped out of `n`.
    pub fn from_fraction(lambda: f64, n: usize) -> Result<Self> {
        check_fraction(lambda)?;
        Ok(Self {
            drop_count: (lambda * n as f64).floor() as usize,
        })
    }
}

pub(crate) fn check_fraction(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(invalid(
            "lambda",
            format!("must lie in [0, 1), got {lambda}"),
        ))
    }
}

/// Sum of `x_i * y_i` over the `N - drop_count` indices with the smallest
/// `|x_i * y_i|`. Equal magnitudes keep the lower index first.
///
/// Selection is linear-time on average; the kept terms are summed in index
/// order.
pub fn trimmed_inner(x: &[f64], y: &[f64], spec: TrimSpec) -> Result<f64> {
    check_dim("trimmed inner product", x.len(), y.len())?;
    let n = x.len();
    if spec.drop_count >= n {
        return Err(invalid(
            "drop_count",
            format!(
                "must be below the vector length {n}, got {}",
                spec.drop_count
            ),
        ));
    }
    let products: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    if spec.drop_count == 0 {
        return Ok(products.iter().sum());
    }
    Ok(sum_smallest(&products, n - spec.drop_count))
}

fn by_magnitude_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Sum, in index order, of the `keep` entries of smallest magnitude.
fn sum_smallest(products: &[f64], keep: usize) -> f64 {
    let mut keys: Vec<(f64, usize)> = products.iter().map(|q| q.abs()).zip(0..).collect();
    // The key order is total, so the first `keep` slots after selection are
    // exactly the prefix of the stable ascending sort.
    keys.select_nth_unstable_by(keep, by_magnitude_then_index);
    let mut kept = vec![false; products.len()];
    for &(_, i) in &keys[..keep] {
        kept[i] = true;
    }
    products
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(q, _)| q)
        .sum()
}

/// Row-major copy of the rows of a column-sample matrix.
pub(crate) fn rows_of(samples: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let t = samples.transpose();
    t.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

/// Matrix of pairwise trimmed inner products between the rows of `samples`
/// (features x samples), dropping `floor(lambda * N)` products per entry.
///
/// With `lambda = 0` this is the plain second-moment matrix `X X^T`.
pub fn trimmed_covariance(samples: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    check_fraction(lambda)?;
    let (p, n) = samples.shape();
    if n < 2 {
        return Err(invalid(
            "samples",
            format!("need at least 2 columns, got {n}"),
        ));
    }
    let spec = TrimSpec::from_fraction(lambda, n)?;
    let rows = rows_of(samples);
    let upper: Vec<Vec<f64>> = par::map_indexed(p, |i| {
        (i..p)
            .map(|j| trimmed_inner(&rows[i], &rows[j], spec).expect("validated shapes"))
            .collect()
    });
    let mut out = DMatrix::zeros(p, p);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            out[(i, i + off)] = v;
            out[(i + off, i)] = v;
        }
    }
    Ok(out)
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("symmetrize", m.nrows(), m.ncols())?;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // Same operands in the same order for (i, j) and (j, i), so the
            // result is bit-exactly symmetric.
            let (a, b) = if i <= j {
                (m[(i, j)], m[(j, i)])
            } else {
                (m[(j, i)], m[(i, j)])
            };
            out[(i, j)] = (a + b) / 2.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerates every subset of size `N - n1` and returns the sum over the
    /// unique one whose kept keys all precede the dropped keys under the
    /// (magnitude, index) order.
    fn subset_oracle(x: &[f64], y: &[f64], n1: usize) -> f64 {
        let n = x.len();
        let q: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let key = |i: usize| (q[i].abs(), i);
        let mut found = Vec::new();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n - n1 {
                continue;
            }
            let kept: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let dropped: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
            let separated = kept.iter().all(|&k| {
                dropped
                    .iter()
                    .all(|&d| by_magnitude_then_index(&key(k), &key(d)) == Ordering::Less)
            });
            if separated {
                found.push(kept.iter().map(|&i| q[i]).sum::<f64>());
            }
        }
        assert_eq!(found.len(), 1);
        found[0]
    }

    #[test]
    fn drops_largest_product() {
        let v = trimmed_inner(&[1.0, 2.0, 3.0], &[1.0, 1.0, 10.0], TrimSpec::new(1)).unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(subset_oracle(&[1.0, 2.0, 3.0], &[1.0, 1.0, 10.0], 1), 3.0);
    }

    #[test]
    fn untrimmed_is_plain_inner_product() {
        let x = [0.5, -1.25, 3.0, 7.5];
        let y = [2.0, 4.0, -1.0, 0.1];
        let exact: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert_eq!(trimmed_inner(&x, &y, TrimSpec::new(0)).unwrap(), exact);
    }

    #[test]
    fn zero_products() {
        assert_eq!(
            trimmed_inner(&[1.0; 4], &[0.0; 4], TrimSpec::new(2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn ties_keep_lower_indices() {
        // |q| = [2, 2, 2]; keeping two must keep indices 0 and 1.
        let v = trimmed_inner(&[1.0, -1.0, 1.0], &[2.0, 2.0, -2.0], TrimSpec::new(1)).unwrap();
        assert_eq!(v, 0.0);
        let v = trimmed_inner(&[1.0, 1.0, -1.0], &[2.0, 2.0, 2.0], TrimSpec::new(1)).unwrap();
        assert_eq!(v, 4.0);
    }

    #[test]
    fn trimmed_inner_errors() {
        assert!(trimmed_inner(&[1.0, 2.0], &[1.0], TrimSpec::new(0)).is_err());
        assert!(trimmed_inner(&[1.0, 2.0], &[1.0, 2.0], TrimSpec::new(2)).is_err());
        assert!(trimmed_inner(&[], &[], TrimSpec::new(0)).is_err());
    }

    #[test]
    fn covariance_untrimmed_is_second_moment() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let c = trimmed_covariance(&x, 0.0).unwrap();
        assert_eq!(c, &x * x.transpose());
    }

    #[test]
    fn covariance_trims_per_entry() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 10.0]);
        let c = trimmed_covariance(&x, 1.0 / 3.0).unwrap();
        assert_eq!(c[(0, 0)], 5.0);
        assert_eq!(subset_oracle(&[1.0, 2.0, 10.0], &[1.0, 2.0, 10.0], 1), 5.0);
    }

    #[test]
    fn covariance_zero_rows_and_errors() {
        let x = DMatrix::zeros(3, 5);
        assert_eq!(trimmed_covariance(&x, 0.4).unwrap(), DMatrix::zeros(3, 3));
        assert!(trimmed_covariance(&x, 1.0).is_err());
        assert!(trimmed_covariance(&x, -0.1).is_err());
        assert!(trimmed_covariance(&DMatrix::zeros(3, 1), 0.0).is_err());
    }

    #[test]
    fn symmetrize_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert_eq!(
            symmetrize(&m).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 2.0]);
        assert_eq!(symmetrize(&s).unwrap(), s);
        assert!(symmetrize(&DMatrix::zeros(2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn matches_subset_oracle(
            pairs in prop::collection::vec((-5i32..5, -5i32..5), 1..10),
            drop in 0usize..10,
        ) {
            // Small integers force plenty of magnitude ties.
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64 * 0.5).collect();
            let n1 = drop % x.len();
            prop_assert_eq!(trimmed_inner(&x, &y, TrimSpec::new(n1)).unwrap(), subset_oracle(&x, &y, n1));
        }

        #[test]
        fn symmetric_in_arguments(
            x in prop::collection::vec(-100.0..100.0f64, 2..40),
            seed in prop::collection::vec(-100.0..100.0f64, 40),
            frac in 0.0..1.0f64,
        ) {
            let y = &seed[..x.len()];
            let spec = TrimSpec::new(((x.len() - 1) as f64 * frac) as usize);
            prop_assert_eq!(trimmed_inner(&x, y, spec).unwrap(), trimmed_inner(y, &x, spec).unwrap());
        }

        #[test]
        fn contraction_and_scale(
            x in prop::collection::vec(-100.0..100.0f64, 2..40),
            seed in prop::collection::vec(-100.0..100.0f64, 40),
            frac in 0.0..1.0f64,
            c in 0.1..10.0f64,
        ) {
            let y = &seed[..x.len()];
            let spec = TrimSpec::new(((x.len() - 1) as f64 * frac) as usize);
            let t = trimmed_inner(&x, y, spec).unwrap();
            let all_abs: f64 = x.iter().zip(y).map(|(a, b)| (a * b).abs()).sum();
            prop_assert!(t.abs() <= all_abs * (1.0 + 1e-12));
            let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
            let ts = trimmed_inner(&scaled, y, spec).unwrap();
            prop_assert!((ts - c * t).abs() <= 1e-9 * (1.0 + all_abs * c));
        }

        #[test]
        fn symmetrize_is_exactly_symmetric(vals in prop::collection::vec(-1e6..1e6f64, 16)) {
            let m = DMatrix::from_row_slice(4, 4, &vals);
            let s = symmetrize(&m).unwrap();
            prop_assert_eq!(s.transpose(), s);
        }

        #[test]
        fn covariance_diagonal_non_negative(vals in prop::collection::vec(-50.0..50.0f64, 30), frac in 0.0..0.9f64) {
            let x = DMatrix::from_row_slice(3, 10, &vals);
            let c = trimmed_covariance(&x, frac).unwrap();
            for i in 0..3 {
                prop_assert!(c[(i, i)] >= 0.0);
            }
        }
    }
}
