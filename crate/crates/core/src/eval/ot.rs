use crate::error::{Error, Result};
use crate::points::{dist2, Points};

/// Largest batch accepted by [`wasserstein`].
pub const MAX_OT_BATCH: usize = 2048;

/// Minimum-cost perfect matching on a square row-major `n×n` cost matrix
/// (shortest augmenting paths with potentials, `O(n³)`). Returns
/// `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    assignment
}

/// Exact W₁ between two equal-size empirical measures with Euclidean
/// ground cost: the mean matched distance of the optimal assignment.
pub fn wasserstein(a: &Points, b: &Points) -> Result<f64> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "Wasserstein needs equal shapes, got {}x{} and {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    let m = a.len();
    if m == 0 {
        return Err(Error::Validation("Wasserstein of empty sets".into()));
    }
    if m > MAX_OT_BATCH {
        return Err(Error::TooLarge(format!(
            "optimal-transport batch of {m} exceeds {MAX_OT_BATCH}"
        )));
    }
    let mut cost = vec![0.0; m * m];
    for (i, x) in a.rows().enumerate() {
        for (j, y) in b.rows().enumerate() {
            cost[i * m + j] = dist2(x, y).sqrt();
        }
    }
    let assign = hungarian(&cost, m);
    // sum in row order for reproducibility
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * m + j])
        .sum();
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_single_point_sets() {
        let a = Points::from_rows(2, &[[0.0, 1.0], [3.0, -1.0], [2.0, 2.0]]).unwrap();
        assert_eq!(wasserstein(&a, &a).unwrap(), 0.0);
        let p = Points::from_rows(2, &[[0.0, 0.0]]).unwrap();
        let q = Points::from_rows(2, &[[3.0, 4.0]]).unwrap();
        assert_eq!(wasserstein(&p, &q).unwrap(), 5.0);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let p = Points::from_rows(1, &[[0.0]]).unwrap();
        let q = Points::from_rows(1, &[[0.0], [1.0]]).unwrap();
        assert!(wasserstein(&p, &q).is_err());
    }

    #[test]
    fn assignment_is_a_permutation() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = hungarian(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2]);
    }
}
