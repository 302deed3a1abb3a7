use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::points::{dist2, Points};

const MAX_ITERS: usize = 100;

/// Lloyd's algorithm with k-means++ seeding. Returns the index set of each
/// cluster; deterministic in `seed`.
pub fn kmeans_init(xs: &Points, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = xs.len();
    if k == 0 || n < k {
        return Err(Error::Validation(format!(
            "k-means needs 1 <= k <= n (k={k}, n={n})"
        )));
    }
    let dim = xs.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = vec![xs.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = xs.rows().map(|x| dist2(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = xs.row(pick).to_vec();
        for (i, x) in xs.rows().enumerate() {
            nearest[i] = nearest[i].min(dist2(x, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, x) in xs.rows().enumerate() {
            let best = closest(&centers, x).0;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, x) in xs.rows().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point worst served by its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(xs.row(a), &centers[assign[a]]);
                        let db = dist2(xs.row(b), &centers[assign[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers[c] = xs.row(far).to_vec();
                assign[far] = c;
                changed = true;
            } else {
                for (ctr, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        clusters[c].push(i);
    }
    Ok(clusters)
}

fn closest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = dist2(x, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}
