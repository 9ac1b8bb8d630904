use nalgebra::DMatrix;
use rand::Rng;

use super::{sq_dist, NumericError, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// k x d.
    pub centroids: DMatrix<f64>,
    pub assignments: Vec<usize>,
    /// Total within-cluster squared distance after initialisation (index 0)
    /// and after each Lloyd iteration.
    pub distortion: Vec<f64>,
}

impl KMeansResult {
    pub fn final_distortion(&self) -> f64 {
        *self.distortion.last().expect("distortion trace is never empty")
    }
}

fn rows(data: &DMatrix<f64>) -> Vec<Vec<f64>> {
    data.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding followed by `iters` Lloyd iterations.
///
/// Clusters that lose all their points keep their previous centroid, so the
/// distortion trace is non-increasing.
pub fn kmeans(data: &DMatrix<f64>, k: usize, iters: usize, rng: &mut RngStream) -> Result<KMeansResult, NumericError> {
    let n = data.nrows();
    if n == 0 || k == 0 {
        return Err(NumericError::EmptyInput);
    }
    if k > n {
        return Err(NumericError::InsufficientSamples { needed: k, got: n });
    }
    let points = rows(data);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Rounding can run past the end; fall back to the last positive weight.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|w| *w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (w, p) in d2.iter_mut().zip(&points) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let (i, d) = nearest(p, centroids);
                total += d;
                i
            })
            .collect();
        (a, total)
    };

    let (mut assignments, d0) = assign(&centroids);
    let mut distortion = vec![d0];
    let dim = data.ncols();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((c, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            if cnt > 0 {
                *c = s.into_iter().map(|x| x / cnt as f64).collect();
            }
        }
        let (a, d) = assign(&centroids);
        let converged = a == assignments;
        assignments = a;
        distortion.push(d);
        if converged {
            break;
        }
    }

    let centroids = DMatrix::from_fn(k, dim, |i, j| centroids[i][j]);
    Ok(KMeansResult {
        centroids,
        assignments,
        distortion,
    })
}
