use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `(K, D)`
    pub centroids: Tensor,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub wcss_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn wcss(&self) -> f64 {
        *self.wcss_trace.last().unwrap()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn wcss(points: &Tensor, centroids: &Tensor, assignment: &[usize]) -> f64 {
    let d = points.shape()[1];
    points
        .values()
        .chunks(d)
        .zip(assignment)
        .map(|(p, &c)| dist2(p, &centroids.values()[c * d..(c + 1) * d]))
        .sum()
}

/// Lloyd iterations from a k-means++ seeding.
///
/// Stops early once assignments stop changing. A cluster left empty by an
/// assignment step is re-seeded at the point farthest from its own centroid.
/// Ties go to the lowest centroid index.
pub fn kmeans(points: &Tensor, k: usize, max_iters: usize, rng: &mut impl Rng) -> Result<KMeans> {
    if points.shape().len() != 2 {
        return Err(Error::shape("kmeans", format!("points must be (N, D), got {:?}", points.shape())));
    }
    let (n, d) = (points.shape()[0], points.shape()[1]);
    if k == 0 {
        return Err(Error::contract("kmeans needs K >= 1"));
    }
    let rows: Vec<&[f64]> = points.values().chunks(d).collect();

    // k-means++ seeding
    let mut cents: Vec<Vec<f64>> = Vec::with_capacity(k);
    cents.push(rows[rng.random_range(0..n)].to_vec());
    let mut nearest: Vec<f64> = rows.iter().map(|p| dist2(p, &cents[0])).collect();
    while cents.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            // roundoff can run past the end; fall back to the last positive weight
            if nearest[chosen] == 0.0 {
                chosen = nearest.iter().rposition(|&w| w > 0.0).unwrap();
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = rows[pick].to_vec();
        for (m, p) in nearest.iter_mut().zip(&rows) {
            *m = m.min(dist2(p, &c));
        }
        cents.push(c);
    }

    let assign = |cents: &[Vec<f64>]| -> Vec<usize> {
        rows.iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in cents.iter().enumerate() {
                    let dd = dist2(p, c);
                    if dd < best.1 {
                        best = (j, dd);
                    }
                }
                best.0
            })
            .collect()
    };

    let mut assignment = assign(&cents);
    let mut trace = Vec::new();
    let score = |cents: &[Vec<f64>], a: &[usize]| -> f64 {
        rows.iter().zip(a).map(|(p, &j)| dist2(p, &cents[j])).sum()
    };
    trace.push(score(&cents, &assignment));
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in rows.iter().zip(&assignment) {
            counts[j] += 1;
            sums[j].iter_mut().zip(*p).for_each(|(s, v)| *s += v);
        }
        let old = cents.clone();
        for j in 0..k {
            if counts[j] > 0 {
                cents[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(rows[a], &old[assignment[a]]);
                        let db = dist2(rows[b], &old[assignment[b]]);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                cents[j] = rows[far].to_vec();
            }
        }
        let next = assign(&cents);
        trace.push(score(&cents, &next));
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    let centroids = Tensor::new(vec![k, d], cents.concat())?;
    Ok(KMeans {
        centroids,
        assignment,
        wcss_trace: trace,
        iterations,
    })
}

/// Best of `restarts` independent runs by final WCSS; the earliest run wins ties.
pub fn kmeans_best_of(
    points: &Tensor,
    k: usize,
    max_iters: usize,
    restarts: usize,
    rng: &mut impl Rng,
) -> Result<KMeans> {
    if restarts == 0 {
        return Err(Error::contract("kmeans needs at least one restart"));
    }
    let mut best = kmeans(points, k, max_iters, rng)?;
    for _ in 1..restarts {
        let run = kmeans(points, k, max_iters, rng)?;
        if run.wcss() < best.wcss() {
            best = run;
        }
    }
    Ok(best)
}
