//! K-means (k-means++ seeding, Lloyd iterations) and prototype initialization.

use crate::rng::seeded;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("need at least K={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("non-finite value in point {0}")]
    NonFinite(usize),
    #[error("embedding dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after seeding and after every Lloyd iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point (ties to the lower index) and its squared distance.
fn assign(points: ArrayView2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centers.rows().into_iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip()
}

pub fn inertia(points: ArrayView2<f64>, centers: &Array2<f64>, assignments: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, centers.row(a)))
        .sum()
}

fn plus_plus(points: ArrayView2<f64>, k: usize, rng: &mut crate::rng::Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // Rounding can run past the end; fall back to the last positive weight.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            }
            pick
        } else {
            // Every point coincides with a chosen center: take any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Lloyd's algorithm from k-means++ seeds; stops at an assignment fixpoint
/// or after `max_iters` updates. Empty clusters are moved to the point
/// farthest from its current center.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, ClusterError> {
    let n = points.nrows();
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if n < k {
        return Err(ClusterError::TooFewPoints { n, k });
    }
    if let Some(i) = points.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(ClusterError::NonFinite(i));
    }
    let mut rng = seeded(seed);
    let mut centers = plus_plus(points, k, &mut rng);
    let (mut labels, _) = assign(points, &centers);
    let mut trace = vec![inertia(points, &centers, &labels)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        centers = update_centers(points, &labels, &centers);
        let (next, _) = assign(points, &centers);
        trace.push(inertia(points, &centers, &next));
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
    }
    let inertia = inertia(points, &centers, &labels);
    Ok(KMeansResult {
        centers,
        assignments: labels,
        inertia,
        trace,
        iterations,
    })
}

fn update_centers(points: ArrayView2<f64>, labels: &[usize], old: &Array2<f64>) -> Array2<f64> {
    let k = old.nrows();
    let mut sums = Array2::<f64>::zeros(old.dim());
    let mut counts = vec![0usize; k];
    for (p, &l) in points.rows().into_iter().zip(labels) {
        sums.row_mut(l).scaled_add(1.0, &p);
        counts[l] += 1;
    }
    let mut dist: Vec<(usize, f64)> = points
        .rows()
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, &l))| (i, sq_dist(p, old.row(l))))
        .collect();
    // Farthest first; ties to the lower index.
    dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut far = dist.into_iter().map(|(i, _)| i);
    for c in 0..k {
        if counts[c] == 0 {
            let i = far.next().expect("n >= k");
            sums.row_mut(c).assign(&points.row(i));
        } else {
            sums.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
        }
    }
    sums
}

/// Centers from k-means on a random subset of all frames, ordered by the
/// mean normalized time `t / T` of the subset frames assigned to them.
///
/// When `subset_size` covers every frame, all frames are used in order.
pub fn init_prototypes(
    embeddings: &[Array2<f64>],
    k: usize,
    subset_size: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Array2<f64>, ClusterError> {
    let d = embeddings.first().map_or(0, |e| e.ncols());
    if let Some(e) = embeddings.iter().find(|e| e.ncols() != d) {
        return Err(ClusterError::Dimension(format!("{} vs {d}", e.ncols())));
    }
    let mut frames = Vec::new();
    for e in embeddings {
        let t = e.nrows();
        frames.extend((0..t).map(|i| (e.row(i), i as f64 / t as f64)));
    }
    let total = frames.len();
    if total < k.max(1) {
        return Err(ClusterError::TooFewPoints { n: total, k });
    }
    let picked: Vec<usize> = if subset_size >= total {
        (0..total).collect()
    } else {
        let mut rng = seeded(seed);
        let mut idx = index::sample(&mut rng, total, subset_size.max(k)).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut points = Array2::zeros((picked.len(), d));
    for (r, &i) in picked.iter().enumerate() {
        points.row_mut(r).assign(&frames[i].0);
    }
    let res = kmeans(points.view(), k, seed, max_iters)?;
    let mut time_sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (r, &a) in res.assignments.iter().enumerate() {
        time_sum[a] += frames[picked[r]].1;
        count[a] += 1;
    }
    let mean_time: Vec<f64> = (0..k)
        .map(|c| if count[c] > 0 { time_sum[c] / count[c] as f64 } else { f64::INFINITY })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean_time[a].total_cmp(&mean_time[b]).then(a.cmp(&b)));
    Ok(res.centers.select(Axis(0), &order))
}
