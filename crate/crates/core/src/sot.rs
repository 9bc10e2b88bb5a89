//! Structured unbalanced optimal transport between frames and phase classes.
//!
//! The objective over a `T x K` coupling `P` is
//!
//! ```text
//! F(P) = alpha * <C_temp P C_cat, P> + (1 - alpha) * <C_vis, P> + lambda * KL(P^T 1 || q)
//! ```
//!
//! with every row of `P` pinned to mass `1/T`. The quadratic term charges
//! temporally close frame pairs that land in different classes. [`solve`]
//! runs entropic mirror descent from several starting plans and keeps the
//! lowest objective.

use crate::rng::{derive_seed, seeded};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest plan entry kept by the solver so iterates stay strictly positive.
pub const PLAN_FLOOR: f64 = 1e-200;

#[derive(Debug, Error, PartialEq)]
pub enum SotError {
    #[error("{which} row {row} has zero norm")]
    ZeroNorm { which: &'static str, row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("prior entry q[{0}] is not strictly positive")]
    NonPositivePrior(usize),
    #[error("class {0} has zero mass with lambda > 0")]
    ZeroColumn(usize),
    #[error("plan row {0} sums to zero")]
    ZeroRow(usize),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
}

/// Solver and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SotConfig {
    pub alpha: f64,
    pub lambda_kl: f64,
    /// Class prior; `None` means uniform.
    pub q: Option<Vec<f64>>,
    /// Temporal radius as a fraction of the sequence length.
    pub radius: f64,
    /// Lower bound on the temporal radius in frames.
    pub min_radius_frames: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Also start from one plan tilted toward each class.
    pub class_starts: bool,
    /// Extra randomly tilted starting plans.
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for SotConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            lambda_kl: 0.05,
            q: None,
            radius: 0.04,
            min_radius_frames: 2.0,
            step_size: 2.0,
            max_iters: 200,
            tol: 1e-6,
            class_starts: true,
            random_starts: 4,
            seed: 0,
        }
    }
}

impl SotConfig {
    pub fn validate(&self, k: usize) -> Result<(), SotError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SotError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda_kl >= 0.0) {
            return Err(SotError::Config(format!("lambda {} < 0", self.lambda_kl)));
        }
        if !(self.radius > 0.0 && self.radius <= 1.0) {
            return Err(SotError::Config(format!("radius {} outside (0, 1]", self.radius)));
        }
        if !(self.min_radius_frames >= 0.0) {
            return Err(SotError::Config("min_radius_frames < 0".into()));
        }
        if !(self.step_size > 0.0) || !(self.tol > 0.0) {
            return Err(SotError::Config("step_size and tol must be positive".into()));
        }
        let q = self.prior(k)?;
        if (q.sum() - 1.0).abs() > 1e-9 {
            return Err(SotError::Config(format!("prior sums to {}", q.sum())));
        }
        Ok(())
    }

    /// The class prior as a `K`-vector.
    pub fn prior(&self, k: usize) -> Result<Array1<f64>, SotError> {
        match &self.q {
            None => Ok(Array1::from_elem(k, 1.0 / k as f64)),
            Some(q) => {
                if q.len() != k {
                    return Err(SotError::Shape(format!("prior has {} entries for K={k}", q.len())));
                }
                if let Some(i) = q.iter().position(|&x| !(x > 0.0)) {
                    return Err(SotError::NonPositivePrior(i));
                }
                Ok(Array1::from(q.clone()))
            }
        }
    }

    /// Temporal radius in frames for a sequence of `t_len` frames.
    pub fn radius_frames(&self, t_len: usize) -> f64 {
        (self.radius * t_len as f64).max(self.min_radius_frames)
    }
}

/// The three cost matrices of one transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBundle {
    pub c_vis: Array2<f64>,
    pub c_temp: Array2<f64>,
    pub c_cat: Array2<f64>,
}

impl CostBundle {
    /// Costs for a full sequence of embeddings `x` against prototypes `a`.
    pub fn new(x: ArrayView2<f64>, a: ArrayView2<f64>, cfg: &SotConfig) -> Result<Self, SotError> {
        let t = x.nrows();
        let positions: Vec<usize> = (0..t).collect();
        Self::at_frames(x, a, &positions, t, cfg)
    }

    /// Costs for frames at `positions` of a `t_len`-frame sequence; the
    /// temporal kernel uses the true frame distances.
    pub fn at_frames(
        x: ArrayView2<f64>,
        a: ArrayView2<f64>,
        positions: &[usize],
        t_len: usize,
        cfg: &SotConfig,
    ) -> Result<Self, SotError> {
        if positions.len() != x.nrows() {
            return Err(SotError::Shape(format!(
                "{} positions for {} rows",
                positions.len(),
                x.nrows()
            )));
        }
        Ok(Self {
            c_vis: visual_cost(x, a)?,
            c_temp: temporal_cost_at(positions, cfg.radius_frames(t_len)),
            c_cat: category_cost(a.nrows()),
        })
    }

    pub fn frames(&self) -> usize {
        self.c_vis.nrows()
    }

    pub fn classes(&self) -> usize {
        self.c_vis.ncols()
    }

    fn check(&self) -> Result<(), SotError> {
        let (t, k) = self.c_vis.dim();
        if self.c_temp.dim() != (t, t) || self.c_cat.dim() != (k, k) {
            return Err(SotError::Shape(format!(
                "C_vis {:?}, C_temp {:?}, C_cat {:?}",
                self.c_vis.dim(),
                self.c_temp.dim(),
                self.c_cat.dim()
            )));
        }
        Ok(())
    }
}

fn row_norms(m: ArrayView2<f64>, which: &'static str) -> Result<Array1<f64>, SotError> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(row) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(SotError::ZeroNorm { which, row });
    }
    Ok(norms)
}

/// Cosine distance `1 - cos(x_t, a_k)`.
pub fn visual_cost(x: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>, SotError> {
    if x.ncols() != a.ncols() {
        return Err(SotError::Shape(format!("X {:?} vs A {:?}", x.dim(), a.dim())));
    }
    let nx = row_norms(x, "X")?;
    let na = row_norms(a, "A")?;
    let mut c = x.dot(&a.t());
    for ((t, k), v) in c.indexed_iter_mut() {
        *v = (1.0 - *v / (nx[t] * na[k])).clamp(0.0, 2.0);
    }
    Ok(c)
}

/// Truncated linear proximity kernel with radius `r * t_len` frames.
pub fn temporal_cost(t_len: usize, r: f64) -> Array2<f64> {
    let positions: Vec<usize> = (0..t_len).collect();
    temporal_cost_at(&positions, r * t_len as f64)
}

/// `max(0, 1 - |p_i - p_j| / radius)` off the diagonal, zero on it.
pub fn temporal_cost_at(positions: &[usize], radius: f64) -> Array2<f64> {
    let n = positions.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j || radius <= 0.0 {
            0.0
        } else {
            let d = positions[i].abs_diff(positions[j]) as f64;
            (1.0 - d / radius).max(0.0)
        }
    })
}

/// `1[k != l]`.
pub fn category_cost(k: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, k), |(a, b)| if a == b { 0.0 } else { 1.0 })
}

fn xlogy_ratio(m: f64, q: f64) -> f64 {
    if m == 0.0 {
        0.0
    } else {
        m * (m / q).ln()
    }
}

/// `KL(P^T 1 || q)` with `0 log 0 = 0`.
pub fn kl_marginal(plan: ArrayView2<f64>, q: &[f64]) -> Result<f64, SotError> {
    if q.len() != plan.ncols() {
        return Err(SotError::Shape(format!("q has {} entries for K={}", q.len(), plan.ncols())));
    }
    if let Some(i) = q.iter().position(|&x| !(x > 0.0)) {
        return Err(SotError::NonPositivePrior(i));
    }
    let m = plan.sum_axis(Axis(0));
    Ok(m.iter().zip(q).map(|(&m, &q)| xlogy_ratio(m, q)).sum())
}

/// `<C_temp P C_cat, P>`.
pub fn structure_term(plan: ArrayView2<f64>, bundle: &CostBundle) -> f64 {
    (bundle.c_temp.dot(&plan).dot(&bundle.c_cat) * plan).sum()
}

pub fn objective(plan: ArrayView2<f64>, bundle: &CostBundle, cfg: &SotConfig) -> Result<f64, SotError> {
    bundle.check()?;
    if plan.dim() != bundle.c_vis.dim() {
        return Err(SotError::Shape(format!("plan {:?} vs C_vis {:?}", plan.dim(), bundle.c_vis.dim())));
    }
    let q = cfg.prior(bundle.classes())?;
    let gw = if cfg.alpha != 0.0 { structure_term(plan, bundle) } else { 0.0 };
    let lin = (&bundle.c_vis * &plan).sum();
    let kl = if cfg.lambda_kl != 0.0 {
        kl_marginal(plan, q.as_slice().expect("contiguous"))?
    } else {
        0.0
    };
    Ok(cfg.alpha * gw + (1.0 - cfg.alpha) * lin + cfg.lambda_kl * kl)
}

pub fn objective_gradient(
    plan: ArrayView2<f64>,
    bundle: &CostBundle,
    cfg: &SotConfig,
) -> Result<Array2<f64>, SotError> {
    bundle.check()?;
    if plan.dim() != bundle.c_vis.dim() {
        return Err(SotError::Shape(format!("plan {:?} vs C_vis {:?}", plan.dim(), bundle.c_vis.dim())));
    }
    let mut g = &bundle.c_vis * (1.0 - cfg.alpha);
    if cfg.alpha != 0.0 {
        let a = bundle.c_temp.dot(&plan).dot(&bundle.c_cat);
        let b = bundle.c_temp.t().dot(&plan).dot(&bundle.c_cat.t());
        g = g + (a + b) * cfg.alpha;
    }
    // The marginal term is skipped entirely at lambda = 0 so empty classes
    // do not produce 0 * log 0.
    if cfg.lambda_kl != 0.0 {
        let q = cfg.prior(bundle.classes())?;
        let m = plan.sum_axis(Axis(0));
        for (k, mut col) in g.axis_iter_mut(Axis(1)).enumerate() {
            if !(m[k] > 0.0) {
                return Err(SotError::ZeroColumn(k));
            }
            col += cfg.lambda_kl * ((m[k] / q[k]).ln() + 1.0);
        }
    }
    Ok(g)
}

/// A `T x K` coupling with rows summing to `1/T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub plan: TransportPlan,
    /// Objective before the first step and after every step of the kept run.
    pub trace: Vec<f64>,
    pub objective: f64,
}

fn rescale_rows(p: &mut Array2<f64>) {
    let t = p.nrows() as f64;
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| (v / (s * t)).max(PLAN_FLOOR));
    }
}

fn starting_plans(t: usize, k: usize, cfg: &SotConfig) -> Vec<Array2<f64>> {
    let mut starts = vec![Array2::from_elem((t, k), 1.0 / (t * k) as f64)];
    if cfg.class_starts && k > 1 {
        for c in 0..k {
            let mut p = Array2::ones((t, k));
            p.column_mut(c).fill(std::f64::consts::E);
            rescale_rows(&mut p);
            starts.push(p);
        }
    }
    for r in 0..cfg.random_starts {
        let mut rng = seeded(derive_seed(cfg.seed, r as u64));
        let mut p = Array2::from_shape_simple_fn((t, k), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.exp()
        });
        rescale_rows(&mut p);
        starts.push(p);
    }
    starts
}

fn mirror_descent(
    mut p: Array2<f64>,
    bundle: &CostBundle,
    cfg: &SotConfig,
) -> Result<(Array2<f64>, Vec<f64>), SotError> {
    let mut trace = vec![objective(p.view(), bundle, cfg)?];
    for iteration in 0..cfg.max_iters {
        let g = objective_gradient(p.view(), bundle, cfg)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SotError::NonFinite { iteration });
        }
        let mut next = p.clone();
        for (mut row, grow) in next.rows_mut().into_iter().zip(g.rows()) {
            // Shifting by the row minimum leaves the normalized step unchanged.
            let gmin = grow.fold(f64::INFINITY, |a, &b| a.min(b));
            for (v, &gv) in row.iter_mut().zip(grow) {
                *v *= (-cfg.step_size * (gv - gmin)).exp();
            }
        }
        rescale_rows(&mut next);
        let delta: f64 = (&next - &p).mapv(f64::abs).sum();
        p = next;
        trace.push(objective(p.view(), bundle, cfg)?);
        if delta < cfg.tol {
            break;
        }
    }
    Ok((p, trace))
}

/// Minimize the transport objective by entropic mirror descent.
///
/// Runs from the uniform plan, from one plan tilted toward each class when
/// `class_starts` is set, and from `random_starts` seeded random plans; the
/// run with the lowest final objective wins (ties keep the earlier start).
pub fn solve(bundle: &CostBundle, cfg: &SotConfig) -> Result<Solution, SotError> {
    bundle.check()?;
    let (t, k) = bundle.c_vis.dim();
    if t == 0 || k == 0 {
        return Err(SotError::Shape(format!("empty problem {t}x{k}")));
    }
    cfg.validate(k)?;
    let mut best: Option<(Array2<f64>, Vec<f64>)> = None;
    for start in starting_plans(t, k, cfg) {
        let (p, trace) = mirror_descent(start, bundle, cfg)?;
        let f = *trace.last().expect("trace has the initial value");
        if best.as_ref().is_none_or(|(_, bt)| f < *bt.last().unwrap() - 1e-12) {
            best = Some((p, trace));
        }
    }
    let (matrix, trace) = best.expect("at least the uniform start");
    let objective = *trace.last().unwrap();
    Ok(Solution {
        plan: TransportPlan { matrix },
        trace,
        objective,
    })
}

/// Row-wise argmax; ties go to the lower class index.
pub fn decode(plan: ArrayView2<f64>) -> Vec<usize> {
    plan.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Rows normalized to sum to one.
pub fn pseudo_labels(plan: ArrayView2<f64>) -> Result<Array2<f64>, SotError> {
    let mut out = plan.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if !(s > 0.0) {
            return Err(SotError::ZeroRow(i));
        }
        row /= s;
    }
    Ok(out)
}

/// One-hot plan for hard labels, rows scaled to `1/T`.
pub fn hard_plan(labels: &[usize], k: usize) -> Array2<f64> {
    let t = labels.len();
    let mut p = Array2::zeros((t, k));
    for (i, &y) in labels.iter().enumerate() {
        p[[i, y]] = 1.0 / t as f64;
    }
    p
}

/// The per-iteration objective trace as CSV (`iteration,objective`).
pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,objective\n");
    for (i, f) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{f}\n"));
    }
    s
}
