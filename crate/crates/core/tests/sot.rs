use ndarray::{Array2, ArrayView2};
use phaseseg_core::rng::seeded;
use phaseseg_core::sot::*;
use proptest::prelude::*;
use rand::Rng;

fn random_embed(rows: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0) + 1e-3)
}

fn random_plan(t: usize, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((t, k), |_| rng.random_range(0.05..1.0));
    for mut r in p.rows_mut() {
        let s = r.sum();
        r /= s * t as f64;
    }
    p
}

fn random_instance(t: usize, k: usize, seed: u64) -> (CostBundle, Array2<f64>) {
    let mut rng = seeded(seed);
    let x = random_embed(t, 5, &mut rng);
    let a = random_embed(k, 5, &mut rng);
    let c_temp = {
        let mut c = Array2::from_shape_fn((t, t), |_| rng.random_range(0.0..1.0));
        c = &c + &c.t();
        c.diag_mut().fill(0.0);
        c
    };
    let b = CostBundle {
        c_vis: visual_cost(x.view(), a.view()).unwrap(),
        c_temp,
        c_cat: category_cost(k),
    };
    (b, random_plan(t, k, &mut rng))
}

fn loop_objective(p: ArrayView2<f64>, b: &CostBundle, alpha: f64, lambda: f64, q: &[f64]) -> f64 {
    let (t, k) = p.dim();
    let mut gw = 0.0;
    for i in 0..t {
        for j in 0..t {
            for a in 0..k {
                for c in 0..k {
                    gw += b.c_temp[[i, j]] * b.c_cat[[a, c]] * p[[i, a]] * p[[j, c]];
                }
            }
        }
    }
    let mut lin = 0.0;
    for i in 0..t {
        for a in 0..k {
            lin += b.c_vis[[i, a]] * p[[i, a]];
        }
    }
    alpha * gw + (1.0 - alpha) * lin + lambda * loop_kl(p, q)
}

fn loop_kl(p: ArrayView2<f64>, q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for a in 0..p.ncols() {
        let mut m = 0.0;
        for i in 0..p.nrows() {
            m += p[[i, a]];
        }
        if m > 0.0 {
            kl += m * (m / q[a]).ln();
        }
    }
    kl
}

fn cfg(alpha: f64, lambda: f64) -> SotConfig {
    SotConfig {
        alpha,
        lambda_kl: lambda,
        ..SotConfig::default()
    }
}

fn transitions(y: &[usize]) -> usize {
    y.windows(2).filter(|w| w[0] != w[1]).count()
}

fn best_hard(b: &CostBundle, c: &SotConfig) -> f64 {
    let (t, k) = b.c_vis.dim();
    let mut best = f64::INFINITY;
    let mut y = vec![0usize; t];
    for code in 0..k.pow(t as u32) {
        let mut r = code;
        for v in y.iter_mut() {
            *v = r % k;
            r /= k;
        }
        best = best.min(objective(hard_plan(&y, k).view(), b, c).unwrap());
    }
    best
}

#[test]
fn objective_matches_loop_oracle() {
    for seed in 0..100 {
        let t = 1 + (seed as usize % 9);
        let k = 1 + (seed as usize % 4);
        let (b, p) = random_instance(t, k, seed);
        let c = cfg(0.37, 0.2);
        let q = vec![1.0 / k as f64; k];
        let want = loop_objective(p.view(), &b, 0.37, 0.2, &q);
        let got = objective(p.view(), &b, &c).unwrap();
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn kl_matches_loop_oracle() {
    let mut rng = seeded(9);
    for seed in 0..100 {
        let (_, p) = random_instance(1 + seed % 7, 1 + seed % 4, seed as u64);
        let mut q: Vec<f64> = (0..p.ncols()).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= s);
        let got = kl_marginal(p.view(), &q).unwrap();
        assert!((got - loop_kl(p.view(), &q)).abs() < 1e-12);
    }
}

#[test]
fn objective_boundary_linear_only() {
    let (b, p) = random_instance(5, 3, 1);
    let got = objective(p.view(), &b, &cfg(0.0, 0.0)).unwrap();
    assert!((got - (&b.c_vis * &p).sum()).abs() < 1e-15);
    let g = objective_gradient(p.view(), &b, &cfg(0.0, 0.0)).unwrap();
    assert_eq!(g, b.c_vis);
}

#[test]
fn gradient_symmetric_identity() {
    let (b, p) = random_instance(6, 3, 2);
    let c = cfg(1.0, 0.0);
    let g = objective_gradient(p.view(), &b, &c).unwrap();
    let want = b.c_temp.dot(&p).dot(&b.c_cat) * 2.0;
    for (x, y) in g.iter().zip(want.iter()) {
        assert!((x - y).abs() < 1e-14);
    }
}

fn fd_gradient_error(b: &CostBundle, p: &Array2<f64>, c: &SotConfig) -> f64 {
    let g = objective_gradient(p.view(), b, c).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for idx in 0..p.len() {
        let (i, k) = (idx / p.ncols(), idx % p.ncols());
        let mut up = p.clone();
        let mut dn = p.clone();
        up[[i, k]] += h;
        dn[[i, k]] -= h;
        let fd = (objective(up.view(), b, c).unwrap() - objective(dn.view(), b, c).unwrap()) / (2.0 * h);
        worst = worst.max((g[[i, k]] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

#[test]
fn gradient_zero_column_with_lambda() {
    let (b, _) = random_instance(3, 2, 3);
    let p = hard_plan(&[0, 0, 0], 2);
    assert_eq!(
        objective_gradient(p.view(), &b, &cfg(0.5, 0.1)),
        Err(SotError::ZeroColumn(1))
    );
    assert!(objective_gradient(p.view(), &b, &cfg(0.5, 0.0)).is_ok());
}

#[test]
fn alternating_costs_are_smoothed() {
    let t = 6;
    let c_vis = Array2::from_shape_fn((t, 2), |(i, k)| if (i % 2 == 0) == (k == 0) { 0.45 } else { 0.55 });
    let mut decoded = Vec::new();
    for alpha in [0.0, 0.5] {
        let c = cfg(alpha, 0.05);
        let b = CostBundle {
            c_vis: c_vis.clone(),
            c_temp: temporal_cost_at(&(0..t).collect::<Vec<_>>(), c.radius_frames(t)),
            c_cat: category_cost(2),
        };
        decoded.push(decode(solve(&b, &c).unwrap().plan.matrix.view()));
    }
    assert_eq!(decoded[0], vec![0, 1, 0, 1, 0, 1]);
    assert!(transitions(&decoded[1]) < transitions(&decoded[0]), "{decoded:?}");
}

#[test]
fn plan_rows_and_positivity() {
    for seed in 0..30 {
        let (t, k) = (2 + seed as usize % 20, 1 + seed as usize % 5);
        let (b, _) = random_instance(t, k, seed);
        let sol = solve(&b, &cfg(0.6, 0.05)).unwrap();
        for row in sol.plan.matrix.rows() {
            assert!((row.sum() - 1.0 / t as f64).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn small_steps_do_not_increase_objective() {
    for seed in 0..40 {
        let (b, _) = random_instance(2 + seed as usize % 8, 1 + seed as usize % 4, seed);
        let c = SotConfig {
            step_size: 0.1,
            class_starts: false,
            random_starts: 0,
            ..cfg(0.5, 0.05)
        };
        let sol = solve(&b, &c).unwrap();
        assert!(sol.trace.last().unwrap() <= &(sol.trace[0] + 1e-12));
        for w in sol.trace.windows(2) {
            assert!(w[1] <= w[0] + c.tol, "seed {seed}: {w:?}");
        }
    }
}

#[test]
fn decoded_labels_reach_hard_optimum() {
    for seed in 0..200u64 {
        let t = 1 + seed as usize % 6;
        let k = 1 + (seed as usize / 6) % 3;
        let alpha = if seed % 2 == 0 { 0.0 } else { 0.5 };
        let mut rng = seeded(1000 + seed);
        let x = random_embed(t, 4, &mut rng);
        let a = random_embed(k, 4, &mut rng);
        let c = cfg(alpha, 0.0);
        let b = CostBundle::new(x.view(), a.view(), &c).unwrap();
        let y = decode(solve(&b, &c).unwrap().plan.matrix.view());
        let got = objective(hard_plan(&y, k).view(), &b, &c).unwrap();
        assert!(got <= best_hard(&b, &c) + 1e-9, "seed {seed}");
    }
}

#[test]
fn invalid_config_rejected() {
    let (b, _) = random_instance(3, 2, 4);
    assert!(solve(&b, &cfg(1.5, 0.0)).is_err());
    let c = SotConfig {
        q: Some(vec![1.0, 0.0]),
        ..cfg(0.5, 0.1)
    };
    assert_eq!(solve(&b, &c), Err(SotError::NonPositivePrior(1)));
}

proptest! {
    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..10_000, t in 1usize..=10, k in 1usize..=4,
                                           alpha in 0.0f64..=1.0, lambda in 0.0f64..0.5) {
        let (b, p) = random_instance(t, k, seed);
        prop_assert!(fd_gradient_error(&b, &p, &cfg(alpha, lambda)) < 1e-6);
    }

    #[test]
    fn decode_ignores_row_scaling(seed in 0u64..10_000, scale in prop::collection::vec(0.01f64..100.0, 6)) {
        let (_, p) = random_instance(6, 3, seed);
        let mut q = p.clone();
        for (mut row, s) in q.rows_mut().into_iter().zip(&scale) {
            row *= *s;
        }
        prop_assert_eq!(decode(p.view()), decode(q.view()));
    }

    #[test]
    fn pseudo_labels_idempotent(seed in 0u64..10_000, t in 1usize..12, k in 1usize..5) {
        let (_, p) = random_instance(t, k, seed);
        let once = pseudo_labels(p.view()).unwrap();
        let twice = pseudo_labels(once.view()).unwrap();
        for row in once.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
