use ndarray::{Array2, Array4, Axis};
use phaseseg_core::astgcn::*;
use phaseseg_core::pose_io::{PoseSequence, SkeletonGraph, NUM_JOINTS};
use phaseseg_core::rng::seeded;
use phaseseg_core::tape::{grad_check_with, BoundParams, ParamStore, Tape};
use rand::Rng;

fn random4(shape: (usize, usize, usize, usize), lo: f64, hi: f64, seed: u64) -> Array4<f64> {
    let mut rng = seeded(seed);
    Array4::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_blocks: 1,
        block_channels: vec![4],
        hidden_dim: 4,
        cheb_filters: 2,
        attention_dim: 3,
        window: 4,
        ..EncoderConfig::default()
    }
}

/// Random (non-zero) values for every parameter so no path is trivially dead.
fn perturbed(store: &ParamStore, seed: u64) -> ParamStore {
    let mut rng = seeded(seed);
    let mut out = store.clone();
    for v in out.values_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-0.3..0.3));
    }
    out
}

fn loop_mse(r: &Array4<f64>, c: &Array4<f64>) -> f64 {
    let (b, w, j, _) = r.dim();
    let mut s = 0.0;
    for bi in 0..b {
        for t in 0..w {
            for k in 0..j {
                let dx = r[[bi, t, k, 0]] - c[[bi, t, k, 0]];
                let dy = r[[bi, t, k, 1]] - c[[bi, t, k, 1]];
                s += dx * dx + dy * dy;
            }
        }
    }
    s / (b * w * j) as f64
}

fn loop_vel(r: &Array4<f64>, c: &Array4<f64>) -> f64 {
    let (b, w, j, _) = r.dim();
    let mut s = 0.0;
    for bi in 0..b {
        for t in 1..w {
            for k in 0..j {
                for d in 0..2 {
                    let vp = r[[bi, t, k, d]] - r[[bi, t - 1, k, d]];
                    let vc = c[[bi, t, k, d]] - c[[bi, t - 1, k, d]];
                    s += (vp - vc) * (vp - vc);
                }
            }
        }
    }
    s / (b * w * j) as f64
}

#[test]
fn losses_match_loop_oracles() {
    for seed in 0..100 {
        let shape = (1 + seed as usize % 3, 2 + seed as usize % 5, 16, 2);
        let r = random4(shape, -2.0, 2.0, seed);
        let c = random4(shape, -2.0, 2.0, seed + 1000);
        let (m, v) = (loop_mse(&r, &c), loop_vel(&r, &c));
        assert!((mse_value(&r, &c).unwrap() - m).abs() < 1e-12);
        assert!((vel_value(&r, &c).unwrap() - v).abs() < 1e-12);
        assert!((total_value(&r, &c, 0.7).unwrap() - (m + 0.7 * v)).abs() < 1e-12);
    }
}

#[test]
fn loss_special_cases() {
    let c = random4((2, 5, 16, 2), -1.0, 1.0, 1);
    assert_eq!(mse_value(&c, &c).unwrap(), 0.0);
    assert_eq!(vel_value(&c, &c).unwrap(), 0.0);
    let mut shifted = c.clone();
    shifted.index_axis_mut(Axis(3), 0).mapv_inplace(|x| x + 1.0);
    assert!((mse_value(&shifted, &c).unwrap() - 1.0).abs() < 1e-12);
    // Per-window constant offset: velocities unchanged, MSE is not.
    let mut offset = c.clone();
    offset.mapv_inplace(|x| x + 0.3);
    assert!(vel_value(&offset, &c).unwrap() < 1e-24);
    assert!(mse_value(&offset, &c).unwrap() > 0.1);
    let total = total_value(&offset, &c, 1.0).unwrap();
    assert!((total - mse_value(&offset, &c).unwrap()).abs() < 1e-12);
    assert_eq!(total_value(&shifted, &c, 0.0).unwrap(), mse_value(&shifted, &c).unwrap());
    let one = random4((1, 1, 16, 2), 0.0, 1.0, 2);
    assert!(vel_value(&one, &one).is_err());
}

#[test]
fn laplacian_spectrum_in_unit_interval() {
    let l = scaled_laplacian(&SkeletonGraph::mpii()).unwrap();
    assert_eq!(l, l.t());
    // Power iteration for the spectral radius.
    let mut v = ndarray::Array1::from_elem(16, 1.0);
    v[3] = -0.5;
    let mut rho = 0.0;
    for _ in 0..5000 {
        let u = l.dot(&v);
        rho = u.dot(&u).sqrt() / v.dot(&v).sqrt();
        v = &u / u.dot(&u).sqrt();
    }
    assert!(rho <= 1.0 + 1e-9, "{rho}");
    let eig = symmetric_eigenvalues(&l);
    assert!(eig.iter().all(|&e| e.abs() <= 1.0 + 1e-9));
}

#[test]
fn chebyshev_eigen_identity() {
    let mut rng = seeded(3);
    for _ in 0..10 {
        // Random symmetric matrix rescaled into [-1, 1].
        let m = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let s = &m + &m.t();
        let radius = symmetric_eigenvalues(&s).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let l = s / radius;
        let mut lam = symmetric_eigenvalues(&l);
        lam.sort_by(f64::total_cmp);
        for (k, tk) in cheb_polynomials(&l, 5).iter().enumerate() {
            let mut got = symmetric_eigenvalues(tk);
            got.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = lam.iter().map(|&x| (k as f64 * x.clamp(-1.0, 1.0).acos()).cos()).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }
}

fn zeroed_attention(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    for name in store.names() {
        if name.contains("att.") {
            s.get_mut(name).unwrap().fill(0.0);
        }
    }
    s
}

#[test]
fn zero_attention_is_uniform_and_rows_sum_to_one() {
    let cfg = EncoderConfig::default();
    let store = init_params(&cfg, NUM_JOINTS, 1).unwrap();
    let x = random4((2, 16, 30, 2), -3.0, 3.0, 4);
    for (params, uniform) in [(zeroed_attention(&store), true), (perturbed(&store, 5), false)] {
        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let xv = tape.constant(x.clone().into_dyn());
        let ta = temporal_attention(&mut tape, xv, &p, "block0").unwrap();
        let sa = spatial_attention(&mut tape, xv, &p, "block0").unwrap();
        for (att, n) in [(ta, 30usize), (sa, 16usize)] {
            let v = tape.value(att);
            assert_eq!(v.shape(), &[2, n, n]);
            for row in v.lanes(Axis(2)) {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                if uniform {
                    assert!(row.iter().all(|&a| (a - 1.0 / n as f64).abs() < 1e-15));
                }
            }
        }
    }
}

#[test]
fn spatial_attention_permutation_equivariant() {
    let cfg = EncoderConfig::default();
    let store = perturbed(&init_params(&cfg, NUM_JOINTS, 2).unwrap(), 6);
    let x = random4((1, 16, 30, 2), -3.0, 3.0, 7);
    let perm: Vec<usize> = vec![5, 3, 0, 1, 15, 2, 4, 6, 7, 9, 8, 10, 14, 12, 11, 13];
    let xp = x.select(Axis(1), &perm);
    let mut sp = store.clone();
    let bias = store.get("block0.satt.bias").unwrap().clone();
    let b2 = bias.into_dimensionality::<ndarray::Ix2>().unwrap();
    let bp = b2.select(Axis(0), &perm).select(Axis(1), &perm);
    *sp.get_mut("block0.satt.bias").unwrap() = bp.into_dyn();

    let run = |params: &ParamStore, input: &Array4<f64>| {
        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let xv = tape.constant(input.clone().into_dyn());
        let s = spatial_attention(&mut tape, xv, &p, "block0").unwrap();
        tape.value(s).clone().into_dimensionality::<ndarray::Ix3>().unwrap()
    };
    let a = run(&store, &x);
    let b = run(&sp, &xp);
    for i in 0..16 {
        for j in 0..16 {
            assert!((b[[0, i, j]] - a[[0, perm[i], perm[j]]]).abs() < 1e-12);
        }
    }
}

#[test]
fn block_shape_and_zero_path() {
    let cfg = EncoderConfig::default();
    let enc = Encoder::new(cfg.clone(), &SkeletonGraph::mpii(), 3).unwrap();
    let x = random4((2, 16, 30, 2), -3.0, 3.0, 8);
    let mut params = perturbed(&enc.params, 9);
    params.get_mut("block0.cheb.theta").unwrap().fill(0.0);
    params.get_mut("block0.cheb.bias").unwrap().fill(0.0);
    params.get_mut("block0.tconv.kernel").unwrap().fill(0.0);

    let mut tape = Tape::new();
    let p = params.register(&mut tape);
    let g = GraphConsts::record(&mut tape, &enc.cheb);
    let xv = tape.constant(x.clone().into_dyn());
    let out = block_forward(&mut tape, xv, &p, "block0", &g).unwrap();
    assert_eq!(tape.shape(out), &[2, 16, 30, 16]);

    // Expected: LayerNorm(x W_res + b_res).
    let mut t2 = Tape::new();
    let p2 = params.register(&mut t2);
    let xv2 = t2.constant(x.into_dyn());
    let flat = t2.reshape(xv2, &[2 * 16 * 30, 2]).unwrap();
    let r = t2.matmul(flat, p2.var("block0.res.w").unwrap()).unwrap();
    let r = t2.reshape(r, &[2, 16, 30, 16]).unwrap();
    let r = t2.add_broadcast(r, p2.var("block0.res.b").unwrap()).unwrap();
    let want = t2
        .layer_norm(r, p2.var("block0.ln.gamma").unwrap(), p2.var("block0.ln.beta").unwrap())
        .unwrap();
    for (a, b) in tape.value(out).iter().zip(t2.value(want).iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_outputs_shapes_and_finite() {
    let enc = Encoder::new(EncoderConfig::default(), &SkeletonGraph::mpii(), 4).unwrap();
    let x = random4((3, 30, 16, 2), -10.0, 10.0, 10);
    let (f, r) = enc.forward(&x).unwrap();
    assert_eq!(f.dim(), (3, 30, 64));
    assert_eq!(r.dim(), x.dim());
    assert!(f.iter().chain(r.iter()).all(|v| v.is_finite()));
    let (f2, r2) = enc.forward(&x).unwrap();
    assert_eq!((f, r), (f2, r2));
}

fn grad_check_encoder(cfg: &EncoderConfig, seed: u64) -> f64 {
    let g = SkeletonGraph::mpii();
    let enc = Encoder::new(cfg.clone(), &g, seed).unwrap();
    let store = perturbed(&enc.params, seed + 1);
    let names = store.names().to_vec();
    let noisy = random4((1, cfg.window, 16, 2), -2.0, 2.0, seed + 2);
    let clean = random4((1, cfg.window, 16, 2), -2.0, 2.0, seed + 3);
    let (nb, lv) = (cfg.num_blocks, cfg.lambda_vel);
    grad_check_with(store.values(), 1e-5, None, |tape, vars| {
        let p = BoundParams::from_parts(names.clone(), vars.to_vec());
        let gc = GraphConsts::record(tape, &enc.cheb);
        let x = tape.constant(noisy.clone().into_dyn());
        let c = tape.constant(clean.clone().into_dyn());
        let (_, recon) = encoder_forward(tape, x, &p, &gc, nb)?;
        Ok(loss_total(tape, recon, c, lv)?.0)
    })
    .unwrap()
}

#[test]
fn full_loss_gradient_tiny_window() {
    let err = grad_check_encoder(&tiny_config(), 20);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn block_gradient_two_blocks_same_width() {
    let cfg = EncoderConfig {
        num_blocks: 2,
        block_channels: vec![3, 3],
        hidden_dim: 3,
        ..tiny_config()
    };
    let err = grad_check_encoder(&cfg, 30);
    assert!(err < 1e-4, "relative error {err}");
}

fn wave_sequence(id: &str, t: usize, phase: f64) -> PoseSequence {
    let frames = ndarray::Array3::from_shape_fn((t, 16, 2), |(f, j, d)| {
        let base = if d == 0 { (j as f64 * 0.37).sin() } else { j as f64 * 0.2 - 1.5 };
        base + 0.3 * (0.2 * f as f64 + phase + j as f64 * 0.1).sin()
    });
    PoseSequence::new(id, frames, None, None, 4).unwrap()
}

#[test]
fn extract_features_rows_match_frames() {
    let enc = Encoder::new(EncoderConfig::default(), &SkeletonGraph::mpii(), 5).unwrap();
    for t in [60, 31, 12] {
        let s = wave_sequence("w", t, 0.0);
        let e = enc.extract_features(&s).unwrap();
        assert_eq!(e.features.dim(), (t, 64));
        assert_eq!(e, enc.extract_features(&s).unwrap());
    }
}

#[test]
fn features_match_window_forward() {
    let enc = Encoder::new(EncoderConfig::default(), &SkeletonGraph::mpii(), 6).unwrap();
    let s = wave_sequence("w", 45, 0.5);
    let e = enc.extract_features(&s).unwrap();
    let first = s.frames.slice(ndarray::s![0..30, .., ..]).to_owned().insert_axis(Axis(0));
    let (f, _) = enc.forward(&first).unwrap();
    for t in 0..30 {
        for h in 0..64 {
            assert_eq!(e.features[[t, h]], f[[0, t, h]]);
        }
    }
}

fn train_small(noise: f64, epochs: usize) -> Vec<EpochLog> {
    let cfg = EncoderConfig {
        block_channels: vec![8, 8, 16],
        hidden_dim: 16,
        cheb_filters: 2,
        window: 10,
        train_stride: 5,
        noise_factor: noise,
        learning_rate: 3e-3,
        epochs,
        seed: 7,
        ..EncoderConfig::default()
    };
    let seqs: Vec<PoseSequence> = (0..3).map(|i| wave_sequence(&format!("v{i}"), 40, i as f64)).collect();
    let enc = Encoder::new(cfg.clone(), &SkeletonGraph::mpii(), 7).unwrap();
    let windows = training_windows(&seqs, &cfg).unwrap();
    let mut log = Vec::new();
    train_denoiser(&enc, &windows, initial_state(&enc), |l, _| {
        log.push(*l);
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn denoiser_loss_decreases() {
    for noise in [0.1, 0.0] {
        let log = train_small(noise, 15);
        assert_eq!(log.len(), 15);
        assert!(log.last().unwrap().total < 0.5 * log[0].total, "{log:?}");
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let a = train_small(0.1, 4);
    let b = train_small(0.1, 4);
    assert_eq!(a, b);

    let cfg = EncoderConfig {
        block_channels: vec![8, 8, 16],
        hidden_dim: 16,
        cheb_filters: 2,
        window: 10,
        learning_rate: 3e-3,
        epochs: 2,
        seed: 7,
        ..EncoderConfig::default()
    };
    let seqs: Vec<PoseSequence> = (0..3).map(|i| wave_sequence(&format!("v{i}"), 40, i as f64)).collect();
    let enc = Encoder::new(cfg.clone(), &SkeletonGraph::mpii(), 7).unwrap();
    let windows = training_windows(&seqs, &cfg).unwrap();
    let half = train_denoiser(&enc, &windows, initial_state(&enc), |_, _| Ok(())).unwrap();
    let enc4 = Encoder {
        config: EncoderConfig { epochs: 4, ..cfg },
        ..enc.clone()
    };
    let mut resumed = Vec::new();
    train_denoiser(&enc4, &windows, half, |l, _| {
        resumed.push(*l);
        Ok(())
    })
    .unwrap();
    assert_eq!(resumed, a[2..].to_vec());
}
