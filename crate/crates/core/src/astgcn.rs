//! Attention-based spatio-temporal graph encoder trained as a pose denoiser.
//!
//! Each block mixes frames with temporal attention, filters joints with
//! Chebyshev graph convolutions modulated by spatial attention, applies a
//! 1-D temporal convolution, adds a residual path and layer-normalizes the
//! channels. The last block's joint features are averaged over joints to
//! give one `H`-vector per frame; a per-joint linear head reconstructs the
//! clean 2D pose.
//!
//! Inside the blocks activations use the layout `(B, J, W, C)`: batch,
//! joint, frame, channel.

use crate::pose_io::{corrupt, make_windows, PoseSequence, SkeletonGraph, WindowBatch};
use crate::rng::{derive_seed, seeded};
use crate::tape::{
    adam_step, AdamState, BoundParams, ParamStore, Tape, TapeError, Tensor, Var,
};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("joint {0} has no neighbours")]
    IsolatedJoint(usize),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Pose(#[from] crate::pose_io::PoseError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: mse={mse}, vel={vel}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        mse: f64,
        vel: f64,
    },
    #[error("empty training set")]
    EmptyDataset,
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub cheb_order: usize,
    pub block_channels: Vec<usize>,
    /// Independent Chebyshev filter groups per block; their outputs are summed.
    pub cheb_filters: usize,
    pub temporal_kernel: usize,
    pub hidden_dim: usize,
    /// Width of the bilinear attention projections.
    pub attention_dim: usize,
    pub lambda_vel: f64,
    pub noise_factor: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub window: usize,
    pub train_stride: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            cheb_order: 3,
            block_channels: vec![16, 32, 64],
            cheb_filters: 7,
            temporal_kernel: 3,
            hidden_dim: 64,
            attention_dim: 8,
            lambda_vel: 1.0,
            noise_factor: 0.1,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 8,
            window: 30,
            train_stride: 5,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.num_blocks < 1 || self.block_channels.len() != self.num_blocks {
            return bad(format!(
                "{} blocks with channels {:?}",
                self.num_blocks, self.block_channels
            ));
        }
        if self.block_channels.last() != Some(&self.hidden_dim) {
            return bad(format!(
                "last block has {:?} channels, hidden_dim is {}",
                self.block_channels.last(),
                self.hidden_dim
            ));
        }
        if self.block_channels.contains(&0) || self.attention_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.cheb_order < 1 || self.cheb_filters < 1 {
            return bad("cheb_order and cheb_filters must be >= 1".into());
        }
        if self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal_kernel {} is not odd", self.temporal_kernel));
        }
        if self.window < 2 || self.train_stride < 1 || self.batch_size < 1 {
            return bad("need window >= 2, train_stride >= 1, batch_size >= 1".into());
        }
        if !(self.lambda_vel >= 0.0 && self.noise_factor >= 0.0 && self.learning_rate > 0.0) {
            return bad("lambda_vel, noise_factor must be >= 0 and learning_rate > 0".into());
        }
        Ok(())
    }
}

/// Per-frame encoder features for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub video_id: String,
    /// `T x H`.
    pub features: Array2<f64>,
}

/// `(2 / lambda_max) * L_sym - I` with `L_sym = I - D^-1/2 A D^-1/2`.
pub fn scaled_laplacian(graph: &SkeletonGraph) -> Result<Array2<f64>, EncoderError> {
    let a = &graph.adjacency;
    let n = a.nrows();
    let deg = a.sum_axis(Axis(1));
    if let Some(j) = deg.iter().position(|&d| d <= 0.0) {
        return Err(EncoderError::IsolatedJoint(j));
    }
    let mut l = Array2::from_shape_fn((n, n), |(i, j)| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - a[[i, j]] / (deg[i] * deg[j]).sqrt()
    });
    let lmax = symmetric_eigenvalues(&l).into_iter().fold(f64::MIN, f64::max);
    l.mapv_inplace(|v| 2.0 * v / lmax);
    for i in 0..n {
        l[[i, i]] -= 1.0;
    }
    Ok(l)
}

/// Eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    nalgebra::SymmetricEigen::new(mat).eigenvalues.iter().copied().collect()
}

/// `[T_0, ..., T_{order-1}]` with `T_0 = I`, `T_1 = L`, `T_k = 2 L T_{k-1} - T_{k-2}`.
pub fn cheb_polynomials(l: &Array2<f64>, order: usize) -> Vec<Array2<f64>> {
    let n = l.nrows();
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(order);
    for k in 0..order {
        let t = match k {
            0 => Array2::eye(n),
            1 => l.clone(),
            _ => l.dot(&out[k - 1]) * 2.0 - &out[k - 2],
        };
        out.push(t);
    }
    out
}

fn block_prefix(i: usize) -> String {
    format!("block{i}")
}

fn input_channels(cfg: &EncoderConfig, i: usize) -> usize {
    if i == 0 {
        2
    } else {
        cfg.block_channels[i - 1]
    }
}

fn uniform(shape: &[usize], limit: f64, rng: &mut crate::rng::Rng) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-limit..limit))
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Freshly initialized encoder parameters for `joints` joints.
pub fn init_params(cfg: &EncoderConfig, joints: usize, seed: u64) -> Result<ParamStore, EncoderError> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let mut p = ParamStore::new();
    let (w, d, k, g, kt) = (cfg.window, cfg.attention_dim, cfg.cheb_order, cfg.cheb_filters, cfg.temporal_kernel);
    for i in 0..cfg.num_blocks {
        let pre = block_prefix(i);
        let (ci, co) = (input_channels(cfg, i), cfg.block_channels[i]);
        for att in ["tatt", "satt"] {
            p.insert(format!("{pre}.{att}.u1"), uniform(&[ci, d], glorot(ci, d), &mut rng));
            p.insert(format!("{pre}.{att}.u2"), uniform(&[ci, d], glorot(ci, d), &mut rng));
        }
        p.insert(format!("{pre}.tatt.bias"), Tensor::zeros(IxDyn(&[w, w])));
        p.insert(format!("{pre}.satt.bias"), Tensor::zeros(IxDyn(&[joints, joints])));
        // The groups are summed, so each gets 1/sqrt(G) of the Glorot range.
        let lim = glorot(k * ci, co) / (g as f64).sqrt();
        p.insert(format!("{pre}.cheb.theta"), uniform(&[g, k, ci, co], lim, &mut rng));
        p.insert(format!("{pre}.cheb.bias"), Tensor::zeros(IxDyn(&[co])));
        p.insert(format!("{pre}.tconv.kernel"), uniform(&[kt * co, co], glorot(kt * co, co), &mut rng));
        if ci != co {
            p.insert(format!("{pre}.res.w"), uniform(&[ci, co], glorot(ci, co), &mut rng));
            p.insert(format!("{pre}.res.b"), Tensor::zeros(IxDyn(&[co])));
        }
        p.insert(format!("{pre}.ln.gamma"), Tensor::ones(IxDyn(&[co])));
        p.insert(format!("{pre}.ln.beta"), Tensor::zeros(IxDyn(&[co])));
    }
    let h = cfg.hidden_dim;
    p.insert("head.w", uniform(&[joints, h, 2], glorot(h, 2), &mut rng));
    p.insert("head.b", Tensor::zeros(IxDyn(&[joints, 2])));
    Ok(p)
}

/// Graph constants recorded once per tape.
pub struct GraphConsts {
    pub cheb: Vec<Var>,
}

impl GraphConsts {
    pub fn record(tape: &mut Tape, cheb: &[Array2<f64>]) -> Self {
        Self {
            cheb: cheb.iter().map(|t| tape.constant(t.clone().into_dyn())).collect(),
        }
    }
}

/// `(rows, C) x (C, D)` applied to the last axis of an arbitrary-rank node.
fn linear_last(tape: &mut Tape, x: Var, w: Var) -> Result<Var, TapeError> {
    let s = tape.shape(x).to_vec();
    let c = *s.last().expect("rank >= 1");
    let d = tape.shape(w)[1];
    let rows = s.iter().product::<usize>() / c;
    let flat = tape.reshape(x, &[rows, c])?;
    let y = tape.matmul(flat, w)?;
    let mut out = s;
    *out.last_mut().unwrap() = d;
    tape.reshape(y, &out)
}

/// Row-softmaxed bilinear scores `softmax((Z U1)(Z U2)^T + bias)` for pooled
/// features `z: (B, N, C)`; returns `(B, N, N)`.
fn bilinear_attention(tape: &mut Tape, z: Var, u1: Var, u2: Var, bias: Var) -> Result<Var, TapeError> {
    let left = linear_last(tape, z, u1)?;
    let right = linear_last(tape, z, u2)?;
    let right_t = tape.permute(right, &[0, 2, 1])?;
    let scores = tape.batch_matmul(left, right_t)?;
    let scores = tape.add_broadcast(scores, bias)?;
    tape.softmax(scores)
}

/// `(B, W, W)` frame attention from joint-pooled features of `x: (B, J, W, C)`.
pub fn temporal_attention(tape: &mut Tape, x: Var, p: &BoundParams, prefix: &str) -> Result<Var, TapeError> {
    let pooled = tape.mean_axis(x, 1)?;
    bilinear_attention(
        tape,
        pooled,
        p.var(&format!("{prefix}.tatt.u1"))?,
        p.var(&format!("{prefix}.tatt.u2"))?,
        p.var(&format!("{prefix}.tatt.bias"))?,
    )
}

/// `(B, J, J)` joint attention from frame-pooled features of `x: (B, J, W, C)`.
pub fn spatial_attention(tape: &mut Tape, x: Var, p: &BoundParams, prefix: &str) -> Result<Var, TapeError> {
    let pooled = tape.mean_axis(x, 2)?;
    bilinear_attention(
        tape,
        pooled,
        p.var(&format!("{prefix}.satt.u1"))?,
        p.var(&format!("{prefix}.satt.u2"))?,
        p.var(&format!("{prefix}.satt.bias"))?,
    )
}

/// One encoder block on `x: (B, J, W, C_in)`, returning `(B, J, W, C_out)`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    p: &BoundParams,
    prefix: &str,
    graph: &GraphConsts,
) -> Result<Var, TapeError> {
    let s = tape.shape(x).to_vec();
    let (b, j, w, ci) = (s[0], s[1], s[2], s[3]);

    // Frame mixing: X' = A_t X per joint.
    let at = temporal_attention(tape, x, p, prefix)?;
    let xt = tape.permute(x, &[0, 2, 1, 3])?;
    let xt = tape.reshape(xt, &[b, w, j * ci])?;
    let mixed = tape.batch_matmul(at, xt)?;
    let mixed = tape.reshape(mixed, &[b, w, j, ci])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;

    // Chebyshev filtering with attention-modulated polynomials.
    let sa = spatial_attention(tape, mixed, p, prefix)?;
    let y = tape.reshape(mixed, &[b, j, w * ci])?;
    let mut terms = Vec::with_capacity(graph.cheb.len());
    for &tk in &graph.cheb {
        let m = tape.mul_broadcast(sa, tk)?;
        let z = tape.batch_matmul(m, y)?;
        terms.push(tape.reshape(z, &[b, j, w, ci])?);
    }
    let stacked = tape.concat(&terms, 3)?;
    let theta = tape.sum_axis(p.var(&format!("{prefix}.cheb.theta"))?, 0)?;
    let k = graph.cheb.len();
    let co = tape.shape(theta)[2];
    let theta = tape.reshape(theta, &[k * ci, co])?;
    let g = linear_last(tape, stacked, theta)?;
    let g = tape.add_broadcast(g, p.var(&format!("{prefix}.cheb.bias"))?)?;
    let g = tape.relu(g);

    // Temporal convolution with zero "same" padding.
    let kernel = p.var(&format!("{prefix}.tconv.kernel"))?;
    let kt = tape.shape(kernel)[0] / co;
    let pad = (kt - 1) / 2;
    let padded = if pad > 0 {
        let zeros = tape.constant(Tensor::zeros(IxDyn(&[b, j, pad, co])));
        tape.concat(&[zeros, g, zeros], 2)?
    } else {
        g
    };
    let mut taps = Vec::with_capacity(kt);
    for d in 0..kt {
        taps.push(tape.slice(padded, 2, d, d + w)?);
    }
    let taps = tape.concat(&taps, 3)?;
    let conv = linear_last(tape, taps, kernel)?;

    let residual = if ci != co {
        let r = linear_last(tape, x, p.var(&format!("{prefix}.res.w"))?)?;
        tape.add_broadcast(r, p.var(&format!("{prefix}.res.b"))?)?
    } else {
        x
    };
    let sum = tape.add(conv, residual)?;
    tape.layer_norm(
        sum,
        p.var(&format!("{prefix}.ln.gamma"))?,
        p.var(&format!("{prefix}.ln.beta"))?,
    )
}

/// Runs every block on `windows: (B, W, J, 2)`; returns frame features
/// `(B, W, H)` and the reconstruction `(B, W, J, 2)`.
pub fn encoder_forward(
    tape: &mut Tape,
    windows: Var,
    p: &BoundParams,
    graph: &GraphConsts,
    num_blocks: usize,
) -> Result<(Var, Var), TapeError> {
    let mut h = tape.permute(windows, &[0, 2, 1, 3])?;
    for i in 0..num_blocks {
        h = block_forward(tape, h, p, &block_prefix(i), graph)?;
    }
    let s = tape.shape(h).to_vec();
    let (b, j, w, hd) = (s[0], s[1], s[2], s[3]);
    let features = tape.mean_axis(h, 1)?;
    let per_joint = tape.permute(h, &[1, 0, 2, 3])?;
    let per_joint = tape.reshape(per_joint, &[j, b * w, hd])?;
    let r = tape.batch_matmul(per_joint, p.var("head.w")?)?;
    let r = tape.reshape(r, &[j, b, w, 2])?;
    let r = tape.permute(r, &[1, 2, 0, 3])?;
    let recon = tape.add_broadcast(r, p.var("head.b")?)?;
    Ok((features, recon))
}

fn check_pose_shapes(tape: &Tape, op: &'static str, recon: Var, clean: Var) -> Result<[usize; 3], TapeError> {
    let (a, b) = (tape.shape(recon), tape.shape(clean));
    if a != b || a.len() != 4 || a[3] != 2 {
        return Err(TapeError::Shape {
            op,
            detail: format!("{a:?} vs {b:?}"),
        });
    }
    Ok([a[0], a[1], a[2]])
}

/// `(1/BWJ) sum ||recon - clean||^2`.
pub fn loss_mse(tape: &mut Tape, recon: Var, clean: Var) -> Result<Var, TapeError> {
    let [b, w, j] = check_pose_shapes(tape, "loss_mse", recon, clean)?;
    let d = tape.sub(recon, clean)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (b * w * j) as f64))
}

/// Squared error of frame-to-frame displacements over `t = 2..W`,
/// divided by `B * W * J`.
pub fn loss_vel(tape: &mut Tape, recon: Var, clean: Var) -> Result<Var, TapeError> {
    let [b, w, j] = check_pose_shapes(tape, "loss_vel", recon, clean)?;
    if w < 2 {
        return Err(TapeError::Shape {
            op: "loss_vel",
            detail: format!("window length {w} < 2"),
        });
    }
    let vel = |tape: &mut Tape, x: Var| -> Result<Var, TapeError> {
        let next = tape.slice(x, 1, 1, w)?;
        let prev = tape.slice(x, 1, 0, w - 1)?;
        tape.sub(next, prev)
    };
    let vp = vel(tape, recon)?;
    let vc = vel(tape, clean)?;
    let d = tape.sub(vp, vc)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / (b * w * j) as f64))
}

/// `mse + lambda_vel * vel`; returns `(total, mse, vel)`.
pub fn loss_total(tape: &mut Tape, recon: Var, clean: Var, lambda_vel: f64) -> Result<(Var, Var, Var), TapeError> {
    let mse = loss_mse(tape, recon, clean)?;
    let vel = loss_vel(tape, recon, clean)?;
    let wv = tape.scale(vel, lambda_vel);
    let total = tape.add(mse, wv)?;
    Ok((total, mse, vel))
}

fn eval_loss(
    f: fn(&mut Tape, Var, Var) -> Result<Var, TapeError>,
    recon: &Array4<f64>,
    clean: &Array4<f64>,
) -> Result<f64, TapeError> {
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone().into_dyn());
    let c = tape.constant(clean.clone().into_dyn());
    let l = f(&mut tape, r, c)?;
    Ok(tape.scalar(l))
}

/// Array form of [`loss_mse`].
pub fn mse_value(recon: &Array4<f64>, clean: &Array4<f64>) -> Result<f64, TapeError> {
    eval_loss(loss_mse, recon, clean)
}

/// Array form of [`loss_vel`].
pub fn vel_value(recon: &Array4<f64>, clean: &Array4<f64>) -> Result<f64, TapeError> {
    eval_loss(loss_vel, recon, clean)
}

/// Array form of [`loss_total`].
pub fn total_value(recon: &Array4<f64>, clean: &Array4<f64>, lambda_vel: f64) -> Result<f64, TapeError> {
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone().into_dyn());
    let c = tape.constant(clean.clone().into_dyn());
    let (t, _, _) = loss_total(&mut tape, r, c, lambda_vel)?;
    Ok(tape.scalar(t))
}

/// A trained (or freshly initialized) encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub cheb: Vec<Array2<f64>>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, graph: &SkeletonGraph, seed: u64) -> Result<Self, EncoderError> {
        let params = init_params(&config, graph.joint_count, seed)?;
        Self::with_params(config, graph, params)
    }

    pub fn with_params(config: EncoderConfig, graph: &SkeletonGraph, params: ParamStore) -> Result<Self, EncoderError> {
        config.validate()?;
        let cheb = cheb_polynomials(&scaled_laplacian(graph)?, config.cheb_order);
        Ok(Self { config, params, cheb })
    }

    /// Forward pass on plain arrays; returns `(features, reconstruction)`.
    pub fn forward(&self, windows: &Array4<f64>) -> Result<(Array3<f64>, Array4<f64>), EncoderError> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let g = GraphConsts::record(&mut tape, &self.cheb);
        let x = tape.constant(windows.clone().into_dyn());
        let (f, r) = encoder_forward(&mut tape, x, &p, &g, self.config.num_blocks)?;
        let f = tape.value(f).clone().into_dimensionality().expect("rank 3");
        let r = tape.value(r).clone().into_dimensionality().expect("rank 4");
        Ok((f, r))
    }

    /// Per-frame features from serial non-overlapping windows, no noise.
    pub fn extract_features(&self, seq: &PoseSequence) -> Result<EmbeddingSequence, EncoderError> {
        let w = self.config.window;
        let batch = make_windows(seq, w, w)?;
        let (f, _) = self.forward(&batch.windows)?;
        let t = seq.len();
        let h = f.dim().2;
        let flat = f
            .into_shape_with_order((batch.len() * w, h))
            .expect("contiguous forward output");
        Ok(EmbeddingSequence {
            video_id: seq.video_id.clone(),
            features: flat.slice(ndarray::s![..t, ..]).to_owned(),
        })
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub vel: f64,
    pub total: f64,
}

/// Optimizer position for resuming training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

/// Clean training windows (stride `train_stride`) from every sequence.
pub fn training_windows(seqs: &[PoseSequence], cfg: &EncoderConfig) -> Result<WindowBatch, EncoderError> {
    if seqs.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    let batches = seqs
        .iter()
        .map(|s| make_windows(s, cfg.window, cfg.train_stride))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WindowBatch::concat(&batches)?)
}

/// Train with Adam on the denoising loss. Runs epochs `state.epoch + 1 ..=
/// cfg.epochs`, calling `on_epoch` after each with the epoch log and state.
pub fn train_denoiser<F>(
    encoder: &Encoder,
    windows: &WindowBatch,
    mut state: TrainState,
    mut on_epoch: F,
) -> Result<TrainState, EncoderError>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<(), EncoderError>,
{
    let cfg = &encoder.config;
    if windows.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    let n = windows.len();
    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(derive_seed(cfg.seed, epoch as u64)));
        let (mut s_mse, mut s_vel, mut s_tot) = (0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let clean = windows.select(chunk);
            let noise_seed = derive_seed(derive_seed(cfg.seed ^ 0x6e6f697365, epoch as u64), bi as u64);
            let noisy = corrupt(&clean, cfg.noise_factor, noise_seed);
            let mut tape = Tape::new();
            let p = state.params.register(&mut tape);
            let g = GraphConsts::record(&mut tape, &encoder.cheb);
            let x = tape.constant(noisy.windows.into_dyn());
            let c = tape.constant(clean.windows.into_dyn());
            let (_, recon) = encoder_forward(&mut tape, x, &p, &g, cfg.num_blocks)?;
            let (total, mse, vel) = loss_total(&mut tape, recon, c, cfg.lambda_vel)?;
            let (lt, lm, lv) = (tape.scalar(total), tape.scalar(mse), tape.scalar(vel));
            if !lt.is_finite() {
                return Err(EncoderError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    mse: lm,
                    vel: lv,
                });
            }
            let grads = tape.backward(total)?;
            let gs: Vec<Tensor> = p.vars().iter().map(|v| grads.wrt(*v)).collect();
            adam_step(state.params.values_mut(), &gs, &mut state.adam, cfg.learning_rate, cfg.weight_decay)?;
            let wgt = chunk.len() as f64;
            s_mse += lm * wgt;
            s_vel += lv * wgt;
            s_tot += lt * wgt;
        }
        state.epoch = epoch;
        let log = EpochLog {
            epoch,
            mse: s_mse / n as f64,
            vel: s_vel / n as f64,
            total: s_tot / n as f64,
        };
        log::info!("encoder epoch {epoch}: total {:.6} (mse {:.6}, vel {:.6})", log.total, log.mse, log.vel);
        on_epoch(&log, &state)?;
    }
    Ok(state)
}

/// Fresh training state for `encoder`'s parameters.
pub fn initial_state(encoder: &Encoder) -> TrainState {
    TrainState {
        adam: AdamState::new(encoder.params.values()),
        params: encoder.params.clone(),
        epoch: 0,
    }
}
