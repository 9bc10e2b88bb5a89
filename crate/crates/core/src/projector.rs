//! Projection head, prototype classifier and the pseudo-label training loop.
//!
//! Frame features pass through a one-hidden-layer MLP into a `D`-dimensional
//! latent space. Frames are scored against `K` learnable prototypes with a
//! temperature softmax over cosine similarities. Training alternates between
//! solving the transport problem on sampled frames to get soft pseudo-labels
//! and taking Adam steps on the cross-entropy against them. The encoder that
//! produced the features stays frozen.

use crate::clustering::{init_prototypes, ClusterError};
use crate::pose_io::{sample_bins, PoseError};
use crate::rng::{derive_seed, seeded};
use crate::sot::{self, CostBundle, SotConfig, SotError};
use crate::tape::{adam_step, AdamState, BoundParams, ParamStore, Tape, TapeError, Tensor, Var};
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("invalid projector config: {0}")]
    Config(String),
    #[error("feature width {found} does not match projector input {expected}")]
    Shape { expected: usize, found: usize },
    #[error("pseudo-label entry ({row}, {col}) is negative: {value}")]
    NegativePseudo { row: usize, col: usize, value: f64 },
    #[error("prototypes {a} and {b} collapsed (cosine {cosine:.12})")]
    Degenerate { a: usize, b: usize, cosine: f64 },
    #[error("no frame features to fit on")]
    Empty,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Sot(#[from] SotError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Pose(#[from] PoseError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub hidden: usize,
    /// Latent dimension `D`.
    pub dim: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Frames sampled per video per epoch, one from each equal-width bin.
    pub n_bins: usize,
    /// Videos per Adam step.
    pub batch_videos: usize,
    /// Frames drawn for the k-means prototype initialization.
    pub init_subset: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dim: 40,
            temperature: 0.1,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            n_bins: 5,
            batch_videos: 1,
            init_subset: 2048,
            kmeans_iters: 100,
            seed: 0,
        }
    }
}

impl ProjectorConfig {
    pub fn validate(&self) -> Result<(), ProjectorError> {
        let bad = |m: &str| Err(ProjectorError::Config(m.into()));
        if self.hidden == 0 || self.dim == 0 {
            return bad("hidden and dim must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if self.n_bins == 0 || self.batch_videos == 0 {
            return bad("n_bins and batch_videos must be positive");
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], limit: f64, rng: &mut crate::rng::Rng) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-limit..limit))
}

/// Fresh MLP weights and random prototypes.
pub fn init_params(input: usize, k: usize, cfg: &ProjectorConfig, seed: u64) -> Result<ParamStore, ProjectorError> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let (h, d) = (cfg.hidden, cfg.dim);
    let mut p = ParamStore::new();
    p.insert("mlp.w1", uniform(&[input, h], (6.0 / (input + h) as f64).sqrt(), &mut rng));
    p.insert("mlp.b1", Tensor::zeros(IxDyn(&[h])));
    p.insert("mlp.w2", uniform(&[h, d], (6.0 / (h + d) as f64).sqrt(), &mut rng));
    p.insert("mlp.b2", Tensor::zeros(IxDyn(&[d])));
    p.insert("prototypes", uniform(&[k, d], 1.0, &mut rng));
    Ok(p)
}

/// `relu(x W1 + b1) W2 + b2` for `x` of shape `(N, input)`.
pub fn project_var(tape: &mut Tape, x: Var, p: &BoundParams) -> Result<Var, TapeError> {
    let h = tape.matmul(x, p.var("mlp.w1")?)?;
    let h = tape.add_broadcast(h, p.var("mlp.b1")?)?;
    let h = tape.relu(h);
    let z = tape.matmul(h, p.var("mlp.w2")?)?;
    tape.add_broadcast(z, p.var("mlp.b2")?)
}

/// Row-wise softmax of cosine similarity to each prototype, divided by `tau`.
pub fn classify_var(tape: &mut Tape, z: Var, prototypes: Var, tau: f64) -> Result<Var, TapeError> {
    let zn = tape.normalize_rows(z)?;
    let an = tape.normalize_rows(prototypes)?;
    let at = tape.transpose(an)?;
    let cos = tape.matmul(zn, at)?;
    let logits = tape.scale(cos, 1.0 / tau);
    tape.softmax(logits)
}

/// `-sum P * log f` with the log floored at `1e-12`.
pub fn loss_pseudo_var(tape: &mut Tape, probs: Var, pseudo: Var) -> Result<Var, TapeError> {
    let lf = tape.ln(probs);
    let prod = tape.mul(pseudo, lf)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

fn check_pseudo(pseudo: &Array2<f64>) -> Result<(), ProjectorError> {
    for ((row, col), &value) in pseudo.indexed_iter() {
        if value < 0.0 {
            return Err(ProjectorError::NegativePseudo { row, col, value });
        }
    }
    Ok(())
}

/// The cross-entropy summed over a batch of `(probabilities, pseudo)` pairs.
pub fn loss_pseudo(probs: &[Array2<f64>], pseudo: &[Array2<f64>]) -> Result<f64, ProjectorError> {
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (f, p) in probs.iter().zip(pseudo) {
        check_pseudo(p)?;
        let fv = tape.constant(f.clone().into_dyn());
        let pv = tape.constant(p.clone().into_dyn());
        let l = loss_pseudo_var(&mut tape, fv, pv)?;
        total += tape.scalar(l);
    }
    Ok(total)
}

/// Class probabilities of rows `x` against `prototypes`.
pub fn classify(x: ArrayView2<f64>, prototypes: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>, ProjectorError> {
    let mut tape = Tape::new();
    let z = tape.constant(x.to_owned().into_dyn());
    let a = tape.constant(prototypes.to_owned().into_dyn());
    let f = classify_var(&mut tape, z, a, tau)?;
    Ok(to2(tape.value(f)))
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality().expect("rank 2")
}

/// Fail if two prototypes point the same way or one has vanished.
pub fn check_prototypes(a: ArrayView2<f64>) -> Result<(), ProjectorError> {
    let norms: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for i in 0..a.nrows() {
        if !(norms[i] > 1e-12) || !norms[i].is_finite() {
            return Err(ProjectorError::Degenerate {
                a: i,
                b: i,
                cosine: f64::NAN,
            });
        }
        for j in 0..i {
            let cosine = a.row(i).dot(&a.row(j)) / (norms[i] * norms[j]);
            if cosine > 1.0 - 1e-9 {
                return Err(ProjectorError::Degenerate { a: j, b: i, cosine });
            }
        }
    }
    Ok(())
}

/// One epoch of the fit log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub epoch: usize,
    /// Mean transport objective over videos.
    pub ot_objective: f64,
    /// Mean per-frame cross-entropy against the pseudo-labels.
    pub loss: f64,
}

/// Labels and per-class soft scores (normalized plan rows) of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    pub plan: Array2<f64>,
    pub scores: Array2<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub params: ParamStore,
    pub input: usize,
}

impl Projector {
    pub fn new(input: usize, k: usize, config: ProjectorConfig, seed: u64) -> Result<Self, ProjectorError> {
        let params = init_params(input, k, &config, seed)?;
        Ok(Self { config, params, input })
    }

    pub fn k(&self) -> usize {
        self.prototypes().nrows()
    }

    pub fn prototypes(&self) -> Array2<f64> {
        to2(self.params.get("prototypes").expect("prototypes present"))
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<(), ProjectorError> {
        if x.ncols() != self.input {
            return Err(ProjectorError::Shape {
                expected: self.input,
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn project(&self, features: ArrayView2<f64>) -> Result<Array2<f64>, ProjectorError> {
        self.check_input(features)?;
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let x = tape.constant(features.to_owned().into_dyn());
        let z = project_var(&mut tape, x, &p)?;
        Ok(to2(tape.value(z)))
    }

    /// Replace the prototypes with temporally ordered k-means centers of
    /// the projected frames.
    pub fn init_prototypes(&mut self, features: &[Array2<f64>]) -> Result<(), ProjectorError> {
        let k = self.k();
        let projected = features
            .iter()
            .map(|f| self.project(f.view()))
            .collect::<Result<Vec<_>, _>>()?;
        let c = &self.config;
        let centers = init_prototypes(&projected, k, c.init_subset, c.seed, c.kmeans_iters)?;
        check_prototypes(centers.view())?;
        *self.params.get_mut("prototypes").expect("prototypes present") = centers.into_dyn();
        Ok(())
    }

    /// Transport-based segmentation of a full feature sequence.
    pub fn segment(&self, features: ArrayView2<f64>, sot_cfg: &SotConfig) -> Result<Segmentation, ProjectorError> {
        let z = self.project(features)?;
        let bundle = CostBundle::new(z.view(), self.prototypes().view(), sot_cfg)?;
        let sol = sot::solve(&bundle, sot_cfg)?;
        Ok(Segmentation {
            labels: sot::decode(sol.plan.matrix.view()),
            scores: sot::pseudo_labels(sol.plan.matrix.view())?,
            plan: sol.plan.matrix,
            objective: sol.objective,
        })
    }
}

/// Pseudo-labels for the sampled frames of one video under the current parameters.
fn sample_targets(
    proj: &Projector,
    features: &Array2<f64>,
    seed: u64,
    sot_cfg: &SotConfig,
) -> Result<(Array2<f64>, Array2<f64>, f64), ProjectorError> {
    let t = features.nrows();
    let positions = sample_bins(t, proj.config.n_bins, seed)?;
    let x = features.select(Axis(0), &positions);
    let z = proj.project(x.view())?;
    let bundle = CostBundle::at_frames(z.view(), proj.prototypes().view(), &positions, t, sot_cfg)?;
    let sol = sot::solve(&bundle, sot_cfg)?;
    Ok((x, sot::pseudo_labels(sol.plan.matrix.view())?, sol.objective))
}

/// Train MLP and prototypes on fixed frame features.
///
/// Each epoch first solves the transport problem for every video on
/// `n_bins` sampled frames with the epoch's starting parameters, then takes
/// one Adam step per group of `batch_videos` videos (in a seeded shuffled
/// order) on the cross-entropy against those pseudo-labels.
pub fn fit<F>(
    proj: &mut Projector,
    features: &[Array2<f64>],
    sot_cfg: &SotConfig,
    mut on_epoch: F,
) -> Result<Vec<FitLog>, ProjectorError>
where
    F: FnMut(&FitLog),
{
    if features.is_empty() {
        return Err(ProjectorError::Empty);
    }
    for f in features {
        proj.check_input(f.view())?;
    }
    let cfg = proj.config.clone();
    let mut adam = AdamState::new(proj.params.values());
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let targets = features
            .iter()
            .enumerate()
            .map(|(v, f)| sample_targets(proj, f, derive_seed(epoch_seed, v as u64), sot_cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut seeded(epoch_seed ^ 0x73687566));
        let (mut loss_sum, mut frames) = (0.0, 0usize);
        for group in order.chunks(cfg.batch_videos) {
            let mut tape = Tape::new();
            let p = proj.params.register(&mut tape);
            let a = p.var("prototypes")?;
            let mut total: Option<Var> = None;
            for &v in group {
                let (x, pseudo, _) = &targets[v];
                let xv = tape.constant(x.clone().into_dyn());
                let pv = tape.constant(pseudo.clone().into_dyn());
                let z = project_var(&mut tape, xv, &p)?;
                let f = classify_var(&mut tape, z, a, cfg.temperature)?;
                let l = loss_pseudo_var(&mut tape, f, pv)?;
                frames += x.nrows();
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("nonempty group");
            loss_sum += tape.scalar(total);
            let grads = tape.backward(total)?;
            let gs: Vec<Tensor> = p.vars().iter().map(|v| grads.wrt(*v)).collect();
            adam_step(proj.params.values_mut(), &gs, &mut adam, cfg.learning_rate, cfg.weight_decay)?;
            check_prototypes(proj.prototypes().view())?;
        }
        let log = FitLog {
            epoch,
            ot_objective: targets.iter().map(|t| t.2).sum::<f64>() / targets.len() as f64,
            loss: loss_sum / frames as f64,
        };
        log::info!("projector epoch {epoch}: OT {:.6}, loss {:.6}", log.ot_objective, log.loss);
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
