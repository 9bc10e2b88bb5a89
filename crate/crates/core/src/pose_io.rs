//! 2D pose sequences in the 16-joint MPII layout: loading, validation,
//! normalization, windowing, corruption and bin sampling.
//!
//! # Dataset layout
//!
//! A dataset is a manifest plus one JSON document per video:
//!
//! ```text
//! manifest.json   {"version": 1, "classes": ["steps", ...], "videos": ["videos/a.json", ...]}
//! videos/a.json   {"video_id": "a", "fps": 25.0,
//!                  "keypoints": [[[x, y] x 16] x T],
//!                  "labels": [0, 0, 1, ...]}
//! ```
//!
//! `fps`, `labels` and `classes` are optional. Video paths are relative to
//! the manifest. Unknown top-level fields are logged and ignored.

use crate::rng::seeded;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const NUM_JOINTS: usize = 16;

/// MPII joint indices.
pub mod joint {
    pub const R_ANKLE: usize = 0;
    pub const R_KNEE: usize = 1;
    pub const R_HIP: usize = 2;
    pub const L_HIP: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const L_ANKLE: usize = 5;
    pub const PELVIS: usize = 6;
    pub const THORAX: usize = 7;
    pub const UPPER_NECK: usize = 8;
    pub const HEAD_TOP: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const R_ELBOW: usize = 11;
    pub const R_SHOULDER: usize = 12;
    pub const L_SHOULDER: usize = 13;
    pub const L_ELBOW: usize = 14;
    pub const L_WRIST: usize = 15;
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

/// The 15-edge MPII kinematic tree.
pub const MPII_EDGES: [(usize, usize); 15] = {
    use joint::*;
    [
        (R_ANKLE, R_KNEE),
        (R_KNEE, R_HIP),
        (R_HIP, PELVIS),
        (L_ANKLE, L_KNEE),
        (L_KNEE, L_HIP),
        (L_HIP, PELVIS),
        (PELVIS, THORAX),
        (THORAX, UPPER_NECK),
        (UPPER_NECK, HEAD_TOP),
        (R_WRIST, R_ELBOW),
        (R_ELBOW, R_SHOULDER),
        (R_SHOULDER, THORAX),
        (L_WRIST, L_ELBOW),
        (L_ELBOW, L_SHOULDER),
        (L_SHOULDER, THORAX),
    ]
};

/// Javelin phase names for the four annotated classes.
pub const PHASE_NAMES: [&str; 4] = ["steps", "drive", "throw", "recovery"];

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("video '{video_id}': {msg}")]
    Malformed { video_id: String, msg: String },
    #[error("video '{video_id}' frame {frame}: expected {NUM_JOINTS} joints, found {found}")]
    JointCount {
        video_id: String,
        frame: usize,
        found: usize,
    },
    #[error("video '{video_id}' frame {frame}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        video_id: String,
        frame: usize,
        label: i64,
        num_classes: usize,
    },
    #[error("video '{video_id}' frame {frame}: non-finite coordinate")]
    NonFinite { video_id: String, frame: usize },
    #[error("video '{video_id}' frame {frame}: zero torso length")]
    ZeroTorso { video_id: String, frame: usize },
    #[error("duplicate video id '{0}'")]
    DuplicateId(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One video's per-frame keypoints and optional frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub video_id: String,
    /// `T x 16 x 2`.
    pub frames: Array3<f64>,
    pub labels: Option<Vec<usize>>,
    pub fps: Option<f64>,
}

impl PoseSequence {
    /// Validated constructor; labels must be `< num_classes`.
    pub fn new(
        video_id: impl Into<String>,
        frames: Array3<f64>,
        labels: Option<Vec<usize>>,
        fps: Option<f64>,
        num_classes: usize,
    ) -> Result<Self, PoseError> {
        let video_id = video_id.into();
        let (t, j, c) = frames.dim();
        if j != NUM_JOINTS || c != 2 {
            return Err(PoseError::JointCount {
                video_id,
                frame: 0,
                found: j,
            });
        }
        for (frame, f) in frames.outer_iter().enumerate() {
            if f.iter().any(|x| !x.is_finite()) {
                return Err(PoseError::NonFinite { video_id, frame });
            }
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(PoseError::Malformed {
                    video_id,
                    msg: format!("{} labels for {t} frames", l.len()),
                });
            }
            if let Some((frame, &label)) = l.iter().enumerate().find(|(_, &x)| x >= num_classes) {
                return Err(PoseError::LabelOutOfRange {
                    video_id,
                    frame,
                    label: label as i64,
                    num_classes,
                });
            }
        }
        if let Some(f) = fps {
            if !(f > 0.0 && f.is_finite()) {
                return Err(PoseError::Malformed {
                    video_id,
                    msg: format!("fps must be positive, got {f}"),
                });
            }
        }
        Ok(Self {
            video_id,
            frames,
            labels,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Undirected skeleton graph over the joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub joint_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Array2<f64>,
}

impl SkeletonGraph {
    pub fn mpii() -> Self {
        Self::from_edges(NUM_JOINTS, &MPII_EDGES).expect("MPII tree is valid")
    }

    pub fn from_edges(joint_count: usize, edges: &[(usize, usize)]) -> Result<Self, PoseError> {
        let mut adjacency = Array2::zeros((joint_count, joint_count));
        for &(a, b) in edges {
            if a >= joint_count || b >= joint_count || a == b {
                return Err(PoseError::InvalidArgument(format!(
                    "bad edge ({a}, {b}) for {joint_count} joints"
                )));
            }
            if adjacency[[a, b]] != 0.0 {
                return Err(PoseError::InvalidArgument(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[[a, b]] = 1.0;
            adjacency[[b, a]] = 1.0;
        }
        Ok(Self {
            joint_count,
            edges: edges.to_vec(),
            adjacency,
        })
    }

    pub fn is_connected(&self) -> bool {
        if self.joint_count == 0 {
            return true;
        }
        let mut seen = vec![false; self.joint_count];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..self.joint_count {
                if self.adjacency[[u, v]] != 0.0 && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Fixed-length windows cut from one or more sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `B x W x 16 x 2`.
    pub windows: Array4<f64>,
    /// `(video_id, start_frame)` per window.
    pub origins: Vec<(String, usize)>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.dim().1
    }

    /// Windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        WindowBatch {
            windows: self.windows.select(Axis(0), indices),
            origins: indices.iter().map(|&i| self.origins[i].clone()).collect(),
        }
    }

    pub fn concat(batches: &[WindowBatch]) -> Result<WindowBatch, PoseError> {
        let views: Vec<_> = batches.iter().map(|b| b.windows.view()).collect();
        let windows = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| PoseError::InvalidArgument(format!("window concat: {e}")))?;
        Ok(WindowBatch {
            windows,
            origins: batches.iter().flat_map(|b| b.origins.iter().cloned()).collect(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoDoc {
    video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
    keypoints: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
}

const VIDEO_FIELDS: [&str; 4] = ["video_id", "fps", "keypoints", "labels"];

/// Dataset manifest listing per-video documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    pub videos: Vec<String>,
}

fn read_text(path: &Path) -> Result<String, PoseError> {
    std::fs::read_to_string(path).map_err(|source| PoseError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse one video document.
pub fn parse_video(text: &str, path: &Path, num_classes: usize) -> Result<PoseSequence, PoseError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| PoseError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if let Some(obj) = raw.as_object() {
        for key in obj.keys().filter(|k| !VIDEO_FIELDS.contains(&k.as_str())) {
            log::warn!("{}: ignoring unknown field '{key}'", path.display());
        }
    }
    let doc: VideoDoc = serde_json::from_value(raw).map_err(|e| PoseError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let t = doc.keypoints.len();
    let mut frames = Array3::zeros((t, NUM_JOINTS, 2));
    for (frame, joints) in doc.keypoints.iter().enumerate() {
        if joints.len() != NUM_JOINTS {
            return Err(PoseError::JointCount {
                video_id: doc.video_id,
                frame,
                found: joints.len(),
            });
        }
        for (j, xy) in joints.iter().enumerate() {
            if xy.len() != 2 {
                return Err(PoseError::Malformed {
                    video_id: doc.video_id,
                    msg: format!("frame {frame} joint {j}: expected 2 coordinates, found {}", xy.len()),
                });
            }
            frames[[frame, j, 0]] = xy[0];
            frames[[frame, j, 1]] = xy[1];
        }
    }
    let labels = match doc.labels {
        None => None,
        Some(ls) => {
            let mut out = Vec::with_capacity(ls.len());
            for (frame, &l) in ls.iter().enumerate() {
                if l < 0 || l as usize >= num_classes {
                    return Err(PoseError::LabelOutOfRange {
                        video_id: doc.video_id,
                        frame,
                        label: l,
                        num_classes,
                    });
                }
                out.push(l as usize);
            }
            Some(out)
        }
    };
    PoseSequence::new(doc.video_id, frames, labels, doc.fps, num_classes)
}

/// Resolve a dataset path: a manifest file, or a directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, PoseError> {
    let path = manifest_path(path);
    serde_json::from_str(&read_text(&path)?).map_err(|e| PoseError::Parse {
        path,
        msg: e.to_string(),
    })
}

/// Load every video listed in the manifest, sorted by `video_id`.
pub fn load_dataset(path: &Path, num_classes: usize) -> Result<Vec<PoseSequence>, PoseError> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let root = mpath.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seqs = Vec::with_capacity(manifest.videos.len());
    for rel in &manifest.videos {
        let vpath = root.join(rel);
        seqs.push(parse_video(&read_text(&vpath)?, &vpath, num_classes)?);
    }
    seqs.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for pair in seqs.windows(2) {
        if pair[0].video_id == pair[1].video_id {
            return Err(PoseError::DuplicateId(pair[0].video_id.clone()));
        }
    }
    Ok(seqs)
}

/// Serialize one sequence in the dataset document format.
pub fn video_to_json(seq: &PoseSequence) -> String {
    let doc = VideoDoc {
        video_id: seq.video_id.clone(),
        fps: seq.fps,
        keypoints: seq
            .frames
            .outer_iter()
            .map(|f| f.outer_iter().map(|xy| xy.to_vec()).collect())
            .collect(),
        labels: seq
            .labels
            .as_ref()
            .map(|l| l.iter().map(|&x| x as i64).collect()),
    };
    serde_json::to_string(&doc).expect("plain data serializes")
}

/// Write `videos/<id>.json` files plus `manifest.json` under `dir`.
pub fn write_dataset(
    dir: &Path,
    seqs: &[PoseSequence],
    classes: Option<&[String]>,
) -> Result<PathBuf, PoseError> {
    let io = |path: &Path, source| PoseError::Io {
        path: path.to_path_buf(),
        source,
    };
    let vdir = dir.join("videos");
    std::fs::create_dir_all(&vdir).map_err(|e| io(&vdir, e))?;
    let mut videos = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let rel = format!("videos/{}.json", seq.video_id);
        let p = dir.join(&rel);
        std::fs::write(&p, video_to_json(seq)).map_err(|e| io(&p, e))?;
        videos.push(rel);
    }
    let manifest = Manifest {
        version: 1,
        classes: classes.map(<[String]>::to_vec),
        videos,
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("plain data serializes");
    std::fs::write(&mpath, text).map_err(|e| io(&mpath, e))?;
    Ok(mpath)
}

fn torso_length(frame: ArrayView2<f64>) -> f64 {
    let dx = frame[[joint::THORAX, 0]] - frame[[joint::PELVIS, 0]];
    let dy = frame[[joint::THORAX, 1]] - frame[[joint::PELVIS, 1]];
    (dx * dx + dy * dy).sqrt()
}

/// Per frame: move the pelvis to the origin and divide by torso length.
pub fn normalize_sequence(seq: &PoseSequence) -> Result<PoseSequence, PoseError> {
    let mut frames = seq.frames.clone();
    for (frame, mut f) in frames.outer_iter_mut().enumerate() {
        if f.iter().any(|x| !x.is_finite()) {
            return Err(PoseError::NonFinite {
                video_id: seq.video_id.clone(),
                frame,
            });
        }
        let torso = torso_length(f.view());
        if !(torso > 1e-12) {
            return Err(PoseError::ZeroTorso {
                video_id: seq.video_id.clone(),
                frame,
            });
        }
        let px = f[[joint::PELVIS, 0]];
        let py = f[[joint::PELVIS, 1]];
        for mut xy in f.outer_iter_mut() {
            xy[0] = (xy[0] - px) / torso;
            xy[1] = (xy[1] - py) / torso;
        }
    }
    Ok(PoseSequence {
        frames,
        ..seq.clone()
    })
}

/// Window start frames: full windows every `stride` frames, then one padded
/// window at the next stride position if frames remain uncovered.
/// With `stride > w` the frames between windows are skipped.
pub fn window_starts(t: usize, w: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + w <= t {
        starts.push(s);
        s += stride;
    }
    let covered = starts.last().map_or(0, |&l| l + w);
    if covered < t || t == 0 {
        starts.push(s);
    }
    starts
}

/// Cut `W`-frame windows; the final partial window repeats the last frame.
pub fn make_windows(seq: &PoseSequence, w: usize, stride: usize) -> Result<WindowBatch, PoseError> {
    if w < 2 {
        return Err(PoseError::InvalidArgument(format!("window length {w} < 2")));
    }
    if stride < 1 {
        return Err(PoseError::InvalidArgument("stride must be >= 1".into()));
    }
    let t = seq.len();
    if t == 0 {
        return Err(PoseError::Malformed {
            video_id: seq.video_id.clone(),
            msg: "empty sequence".into(),
        });
    }
    let starts = window_starts(t, w, stride);
    let mut windows = Array4::zeros((starts.len(), w, NUM_JOINTS, 2));
    for (b, &start) in starts.iter().enumerate() {
        for k in 0..w {
            let src = (start + k).min(t - 1);
            windows
                .slice_mut(s![b, k, .., ..])
                .assign(&seq.frames.slice(s![src, .., ..]));
        }
    }
    Ok(WindowBatch {
        windows,
        origins: starts.into_iter().map(|s| (seq.video_id.clone(), s)).collect(),
    })
}

/// `input + noise_factor * g` with `g` i.i.d. standard normal from `seed`.
pub fn corrupt(batch: &WindowBatch, noise_factor: f64, seed: u64) -> WindowBatch {
    let mut rng = seeded(seed);
    let mut windows = batch.windows.clone();
    if noise_factor != 0.0 {
        for x in windows.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x += noise_factor * g;
        }
    }
    WindowBatch {
        windows,
        origins: batch.origins.clone(),
    }
}

/// Bin `i` covers frames `[floor(i*T/n), floor((i+1)*T/n))`.
pub fn bin_bounds(t: usize, n_bins: usize, i: usize) -> (usize, usize) {
    (i * t / n_bins, (i + 1) * t / n_bins)
}

/// One frame drawn uniformly from each of `n_bins` equal temporal bins.
pub fn sample_bins(t: usize, n_bins: usize, seed: u64) -> Result<Vec<usize>, PoseError> {
    if n_bins == 0 || n_bins > t {
        return Err(PoseError::InvalidArgument(format!(
            "need 1 <= n_bins <= T, got n_bins={n_bins}, T={t}"
        )));
    }
    let mut rng = seeded(seed);
    Ok((0..n_bins)
        .map(|i| {
            let (lo, hi) = bin_bounds(t, n_bins, i);
            rng.random_range(lo..hi)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_from(frames: Array3<f64>) -> PoseSequence {
        PoseSequence::new("v", frames, None, None, 4).unwrap()
    }

    fn random_frames(t: usize, seed: u64) -> Array3<f64> {
        let mut rng = seeded(seed);
        Array3::from_shape_fn((t, NUM_JOINTS, 2), |_| rng.random_range(-50.0..50.0))
    }

    #[test]
    fn mpii_graph_is_connected_tree() {
        let g = SkeletonGraph::mpii();
        assert_eq!(g.edges.len(), 15);
        assert!(g.is_connected());
        for i in 0..NUM_JOINTS {
            assert_eq!(g.adjacency[[i, i]], 0.0);
            for j in 0..NUM_JOINTS {
                assert_eq!(g.adjacency[[i, j]], g.adjacency[[j, i]]);
            }
        }
        let ones = g.adjacency.iter().filter(|&&x| x == 1.0).count();
        assert_eq!(ones, 2 * g.edges.len());
    }

    #[test]
    fn normalize_fixed_point() {
        let mut f = random_frames(3, 1);
        for mut fr in f.outer_iter_mut() {
            fr[[joint::PELVIS, 0]] = 0.0;
            fr[[joint::PELVIS, 1]] = 0.0;
            fr[[joint::THORAX, 0]] = 0.6;
            fr[[joint::THORAX, 1]] = -0.8;
        }
        let s = seq_from(f.clone());
        let n = normalize_sequence(&s).unwrap();
        for (a, b) in n.frames.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_translation_invariant() {
        let f = random_frames(5, 2);
        let a = normalize_sequence(&seq_from(f.clone())).unwrap();
        let b = normalize_sequence(&seq_from(f + 13.5)).unwrap();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_pins_pelvis_and_torso() {
        let n = normalize_sequence(&seq_from(random_frames(7, 3))).unwrap();
        for f in n.frames.outer_iter() {
            assert_eq!(f[[joint::PELVIS, 0]], 0.0);
            assert_eq!(f[[joint::PELVIS, 1]], 0.0);
            assert!((torso_length(f) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_torso_names_frame() {
        let mut f = random_frames(4, 4);
        let p = f.slice(s![2, joint::PELVIS, ..]).to_owned();
        f.slice_mut(s![2, joint::THORAX, ..]).assign(&p);
        match normalize_sequence(&seq_from(f)) {
            Err(PoseError::ZeroTorso { frame, .. }) => assert_eq!(frame, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn windows_single_full() {
        let b = make_windows(&seq_from(random_frames(30, 5)), 30, 30).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.origins[0].1, 0);
    }

    #[test]
    fn windows_identity_case() {
        let s = seq_from(random_frames(4, 6));
        let b = make_windows(&s, 4, 1).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.windows.index_axis(Axis(0), 0), s.frames);
    }

    #[test]
    fn windows_strided_starts() {
        // T=10, W=4, stride=2: full windows at 0,2,4,6 already reach frame 9.
        assert_eq!(window_starts(10, 4, 2), vec![0, 2, 4, 6]);
        // T=11 leaves frame 10 uncovered: one padded window at 8.
        assert_eq!(window_starts(11, 4, 2), vec![0, 2, 4, 6, 8]);
        assert_eq!(window_starts(100, 30, 30), vec![0, 30, 60, 90]);
        assert_eq!(window_starts(3, 30, 5), vec![0]);
    }

    #[test]
    fn padded_window_repeats_last_frame() {
        let s = seq_from(random_frames(31, 7));
        let b = make_windows(&s, 30, 30).unwrap();
        assert_eq!(b.len(), 2);
        let last = s.frames.index_axis(Axis(0), 30);
        for k in 0..30 {
            assert_eq!(b.windows.slice(s![1, k, .., ..]), last);
        }
    }

    #[test]
    fn window_length_below_two_rejected() {
        assert!(make_windows(&seq_from(random_frames(5, 8)), 1, 1).is_err());
    }

    #[test]
    fn corrupt_zero_noise_is_exact() {
        let b = make_windows(&seq_from(random_frames(10, 9)), 5, 5).unwrap();
        assert_eq!(corrupt(&b, 0.0, 1), b);
    }

    #[test]
    fn corrupt_deterministic_per_seed() {
        let b = make_windows(&seq_from(random_frames(10, 10)), 5, 5).unwrap();
        let x = corrupt(&b, 0.1, 42);
        let y = corrupt(&b.clone(), 0.1, 42);
        assert_eq!(x, y);
        assert_ne!(x, corrupt(&b, 0.1, 43));
        // input untouched
        assert_eq!(b, make_windows(&seq_from(random_frames(10, 10)), 5, 5).unwrap());
    }

    #[test]
    fn corrupt_noise_scale() {
        let b = WindowBatch {
            windows: Array4::zeros((100, 40, NUM_JOINTS, 2)),
            origins: vec![("z".into(), 0); 100],
        };
        let c = corrupt(&b, 0.1, 3);
        let n = c.windows.len() as f64;
        let mean = c.windows.sum() / n;
        let var = c.windows.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(n >= 1e5);
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn bins_one_frame_each() {
        assert_eq!(sample_bins(5, 5, 0).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bins_hundred_frames() {
        for seed in 0..20 {
            let idx = sample_bins(100, 5, seed).unwrap();
            for (i, &x) in idx.iter().enumerate() {
                assert!(x >= 20 * i && x < 20 * i + 20);
            }
        }
    }

    #[test]
    fn bins_uneven_bounds() {
        assert_eq!(bin_bounds(10, 3, 0), (0, 3));
        assert_eq!(bin_bounds(10, 3, 1), (3, 6));
        assert_eq!(bin_bounds(10, 3, 2), (6, 10));
        assert!(sample_bins(3, 4, 0).is_err());
    }

    #[test]
    fn rejects_short_frame_in_json() {
        let mut kp: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0, 1.0]; 16]; 3];
        kp[1].pop();
        let text = serde_json::json!({"video_id": "x", "keypoints": kp}).to_string();
        match parse_video(&text, Path::new("x.json"), 4) {
            Err(PoseError::JointCount { frame, found, .. }) => {
                assert_eq!((frame, found), (1, 15));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_label_out_of_range() {
        let kp = vec![vec![vec![0.0, 1.0]; 16]; 2];
        let text = serde_json::json!({"video_id": "x", "keypoints": kp, "labels": [0, 4]}).to_string();
        assert!(matches!(
            parse_video(&text, Path::new("x.json"), 4),
            Err(PoseError::LabelOutOfRange { frame: 1, label: 4, .. })
        ));
    }

    #[test]
    fn unknown_fields_are_not_errors() {
        let kp = vec![vec![vec![0.0, 1.0]; 16]; 2];
        let text = serde_json::json!({"video_id": "x", "keypoints": kp, "athlete": "anon"}).to_string();
        assert!(parse_video(&text, Path::new("x.json"), 4).is_ok());
    }

    proptest! {
        #[test]
        fn normalize_idempotent(seed in 0u64..1000, t in 1usize..8) {
            let once = normalize_sequence(&seq_from(random_frames(t, seed))).unwrap();
            let twice = normalize_sequence(&once).unwrap();
            for (a, b) in once.frames.iter().zip(twice.frames.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn windows_cover_every_frame(t in 1usize..80, w in 2usize..20, stride in 1usize..12) {
            prop_assume!(stride <= w);
            let starts = window_starts(t, w, stride);
            let mut covered = vec![false; t];
            for s in &starts {
                prop_assert_eq!(s % stride, 0);
                for f in *s..(*s + w).min(t) {
                    covered[f] = true;
                }
            }
            prop_assert!(covered.into_iter().all(|c| c));
        }

        #[test]
        fn bins_increasing_and_in_range(t in 1usize..300, n in 1usize..20, seed in 0u64..50) {
            prop_assume!(n <= t);
            let idx = sample_bins(t, n, seed).unwrap();
            prop_assert_eq!(idx.len(), n);
            for (i, &x) in idx.iter().enumerate() {
                let (lo, hi) = bin_bounds(t, n, i);
                prop_assert!(x >= lo && x < hi);
                if i > 0 { prop_assert!(x > idx[i - 1]); }
            }
            prop_assert_eq!(idx, sample_bins(t, n, seed).unwrap());
        }
    }
}
