//! Dataset-global Hungarian matching and frame-level segmentation metrics.
//!
//! Predicted cluster ids are mapped to ground-truth classes once for the
//! whole dataset, from a confusion matrix accumulated over every video.
//! The F1 score is frame-wise macro F1, and mAP is frame-level average
//! precision computed from the soft transport scores.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cost matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("video '{video_id}': {pred} predicted frames vs {truth} ground-truth frames")]
    LengthMismatch {
        video_id: String,
        pred: usize,
        truth: usize,
    },
    #[error("video '{video_id}': label {label} out of range for K={k}")]
    LabelRange {
        video_id: String,
        label: usize,
        k: usize,
    },
    #[error("video '{video_id}': missing or malformed soft scores ({detail})")]
    MissingScores { video_id: String, detail: String },
    #[error("{0} videos given with {1} ids")]
    Count(usize, usize),
}

/// Minimum-cost perfect assignment; `result[row] = column`.
///
/// Shortest augmenting path with row/column potentials, `O(K^3)`.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>, MetricsError> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(MetricsError::NotSquare(n, m));
    }
    if let Some(((i, j), _)) = cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(MetricsError::NonFinite(i, j));
    }
    // 1-based arrays with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Cluster-to-class mapping shared by every video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `mapping[cluster] = class`.
    pub mapping: Vec<usize>,
    /// `confusion[cluster][class]` frame counts before mapping.
    pub confusion: Vec<Vec<u64>>,
}

fn check_aligned(
    ids: &[String],
    preds: &[Vec<usize>],
    truths: &[Vec<usize>],
    k: usize,
) -> Result<(), MetricsError> {
    if preds.len() != ids.len() || truths.len() != ids.len() {
        return Err(MetricsError::Count(preds.len().max(truths.len()), ids.len()));
    }
    for ((id, p), t) in ids.iter().zip(preds).zip(truths) {
        if p.len() != t.len() {
            return Err(MetricsError::LengthMismatch {
                video_id: id.clone(),
                pred: p.len(),
                truth: t.len(),
            });
        }
        if let Some(&label) = p.iter().chain(t).find(|&&l| l >= k) {
            return Err(MetricsError::LabelRange {
                video_id: id.clone(),
                label,
                k,
            });
        }
    }
    Ok(())
}

/// Confusion counts `[pred][truth]` over all videos.
pub fn confusion_matrix(preds: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> Vec<Vec<u64>> {
    let mut c = vec![vec![0u64; k]; k];
    for (p, t) in preds.iter().zip(truths) {
        for (&a, &b) in p.iter().zip(t) {
            c[a][b] += 1;
        }
    }
    c
}

/// One Hungarian matching over the dataset-wide confusion matrix.
pub fn global_match(
    ids: &[String],
    preds: &[Vec<usize>],
    truths: &[Vec<usize>],
    k: usize,
) -> Result<MatchResult, MetricsError> {
    check_aligned(ids, preds, truths, k)?;
    let confusion = confusion_matrix(preds, truths, k);
    let max = confusion.iter().flatten().copied().max().unwrap_or(0);
    let cost = Array2::from_shape_fn((k, k), |(i, j)| (max - confusion[i][j]) as f64);
    Ok(MatchResult {
        mapping: hungarian(&cost)?,
        confusion,
    })
}

pub fn apply_mapping(preds: &[Vec<usize>], mapping: &[usize]) -> Vec<Vec<usize>> {
    preds
        .iter()
        .map(|p| p.iter().map(|&c| mapping[c]).collect())
        .collect()
}

/// Fraction of correctly labeled frames over the whole dataset.
pub fn mof(mapped: &[Vec<usize>], truths: &[Vec<usize>]) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, t) in mapped.iter().zip(truths) {
        total += p.len();
        correct += p.iter().zip(t).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Per-class frame counts after mapping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn class_counts(mapped: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> Vec<ClassCounts> {
    let mut c = vec![ClassCounts::default(); k];
    for (p, t) in mapped.iter().zip(truths) {
        for (&a, &b) in p.iter().zip(t) {
            if a == b {
                c[a].tp += 1;
            } else {
                c[a].fp += 1;
                c[b].fn_ += 1;
            }
        }
    }
    c
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(c: &ClassCounts) -> f64 {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Frame-wise macro F1 over all `k` classes; empty classes score 0.
pub fn f1(mapped: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> f64 {
    let c = class_counts(mapped, truths, k);
    c.iter().map(f1_of).sum::<f64>() / k as f64
}

fn iou_of(c: &ClassCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// Mean IoU over the classes that occur in the ground truth.
pub fn miou(mapped: &[Vec<usize>], truths: &[Vec<usize>], k: usize) -> f64 {
    let c = class_counts(mapped, truths, k);
    let present: Vec<&ClassCounts> = c.iter().filter(|c| c.tp + c.fn_ > 0).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|c| iou_of(c)).sum::<f64>() / present.len() as f64
}

/// Average precision of `scores` against binary `positives`.
///
/// Tied scores enter the ranking together as one threshold. Precision is
/// replaced by its running maximum from the right before the step-wise sum
/// over recall. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    for j in (0..points.len().saturating_sub(1)).rev() {
        points[j].1 = points[j].1.max(points[j + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

/// Frame-level mAP; returns the mean and the per-class AP (`None` for classes
/// without positive frames, which are left out of the mean).
pub fn map_metric(
    ids: &[String],
    scores: &[Array2<f64>],
    truths: &[Vec<usize>],
    mapping: &[usize],
) -> Result<(f64, Vec<Option<f64>>), MetricsError> {
    let k = mapping.len();
    if scores.len() != truths.len() || ids.len() != truths.len() {
        return Err(MetricsError::Count(scores.len(), ids.len()));
    }
    // Column of the cluster that maps to each class.
    let mut column_of = vec![0; k];
    for (cluster, &class) in mapping.iter().enumerate() {
        column_of[class] = cluster;
    }
    for ((id, s), t) in ids.iter().zip(scores).zip(truths) {
        if s.dim() != (t.len(), k) || s.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::MissingScores {
                video_id: id.clone(),
                detail: format!("scores {:?} for {} frames, K={k}", s.dim(), t.len()),
            });
        }
    }
    let mut per_class = Vec::with_capacity(k);
    for class in 0..k {
        let col = column_of[class];
        let mut flat_scores = Vec::new();
        let mut flat_pos = Vec::new();
        for (s, t) in scores.iter().zip(truths) {
            flat_scores.extend(s.column(col).iter().copied());
            flat_pos.extend(t.iter().map(|&y| y == class));
        }
        per_class.push(average_precision(&flat_scores, &flat_pos));
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok((mean, per_class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the class does not occur in the ground truth.
    pub iou: Option<f64>,
    pub ap: Option<f64>,
    pub support: u64,
    pub predicted: u64,
    /// Class absent from both predictions and ground truth (F1 counted as 0).
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mof: f64,
    pub f1: f64,
    pub miou: f64,
    pub map: f64,
    pub frames: u64,
    pub videos: usize,
    pub mapping: Vec<usize>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassReport>,
}

/// Match clusters to classes and compute every metric.
pub fn evaluate(
    ids: &[String],
    preds: &[Vec<usize>],
    scores: &[Array2<f64>],
    truths: &[Vec<usize>],
    k: usize,
) -> Result<MetricsReport, MetricsError> {
    let m = global_match(ids, preds, truths, k)?;
    let mapped = apply_mapping(preds, &m.mapping);
    let counts = class_counts(&mapped, truths, k);
    let (map, aps) = map_metric(ids, scores, truths, &m.mapping)?;
    let per_class = counts
        .iter()
        .zip(aps)
        .enumerate()
        .map(|(class, (c, ap))| {
            let support = c.tp + c.fn_;
            ClassReport {
                class,
                precision: ratio(c.tp, c.tp + c.fp),
                recall: ratio(c.tp, support),
                f1: f1_of(c),
                iou: (support > 0).then(|| iou_of(c)),
                ap,
                support,
                predicted: c.tp + c.fp,
                absent: support == 0 && c.tp + c.fp == 0,
            }
        })
        .collect();
    Ok(MetricsReport {
        mof: mof(&mapped, truths),
        f1: f1(&mapped, truths, k),
        miou: miou(&mapped, truths, k),
        map,
        frames: truths.iter().map(|t| t.len() as u64).sum(),
        videos: ids.len(),
        mapping: m.mapping,
        confusion: m.confusion,
        per_class,
    })
}

/// Maximal constant run `[start, end)` of one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

pub fn to_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &c) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.class == c => s.end = t + 1,
            _ => out.push(Segment {
                class: c,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

pub fn expand_segments(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.class, s.end - s.start))
        .collect()
}
