//! The pipeline stages behind each subcommand.
//!
//! Every command reads the dataset and checkpoints from the configured
//! locations, writes its outputs under `out`, and records the effective
//! configuration next to them.

use crate::config::{resolve_split, EvalOn, RunConfig};
use crate::error::CliError;
use ndarray::Array2;
use phaseseg_core::astgcn::{
    init_params, initial_state, train_denoiser, training_windows, Encoder, EncoderConfig, EncoderError, EpochLog,
    TrainState,
};
use phaseseg_core::metrics::{evaluate, to_segments, MetricsReport};
use phaseseg_core::pose_io::{load_dataset, normalize_sequence, write_dataset, PoseSequence, SkeletonGraph, NUM_JOINTS};
use phaseseg_core::projector::{fit, FitLog, Projector, ProjectorConfig, Segmentation};
use phaseseg_core::synth::generate;
use phaseseg_core::tape::Checkpoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

pub const ENCODER_CKPT: &str = "encoder.ckpt.json";
pub const PROJECTOR_CKPT: &str = "projector.ckpt.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FIT_LOG: &str = "fit_log.csv";
pub const SEGMENTS_DIR: &str = "segments";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Run `f` over `items` on a pool of `workers` threads, keeping input order.
fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, CliError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn load_sequences(cfg: &RunConfig) -> Result<Vec<PoseSequence>, CliError> {
    Ok(load_dataset(&cfg.dataset_path(), cfg.k)?)
}

fn pick<'a>(seqs: &'a [PoseSequence], ids: &[String]) -> Result<Vec<&'a PoseSequence>, CliError> {
    ids.iter()
        .map(|id| {
            seqs.iter()
                .find(|s| &s.video_id == id)
                .ok_or_else(|| CliError::UnknownVideo(id.clone()))
        })
        .collect()
}

fn video_ids(seqs: &[PoseSequence]) -> Vec<String> {
    seqs.iter().map(|s| s.video_id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub videos: usize,
    pub frames: usize,
    pub k: usize,
}

/// Write a synthetic dataset to the configured dataset location.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary, CliError> {
    cfg.write_effective()?;
    let seqs = generate(&cfg.synth)?;
    let names = cfg.class_names();
    let manifest = write_dataset(&cfg.dataset_path(), &seqs, Some(&names))?;
    Ok(SynthSummary {
        manifest,
        videos: seqs.len(),
        frames: seqs.iter().map(|s| s.len()).sum(),
        k: cfg.k,
    })
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::csv(path, e))).collect()
}

fn load_checkpoint(path: &Path, kind: &str, stage: &str) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Checkpoint(format!(
            "missing {kind} checkpoint {}; run `{stage}` first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    if ck.kind != kind {
        return Err(CliError::Checkpoint(format!(
            "{} holds a '{}' checkpoint, expected '{kind}'",
            path.display(),
            ck.kind
        )));
    }
    Ok(ck)
}

fn meta_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, field: &str, path: &Path) -> Result<T, CliError> {
    serde_json::from_value(ck.meta[field].clone())
        .map_err(|e| CliError::Checkpoint(format!("{}: meta.{field}: {e}", path.display())))
}

/// Train the denoising encoder on the training split.
///
/// With `resume`, continues from the saved checkpoint and its optimizer
/// state; the epoch numbering and log carry on where they stopped.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Vec<EpochLog>, CliError> {
    cfg.write_effective()?;
    let seqs = load_sequences(cfg)?;
    let (train, _) = resolve_split(cfg, &video_ids(&seqs))?;
    let train_seqs = pick(&seqs, &train)?
        .into_iter()
        .map(normalize_sequence)
        .collect::<Result<Vec<_>, _>>()?;
    let encoder = Encoder::new(cfg.encoder.clone(), &SkeletonGraph::mpii(), cfg.seed)?;
    let ckpt_path = cfg.out.join(ENCODER_CKPT);
    let log_path = cfg.out.join(TRAIN_LOG);
    let (state, mut logs) = if resume {
        let ck = load_checkpoint(&ckpt_path, "encoder", "train")?;
        let saved: EncoderConfig = meta_field(&ck, "config", &ckpt_path)?;
        if saved != (EncoderConfig { epochs: saved.epochs, ..cfg.encoder.clone() }) {
            return Err(CliError::Config(
                "encoder settings differ from the checkpoint being resumed (only epochs may change)".into(),
            ));
        }
        let params = ck
            .restore_into(&encoder.params)
            .map_err(|e| CliError::Checkpoint(e.to_string()))?;
        let adam = ck
            .restore_optimizer(&params)
            .map_err(|e| CliError::Checkpoint(e.to_string()))?
            .ok_or_else(|| CliError::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
        let logs: Vec<EpochLog> = if log_path.exists() { read_csv(&log_path)? } else { Vec::new() };
        let logs = logs.into_iter().filter(|l| l.epoch <= ck.epoch).collect();
        (
            TrainState {
                params,
                adam,
                epoch: ck.epoch,
            },
            logs,
        )
    } else {
        (initial_state(&encoder), Vec::new())
    };
    let windows = training_windows(&train_seqs, &cfg.encoder)?;
    let meta = json!({ "config": cfg.encoder, "joints": NUM_JOINTS, "train_videos": train });
    train_denoiser(&encoder, &windows, state, |log, st| {
        logs.push(*log);
        Checkpoint::new("encoder", st.epoch, &st.params, meta.clone())
            .with_optimizer(&st.params, &st.adam)
            .save(&ckpt_path)?;
        write_csv(&log_path, &logs).map_err(|e| EncoderError::Callback(e.to_string()))
    })?;
    Ok(logs)
}

pub fn load_encoder(cfg: &RunConfig) -> Result<Encoder, CliError> {
    let path = cfg.out.join(ENCODER_CKPT);
    let ck = load_checkpoint(&path, "encoder", "train")?;
    let ecfg: EncoderConfig = meta_field(&ck, "config", &path)?;
    let template = init_params(&ecfg, NUM_JOINTS, 0)?;
    let params = ck
        .restore_into(&template)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(Encoder::with_params(ecfg, &SkeletonGraph::mpii(), params)?)
}

pub fn load_projector(cfg: &RunConfig) -> Result<Projector, CliError> {
    let path = cfg.out.join(PROJECTOR_CKPT);
    let ck = load_checkpoint(&path, "projector", "fit")?;
    let pcfg: ProjectorConfig = meta_field(&ck, "config", &path)?;
    let k: usize = meta_field(&ck, "k", &path)?;
    let input: usize = meta_field(&ck, "input", &path)?;
    let mut proj = Projector::new(input, k, pcfg, 0)?;
    proj.params = ck
        .restore_into(&proj.params)
        .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(proj)
}

/// Frame features of each sequence (normalized first) from the frozen encoder.
pub fn extract(cfg: &RunConfig, encoder: &Encoder, seqs: &[&PoseSequence]) -> Result<Vec<Array2<f64>>, CliError> {
    par_map(cfg.workers, seqs, |s| {
        let norm = normalize_sequence(s)?;
        Ok(encoder.extract_features(&norm)?.features)
    })
}

/// Initialize prototypes and train the projector on the training split.
pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<FitLog>, CliError> {
    cfg.write_effective()?;
    let encoder = load_encoder(cfg)?;
    let seqs = load_sequences(cfg)?;
    let (train, _) = resolve_split(cfg, &video_ids(&seqs))?;
    let feats = extract(cfg, &encoder, &pick(&seqs, &train)?)?;
    let input = encoder.config.hidden_dim;
    let mut proj = Projector::new(input, cfg.k, cfg.projector.clone(), cfg.seed)?;
    proj.init_prototypes(&feats)?;
    let logs = fit(&mut proj, &feats, &cfg.sot, |_| {})?;
    let meta = json!({ "config": cfg.projector, "k": cfg.k, "input": input, "sot": cfg.sot });
    let path = cfg.out.join(PROJECTOR_CKPT);
    Checkpoint::new("projector", logs.len(), &proj.params, meta)
        .save(&path)
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;
    write_csv(&cfg.out.join(FIT_LOG), &logs)?;
    Ok(logs)
}

pub fn labels_path(cfg: &RunConfig, id: &str) -> PathBuf {
    cfg.out.join(SEGMENTS_DIR).join(format!("{id}.labels.csv"))
}

fn write_matrix_csv(path: &Path, first: &[&str], lead: impl Fn(usize) -> Vec<String>, m: &Array2<f64>, prefix: &str) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut header: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    header.extend((0..m.ncols()).map(|k| format!("{prefix}_{k}")));
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for (t, row) in m.rows().into_iter().enumerate() {
        let mut rec = lead(t);
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SegmentRow {
    start_frame: usize,
    end_frame: usize,
    class: usize,
}

fn write_segmentation(cfg: &RunConfig, id: &str, s: &Segmentation) -> Result<(), CliError> {
    let dir = cfg.out.join(SEGMENTS_DIR);
    write_matrix_csv(
        &labels_path(cfg, id),
        &["frame", "class"],
        |t| vec![t.to_string(), s.labels[t].to_string()],
        &s.scores,
        "score",
    )?;
    write_matrix_csv(
        &dir.join(format!("{id}.plan.csv")),
        &["frame"],
        |t| vec![t.to_string()],
        &s.plan,
        "plan",
    )?;
    let rows: Vec<SegmentRow> = to_segments(&s.labels)
        .into_iter()
        .map(|g| SegmentRow {
            start_frame: g.start,
            end_frame: g.end,
            class: g.class,
        })
        .collect();
    write_csv(&dir.join(format!("{id}.segments.csv")), &rows)
}

/// Segment `videos` (every video when `None`) and write per-video CSVs.
pub fn cmd_segment(cfg: &RunConfig, videos: Option<&[String]>) -> Result<Vec<String>, CliError> {
    cfg.write_effective()?;
    let encoder = load_encoder(cfg)?;
    let proj = load_projector(cfg)?;
    let seqs = load_sequences(cfg)?;
    let ids = match videos {
        Some(v) => v.to_vec(),
        None => video_ids(&seqs),
    };
    let chosen = pick(&seqs, &ids)?;
    create_dir(&cfg.out.join(SEGMENTS_DIR))?;
    par_map(cfg.workers, &chosen, |seq| {
        let norm = normalize_sequence(seq)?;
        let f = encoder.extract_features(&norm)?.features;
        let s = proj.segment(f.view(), &cfg.sot)?;
        write_segmentation(cfg, &seq.video_id, &s)?;
        Ok(seq.video_id.clone())
    })
}

/// Predicted labels and soft scores read back from a labels CSV.
pub fn read_labels(path: &Path, id: &str) -> Result<(Vec<usize>, Array2<f64>), CliError> {
    if !path.exists() {
        return Err(CliError::MissingSegmentation(id.to_string()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let k = r.headers().map_err(|e| CliError::csv(path, e))?.len().saturating_sub(2);
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (t, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::csv(path, format!("row {t}: bad column {i}")))
        };
        if num(0)? as usize != t {
            return Err(CliError::csv(path, format!("row {t}: frames out of order")));
        }
        labels.push(num(1)? as usize);
        for i in 0..k {
            scores.push(num(2 + i)?);
        }
    }
    let t = labels.len();
    let scores = Array2::from_shape_vec((t, k), scores).expect("row-major rows of k scores");
    Ok((labels, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub class_names: Vec<String>,
    pub eval_on: EvalOn,
    pub train_videos: usize,
    pub test_videos: usize,
}

#[derive(Serialize)]
struct ReportRow {
    scope: String,
    class_name: String,
    mof: Option<f64>,
    f1: f64,
    iou: Option<f64>,
    ap: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    support: u64,
}

/// Match clusters to classes over the evaluated split and write the report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    cfg.write_effective()?;
    let seqs = load_sequences(cfg)?;
    let all = video_ids(&seqs);
    let (train, test) = resolve_split(cfg, &all)?;
    let ids = match cfg.metrics.eval_on {
        EvalOn::All => all,
        EvalOn::Train => train.clone(),
        EvalOn::Test => test.clone(),
    };
    let (mut preds, mut scores, mut truths) = (Vec::new(), Vec::new(), Vec::new());
    for seq in pick(&seqs, &ids)? {
        let truth = seq
            .labels
            .clone()
            .ok_or_else(|| CliError::MissingLabels(seq.video_id.clone()))?;
        let (p, s) = read_labels(&labels_path(cfg, &seq.video_id), &seq.video_id)?;
        preds.push(p);
        scores.push(s);
        truths.push(truth);
    }
    let metrics = evaluate(&ids, &preds, &scores, &truths, cfg.k)?;
    let names = cfg.class_names();
    let mut rows = vec![ReportRow {
        scope: "overall".into(),
        class_name: String::new(),
        mof: Some(metrics.mof),
        f1: metrics.f1,
        iou: Some(metrics.miou),
        ap: Some(metrics.map),
        precision: None,
        recall: None,
        support: metrics.frames,
    }];
    for c in &metrics.per_class {
        rows.push(ReportRow {
            scope: c.class.to_string(),
            class_name: names[c.class].clone(),
            mof: None,
            f1: c.f1,
            iou: c.iou,
            ap: c.ap,
            precision: Some(c.precision),
            recall: Some(c.recall),
            support: c.support,
        });
    }
    let report = EvalReport {
        metrics,
        class_names: names,
        eval_on: cfg.metrics.eval_on,
        train_videos: train.len(),
        test_videos: test.len(),
    };
    let path = cfg.out.join(REPORT_JSON);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    write_csv(&cfg.out.join(REPORT_CSV), &rows)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub track: String,
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub class_name: String,
}

/// Ground-truth and predicted segments of one video, for plotting.
///
/// Predicted clusters are renamed through the mapping in `report.json` when
/// an evaluation has been run, and taken as class indices otherwise.
pub fn cmd_export(cfg: &RunConfig, video: &str) -> Result<PathBuf, CliError> {
    cfg.write_effective()?;
    let seqs = load_sequences(cfg)?;
    let seq = pick(&seqs, &[video.to_string()])?[0];
    let (pred, _) = read_labels(&labels_path(cfg, video), video)?;
    let report_path = cfg.out.join(REPORT_JSON);
    let mapping: Vec<usize> = if report_path.exists() {
        let text = std::fs::read_to_string(&report_path).map_err(|e| CliError::io(&report_path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::csv(&report_path, e))?;
        serde_json::from_value(v["mapping"].clone()).map_err(|e| CliError::csv(&report_path, e))?
    } else {
        (0..cfg.k).collect()
    };
    if mapping.len() != cfg.k {
        return Err(CliError::Config(format!("report mapping has {} entries for k={}", mapping.len(), cfg.k)));
    }
    if let Some(&c) = pred.iter().find(|&&c| c >= cfg.k) {
        return Err(CliError::csv(&labels_path(cfg, video), format!("class {c} out of range for k={}", cfg.k)));
    }
    let names = cfg.class_names();
    let rows_of = |track: &str, labels: &[usize]| -> Vec<TimelineRow> {
        to_segments(labels)
            .into_iter()
            .map(|s| TimelineRow {
                track: track.to_string(),
                start_frame: s.start,
                end_frame: s.end,
                class_name: names[s.class].clone(),
            })
            .collect()
    };
    let mut rows = Vec::new();
    if let Some(truth) = &seq.labels {
        rows.extend(rows_of("truth", truth));
    }
    let mapped: Vec<usize> = pred.iter().map(|&c| mapping[c]).collect();
    rows.extend(rows_of("prediction", &mapped));
    let path = cfg.out.join(format!("timeline_{video}.csv"));
    write_csv(&path, &rows)?;
    Ok(path)
}
