//! Metrics and corpus evaluation: detection average precision and accuracy,
//! localization F1 and Matthews correlation, per-dataset report tables, and
//! a wall-clock inference benchmark.
//!
//! Detection is scored at the frame level from the fake-class probability;
//! localization is scored pixelwise between the post-processed predicted
//! mask and the ground-truth mask. When the detector calls a frame pristine,
//! its predicted mask is disregarded (treated as all-pristine) — a flagged
//! frame is the only thing that carries a localization claim.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{load_examples, CorpusManifest, DatasetKind, FrameExample, Split};
use crate::error::{Error, Result};
use crate::geometry::{ForgeryMask, FrameTensor};
use crate::model::Model;
use crate::postprocess::{postprocess_frame, BlockProbabilityField};

/// Report keys for the four headline metrics.
pub const KEY_DET_MAP: &str = "Det. mAP";
pub const KEY_DET_ACC: &str = "Det. ACC";
pub const KEY_LOC_MCC: &str = "Loc. MCC";
pub const KEY_LOC_F1: &str = "Loc. F1";

// ---------------------------------------------------------------------------
// Detection metrics
// ---------------------------------------------------------------------------

/// All-points average precision over `(score, is_fake)` pairs, with fakes as
/// the positive class. Tied scores form one group: precision is evaluated
/// only after absorbing the whole group, so the result is independent of the
/// order within ties (and of the input order generally).
///
/// Errors when the inputs contain only one class — precision/recall curves
/// are undefined without both.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::invalid("detection scores must be finite"));
    }
    let positives = scores.iter().filter(|(_, fake)| *fake).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid(
            "average precision is undefined when every example has the same class",
        ));
    }
    let mut sorted: Vec<&(f64, bool)> = scores.iter().collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_tp = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (tp - prev_tp) as f64 / positives as f64 * precision;
            prev_tp = tp;
        }
        i = j;
    }
    Ok(ap)
}

/// Fraction of frames whose thresholded score matches the label. A score
/// exactly at the threshold counts as a fake call.
pub fn detection_accuracy(scores: &[(f64, bool)], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .filter(|(s, fake)| (*s >= threshold) == *fake)
        .count();
    correct as f64 / scores.len() as f64
}

/// Detection summary for one dataset. `ap` is `None` when undefined (only
/// one class present); accuracy is always reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap: Option<f64>,
    pub accuracy: f64,
    pub frames: usize,
}

pub fn detection_metrics(scores: &[(f64, bool)], threshold: f64) -> DetectionMetrics {
    DetectionMetrics {
        ap: average_precision(scores).ok(),
        accuracy: detection_accuracy(scores, threshold),
        frames: scores.len(),
    }
}

// ---------------------------------------------------------------------------
// Localization metrics
// ---------------------------------------------------------------------------

/// Pixel confusion counts with tampered as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_labels(pred: &[bool], truth: &[bool]) -> Result<Confusion> {
        if pred.len() != truth.len() {
            return Err(Error::invalid(format!(
                "prediction has {} labels but the truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// Pixelwise confusion between two binarized masks of equal dims.
    pub fn from_masks(pred: &ForgeryMask, truth: &ForgeryMask) -> Result<Confusion> {
        if !pred.is_binarized() || !truth.is_binarized() {
            return Err(Error::invalid("confusion counts need binarized masks"));
        }
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::invalid(format!(
                "predicted mask is {}×{} but the truth is {}×{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.values().iter().zip(truth.values().iter()) {
            match (p != 0.0, t != 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn absorb(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `2·TP / (2·TP + FP + FN)`; 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Matthews correlation coefficient; 0 when any marginal is 0.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (
            self.tp as f64,
            self.fp as f64,
            self.fn_ as f64,
            self.tn as f64,
        );
        let marginals = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if marginals.iter().any(|&m| m == 0.0) {
            return 0.0;
        }
        (tp * tn - fp * fn_) / marginals.iter().product::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

/// How to score a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    /// Datasets to evaluate; `None` means every kind present in the split.
    pub kinds: Option<Vec<DatasetKind>>,
    pub detection_threshold: f64,
    /// When true, localization pools pixel counts over all frames of a
    /// dataset into one confusion matrix; the default averages the per-frame
    /// scores instead.
    pub pooled_localization: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            kinds: None,
            detection_threshold: 0.5,
            pooled_localization: false,
        }
    }
}

/// One scored frame: the detector's fake probability plus the predicted and
/// ground-truth masks. The disregard rule has already been applied by the
/// time this exists.
#[derive(Debug, Clone)]
pub struct FrameScore {
    pub id: String,
    pub kind: DatasetKind,
    pub fake: bool,
    pub score: f64,
    pub predicted_mask: ForgeryMask,
    pub truth_mask: ForgeryMask,
}

/// Per-dataset metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: DatasetKind,
    pub frames: usize,
    pub ap: Option<f64>,
    pub accuracy: f64,
    pub f1: f64,
    pub mcc: f64,
}

/// Full evaluation outcome: one row per dataset plus the cross-dataset
/// means. `skipped` lists items that could not be read, one message each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_kind: Vec<KindReport>,
    pub pooled_localization: bool,
    pub detection_threshold: f64,
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// Headline metrics under their fixed report keys. `Det. mAP` averages
    /// the datasets whose AP is defined and is `NaN` if none is.
    pub fn overall(&self) -> BTreeMap<String, f64> {
        let n = self.per_kind.len() as f64;
        let defined: Vec<f64> = self.per_kind.iter().filter_map(|k| k.ap).collect();
        let map = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let mean = |f: fn(&KindReport) -> f64| self.per_kind.iter().map(f).sum::<f64>() / n;
        let mut out = BTreeMap::new();
        out.insert(KEY_DET_MAP.to_string(), map);
        out.insert(KEY_DET_ACC.to_string(), mean(|k| k.accuracy));
        out.insert(KEY_LOC_MCC.to_string(), mean(|k| k.mcc));
        out.insert(KEY_LOC_F1.to_string(), mean(|k| k.f1));
        out
    }

    /// Plain-text table: one dataset per row, means in the footer.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>7}",
            "dataset", "AP", "ACC", "F1", "MCC", "frames"
        );
        let fmt = |v: f64| format!("{v:.4}");
        for k in &self.per_kind {
            let ap = k.ap.map(fmt).unwrap_or_else(|| "n/a".to_string());
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>8} {:>8} {:>8} {:>7}",
                k.kind.name(),
                ap,
                fmt(k.accuracy),
                fmt(k.f1),
                fmt(k.mcc),
                k.frames
            );
        }
        let overall = self.overall();
        let _ = writeln!(
            s,
            "{KEY_DET_MAP} {:.4} | {KEY_DET_ACC} {:.4} | {KEY_LOC_F1} {:.4} | {KEY_LOC_MCC} {:.4}",
            overall[KEY_DET_MAP], overall[KEY_DET_ACC], overall[KEY_LOC_F1], overall[KEY_LOC_MCC]
        );
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped {} unreadable item(s)", self.skipped.len());
        }
        s
    }
}

/// Scores one frame with the model: inference, post-processing, and the
/// disregard rule (a below-threshold detection zeroes the predicted mask).
pub fn score_frame(model: &Model, example: &FrameExample, threshold: f64) -> Result<FrameScore> {
    let (h, w, _) = example.frame.dim();
    let frame = FrameTensor::new(example.frame.clone(), example.id.clone(), "eval")?;
    let inference = model.infer_frame(&frame)?;
    let predicted_mask = if inference.p_fake >= threshold {
        let field = BlockProbabilityField::from_rows(
            &inference.q,
            inference.grid.rows,
            inference.grid.cols,
        )?;
        postprocess_frame(&field, &inference.grid)?.0
    } else {
        ForgeryMask::zeros(h, w)
    };
    Ok(FrameScore {
        id: example.id.clone(),
        kind: DatasetKind::Splice, // caller overwrites; kind is not a frame property
        fake: example.tampered,
        score: inference.p_fake,
        predicted_mask,
        truth_mask: example.mask.clone(),
    })
}

/// Reduces scored frames to the per-dataset metric table. The frames of each
/// kind are aggregated independently; "empty" input is an error because a
/// report with no rows has no meaning.
pub fn aggregate(frames: &[FrameScore], opts: &EvalOptions) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to aggregate"));
    }
    let mut kinds: Vec<DatasetKind> = Vec::new();
    for f in frames {
        if !kinds.contains(&f.kind) {
            kinds.push(f.kind);
        }
    }
    let mut per_kind = Vec::new();
    for kind in kinds {
        let of_kind: Vec<&FrameScore> = frames.iter().filter(|f| f.kind == kind).collect();
        let scores: Vec<(f64, bool)> = of_kind.iter().map(|f| (f.score, f.fake)).collect();
        let det = detection_metrics(&scores, opts.detection_threshold);

        let (f1, mcc) = if opts.pooled_localization {
            let mut pooled = Confusion::default();
            for f in &of_kind {
                pooled.absorb(&Confusion::from_masks(&f.predicted_mask, &f.truth_mask)?);
            }
            (pooled.f1(), pooled.mcc())
        } else {
            let mut f1_sum = 0.0;
            let mut mcc_sum = 0.0;
            for f in &of_kind {
                let c = Confusion::from_masks(&f.predicted_mask, &f.truth_mask)?;
                f1_sum += c.f1();
                mcc_sum += c.mcc();
            }
            let n = of_kind.len() as f64;
            (f1_sum / n, mcc_sum / n)
        };
        per_kind.push(KindReport {
            kind,
            frames: of_kind.len(),
            ap: det.ap,
            accuracy: det.accuracy,
            f1,
            mcc,
        });
    }
    Ok(EvalReport {
        per_kind,
        pooled_localization: opts.pooled_localization,
        detection_threshold: opts.detection_threshold,
        skipped: Vec::new(),
    })
}

/// Evaluates a model over a generated corpus.
///
/// Unreadable items are skipped and itemized in the report rather than
/// aborting the run; an evaluation that ends with zero scored frames is an
/// error.
pub fn evaluate_corpus(model: &Model, corpus_root: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let manifest_path = corpus_root.join("manifest.jsonl");
    if !manifest_path.exists() {
        return Err(Error::config(format!(
            "no corpus manifest at {}",
            manifest_path.display()
        )));
    }
    let manifest = CorpusManifest::load_jsonl(&manifest_path)?;
    let kinds: Vec<DatasetKind> = match &opts.kinds {
        Some(kinds) => kinds.clone(),
        None => DatasetKind::ALL
            .iter()
            .copied()
            .filter(|&k| !manifest.records_for(opts.split, &[k]).is_empty())
            .collect(),
    };
    if kinds.is_empty() {
        return Err(Error::config(format!(
            "the corpus has no {} items to evaluate",
            opts.split
        )));
    }

    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for &kind in &kinds {
        let records = manifest.records_for(opts.split, &[kind]);
        if records.is_empty() {
            return Err(Error::config(format!(
                "the corpus has no {} items of dataset `{kind}`",
                opts.split
            )));
        }
        for record in records {
            // One unreadable file skips that item; everything else is fatal.
            let examples = match load_examples(corpus_root, &[record]) {
                Ok(ex) => ex,
                Err(Error::Io { path, source }) => {
                    skipped.push(format!("{}: {} ({source})", record.id, path.display()));
                    continue;
                }
                Err(other) => return Err(other),
            };
            for example in &examples {
                let mut scored = score_frame(model, example, opts.detection_threshold)?;
                scored.kind = kind;
                frames.push(scored);
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::config(
            "every item in the evaluation split was unreadable",
        ));
    }
    let mut report = aggregate(&frames, opts)?;
    report.skipped = skipped;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

/// Wall-clock inference throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub total_seconds: f64,
    pub mean_seconds_per_frame: f64,
    pub fps: f64,
    pub hardware: String,
}

/// CPU model and thread count, read from the host.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown CPU".to_string());
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{cpu} ({threads} threads)")
}

/// Times `frames` individual single-frame inferences (no batching) on
/// synthetic frames at the model's input size. At least 10 frames are
/// required for a stable figure.
pub fn benchmark_inference(model: &Model, frames: usize, seed: u64) -> Result<BenchmarkReport> {
    use crate::datagen::synth::synth_pristine_frame;
    if frames < 10 {
        return Err(Error::invalid(format!(
            "a benchmark needs at least 10 frames, got {frames}"
        )));
    }
    let (h, w) = (model.cfg.frame_height, model.cfg.frame_width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<FrameTensor> = (0..frames)
        .map(|i| {
            FrameTensor::new(synth_pristine_frame(h, w, &mut rng), format!("bench-{i}"), "bench")
        })
        .collect::<Result<_>>()?;
    let started = Instant::now();
    for frame in &inputs {
        let inference = model.infer_frame(frame)?;
        std::hint::black_box(inference.p_fake);
    }
    let total_seconds = started.elapsed().as_secs_f64();
    Ok(BenchmarkReport {
        frames,
        frame_height: h,
        frame_width: w,
        total_seconds,
        mean_seconds_per_frame: total_seconds / frames as f64,
        fps: frames as f64 / total_seconds,
        hardware: hardware_descriptor(),
    })
}
