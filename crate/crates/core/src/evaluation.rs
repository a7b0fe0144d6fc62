//! Frame-level detection metrics.
//!
//! Scores of every frame of every video are pooled before ranking. Rankings
//! sort by score descending and break ties by ascending pooled frame index
//! (videos in dataset order, frames in time order).
//!
//! * AP: all-point interpolated area under the precision/recall curve.
//! * cAP: mean over positives of `w·TP / (w·TP + FP)` at each positive's rank.
//! * Portion mcAP: each instance is cut into ten equal portions; for portion
//!   `p` the positives are the class-`c` frames whose offset `j` in an instance
//!   of length `n` satisfies `⌊10·j / n⌋ = p`, and the negatives are all
//!   background frames.
//!
//! Class means skip classes without positives; a metric with nothing to
//! average is `None` (`null` in JSON).

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, BACKGROUND};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::streaming::PredictionRecord;

pub const PORTIONS: usize = 10;

/// Indices sorted by score descending, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("score {i} is {}", scores[i])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

fn check_inputs(scores: &[f64], positives: &[bool]) -> Result<usize> {
    if scores.len() != positives.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let npos = positives.iter().filter(|&&p| p).count();
    if npos == 0 {
        return Err(Error::UndefinedMetric("no positive frames".into()));
    }
    Ok(npos)
}

/// All-point interpolated average precision.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let npos = check_inputs(scores, positives)?;
    let order = ranking(scores)?;
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = order
        .iter()
        .enumerate()
        .filter(|(_, &i)| positives[i])
        .map(|(k, _)| precision[k])
        .sum();
    Ok(sum / npos as f64)
}

/// Mean calibrated precision at the positives' ranks.
pub fn calibrated_ap(scores: &[f64], positives: &[bool], w: f64) -> Result<f64> {
    if !(w.is_finite() && w > 0.0) {
        return Err(Error::Parameter(format!("w must be > 0, got {w}")));
    }
    let npos = check_inputs(scores, positives)?;
    let order = ranking(scores)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut sum = 0.0;
    for &i in &order {
        if positives[i] {
            tp += 1;
            let wtp = w * tp as f64;
            sum += wtp / (wtp + fp as f64);
        } else {
            fp += 1;
        }
    }
    Ok(sum / npos as f64)
}

/// Metrics over classes `1..=C`; index `c − 1` holds class `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_frames: usize,
    /// Background-to-action frame ratio used for calibration.
    pub w: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub per_class_cap: Vec<Option<f64>>,
    pub cmap: Option<f64>,
    pub portion_mcap: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Percentages, one row per class, then the portion breakdown.
    pub fn table(&self) -> String {
        fn pct(v: Option<f64>) -> String {
            v.map_or_else(|| "     -".to_string(), |v| format!("{:6.2}", 100.0 * v))
        }
        let mut out = String::new();
        let _ = writeln!(out, "class      AP     cAP");
        for (c, (ap, cap)) in self.per_class_ap.iter().zip(&self.per_class_cap).enumerate() {
            let _ = writeln!(out, "{:>5}  {}  {}", c + 1, pct(*ap), pct(*cap));
        }
        let _ = writeln!(out, " mean  {}  {}", pct(self.map), pct(self.cmap));
        let _ = writeln!(out);
        let _ = writeln!(out, "portion   mcAP");
        for (p, v) in self.portion_mcap.iter().enumerate() {
            let _ = writeln!(out, "{:.1}-{:.1}  {}", p as f64 / 10.0, (p + 1) as f64 / 10.0, pct(*v));
        }
        out
    }
}

/// Predictions placed in pooled frame order.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub num_classes: usize,
    /// `scores[i]` holds the `C + 1` fused scores of pooled frame `i`.
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Instance portion of each action frame.
    pub portions: Vec<Option<usize>>,
}

/// Matches every record to its frame, rejecting gaps, duplicates and strays.
pub fn align(predictions: &[PredictionRecord], dataset: &FeatureDataset) -> Result<Aligned> {
    let width = dataset.num_classes + 1;
    let mut offsets = HashMap::with_capacity(dataset.sequences.len());
    let mut labels = Vec::with_capacity(dataset.total_frames());
    let mut portions = Vec::with_capacity(dataset.total_frames());
    for (v, seq) in dataset.sequences.iter().enumerate() {
        offsets.insert(seq.video_id.as_str(), (v, labels.len()));
        let start = portions.len();
        portions.resize(start + seq.len(), None);
        for span in &seq.spans {
            let n = span.len();
            for j in 0..n {
                portions[start + span.start + j] = Some(PORTIONS * j / n);
            }
        }
        labels.extend_from_slice(&seq.labels);
    }
    let mut scores: Vec<Option<Vec<f64>>> = vec![None; labels.len()];
    for r in predictions {
        let &(v, offset) = offsets
            .get(r.video_id.as_str())
            .ok_or_else(|| Error::Validation(format!("prediction for unknown video {}", r.video_id)))?;
        let len = dataset.sequences[v].len();
        if r.frame >= len {
            return Err(Error::Validation(format!(
                "video {} has {len} frames, prediction for frame {}",
                r.video_id, r.frame
            )));
        }
        if r.scores.len() != width {
            return Err(Error::Validation(format!(
                "video {} frame {}: {} scores, expected {width}",
                r.video_id,
                r.frame,
                r.scores.len()
            )));
        }
        let slot = &mut scores[offset + r.frame];
        if slot.is_some() {
            return Err(Error::Validation(format!(
                "duplicate prediction for video {} frame {}",
                r.video_id, r.frame
            )));
        }
        *slot = Some(r.scores.clone());
    }
    let scores = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                let (id, frame) = locate(dataset, i);
                Error::Validation(format!("missing prediction for video {id} frame {frame}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aligned {
        num_classes: dataset.num_classes,
        scores,
        labels,
        portions,
    })
}

fn locate(dataset: &FeatureDataset, mut i: usize) -> (&str, usize) {
    for seq in &dataset.sequences {
        if i < seq.len() {
            return (&seq.video_id, i);
        }
        i -= seq.len();
    }
    unreachable!("pooled index beyond dataset")
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn defined(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct ClassMetrics {
    ap: Option<f64>,
    cap: Option<f64>,
    portions: Vec<Option<f64>>,
}

fn class_metrics(aligned: &Aligned, class: usize, w: Option<f64>) -> Result<ClassMetrics> {
    let scores: Vec<f64> = aligned.scores.iter().map(|s| s[class]).collect();
    let positives: Vec<bool> = aligned.labels.iter().map(|&l| l == class).collect();
    let ap = defined(average_precision(&scores, &positives))?;
    let Some(w) = w else {
        return Ok(ClassMetrics {
            ap,
            cap: None,
            portions: vec![None; PORTIONS],
        });
    };
    let cap = defined(calibrated_ap(&scores, &positives, w))?;
    let mut portions = Vec::with_capacity(PORTIONS);
    for p in 0..PORTIONS {
        let mut sub_scores = Vec::new();
        let mut sub_pos = Vec::new();
        for (i, &label) in aligned.labels.iter().enumerate() {
            let positive = label == class && aligned.portions[i] == Some(p);
            if positive || label == BACKGROUND {
                sub_scores.push(scores[i]);
                sub_pos.push(positive);
            }
        }
        portions.push(defined(calibrated_ap(&sub_scores, &sub_pos, w))?);
    }
    Ok(ClassMetrics { ap, cap, portions })
}

/// Computes the report from frames already placed in pooled order.
pub fn evaluate_aligned(aligned: &Aligned, exec: Exec) -> Result<EvalReport> {
    let background = aligned.labels.iter().filter(|&&l| l == BACKGROUND).count();
    let action = aligned.labels.len() - background;
    let w = (background > 0 && action > 0).then(|| background as f64 / action as f64);
    let per_class = exec
        .map_range(aligned.num_classes, |c| class_metrics(aligned, c + 1, w))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_class_ap: Vec<_> = per_class.iter().map(|m| m.ap).collect();
    let per_class_cap: Vec<_> = per_class.iter().map(|m| m.cap).collect();
    let portion_mcap = (0..PORTIONS)
        .map(|p| mean_defined(&per_class.iter().map(|m| m.portions[p]).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        num_frames: aligned.labels.len(),
        w,
        map: mean_defined(&per_class_ap),
        cmap: mean_defined(&per_class_cap),
        per_class_ap,
        per_class_cap,
        portion_mcap,
    })
}

pub fn evaluate(predictions: &[PredictionRecord], dataset: &FeatureDataset) -> Result<EvalReport> {
    evaluate_with(predictions, dataset, Exec::default())
}

pub fn evaluate_with(predictions: &[PredictionRecord], dataset: &FeatureDataset, exec: Exec) -> Result<EvalReport> {
    evaluate_aligned(&align(predictions, dataset)?, exec)
}

/// Fraction of frames whose highest score (lowest index on ties) is the label.
pub fn frame_accuracy(predictions: &[PredictionRecord], dataset: &FeatureDataset) -> Result<f64> {
    let aligned = align(predictions, dataset)?;
    if aligned.labels.is_empty() {
        return Err(Error::UndefinedMetric("no frames".into()));
    }
    let hits = aligned
        .scores
        .iter()
        .zip(&aligned.labels)
        .filter(|(s, &l)| argmax(s) == l)
        .count();
    Ok(hits as f64 / aligned.labels.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
