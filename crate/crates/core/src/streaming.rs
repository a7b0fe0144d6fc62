//! Online per-frame inference.
//!
//! A [`StreamState`] keeps the last `T + 1` frames in a ring buffer. Each
//! [`StreamState::step`] pushes the newest frame, runs the dynamic branch on
//! the buffered window and the static branch on the newest frame, and fuses
//! the two softmax distributions as `β·p_static + (1 − β)·p_dynamic`.
//!
//! Prediction dump (JSON lines), one record per frame:
//! `{"video_id": str, "frame": int, "scores": [C+1], "s_d": [C+1], "s_s": [C+1]}`.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, FeatureSequence};
use crate::dynamic_branch::DynamicForward;
use crate::error::{Error, Result};
use crate::exemplars::ExemplarBank;
use crate::io::write_atomic;
use crate::model::{check_beta, ModelParams};
use crate::numeric::{softmax_unchecked, Tensor};
use crate::par::Exec;
use crate::static_branch::{BankProjection, StaticForward};

/// Scores emitted for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub frame: usize,
    /// Fused distribution.
    pub fused: Vec<f64>,
    /// Softmaxed dynamic-branch scores.
    pub dynamic: Vec<f64>,
    /// Softmaxed static-branch scores.
    pub static_: Vec<f64>,
}

/// `β·p_static + (1 − β)·p_dynamic`.
pub fn fuse(static_probs: &[f64], dynamic_probs: &[f64], beta: f64) -> Vec<f64> {
    static_probs
        .iter()
        .zip(dynamic_probs)
        .map(|(s, d)| beta * s + (1.0 - beta) * d)
        .collect()
}

/// Per-stream inference state; one per video.
pub struct StreamState<'a> {
    model: &'a ModelParams,
    projection: Cow<'a, BankProjection>,
    buffer: VecDeque<Vec<f64>>,
    frames_seen: usize,
    beta: f64,
}

impl<'a> StreamState<'a> {
    pub fn new(model: &'a ModelParams, bank: &'a ExemplarBank, beta: f64) -> Result<Self> {
        let projection = BankProjection::new(bank, &model.static_)?;
        Self::build(model, Cow::Owned(projection), beta)
    }

    /// Shares a projection computed once for many streams.
    pub fn with_projection(model: &'a ModelParams, projection: &'a BankProjection, beta: f64) -> Result<Self> {
        Self::build(model, Cow::Borrowed(projection), beta)
    }

    fn build(model: &'a ModelParams, projection: Cow<'a, BankProjection>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(StreamState {
            model,
            projection,
            buffer: VecDeque::with_capacity(model.hyper.window + 1),
            frames_seen: 0,
            beta,
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Number of frames currently buffered (at most `T + 1`).
    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Consumes the next frame and scores it.
    pub fn step(&mut self, frame: &[f64]) -> Result<FrameScores> {
        if frame.len() != self.model.dim {
            return Err(Error::Dimension(format!(
                "stream expects {}-dim frames, got {}",
                self.model.dim,
                frame.len()
            )));
        }
        if self.buffer.len() == self.model.hyper.window + 1 {
            self.buffer.pop_front();
        }
        self.buffer.push_back(frame.to_vec());
        let index = self.frames_seen;
        self.frames_seen += 1;

        let window = Tensor::from_rows(self.buffer.make_contiguous())?;
        let dynamic = DynamicForward::run(&window, &self.model.dynamic)?;
        let stat = StaticForward::run(frame, &self.projection, &self.model.static_)?;
        let dynamic = softmax_unchecked(&dynamic.output.logits);
        let static_ = softmax_unchecked(&stat.output.logits);
        Ok(FrameScores {
            frame: index,
            fused: fuse(&static_, &dynamic, self.beta),
            dynamic,
            static_,
        })
    }
}

/// Runs a fresh stream over every frame of `sequence` in order.
pub fn detect_frames(sequence: &FeatureSequence, model: &ModelParams, projection: &BankProjection, beta: f64) -> Result<Vec<FrameScores>> {
    let mut state = StreamState::with_projection(model, projection, beta)?;
    (0..sequence.len()).map(|t| state.step(sequence.frame(t))).collect()
}

/// `L × (C+1)` fused score matrix, row `t` computed from frames `≤ t` only.
pub fn detect_video(sequence: &FeatureSequence, model: &ModelParams, bank: &ExemplarBank, beta: f64) -> Result<Tensor> {
    let projection = BankProjection::new(bank, &model.static_)?;
    let rows: Vec<Vec<f64>> = detect_frames(sequence, model, &projection, beta)?
        .into_iter()
        .map(|s| s.fused)
        .collect();
    Tensor::from_vec(rows.len(), model.num_classes + 1, rows.concat())
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame: usize,
    pub scores: Vec<f64>,
    pub s_d: Vec<f64>,
    pub s_s: Vec<f64>,
}

/// Streams every video independently; records come out in dataset order.
pub fn detect_dataset(dataset: &FeatureDataset, model: &ModelParams, bank: &ExemplarBank, beta: f64, exec: Exec) -> Result<Vec<PredictionRecord>> {
    if dataset.dim != model.dim || dataset.num_classes != model.num_classes {
        return Err(Error::Dimension(format!(
            "dataset (C = {}, D = {}) does not match model (C = {}, D = {})",
            dataset.num_classes, dataset.dim, model.num_classes, model.dim
        )));
    }
    let projection = BankProjection::new(bank, &model.static_)?;
    let per_video = exec.map(&dataset.sequences, |seq| {
        detect_frames(seq, model, &projection, beta).map(|frames| {
            frames
                .into_iter()
                .map(|s| PredictionRecord {
                    video_id: seq.video_id.clone(),
                    frame: s.frame,
                    scores: s.fused,
                    s_d: s.dynamic,
                    s_s: s.static_,
                })
                .collect::<Vec<_>>()
        })
    });
    let mut records = Vec::with_capacity(dataset.total_frames());
    for video in per_video {
        records.extend(video?);
    }
    Ok(records)
}

pub fn encode_predictions(records: &[PredictionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("prediction record serializes");
        out.push(b'\n');
    }
    out
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_atomic(path, &encode_predictions(records))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records to any sink, one JSON object per line.
pub fn write_predictions_to(mut sink: impl Write, records: &[PredictionRecord]) -> std::io::Result<()> {
    sink.write_all(&encode_predictions(records))
}
