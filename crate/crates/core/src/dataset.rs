//! Per-frame feature sequences with frame labels, on-disk formats, and a
//! synthetic generator for desk-scale experiments.
//!
//! Feature file (`.clrf`, little-endian): magic `CLRF`, version `u32 = 1`,
//! `D: u32`, `L: u32`, then `L × D` `f32` values with frames as rows.
//!
//! Manifest (JSON):
//! `{ "C": int, "D": int, "videos": [ { "id": str, "features": path, "spans": [[class, start, end], ...] } ] }`
//! where `features` is relative to the manifest's directory and `end` is
//! inclusive. An optional `"split": "train" | "test"` field is accepted.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, to_u32, write_atomic, Decoder, Encoder};
use crate::numeric::{Rng, Tensor};
use crate::par::Exec;

pub const FEATURE_MAGIC: &[u8; 4] = b"CLRF";
pub const FEATURE_VERSION: u32 = 1;

/// Class index reserved for frames outside every action instance.
pub const BACKGROUND: usize = 0;

/// An action instance `[start, end]` (inclusive) of class `class ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(class: usize, start: usize, end: usize) -> Self {
        Span { class, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One video: `L` frames of dimension `D` plus a class label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `L × D`, one frame per row.
    pub frames: Tensor,
    /// Class index per frame, `0..=C`.
    pub labels: Vec<usize>,
    pub spans: Vec<Span>,
}

impl FeatureSequence {
    /// Validates that `labels` and `spans` describe the same instances.
    pub fn new(
        video_id: impl Into<String>,
        frames: Tensor,
        labels: Vec<usize>,
        spans: Vec<Span>,
        num_classes: usize,
    ) -> Result<Self> {
        let seq = FeatureSequence {
            video_id: video_id.into(),
            frames,
            labels,
            spans,
        };
        seq.validate(num_classes)?;
        Ok(seq)
    }

    /// Instances are the maximal runs of equal non-background labels.
    pub fn from_labels(
        video_id: impl Into<String>,
        frames: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l > num_classes) {
            return Err(Error::Validation(format!("label {bad} exceeds C = {num_classes}")));
        }
        let spans = runs_of(&labels);
        FeatureSequence::new(video_id, frames, labels, spans, num_classes)
    }

    /// Derives frame labels from possibly overlapping spans.
    ///
    /// Spans are painted in order of start frame, so where instances overlap
    /// the later-starting one owns the frame. The stored spans are the
    /// resulting maximal runs of equal non-background labels.
    pub fn from_spans(
        video_id: impl Into<String>,
        frames: Tensor,
        spans: &[Span],
        num_classes: usize,
    ) -> Result<Self> {
        let video_id = video_id.into();
        let len = frames.rows();
        for span in spans {
            check_span(&video_id, span, len, num_classes)?;
        }
        let mut ordered: Vec<&Span> = spans.iter().collect();
        ordered.sort_by_key(|s| s.start);
        let mut labels = vec![BACKGROUND; len];
        for span in ordered {
            labels[span.start..=span.end].fill(span.class);
        }
        let spans = runs_of(&labels);
        FeatureSequence::new(video_id, frames, labels, spans, num_classes)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// One-hot target of frame `t` over `num_classes + 1` classes.
    pub fn one_hot(&self, t: usize, num_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; num_classes + 1];
        y[self.labels[t]] = 1.0;
        y
    }

    /// Frames `max(0, t − history) ..= t`, oldest first.
    pub fn window(&self, t: usize, history: usize) -> Tensor {
        self.frames.slice_rows(t.saturating_sub(history), t + 1)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let id = &self.video_id;
        let len = self.len();
        if len == 0 {
            return Err(Error::Validation(format!("video {id} has no frames")));
        }
        if self.labels.len() != len {
            return Err(Error::Validation(format!(
                "video {id}: {} labels for {len} frames",
                self.labels.len()
            )));
        }
        if let Some(t) = self.labels.iter().position(|&c| c > num_classes) {
            return Err(Error::Validation(format!(
                "video {id}: frame {t} has class {} > C = {num_classes}",
                self.labels[t]
            )));
        }
        if !self.frames.is_finite() {
            return Err(Error::Validation(format!("video {id}: non-finite feature")));
        }
        let mut covered = vec![false; len];
        for span in &self.spans {
            check_span(id, span, len, num_classes)?;
            for t in span.start..=span.end {
                if covered[t] {
                    return Err(Error::Validation(format!(
                        "video {id}: frame {t} covered by more than one span"
                    )));
                }
                covered[t] = true;
                if self.labels[t] != span.class {
                    return Err(Error::Validation(format!(
                        "video {id}: frame {t} labeled {} inside a class-{} span",
                        self.labels[t], span.class
                    )));
                }
            }
        }
        if let Some(t) = (0..len).find(|&t| !covered[t] && self.labels[t] != BACKGROUND) {
            return Err(Error::Validation(format!(
                "video {id}: frame {t} labeled {} outside every span",
                self.labels[t]
            )));
        }
        Ok(())
    }
}

fn check_span(id: &str, span: &Span, len: usize, num_classes: usize) -> Result<()> {
    if span.class == BACKGROUND || span.class > num_classes {
        return Err(Error::Validation(format!(
            "video {id}: span class {} outside 1..={num_classes}",
            span.class
        )));
    }
    if span.end < span.start || span.end >= len {
        return Err(Error::Validation(format!(
            "video {id}: span [{}, {}] invalid for {len} frames",
            span.start, span.end
        )));
    }
    Ok(())
}

fn runs_of(labels: &[usize]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let class = labels[t];
        let start = t;
        while t + 1 < labels.len() && labels[t + 1] == class {
            t += 1;
        }
        if class != BACKGROUND {
            spans.push(Span::new(class, start, t));
        }
        t += 1;
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// A collection of videos sharing `C` and `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub num_classes: usize,
    pub dim: usize,
    pub split: Split,
    pub sequences: Vec<FeatureSequence>,
}

impl FeatureDataset {
    pub fn new(
        num_classes: usize,
        dim: usize,
        split: Split,
        sequences: Vec<FeatureSequence>,
    ) -> Result<Self> {
        let ds = FeatureDataset {
            num_classes,
            dim,
            split,
            sequences,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Validation("dataset needs C ≥ 1".into()));
        }
        let mut ids = HashSet::new();
        for seq in &self.sequences {
            if seq.dim() != self.dim {
                return Err(Error::Format(format!(
                    "video {} has D = {}, dataset declares D = {}",
                    seq.video_id,
                    seq.dim(),
                    self.dim
                )));
            }
            if !ids.insert(seq.video_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate video id {}",
                    seq.video_id
                )));
            }
            seq.validate(self.num_classes)?;
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(FeatureSequence::len).sum()
    }

    /// Frame counts per class `0..=C`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes + 1];
        for seq in &self.sequences {
            for &c in &seq.labels {
                counts[c] += 1;
            }
        }
        counts
    }

    /// All frames labeled `class`, in dataset order, as an `N × D` tensor.
    pub fn frames_of_class(&self, class: usize) -> Tensor {
        let mut data = Vec::new();
        let mut n = 0;
        for seq in &self.sequences {
            for (t, &c) in seq.labels.iter().enumerate() {
                if c == class {
                    data.extend_from_slice(seq.frame(t));
                    n += 1;
                }
            }
        }
        Tensor::from_vec(n, self.dim, data).expect("rows have dataset width")
    }
}

/// Encodes an `L × D` feature matrix as a `.clrf` file body.
pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    let mut enc = Encoder::new(FEATURE_MAGIC, FEATURE_VERSION);
    enc.u32(to_u32(frames.cols(), "D")?);
    enc.u32(to_u32(frames.rows(), "L")?);
    for &v in frames.as_slice() {
        enc.f32(v as f32);
    }
    Ok(enc.finish())
}

pub fn decode_features(what: &str, bytes: &[u8]) -> Result<Tensor> {
    let mut dec = Decoder::new(what, bytes, FEATURE_MAGIC, FEATURE_VERSION)?;
    let dim = dec.u32()? as usize;
    let len = dec.u32()? as usize;
    let expected = len
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{what}: header overflows")))?;
    if dec.remaining() != expected {
        return Err(Error::Format(format!(
            "{what}: header declares D = {dim}, L = {len} ({expected} payload bytes) but {} bytes follow",
            dec.remaining()
        )));
    }
    let mut data = Vec::with_capacity(len * dim);
    for _ in 0..len * dim {
        data.push(dec.f32()? as f64);
    }
    Tensor::from_vec(len, dim, data)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    decode_features(&path.display().to_string(), &read_file(path)?)
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    write_atomic(path, &encode_features(frames)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(rename = "C")]
    num_classes: usize,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(default)]
    split: Split,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestVideo {
    id: String,
    features: PathBuf,
    spans: Vec<[usize; 3]>,
}

/// Loads and fully validates the dataset described by a JSON manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<FeatureDataset> {
    load_dataset_with(manifest_path, Exec::default())
}

pub fn load_dataset_with(manifest_path: &Path, exec: Exec) -> Result<FeatureDataset> {
    let text = read_file(manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let sequences = exec
        .map(&manifest.videos, |video| {
            let frames = read_features(&base.join(&video.features))?;
            if frames.cols() != manifest.dim {
                return Err(Error::Format(format!(
                    "video {}: feature file has D = {}, manifest declares D = {}",
                    video.id,
                    frames.cols(),
                    manifest.dim
                )));
            }
            let spans: Vec<Span> = video
                .spans
                .iter()
                .map(|&[class, start, end]| Span::new(class, start, end))
                .collect();
            FeatureSequence::from_spans(video.id.clone(), frames, &spans, manifest.num_classes)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(manifest.num_classes, manifest.dim, manifest.split, sequences)
}

/// Writes `dir/manifest.json` plus one feature file per video under
/// `dir/features/`; returns the manifest path.
///
/// Features are stored as `f32`, so only `f32`-representable values
/// round-trip exactly.
pub fn save_dataset(dataset: &FeatureDataset, dir: &Path) -> Result<PathBuf> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut videos = Vec::with_capacity(dataset.sequences.len());
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let rel = PathBuf::from("features").join(format!("{i:05}.clrf"));
        write_features(&dir.join(&rel), &seq.frames)?;
        videos.push(ManifestVideo {
            id: seq.video_id.clone(),
            features: rel,
            spans: seq.spans.iter().map(|s| [s.class, s.start, s.end]).collect(),
        });
    }
    let manifest = Manifest {
        num_classes: dataset.num_classes,
        dim: dataset.dim,
        split: dataset.split,
        videos,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    write_atomic(&path, &text)?;
    Ok(path)
}

const CLASS_MEAN_SEED: u64 = 0x00C1_A55E_u64;

/// Generating means `μ_0..μ_C` (rows) used by [`gen_synthetic`].
///
/// They depend only on `(C, D, separation)`, so datasets drawn with
/// different seeds share one class-conditional distribution and can serve as
/// train/test splits of each other. Pairwise distances are at least
/// `separation`.
pub fn class_means(num_classes: usize, dim: usize, separation: f64) -> Tensor {
    let k = num_classes + 1;
    let mut rng = Rng::with_stream(CLASS_MEAN_SEED, ((num_classes as u64) << 32) | dim as u64);
    let mut means = Tensor::zeros(k, dim);
    if separation == 0.0 {
        return means;
    }
    for c in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if k <= dim {
            // Gram-Schmidt: orthonormal directions sit exactly √2 apart.
            for p in 0..c {
                let proj = crate::numeric::dot(&v, means.row(p));
                crate::numeric::axpy(-proj, means.row(p), &mut v);
            }
        }
        let n = crate::numeric::norm(&v);
        means.row_mut(c).iter_mut().zip(&v).for_each(|(m, x)| *m = x / n);
    }
    let min_dist = min_pairwise_distance(&means);
    let mut scale = separation / min_dist;
    while min_pairwise_distance(&scaled(&means, scale)) < separation {
        scale *= 1.0 + 1e-12;
    }
    scaled(&means, scale)
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    let mut out = t.clone();
    out.scale(s);
    out
}

pub(crate) fn min_pairwise_distance(points: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.rows() {
        for j in i + 1..points.rows() {
            let d: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Parameters of [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub videos: usize,
    pub frames_per_video: usize,
    pub separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 3,
            dim: 16,
            videos: 20,
            frames_per_video: 200,
            separation: 10.0,
        }
    }
}

/// Background-dominated videos with 1–3 embedded action instances of at
/// least 5 frames each; frame features are `μ_class + N(0, I)` rounded to
/// `f32` precision.
pub fn gen_synthetic(config: &SyntheticConfig, split: Split, rng: &mut Rng) -> Result<FeatureDataset> {
    let SyntheticConfig {
        num_classes,
        dim,
        videos,
        frames_per_video: len,
        separation,
    } = *config;
    if num_classes < 1 || dim < 2 || len < 10 || videos < 1 {
        return Err(Error::Parameter(format!(
            "synthetic data needs C ≥ 1, D ≥ 2, L ≥ 10 and at least one video (got C = {num_classes}, D = {dim}, L = {len}, videos = {videos})"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Parameter(format!(
            "separation must be finite and ≥ 0, got {separation}"
        )));
    }
    let means = class_means(num_classes, dim, separation);
    let mut sequences = Vec::with_capacity(videos);
    for v in 0..videos {
        let count = rng.int_inclusive(1, (len / 7).min(3));
        let segment = len / count;
        let mut spans = Vec::with_capacity(count);
        for s in 0..count {
            let seg_start = s * segment;
            let seg_len = if s + 1 == count { len - seg_start } else { segment };
            let span_len = rng.int_inclusive(5, (seg_len / 2).max(5));
            // One background frame on each side keeps instances apart.
            let start = rng.int_inclusive(seg_start + 1, seg_start + seg_len - span_len - 1);
            let class = rng.int_inclusive(1, num_classes);
            spans.push(Span::new(class, start, start + span_len - 1));
        }
        let mut frames = Tensor::zeros(len, dim);
        let mut labels = vec![BACKGROUND; len];
        for span in &spans {
            labels[span.start..=span.end].fill(span.class);
        }
        for t in 0..len {
            let mu = means.row(labels[t]);
            for (x, m) in frames.row_mut(t).iter_mut().zip(mu) {
                *x = (m + rng.normal()) as f32 as f64;
            }
        }
        sequences.push(FeatureSequence::new(
            format!("video_{v:04}"),
            frames,
            labels,
            spans,
            num_classes,
        )?);
    }
    FeatureDataset::new(num_classes, dim, split, sequences)
}
