//! Quality metrics: rig MSE, lip-closure accuracy during bilabial
//! consonants, and jitter, all computed through a configurable affine
//! rig-to-lip geometry loaded from file.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{extract_window, frame_count, AudioTrack};
use crate::stream::LatencyReport;
use crate::student::{ResourceReport, StudentNet};
use crate::trainer::TrainError;
use crate::{RigFrame, FPS, RIG_DIM};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("geometry json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("geometry {what} must be {expected} values, got {actual}")]
    BadGeometry {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("interval line {line}: {detail}")]
    BadInterval { line: usize, detail: String },
    #[error("intervals overlap at {a_end} > {b_start}")]
    OverlappingIntervals { a_end: f64, b_start: f64 },
    #[error("sequence length mismatch: {a} vs {b} frames")]
    LengthMismatch { a: usize, b: usize },
    #[error("no frames fall inside a bilabial interval")]
    NoPbmFrames,
    #[error("jitter needs at least 3 frames, got {got}")]
    TooShort { got: usize },
    #[error("evaluation corpus is missing {what} for {item}")]
    MissingArtifact { what: &'static str, item: String },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Affine map from rig space to one 3-D vertex position.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexMap {
    /// Row-major 3 x 78.
    pub matrix: Vec<f32>,
    pub offset: [f32; 3],
}

impl VertexMap {
    pub fn position(&self, rig: &RigFrame) -> [f64; 3] {
        let mut out = [0.0f64; 3];
        for (axis, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[axis * RIG_DIM..(axis + 1) * RIG_DIM];
            let mut acc = self.offset[axis] as f64;
            for (w, v) in row.iter().zip(rig.as_slice()) {
                acc += (*w as f64) * (*v as f64);
            }
            *o = acc;
        }
        out
    }
}

/// Upper-lip vertex and lower-lip midpoint vertex maps.
#[derive(Debug, Clone, PartialEq)]
pub struct LipGeometry {
    pub upper: VertexMap,
    pub lower: VertexMap,
}

#[derive(Serialize, Deserialize)]
struct VertexMapFile {
    matrix: Vec<Vec<f32>>,
    offset: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct GeometryFile {
    upper: VertexMapFile,
    lower: VertexMapFile,
}

fn map_from_file(f: VertexMapFile, what: &'static str) -> Result<VertexMap, MetricsError> {
    if f.matrix.len() != 3 {
        return Err(MetricsError::BadGeometry { what, expected: 3, actual: f.matrix.len() });
    }
    let mut matrix = Vec::with_capacity(3 * RIG_DIM);
    for row in &f.matrix {
        if row.len() != RIG_DIM {
            return Err(MetricsError::BadGeometry { what, expected: RIG_DIM, actual: row.len() });
        }
        matrix.extend_from_slice(row);
    }
    if f.offset.len() != 3 {
        return Err(MetricsError::BadGeometry { what, expected: 3, actual: f.offset.len() });
    }
    if matrix.iter().chain(f.offset.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::BadGeometry { what, expected: 0, actual: 0 });
    }
    Ok(VertexMap { matrix, offset: [f.offset[0], f.offset[1], f.offset[2]] })
}

impl LipGeometry {
    /// Geometry file: JSON with two 3 x 78 matrices and two 3-vectors.
    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let file: GeometryFile = serde_json::from_str(text)?;
        Ok(LipGeometry {
            upper: map_from_file(file.upper, "upper map")?,
            lower: map_from_file(file.lower, "lower map")?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let to_file = |m: &VertexMap| VertexMapFile {
            matrix: m.matrix.chunks(RIG_DIM).map(|r| r.to_vec()).collect(),
            offset: m.offset.to_vec(),
        };
        serde_json::to_string_pretty(&GeometryFile {
            upper: to_file(&self.upper),
            lower: to_file(&self.lower),
        })
        .expect("geometry serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Distance on the y axis between the upper and lower lip vertices.
pub fn lip_distance(rig: &RigFrame, geom: &LipGeometry) -> f64 {
    geom.upper.position(rig)[1] - geom.lower.position(rig)[1]
}

/// Mean squared error over all entries of two rig sequences.
pub fn rig_mse(pred: &[RigFrame], reference: &[RigFrame]) -> Result<f64, MetricsError> {
    if pred.len() != reference.len() {
        return Err(MetricsError::LengthMismatch { a: pred.len(), b: reference.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::LengthMismatch { a: 0, b: 0 });
    }
    let mut acc = 0.0f64;
    for (p, r) in pred.iter().zip(reference) {
        for (a, b) in p.as_slice().iter().zip(r.as_slice()) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
    }
    Ok(acc / (pred.len() * RIG_DIM) as f64)
}

/// Labeled phoneme span in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
}

/// Sorted, non-overlapping phoneme intervals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhonemeIntervals {
    intervals: Vec<PhonemeInterval>,
}

impl PhonemeIntervals {
    pub fn new(mut intervals: Vec<PhonemeInterval>) -> Result<Self, MetricsError> {
        intervals.sort_by(|a, b| a.start_s.partial_cmp(&b.start_s).unwrap());
        for pair in intervals.windows(2) {
            if pair[1].start_s < pair[0].end_s {
                return Err(MetricsError::OverlappingIntervals {
                    a_end: pair[0].end_s,
                    b_start: pair[1].start_s,
                });
            }
        }
        Ok(PhonemeIntervals { intervals })
    }

    /// Parse the TSV interface: `start_seconds TAB end_seconds TAB label`
    /// per line; blank lines and `#` comments are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self, MetricsError> {
        let mut intervals = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let mut parts = l.split('\t');
            let mut field = |what: &str| {
                parts
                    .next()
                    .ok_or_else(|| MetricsError::BadInterval { line, detail: format!("missing {what}") })
            };
            let start_s: f64 = field("start")?
                .trim()
                .parse()
                .map_err(|e| MetricsError::BadInterval { line, detail: format!("bad start: {e}") })?;
            let end_s: f64 = field("end")?
                .trim()
                .parse()
                .map_err(|e| MetricsError::BadInterval { line, detail: format!("bad end: {e}") })?;
            let label = field("label")?.trim().to_string();
            if !(end_s > start_s) {
                return Err(MetricsError::BadInterval {
                    line,
                    detail: format!("start {start_s} must precede end {end_s}"),
                });
            }
            intervals.push(PhonemeInterval { start_s, end_s, label });
        }
        Self::new(intervals)
    }

    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PhonemeInterval> {
        self.intervals.iter()
    }

    fn is_bilabial(label: &str) -> bool {
        matches!(label.trim_matches('/'), "p" | "b" | "m" | "P" | "B" | "M")
    }

    /// Is the frame's center time inside a bilabial interval?
    pub fn frame_is_pbm(&self, frame_index: usize) -> bool {
        let t = frame_index as f64 / FPS as f64;
        self.intervals
            .iter()
            .any(|iv| Self::is_bilabial(&iv.label) && t >= iv.start_s && t < iv.end_s)
    }
}

pub const DEFAULT_PBM_THRESHOLD: f64 = 0.15;
pub const DEFAULT_PBM_TOLERANCE_FRAMES: usize = 2;

/// Lip-closure accuracy over bilabial frames, in percent. A frame counts as
/// a hit when the minimal lip distance within `tolerance_frames` of it falls
/// below `threshold`.
pub fn pbm_accuracy(
    frames: &[RigFrame],
    intervals: &PhonemeIntervals,
    geom: &LipGeometry,
    threshold: f64,
    tolerance_frames: usize,
) -> Result<f64, MetricsError> {
    let distances: Vec<f64> = frames.iter().map(|f| lip_distance(f, geom)).collect();
    let mut pbm_frames = 0usize;
    let mut hits = 0usize;
    for k in 0..frames.len() {
        if !intervals.frame_is_pbm(k) {
            continue;
        }
        pbm_frames += 1;
        let lo = k.saturating_sub(tolerance_frames);
        let hi = (k + tolerance_frames).min(frames.len() - 1);
        let min_d = distances[lo..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
        if min_d < threshold {
            hits += 1;
        }
    }
    if pbm_frames == 0 {
        return Err(MetricsError::NoPbmFrames);
    }
    Ok(100.0 * hits as f64 / pbm_frames as f64)
}

/// Mean squared acceleration of the lower-lip vertex, over t = 2..N-1.
pub fn jitter(frames: &[RigFrame], geom: &LipGeometry) -> Result<f64, MetricsError> {
    if frames.len() < 3 {
        return Err(MetricsError::TooShort { got: frames.len() });
    }
    let positions: Vec<[f64; 3]> = frames.iter().map(|f| geom.lower.position(f)).collect();
    Ok(jitter_of_positions(&positions))
}

pub(crate) fn jitter_of_positions(positions: &[[f64; 3]]) -> f64 {
    let mut acc = 0.0f64;
    for t in 2..positions.len() {
        let mut norm2 = 0.0f64;
        for axis in 0..3 {
            let a = positions[t][axis] - 2.0 * positions[t - 1][axis] + positions[t - 2][axis];
            norm2 += a * a;
        }
        acc += norm2;
    }
    acc / (positions.len() - 2) as f64
}

/// One-sided sign-test p-value: probability of at least `wins` successes in
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0f64;
    for k in wins..=n {
        p += binomial(n, k);
    }
    p / 2f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// One corpus entry for evaluation.
pub struct EvalItem {
    pub name: String,
    pub track: AudioTrack,
    pub labels: Vec<RigFrame>,
    pub intervals: PhonemeIntervals,
}

/// Aggregated evaluation over a corpus.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub channels: usize,
    pub future_ms: u32,
    pub mse: f64,
    pub pbm_accuracy: f64,
    pub jitter: f64,
    pub resources: ResourceReport,
    pub latency: LatencyReport,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "channels,future_ms,mse,pbm_accuracy,jitter,param_count,mac_count,peak_memory_bytes,\
         future_context_ms,smoothing_ms,inference_p50_ms,inference_p95_ms,latency_total_ms"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.channels,
            self.future_ms,
            self.mse,
            self.pbm_accuracy,
            self.jitter,
            self.resources.param_count,
            self.resources.mac_count,
            self.resources.peak_memory_bytes,
            self.latency.future_context_ms,
            self.latency.smoothing_ms,
            self.latency.inference_p50_ms,
            self.latency.inference_p95_ms,
            self.latency.total_ms
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::csv_header(), self.csv_row())
    }
}

/// Predict every item with the model, then aggregate MSE, lip-closure
/// accuracy, jitter, analytic resources, and measured per-frame latency.
pub fn evaluate(
    net: &StudentNet,
    corpus: &[EvalItem],
    geom: &LipGeometry,
    threshold: f64,
    tolerance_frames: usize,
) -> Result<EvalReport, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::MissingArtifact { what: "corpus items", item: "evaluation".into() });
    }
    let d = net.config().future_ms;
    let mut timings = Vec::new();
    let mut sq_sum = 0.0f64;
    let mut entry_count = 0usize;
    let mut pbm_hits = 0usize;
    let mut pbm_total = 0usize;
    let mut jitter_acc = 0.0f64;
    let mut jitter_terms = 0usize;

    for item in corpus {
        let n = frame_count(&item.track);
        if item.labels.len() != n {
            return Err(MetricsError::LengthMismatch { a: item.labels.len(), b: n });
        }
        let mut preds = Vec::with_capacity(n);
        for k in 0..n {
            let w = extract_window(&item.track, k, d).map_err(TrainError::from)?;
            let t0 = Instant::now();
            let f = net.forward(&w).map_err(TrainError::from)?;
            timings.push(t0.elapsed());
            preds.push(f);
        }

        for (p, r) in preds.iter().zip(&item.labels) {
            for (a, b) in p.as_slice().iter().zip(r.as_slice()) {
                let dd = (*a - *b) as f64;
                sq_sum += dd * dd;
            }
        }
        entry_count += n * RIG_DIM;

        let distances: Vec<f64> = preds.iter().map(|f| lip_distance(f, geom)).collect();
        for k in 0..n {
            if !item.intervals.frame_is_pbm(k) {
                continue;
            }
            pbm_total += 1;
            let lo = k.saturating_sub(tolerance_frames);
            let hi = (k + tolerance_frames).min(n - 1);
            if distances[lo..=hi].iter().cloned().fold(f64::INFINITY, f64::min) < threshold {
                pbm_hits += 1;
            }
        }

        if n >= 3 {
            let positions: Vec<[f64; 3]> = preds.iter().map(|f| geom.lower.position(f)).collect();
            jitter_acc += jitter_of_positions(&positions) * (n - 2) as f64;
            jitter_terms += n - 2;
        }
    }

    if pbm_total == 0 {
        return Err(MetricsError::NoPbmFrames);
    }
    if jitter_terms == 0 {
        return Err(MetricsError::TooShort { got: 0 });
    }

    Ok(EvalReport {
        channels: net.config().channels,
        future_ms: d,
        mse: sq_sum / entry_count as f64,
        pbm_accuracy: 100.0 * pbm_hits as f64 / pbm_total as f64,
        jitter: jitter_acc / jitter_terms as f64,
        resources: net.count_resources(),
        latency: LatencyReport::from_timings(d as f64, 0.0, &timings),
    })
}
