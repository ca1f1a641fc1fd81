//! Streaming inference: ring-buffered audio intake, a 30 fps frame clock,
//! optional 60 fps ensemble smoothing, and latency accounting.
//!
//! The engine is pull-based: feed samples with `push_audio`, poll with
//! `next_frame`. One producer and one consumer may run concurrently; the
//! ring buffer behind its mutex is the only shared state.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::audio::window_start;
use crate::student::{StudentError, StudentNet};
use crate::{RigFrame, WINDOW_LEN};

/// Nominal 16.7 ms offset in samples; the actual sub-prediction instants
/// sit on the exact 60 fps grid (round(j * 800 / 3)), so successive offsets
/// alternate between 266 and 267 samples and the three taps of frame k are
/// grid points 2k-1, 2k, 2k+1.
pub const ENSEMBLE_OFFSET_SAMPLES: i64 = 267;

/// Sample index of 60 fps grid point `j` (time j/60), rounded to nearest.
/// Grid point 2k coincides exactly with 30 fps frame k.
pub fn sample_of_60fps(j: i64) -> i64 {
    let a = j * 800;
    if a >= 0 {
        (a + 1) / 3
    } else {
        -((-a + 1) / 3)
    }
}
/// The latency cost of ensemble smoothing, in milliseconds as reported.
pub const SMOOTHING_MS: f64 = 16.7;
/// Ring capacity: two windows.
pub const RING_CAPACITY: usize = 2 * WINDOW_LEN;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("ensemble weights {weights:?} must be in [0,1] and sum to 1")]
    BadEnsembleWeights { weights: [f32; 3] },
    #[error("audio gap: samples [{from}, {to}) were evicted before frame {frame} consumed them")]
    AudioGap { from: u64, to: u64, frame: usize },
    #[error("non-finite sample pushed at offset {offset}")]
    NonFiniteSample { offset: usize },
    #[error("latency report needs at least {need} processed frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error(transparent)]
    Student(#[from] StudentError),
}

/// Output mode: plain 30 fps inference, or 60 fps predictions blended into
/// 30 fps output by a convex three-tap average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamMode {
    Plain,
    Ensemble { alphas: [f32; 3] },
}

impl StreamMode {
    pub fn ensemble_thirds() -> Self {
        StreamMode::Ensemble { alphas: [1.0 / 3.0; 3] }
    }
}

/// Convex combination of three predictions 16.7 ms apart.
pub fn ensemble_combine(
    prev: &RigFrame,
    curr: &RigFrame,
    next: &RigFrame,
    alphas: [f32; 3],
) -> Result<RigFrame, StreamError> {
    validate_alphas(alphas)?;
    let mut out = [0.0f32; crate::RIG_DIM];
    for i in 0..crate::RIG_DIM {
        out[i] = alphas[0] * prev.as_slice()[i]
            + alphas[1] * curr.as_slice()[i]
            + alphas[2] * next.as_slice()[i];
        // Convexity keeps each coordinate inside the hull of its inputs;
        // clamp only guards float dust at the [-1,1] boundary.
        out[i] = out[i].clamp(-1.0, 1.0);
    }
    Ok(RigFrame::new(out))
}

fn validate_alphas(alphas: [f32; 3]) -> Result<(), StreamError> {
    let sum: f32 = alphas.iter().sum();
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) || (sum - 1.0).abs() > 1e-6 {
        return Err(StreamError::BadEnsembleWeights { weights: alphas });
    }
    Ok(())
}

/// Wall-clock latency accounting over a streaming run.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub future_context_ms: f64,
    pub smoothing_ms: f64,
    pub inference_p50_ms: f64,
    pub inference_p95_ms: f64,
    pub total_ms: f64,
}

impl LatencyReport {
    pub fn from_timings(
        future_context_ms: f64,
        smoothing_ms: f64,
        timings: &[Duration],
    ) -> Self {
        let mut ms: Vec<f64> = timings.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| -> f64 {
            if ms.is_empty() {
                return 0.0;
            }
            let idx = ((ms.len() as f64 - 1.0) * q).round() as usize;
            ms[idx]
        };
        let p50 = pick(0.50);
        let p95 = pick(0.95);
        LatencyReport {
            future_context_ms,
            smoothing_ms,
            inference_p50_ms: p50,
            inference_p95_ms: p95,
            total_ms: future_context_ms + smoothing_ms + p95,
        }
    }

    pub fn csv_header() -> &'static str {
        "future_context_ms,smoothing_ms,inference_p50_ms,inference_p95_ms,total_ms"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.future_context_ms,
            self.smoothing_ms,
            self.inference_p50_ms,
            self.inference_p95_ms,
            self.total_ms
        )
    }
}

struct RingInner {
    buf: Vec<f32>,
    /// Absolute index of the oldest retained sample.
    start: u64,
    len: usize,
    head: usize, // physical index of `start`
}

struct SharedRing {
    inner: Mutex<RingInner>,
    /// Total samples ever accepted; the next push lands at this index.
    pushed: AtomicU64,
    /// Absolute index below which the consumer no longer needs samples.
    low_water: AtomicU64,
}

impl SharedRing {
    fn new() -> Self {
        SharedRing {
            inner: Mutex::new(RingInner {
                buf: vec![0.0; RING_CAPACITY],
                start: 0,
                len: 0,
                head: 0,
            }),
            pushed: AtomicU64::new(0),
            low_water: AtomicU64::new(0),
        }
    }

    /// Append samples, evicting only below the consumer's low-water mark.
    /// Returns how many samples were accepted (backpressure by count).
    fn push(&self, samples: &[f32]) -> Result<usize, StreamError> {
        if let Some(offset) = samples.iter().position(|v| !v.is_finite()) {
            return Err(StreamError::NonFiniteSample { offset });
        }
        let mut inner = self.inner.lock().expect("ring poisoned");
        // Evict samples the consumer has moved past.
        let low = self.low_water.load(Ordering::Acquire);
        if low > inner.start {
            let drop = ((low - inner.start) as usize).min(inner.len);
            inner.start += drop as u64;
            inner.head = (inner.head + drop) % RING_CAPACITY;
            inner.len -= drop;
        }
        let free = RING_CAPACITY - inner.len;
        let take = samples.len().min(free);
        for &s in &samples[..take] {
            let idx = (inner.head + inner.len) % RING_CAPACITY;
            inner.buf[idx] = s;
            inner.len += 1;
        }
        if take > 0 {
            self.pushed.fetch_add(take as u64, Ordering::AcqRel);
        }
        Ok(take)
    }

    /// Copy absolute range `[from, from + out.len())` into `out`; indices
    /// before zero read as silence. Fails if the range was evicted.
    fn read(&self, from: i64, out: &mut [f32], frame: usize) -> Result<(), StreamError> {
        let inner = self.inner.lock().expect("ring poisoned");
        for (i, slot) in out.iter_mut().enumerate() {
            let abs = from + i as i64;
            if abs < 0 {
                *slot = 0.0;
                continue;
            }
            let abs = abs as u64;
            if abs < inner.start {
                return Err(StreamError::AudioGap { from: abs, to: inner.start, frame });
            }
            debug_assert!(abs < inner.start + inner.len as u64);
            let phys = (inner.head + (abs - inner.start) as usize) % RING_CAPACITY;
            *slot = inner.buf[phys];
        }
        Ok(())
    }

    fn available_through(&self) -> u64 {
        self.pushed.load(Ordering::Acquire)
    }
}

/// Cloneable producer handle; lives on the feeding thread.
#[derive(Clone)]
pub struct AudioFeed {
    ring: Arc<SharedRing>,
}

impl AudioFeed {
    pub fn push_audio(&self, samples: &[f32]) -> Result<usize, StreamError> {
        self.ring.push(samples)
    }
}

/// Poll result of the consumer side.
#[derive(Debug, Clone, PartialEq)]
pub enum Poll {
    Ready(RigFrame),
    /// Not enough audio buffered for the next frame yet.
    NotReady,
}

pub struct StreamEngine {
    ring: Arc<SharedRing>,
    net: Arc<StudentNet>,
    mode: StreamMode,
    future_ms: u32,
    next_frame_index: usize,
    /// Cached 60 fps prediction at t_k + 16.7 ms, reused as the next frame's
    /// t - 16.7 ms tap.
    cached_next: Option<RigFrame>,
    scratch: Vec<f32>,
    timings: Vec<Duration>,
    forward_count: u64,
}

impl StreamEngine {
    pub fn new(net: Arc<StudentNet>, mode: StreamMode) -> Result<Self, StreamError> {
        if let StreamMode::Ensemble { alphas } = mode {
            validate_alphas(alphas)?;
        }
        let future_ms = net.config().future_ms;
        Ok(StreamEngine {
            ring: Arc::new(SharedRing::new()),
            net,
            mode,
            future_ms,
            next_frame_index: 0,
            cached_next: None,
            scratch: vec![0.0; WINDOW_LEN],
            timings: Vec::new(),
            forward_count: 0,
        })
    }

    /// Producer handle for a second thread.
    pub fn audio_feed(&self) -> AudioFeed {
        AudioFeed { ring: Arc::clone(&self.ring) }
    }

    /// Feed samples from the consumer thread.
    pub fn push_audio(&self, samples: &[f32]) -> Result<usize, StreamError> {
        self.ring.push(samples)
    }

    pub fn frames_emitted(&self) -> usize {
        self.next_frame_index
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_count
    }

    pub fn timings(&self) -> &[Duration] {
        &self.timings
    }

    /// Window start of 60 fps sub-prediction `j`.
    fn sub_window_start(&self, j: i64) -> i64 {
        let past = (crate::WINDOW_MS - self.future_ms) as i64 * (crate::SAMPLE_RATE as i64 / 1000);
        sample_of_60fps(j) - past
    }

    /// Absolute sample index (exclusive) required before frame `k` can be
    /// emitted in the current mode.
    fn required_through(&self, k: usize) -> i64 {
        match self.mode {
            StreamMode::Plain => window_start(k, self.future_ms) + WINDOW_LEN as i64,
            StreamMode::Ensemble { .. } => {
                self.sub_window_start(2 * k as i64 + 1) + WINDOW_LEN as i64
            }
        }
    }

    fn infer_at(&mut self, start: i64, frame: usize) -> Result<RigFrame, StreamError> {
        let mut scratch = std::mem::take(&mut self.scratch);
        self.ring.read(start, &mut scratch, frame)?;
        let t0 = Instant::now();
        let out = self.net.forward_samples(&scratch);
        self.timings.push(t0.elapsed());
        self.forward_count += 1;
        self.scratch = scratch;
        Ok(out?)
    }

    /// Emit the next 30 fps frame if enough audio is buffered.
    pub fn next_frame(&mut self) -> Result<Poll, StreamError> {
        let k = self.next_frame_index;
        let needed = self.required_through(k);
        if needed > 0 && self.ring.available_through() < needed as u64 {
            return Ok(Poll::NotReady);
        }
        let frame = match self.mode {
            StreamMode::Plain => self.infer_at(window_start(k, self.future_ms), k)?,
            StreamMode::Ensemble { alphas } => {
                let j = 2 * k as i64;
                let prev = match self.cached_next.take() {
                    // Grid point 2k-1 is the previous frame's 2(k-1)+1.
                    Some(p) => p,
                    // First frame: the t - 16.7 ms tap has no cached value.
                    None => self.infer_at(self.sub_window_start(j - 1), k)?,
                };
                let curr = self.infer_at(self.sub_window_start(j), k)?;
                let next = self.infer_at(self.sub_window_start(j + 1), k)?;
                let combined = ensemble_combine(&prev, &curr, &next, alphas)?;
                self.cached_next = Some(next);
                combined
            }
        };
        self.next_frame_index += 1;
        // Samples before the next frame's earliest new window can be
        // evicted (its 2k-1 tap is the cached prediction, not audio).
        let k1 = self.next_frame_index;
        let next_low = match self.mode {
            StreamMode::Plain => window_start(k1, self.future_ms),
            StreamMode::Ensemble { .. } => self.sub_window_start(2 * k1 as i64),
        };
        if next_low > 0 {
            self.ring.low_water.store(next_low as u64, Ordering::Release);
        }
        Ok(Poll::Ready(frame))
    }

    /// Drain every frame that is currently ready.
    pub fn drain_ready(&mut self) -> Result<Vec<RigFrame>, StreamError> {
        let mut out = Vec::new();
        while let Poll::Ready(f) = self.next_frame()? {
            out.push(f);
        }
        Ok(out)
    }

    /// Latency ledger over the frames processed so far.
    pub fn latency_report(&self) -> Result<LatencyReport, StreamError> {
        const MIN_FRAMES: usize = 100;
        if self.next_frame_index < MIN_FRAMES {
            return Err(StreamError::TooFewFrames { need: MIN_FRAMES, got: self.next_frame_index });
        }
        let smoothing = match self.mode {
            StreamMode::Plain => 0.0,
            StreamMode::Ensemble { .. } => SMOOTHING_MS,
        };
        Ok(LatencyReport::from_timings(
            self.future_ms as f64,
            smoothing,
            &self.timings,
        ))
    }
}
