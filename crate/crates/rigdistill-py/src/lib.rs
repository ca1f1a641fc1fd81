//! Python bindings: the student network, the synthetic teacher, the
//! streaming engine, and the evaluation metrics. Audio crosses the boundary
//! as plain lists of f32 samples at 16 kHz.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rigdistill::audio::{extract_window, AudioTrack};
use rigdistill::checkpoint;
use rigdistill::metrics;
use rigdistill::stream::{Poll, StreamMode};
use rigdistill::student::{build_student, StudentConfig};
use rigdistill::teacher;
use rigdistill::RigFrame;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn track_from(samples: Vec<f32>) -> PyResult<AudioTrack> {
    AudioTrack::new(samples).map_err(value_err)
}

fn frames_from(frames: Vec<Vec<f32>>) -> PyResult<Vec<RigFrame>> {
    frames
        .iter()
        .map(|f| RigFrame::try_from_slice(f).map_err(value_err))
        .collect()
}

/// The convolutional speech-to-rig student network.
#[pyclass(name = "StudentNet")]
struct PyStudentNet {
    inner: Arc<rigdistill::student::StudentNet>,
}

#[pymethods]
impl PyStudentNet {
    /// Build a freshly initialized network.
    #[staticmethod]
    #[pyo3(signature = (channels, future_ms=256, seed=0))]
    fn build(channels: usize, future_ms: u32, seed: u64) -> PyResult<Self> {
        let cfg = StudentConfig::new(channels, future_ms, seed).map_err(value_err)?;
        Ok(PyStudentNet { inner: Arc::new(build_student(cfg)) })
    }

    /// Load a checkpoint file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let net = checkpoint::load_checkpoint(path).map_err(io_err)?;
        Ok(PyStudentNet { inner: Arc::new(net) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_checkpoint(&self.inner, path).map_err(io_err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.config().channels
    }

    #[getter]
    fn future_ms(&self) -> u32 {
        self.inner.config().future_ms
    }

    /// Rig prediction for one 8192-sample window.
    fn forward(&self, window: Vec<f32>) -> PyResult<Vec<f32>> {
        let frame = self.inner.forward_samples(&window).map_err(value_err)?;
        Ok(frame.as_slice().to_vec())
    }

    /// Rig prediction plus the three supervision taps (150, 150, 78).
    fn forward_with_taps(&self, window: Vec<f32>) -> PyResult<(Vec<f32>, (Vec<f32>, Vec<f32>, Vec<f32>))> {
        let (frame, taps) = self.inner.forward_samples_with_taps(&window).map_err(value_err)?;
        Ok((frame.as_slice().to_vec(), (taps.f1, taps.f2, taps.f3)))
    }

    /// Predict every 30 fps frame of a track.
    fn predict_track(&self, samples: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let track = track_from(samples)?;
        let frames = rigdistill::trainer::predict_track(&self.inner, &track).map_err(value_err)?;
        Ok(frames.into_iter().map(|f| f.as_slice().to_vec()).collect())
    }

    /// Analytic resource accounting: parameters, multiply-accumulates per
    /// frame, and peak inference memory at float32.
    fn resources(&self) -> (usize, usize, usize) {
        let r = self.inner.count_resources();
        (r.param_count, r.mac_count, r.peak_memory_bytes)
    }
}

/// Deterministic synthetic teacher for closed-loop experiments.
#[pyclass(name = "SyntheticTeacher")]
struct PySyntheticTeacher {
    inner: teacher::SyntheticTeacher,
}

#[pymethods]
impl PySyntheticTeacher {
    #[new]
    fn new(seed: u64) -> Self {
        PySyntheticTeacher { inner: teacher::SyntheticTeacher::new(seed) }
    }

    /// Pseudo-label sequence (one 78-vector per 30 fps frame).
    fn label_sequence(&self, samples: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let track = track_from(samples)?;
        Ok(self
            .inner
            .label_sequence(&track)
            .into_iter()
            .map(|f| f.as_slice().to_vec())
            .collect())
    }
}

/// Pull-based streaming engine: push samples, poll frames.
#[pyclass(name = "StreamEngine")]
struct PyStreamEngine {
    inner: rigdistill::stream::StreamEngine,
}

#[pymethods]
impl PyStreamEngine {
    #[new]
    #[pyo3(signature = (net, mode="plain", alphas=None))]
    fn new(net: &PyStudentNet, mode: &str, alphas: Option<(f32, f32, f32)>) -> PyResult<Self> {
        let mode = match mode {
            "plain" => StreamMode::Plain,
            "ensemble" => {
                let a = alphas.map_or([1.0 / 3.0; 3], |(x, y, z)| [x, y, z]);
                StreamMode::Ensemble { alphas: a }
            }
            other => return Err(value_err(format!("unknown mode {other:?}"))),
        };
        let inner = rigdistill::stream::StreamEngine::new(Arc::clone(&net.inner), mode).map_err(value_err)?;
        Ok(PyStreamEngine { inner })
    }

    /// Returns how many samples were accepted (backpressure by count).
    fn push_audio(&mut self, samples: Vec<f32>) -> PyResult<usize> {
        self.inner.push_audio(&samples).map_err(value_err)
    }

    /// The next 30 fps frame, or None if more audio is needed.
    fn next_frame(&mut self) -> PyResult<Option<Vec<f32>>> {
        match self.inner.next_frame().map_err(value_err)? {
            Poll::Ready(f) => Ok(Some(f.as_slice().to_vec())),
            Poll::NotReady => Ok(None),
        }
    }

    fn frames_emitted(&self) -> usize {
        self.inner.frames_emitted()
    }
}

/// Decode a 16 kHz mono wav file to samples in [-1, 1].
#[pyfunction]
fn load_wav(path: &str) -> PyResult<Vec<f32>> {
    Ok(rigdistill::audio::load_wav(path).map_err(io_err)?.samples().to_vec())
}

/// The 8192-sample window of frame `frame_index` with `future_ms` of future
/// context, zero-filled outside the track.
#[pyfunction]
fn window_of_frame(samples: Vec<f32>, frame_index: usize, future_ms: u32) -> PyResult<Vec<f32>> {
    let track = track_from(samples)?;
    Ok(extract_window(&track, frame_index, future_ms)
        .map_err(value_err)?
        .samples()
        .to_vec())
}

/// Mean squared error over all entries of two rig sequences.
#[pyfunction]
fn rig_mse(pred: Vec<Vec<f32>>, reference: Vec<Vec<f32>>) -> PyResult<f64> {
    metrics::rig_mse(&frames_from(pred)?, &frames_from(reference)?).map_err(value_err)
}

/// Mean squared lower-lip acceleration; `geometry_json` is the same format
/// the CLI consumes.
#[pyfunction]
fn jitter(frames: Vec<Vec<f32>>, geometry_json: &str) -> PyResult<f64> {
    let geom = metrics::LipGeometry::from_json(geometry_json).map_err(value_err)?;
    metrics::jitter(&frames_from(frames)?, &geom).map_err(value_err)
}

/// Lip-closure accuracy during bilabial consonants, in percent.
#[pyfunction]
#[pyo3(signature = (frames, intervals_tsv, geometry_json, threshold=0.15, tolerance_frames=2))]
fn pbm_accuracy(
    frames: Vec<Vec<f32>>,
    intervals_tsv: &str,
    geometry_json: &str,
    threshold: f64,
    tolerance_frames: usize,
) -> PyResult<f64> {
    let geom = metrics::LipGeometry::from_json(geometry_json).map_err(value_err)?;
    let intervals = metrics::PhonemeIntervals::parse_tsv(intervals_tsv).map_err(value_err)?;
    metrics::pbm_accuracy(&frames_from(frames)?, &intervals, &geom, threshold, tolerance_frames)
        .map_err(value_err)
}

#[pymodule]
fn rigdistill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    rigdistill::init_threads_from_env();
    m.add_class::<PyStudentNet>()?;
    m.add_class::<PySyntheticTeacher>()?;
    m.add_class::<PyStreamEngine>()?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(window_of_frame, m)?)?;
    m.add_function(wrap_pyfunction!(rig_mse, m)?)?;
    m.add_function(wrap_pyfunction!(jitter, m)?)?;
    m.add_function(wrap_pyfunction!(pbm_accuracy, m)?)?;
    m.add("RIG_DIM", rigdistill::RIG_DIM)?;
    m.add("WINDOW_LEN", rigdistill::WINDOW_LEN)?;
    m.add("SAMPLE_RATE", rigdistill::SAMPLE_RATE)?;
    m.add("FPS", rigdistill::FPS)?;
    Ok(())
}
