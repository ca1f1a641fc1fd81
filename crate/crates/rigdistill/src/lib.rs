//! Knowledge-distillation pipeline and real-time streaming inference engine
//! for small convolutional speech-to-rig facial animation models.

pub mod audio;
pub mod checkpoint;
pub mod autodiff;
pub mod math;
pub mod metrics;
pub mod stream;
pub mod student;
pub mod teacher;
pub mod trainer;
pub mod tensor;

pub use tensor::{Real, Tensor, TensorError};

/// Rig parameter dimension; every predicted frame is a vector of this size.
pub const RIG_DIM: usize = 78;

/// A rig-parameter vector in [-1, 1]; one animation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RigFrame {
    values: [f32; RIG_DIM],
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RigFrameError {
    #[error("rig frame has {actual} values, expected {RIG_DIM}")]
    WrongLength { actual: usize },
    #[error("rig value {value} at index {index} outside [-1, 1]")]
    OutOfRange { index: usize, value: f32 },
}

impl RigFrame {
    /// Internal constructor; values come from tanh outputs or validated IO.
    pub(crate) fn new(values: [f32; RIG_DIM]) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        RigFrame { values }
    }

    pub fn try_from_slice(v: &[f32]) -> Result<Self, RigFrameError> {
        if v.len() != RIG_DIM {
            return Err(RigFrameError::WrongLength { actual: v.len() });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite() || x.abs() > 1.0) {
            return Err(RigFrameError::OutOfRange { index, value: v[index] });
        }
        let mut values = [0.0f32; RIG_DIM];
        values.copy_from_slice(v);
        Ok(RigFrame { values })
    }

    pub fn zero() -> Self {
        RigFrame { values: [0.0; RIG_DIM] }
    }

    pub fn values(&self) -> &[f32; RIG_DIM] {
        &self.values
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

/// Samples per input window (512 ms at 16 kHz).
pub const WINDOW_LEN: usize = 8192;

/// Audio sample rate the whole pipeline assumes.
pub const SAMPLE_RATE: u32 = 16_000;

/// Animation frame rate of the label and output timeline.
pub const FPS: u32 = 30;

/// Total window span in milliseconds (past + future).
pub const WINDOW_MS: u32 = 512;

/// Cap the global worker pool from the `RIGDISTILL_THREADS` environment
/// variable. Call once at process start; later calls are no-ops.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("RIGDISTILL_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
