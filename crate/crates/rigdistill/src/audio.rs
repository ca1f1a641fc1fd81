//! Audio ingestion, the 30 fps frame clock, and sliding-window extraction
//! with a declared past/future split.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::{SAMPLE_RATE, WINDOW_LEN, WINDOW_MS};

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed wav header: {detail}")]
    MalformedHeader { detail: &'static str },
    #[error("sample rate {found} Hz, this pipeline requires {SAMPLE_RATE} Hz (no resampling)")]
    WrongSampleRate { found: u32 },
    #[error("{channels} channels, only mono input is accepted")]
    MultiChannel { channels: u16 },
    #[error("unsupported wav encoding: format tag {format}, {bits} bits per sample")]
    UnsupportedFormat { format: u16, bits: u16 },
    #[error("non-finite sample at index {index}")]
    NonFiniteSample { index: usize },
    #[error("sample {index} is {value}, outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f32 },
    #[error("future context {got} ms exceeds the {WINDOW_MS} ms window")]
    FutureContextTooLong { got: u32 },
}

/// Mono 16 kHz audio in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    samples: Vec<f32>,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>) -> Result<Self, AudioError> {
        for (index, &v) in samples.iter().enumerate() {
            if !v.is_finite() {
                return Err(AudioError::NonFiniteSample { index });
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(AudioError::SampleOutOfRange { index, value: v });
            }
        }
        Ok(AudioTrack { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// A fixed 8192-sample slice with its declared past/future split.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    samples: Vec<f32>,
    pub frame_index: usize,
    pub past_ms: u32,
    pub future_ms: u32,
}

impl AudioWindow {
    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
}

/// Number of animation frames the 30 fps clock places on a track:
/// `floor(duration * 30) + 1`, so even an empty track yields the frame at
/// t = 0 and downstream code never sees an empty sequence.
pub fn frame_count(track: &AudioTrack) -> usize {
    frame_count_for_samples(track.len())
}

pub fn frame_count_for_samples(samples: usize) -> usize {
    // duration * FPS = samples * 30 / 16000 = samples * 3 / 1600, kept in
    // integers so long tracks cannot drift.
    samples * 3 / 1600 + 1
}

/// Sample index of frame `k` (time k/30 s), rounded to the nearest sample.
/// k * 16000 / 30 = k * 1600 / 3; the +1 implements round-to-nearest for
/// the remainders 0, 1, 2 (no exact halves exist).
pub fn sample_of_frame(frame_index: usize) -> i64 {
    ((frame_index as i64) * 1600 + 1) / 3
}

/// First sample index (possibly negative) of frame `k`'s window for a given
/// future context.
pub fn window_start(frame_index: usize, future_ms: u32) -> i64 {
    let past_ms = WINDOW_MS - future_ms;
    sample_of_frame(frame_index) - (past_ms as i64) * (SAMPLE_RATE as i64 / 1000)
}

/// Extract the window of frame `frame_index` with `future_ms` of future
/// context. Regions outside the track are zero-filled.
pub fn extract_window(
    track: &AudioTrack,
    frame_index: usize,
    future_ms: u32,
) -> Result<AudioWindow, AudioError> {
    if future_ms > WINDOW_MS {
        return Err(AudioError::FutureContextTooLong { got: future_ms });
    }
    let start = window_start(frame_index, future_ms);
    let mut samples = vec![0.0f32; WINDOW_LEN];
    copy_span(track.samples(), start, &mut samples);
    Ok(AudioWindow {
        samples,
        frame_index,
        past_ms: WINDOW_MS - future_ms,
        future_ms,
    })
}

/// Copy `track[start .. start + out.len()]` into `out`, zero-filling the
/// out-of-range parts.
pub(crate) fn copy_span(track: &[f32], start: i64, out: &mut [f32]) {
    let len = out.len() as i64;
    let src_begin = start.max(0);
    let src_end = (start + len).min(track.len() as i64);
    if src_begin < src_end {
        let dst_off = (src_begin - start) as usize;
        let n = (src_end - src_begin) as usize;
        out[dst_off..dst_off + n].copy_from_slice(&track[src_begin as usize..src_end as usize]);
    }
}

const RIFF_HEADER_LEN: usize = 12;

/// Decode a RIFF/WAVE file. 16-bit PCM and 32-bit IEEE float are accepted;
/// anything that is not mono 16 kHz is rejected rather than resampled.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioTrack, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioTrack, AudioError> {
    if bytes.len() < RIFF_HEADER_LEN {
        return Err(AudioError::MalformedHeader { detail: "shorter than the RIFF header" });
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::MalformedHeader { detail: "missing RIFF magic" });
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader { detail: "missing WAVE form type" });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut off = RIFF_HEADER_LEN;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::MalformedHeader { detail: "chunk overruns file" });
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedHeader { detail: "fmt chunk too small" });
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // RIFF chunks are padded to even sizes.
        off = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or(AudioError::MalformedHeader { detail: "no fmt chunk" })?;
    let data = data.ok_or(AudioError::MalformedHeader { detail: "no data chunk" })?;
    if rate != SAMPLE_RATE {
        return Err(AudioError::WrongSampleRate { found: rate });
    }
    if channels != 1 {
        return Err(AudioError::MultiChannel { channels });
    }

    let samples = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect::<Vec<f32>>(),
        (3, 32) => {
            let mut out = Vec::with_capacity(data.len() / 4);
            for (index, b) in data.chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                if !v.is_finite() {
                    return Err(AudioError::NonFiniteSample { index });
                }
                out.push(v.clamp(-1.0, 1.0));
            }
            out
        }
        _ => return Err(AudioError::UnsupportedFormat { format, bits }),
    };
    AudioTrack::new(samples)
}

/// Write a track as 16-bit PCM; used to build corpora and test fixtures.
pub fn save_wav_16bit(track: &AudioTrack, path: impl AsRef<Path>) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav_16bit(track.samples()))?;
    Ok(())
}

pub fn encode_wav_16bit(samples: &[f32]) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}
