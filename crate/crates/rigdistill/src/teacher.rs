//! Teacher oracle: per-frame rig pseudo-labels, either imported from a label
//! file produced by an external high-quality model or generated by the
//! built-in deterministic synthetic teacher for closed-loop experiments.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{extract_window, frame_count, AudioError, AudioTrack};
use crate::{RigFrame, RigFrameError, RIG_DIM, SAMPLE_RATE, WINDOW_LEN};

const MAGIC: &[u8; 4] = b"RDLB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty corpus: at least one track is required")]
    EmptyCorpus,
    #[error("bad magic, not a label file")]
    BadMagic,
    #[error("unsupported label file version {found}, expected {VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("label file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("track path is not valid UTF-8")]
    BadPath,
    #[error("item {path} declares rig dimension {got}, expected {RIG_DIM}")]
    WrongRigDim { path: String, got: u32 },
    #[error("item {path}: {source}")]
    BadFrame {
        path: String,
        source: RigFrameError,
    },
    #[error("item {path} has {labels} label frames but the track clocks {expected}")]
    FrameCountMismatch {
        path: String,
        labels: usize,
        expected: usize,
    },
    #[error("failed to load track {path}: {source}")]
    Track {
        path: String,
        source: AudioError,
    },
}

/// Where an item's labels came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    Imported,
}

#[derive(Debug, Clone)]
pub struct LabelItem {
    pub track_path: String,
    pub track: AudioTrack,
    pub frames: Vec<RigFrame>,
    pub provenance: Provenance,
}

/// A corpus of (audio, rig sequence) pairs at 30 fps.
#[derive(Debug, Clone)]
pub struct PseudoLabelDataset {
    pub items: Vec<LabelItem>,
}

/// Deterministic stand-in teacher: log band energies of the 512 ms window
/// around each frame, a fixed seeded Gaussian affine map into rig space,
/// tanh, and exponential smoothing across frames.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    pub seed: u64,
    bands: usize,
    sub_windows: usize,
    /// Weight of the new observation in the exponential smoothing.
    smoothing: f32,
    band_freqs: Vec<f32>,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

const TEACHER_BANDS: usize = 8;
const TEACHER_SUB_WINDOWS: usize = 4;
const TEACHER_SMOOTHING: f32 = 0.6;

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl SyntheticTeacher {
    pub fn new(seed: u64) -> Self {
        let bands = TEACHER_BANDS;
        let sub_windows = TEACHER_SUB_WINDOWS;
        let feat_dim = bands * sub_windows;
        // Mel-spaced band centers between 100 Hz and 6 kHz.
        let (lo, hi) = (mel(100.0), mel(6000.0));
        let band_freqs: Vec<f32> = (0..bands)
            .map(|i| mel_inv(lo + (hi - lo) * (i as f64 + 0.5) / bands as f64) as f32)
            .collect();
        // Seeded Gaussian map via Box-Muller; scaled so speech-like input
        // lands in tanh's responsive range.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
        };
        let scale = 2.0 / (feat_dim as f32).sqrt();
        let weight: Vec<f32> = (0..RIG_DIM * feat_dim).map(|_| normal() * scale).collect();
        let bias: Vec<f32> = (0..RIG_DIM).map(|_| normal() * 0.3).collect();
        SyntheticTeacher {
            seed,
            bands,
            sub_windows,
            smoothing: TEACHER_SMOOTHING,
            band_freqs,
            weight,
            bias,
        }
    }

    /// Goertzel band power of one sub-window, normalized to amplitude scale.
    fn band_power(samples: &[f32], freq: f32) -> f32 {
        let w = std::f64::consts::TAU * freq as f64 / SAMPLE_RATE as f64;
        let coeff = 2.0 * w.cos();
        let mut s_prev = 0.0f64;
        let mut s_prev2 = 0.0f64;
        for &x in samples {
            let s = x as f64 + coeff * s_prev - s_prev2;
            s_prev2 = s_prev;
            s_prev = s;
        }
        let power = s_prev * s_prev + s_prev2 * s_prev2 - coeff * s_prev * s_prev2;
        // Normalize so a unit sinusoid at the band centre is ~1.
        let n = samples.len() as f64 / 2.0;
        (power / (n * n)).max(0.0) as f32
    }

    /// 32 log band energies of the symmetric 512 ms window of a frame.
    fn features(&self, track: &AudioTrack, frame_index: usize) -> Vec<f32> {
        let window = extract_window(track, frame_index, 256).expect("256 <= 512");
        let sub_len = WINDOW_LEN / self.sub_windows;
        let mut feats = Vec::with_capacity(self.bands * self.sub_windows);
        for sw in 0..self.sub_windows {
            let sub = &window.samples()[sw * sub_len..(sw + 1) * sub_len];
            for &f in &self.band_freqs {
                let p = Self::band_power(sub, f);
                feats.push((1.0 + 4.0 * p).ln());
            }
        }
        feats
    }

    fn raw_frame(&self, track: &AudioTrack, frame_index: usize) -> [f32; RIG_DIM] {
        let feats = self.features(track, frame_index);
        let mut out = [0.0f32; RIG_DIM];
        let d = feats.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weight[r * d..(r + 1) * d];
            let mut acc = self.bias[r];
            for (w, f) in row.iter().zip(&feats) {
                acc += w * f;
            }
            *o = acc.tanh();
        }
        out
    }

    /// Full label sequence for a track: tanh responses smoothed with
    /// `r_t = (1 - a) r_{t-1} + a y_t`, seeded at the first frame so silence
    /// maps to a constant rest pose.
    pub fn label_sequence(&self, track: &AudioTrack) -> Vec<RigFrame> {
        let n = frame_count(track);
        let raw: Vec<[f32; RIG_DIM]> = (0..n).into_par_iter().map(|k| self.raw_frame(track, k)).collect();
        let mut out = Vec::with_capacity(n);
        let mut state = raw[0];
        out.push(RigFrame::new(state));
        let a = self.smoothing;
        for y in raw.iter().skip(1) {
            for (s, yv) in state.iter_mut().zip(y) {
                // s + a(y - s) rather than (1-a)s + ay: exactly constant
                // when the input is constant.
                *s += a * (yv - *s);
            }
            out.push(RigFrame::new(state));
        }
        out
    }

    /// Label of a single frame. Smoothing is causal, so this evaluates the
    /// sequence up to `frame_index`; prefer [`Self::label_sequence`] in loops.
    pub fn synth_teacher_label(&self, track: &AudioTrack, frame_index: usize) -> RigFrame {
        let mut state: Option<[f32; RIG_DIM]> = None;
        let a = self.smoothing;
        for k in 0..=frame_index {
            let y = self.raw_frame(track, k);
            state = Some(match state {
                None => y,
                Some(mut s) => {
                    for (sv, yv) in s.iter_mut().zip(&y) {
                        *sv += a * (yv - *sv);
                    }
                    s
                }
            });
        }
        RigFrame::new(state.expect("at least one frame"))
    }
}

/// One label sequence per track; item order follows the input order
/// regardless of how the per-track work is scheduled.
pub fn generate_dataset(
    tracks: &[(String, AudioTrack)],
    teacher: &SyntheticTeacher,
) -> Result<PseudoLabelDataset, LabelError> {
    if tracks.is_empty() {
        return Err(LabelError::EmptyCorpus);
    }
    let items: Vec<LabelItem> = tracks
        .par_iter()
        .map(|(path, track)| {
            let frames = teacher.label_sequence(track);
            debug_assert_eq!(frames.len(), frame_count(track));
            LabelItem {
                track_path: path.clone(),
                track: track.clone(),
                frames,
                provenance: Provenance::Synthetic { seed: teacher.seed },
            }
        })
        .collect();
    Ok(PseudoLabelDataset { items })
}

pub fn save_labels(dataset: &PseudoLabelDataset, path: impl AsRef<Path>) -> Result<(), LabelError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.items.len() as u32).to_le_bytes());
    for item in &dataset.items {
        out.extend_from_slice(&(item.track_path.len() as u32).to_le_bytes());
        out.extend_from_slice(item.track_path.as_bytes());
        out.extend_from_slice(&(item.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&(RIG_DIM as u32).to_le_bytes());
        for frame in &item.frames {
            for v in frame.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a label file and re-attach the referenced tracks from `corpus_root`,
/// validating rig range and the 30 fps frame count of every item.
pub fn load_labels(
    path: impl AsRef<Path>,
    corpus_root: impl AsRef<Path>,
) -> Result<PseudoLabelDataset, LabelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let raw = parse_label_file(&bytes)?;
    let mut items = Vec::with_capacity(raw.len());
    for (track_path, frames) in raw {
        let full = corpus_root.as_ref().join(&track_path);
        let track = crate::audio::load_wav(&full).map_err(|source| LabelError::Track {
            path: track_path.clone(),
            source,
        })?;
        let expected = frame_count(&track);
        if frames.len() != expected {
            return Err(LabelError::FrameCountMismatch {
                path: track_path,
                labels: frames.len(),
                expected,
            });
        }
        items.push(LabelItem { track_path, track, frames, provenance: Provenance::Imported });
    }
    Ok(PseudoLabelDataset { items })
}

/// Decode the binary payload: `(track_path, frames)` per item, with range
/// validation but no track access.
pub fn parse_label_file(bytes: &[u8]) -> Result<Vec<(String, Vec<RigFrame>)>, LabelError> {
    struct R<'a> {
        b: &'a [u8],
        pos: usize,
    }
    impl<'a> R<'a> {
        fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], LabelError> {
            if self.pos + n > self.b.len() {
                return Err(LabelError::Truncated { what });
            }
            let s = &self.b[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn u32(&mut self, what: &'static str) -> Result<u32, LabelError> {
            Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
        }
    }

    let mut r = R { b: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(LabelError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LabelError::UnsupportedVersion { found: version });
    }
    let count = r.u32("item count")? as usize;
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let path_len = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(path_len, "path")?)
            .map_err(|_| LabelError::BadPath)?
            .to_string();
        let frames_n = r.u32("frame count")? as usize;
        let dim = r.u32("rig dimension")?;
        if dim as usize != RIG_DIM {
            return Err(LabelError::WrongRigDim { path, got: dim });
        }
        let mut frames = Vec::with_capacity(frames_n);
        for _ in 0..frames_n {
            let raw = r.take(RIG_DIM * 4, "frame data")?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let frame = RigFrame::try_from_slice(&vals)
                .map_err(|source| LabelError::BadFrame { path: path.clone(), source })?;
            frames.push(frame);
        }
        items.push((path, frames));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::save_wav_16bit;

    fn tone_track(len: usize, freq: f32, amp: f32) -> AudioTrack {
        let samples: Vec<f32> = (0..len)
            .map(|i| amp * (std::f32::consts::TAU * freq * i as f32 / SAMPLE_RATE as f32).sin())
            .collect();
        AudioTrack::new(samples).unwrap()
    }

    #[test]
    fn silent_track_yields_constant_rest_pose() {
        let teacher = SyntheticTeacher::new(5);
        let track = AudioTrack::new(vec![0.0; 16_000]).unwrap();
        let labels = teacher.label_sequence(&track);
        assert_eq!(labels.len(), 31);
        for frame in &labels[1..] {
            assert_eq!(frame, &labels[0]);
        }
        // The rest pose is not degenerate (all zeros) thanks to the bias.
        assert!(labels[0].as_slice().iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn same_seed_same_audio_is_bit_identical() {
        let track = tone_track(16_000, 440.0, 0.5);
        let a = SyntheticTeacher::new(9).label_sequence(&track);
        let b = SyntheticTeacher::new(9).label_sequence(&track);
        assert_eq!(a, b);
        let c = SyntheticTeacher::new(10).label_sequence(&track);
        assert_ne!(a, c);
    }

    #[test]
    fn louder_audio_shifts_the_labels() {
        let teacher = SyntheticTeacher::new(3);
        let quiet = teacher.label_sequence(&tone_track(16_000, 300.0, 0.25));
        let loud = teacher.label_sequence(&tone_track(16_000, 300.0, 0.5));
        assert_ne!(quiet, loud);
    }

    #[test]
    fn labels_vary_across_frames_and_stay_in_range() {
        let teacher = SyntheticTeacher::new(1);
        // Frequency sweep so band energies move over time.
        let samples: Vec<f32> = (0..32_000)
            .map(|i| {
                let t = i as f32 / SAMPLE_RATE as f32;
                0.6 * (std::f32::consts::TAU * (200.0 + 900.0 * t) * t).sin()
            })
            .collect();
        let track = AudioTrack::new(samples).unwrap();
        let labels = teacher.label_sequence(&track);
        assert!(labels.iter().any(|f| f != &labels[0]), "labels should move");
        for f in &labels {
            assert!(f.as_slice().iter().all(|v| v.abs() <= 1.0));
            // tanh keeps values strictly interior; saturation would make the
            // teacher trivially predictable.
            assert!(f.as_slice().iter().any(|v| v.abs() < 0.999));
        }
    }

    #[test]
    fn frame_deltas_are_bounded_by_smoothing() {
        let teacher = SyntheticTeacher::new(2);
        let track = tone_track(48_000, 500.0, 0.9);
        let labels = teacher.label_sequence(&track);
        // |r_t - r_{t-1}| = a |y_t - r_{t-1}| <= a * 2 per coordinate.
        let bound = TEACHER_SMOOTHING * 2.0 * (RIG_DIM as f32).sqrt();
        for pair in labels.windows(2) {
            let d: f32 = pair[0]
                .as_slice()
                .iter()
                .zip(pair[1].as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt();
            assert!(d <= bound, "delta {d} exceeds smoothing bound {bound}");
        }
    }

    #[test]
    fn single_frame_label_matches_sequence() {
        let teacher = SyntheticTeacher::new(11);
        let track = tone_track(16_000, 700.0, 0.4);
        let seq = teacher.label_sequence(&track);
        assert_eq!(teacher.synth_teacher_label(&track, 0), seq[0]);
        assert_eq!(teacher.synth_teacher_label(&track, 7), seq[7]);
    }

    #[test]
    fn dataset_generation_and_roundtrip() {
        let teacher = SyntheticTeacher::new(21);
        let tracks = vec![
            ("a.wav".to_string(), tone_track(16_000, 300.0, 0.5)),
            ("b.wav".to_string(), tone_track(16_000, 500.0, 0.5)),
            ("c.wav".to_string(), tone_track(16_000, 800.0, 0.5)),
        ];
        let ds = generate_dataset(&tracks, &teacher).unwrap();
        assert_eq!(ds.items.len(), 3);
        for item in &ds.items {
            assert_eq!(item.frames.len(), 31);
        }
        // Regeneration is identical.
        let ds2 = generate_dataset(&tracks, &teacher).unwrap();
        for (a, b) in ds.items.iter().zip(&ds2.items) {
            assert_eq!(a.frames, b.frames);
        }

        // Save, round-trip through disk next to the wavs.
        let dir = tempfile::tempdir().unwrap();
        for (name, track) in &tracks {
            save_wav_16bit(track, dir.path().join(name)).unwrap();
        }
        let label_path = dir.path().join("labels.rdlb");
        save_labels(&ds, &label_path).unwrap();
        let loaded = load_labels(&label_path, dir.path()).unwrap();
        assert_eq!(loaded.items.len(), 3);
        for (a, b) in ds.items.iter().zip(&loaded.items) {
            assert_eq!(a.track_path, b.track_path);
            assert_eq!(a.frames, b.frames);
            assert_eq!(b.provenance, Provenance::Imported);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            generate_dataset(&[], &SyntheticTeacher::new(0)),
            Err(LabelError::EmptyCorpus)
        ));
    }

    #[test]
    fn truncated_label_file_is_a_structured_error() {
        let teacher = SyntheticTeacher::new(21);
        let tracks = vec![("a.wav".to_string(), tone_track(16_000, 300.0, 0.5))];
        let ds = generate_dataset(&tracks, &teacher).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.rdlb");
        save_labels(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            parse_label_file(&bytes[..bytes.len() - 5]),
            Err(LabelError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_label_file(&bad), Err(LabelError::BadMagic)));
    }

    #[test]
    fn hand_crafted_external_file_loads() {
        // A minimal file written field by field, independent of save_labels.
        let dir = tempfile::tempdir().unwrap();
        let track = AudioTrack::new(vec![0.1; 16_000]).unwrap();
        save_wav_16bit(&track, dir.path().join("x.wav")).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RDLB");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes()); // one item
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(b"x.wav");
        bytes.extend_from_slice(&31u32.to_le_bytes()); // frames for 1 s
        bytes.extend_from_slice(&(RIG_DIM as u32).to_le_bytes());
        for k in 0..31u32 {
            for i in 0..RIG_DIM {
                let v = ((k as f32 * 0.01) + i as f32 * 0.001).min(1.0);
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.path().join("ext.rdlb");
        std::fs::write(&path, &bytes).unwrap();
        let ds = load_labels(&path, dir.path()).unwrap();
        assert_eq!(ds.items.len(), 1);
        assert_eq!(ds.items[0].frames.len(), 31);
        assert_eq!(ds.items[0].frames[3].as_slice()[2], 0.03f32 + 0.002);
    }
}
