//! Loss functions and the two distillation stages plus fine-tuning.
//!
//! A minibatch is a contiguous run of frames from one track (so the velocity
//! term is well defined inside each batch); runs are shuffled per epoch with
//! a seeded generator and optionally sharded into subsets. The intermediate
//! teacher in the hybrid stage is frozen: its taps are plain forward passes,
//! never graph nodes.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{extract_window, AudioError};
use crate::autodiff::adam::{AdamConfig, AdamError, AdamState};
use crate::autodiff::{Graph, GraphError, NodeId};
use crate::student::{FeatureTaps, StudentError, StudentNet};
use crate::teacher::PseudoLabelDataset;
use crate::tensor::Tensor;
use crate::{RigFrame, RIG_DIM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("learning rate must be non-negative, got {got}")]
    BadLearningRate { got: f64 },
    #[error("batch_frames must be at least 2, got {got}")]
    BatchTooSmall { got: usize },
    #[error("subset_count must be at least 1")]
    ZeroSubsets,
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("sequence length mismatch: {a} vs {b} frames")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },
}

/// Loss term weights; a zero feature weight reduces the hybrid objective to
/// the plain distillation objective exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub vel: f64,
    pub feat: f64,
}

impl LossWeights {
    /// The published setting for plain distillation.
    pub fn heterogeneous() -> Self {
        LossWeights { rec: 0.1, vel: 0.9, feat: 0.0 }
    }

    /// The published hybrid setting.
    pub fn hybrid() -> Self {
        LossWeights { rec: 0.1, vel: 0.9, feat: 0.1 }
    }

    /// The jitter-mitigation variant with the velocity term raised to 9.
    pub fn hybrid_high_velocity() -> Self {
        LossWeights { rec: 0.1, vel: 9.0, feat: 0.1 }
    }

    pub fn validate(&self) -> bool {
        self.rec >= 0.0 && self.vel >= 0.0 && self.feat >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Heterogeneous,
    Hybrid,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_frames: usize,
    pub subset_count: usize,
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    pub fn heterogeneous(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs,
            batch_frames: 32,
            subset_count: 1,
            mode: TrainMode::Heterogeneous,
            weights: LossWeights::heterogeneous(),
            seed,
        }
    }

    pub fn hybrid(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::Hybrid,
            weights: LossWeights::hybrid(),
            ..Self::heterogeneous(epochs, seed)
        }
    }

    /// Fine-tuning continues at the low published rate with fresh optimizer
    /// state.
    pub fn finetune(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            mode: TrainMode::Finetune,
            ..Self::heterogeneous(epochs, seed)
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        // Zero is the degenerate identity (parameters never move); only a
        // negative rate is rejected.
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::BadLearningRate { got: self.learning_rate });
        }
        if self.batch_frames < 2 {
            return Err(TrainError::BatchTooSmall { got: self.batch_frames });
        }
        if self.subset_count == 0 {
            return Err(TrainError::ZeroSubsets);
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub rec: f64,
    pub vel: f64,
    pub feat: f64,
    pub total: f64,
}

/// Per-epoch mean of the logged components.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub vel: f64,
    pub feat: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    /// Metrics log: `step,epoch,rec,vel,feat,total`.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,epoch,rec,vel,feat,total")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{},{},{}", s.step, s.epoch, s.rec, s.vel, s.feat, s.total)?;
        }
        Ok(())
    }
}

/// Mean over frames of the squared L2 distance between prediction and
/// target.
pub fn loss_rec(pred: &[RigFrame], target: &[RigFrame]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch { a: pred.len(), b: target.len() });
    }
    if pred.is_empty() {
        return Err(LossError::TooShort { need: 1, got: 0 });
    }
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(target) {
        for (a, b) in p.as_slice().iter().zip(t.as_slice()) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
    }
    Ok(acc / pred.len() as f64)
}

/// Mean over frame transitions of the squared L2 distance between predicted
/// and target velocities; invariant to a shared constant offset.
pub fn loss_vel(pred: &[RigFrame], target: &[RigFrame]) -> Result<f64, LossError> {
    if pred.len() != target.len() {
        return Err(LossError::LengthMismatch { a: pred.len(), b: target.len() });
    }
    if pred.len() < 2 {
        return Err(LossError::TooShort { need: 2, got: pred.len() });
    }
    let mut acc = 0.0f64;
    for t in 1..pred.len() {
        for i in 0..RIG_DIM {
            let dp = (pred[t].as_slice()[i] - pred[t - 1].as_slice()[i]) as f64;
            let dt = (target[t].as_slice()[i] - target[t - 1].as_slice()[i]) as f64;
            let d = dp - dt;
            acc += d * d;
        }
    }
    Ok(acc / (pred.len() - 1) as f64)
}

/// Squared L2 distance summed over the three taps of one frame.
pub fn loss_feat(teacher: &FeatureTaps, student: &FeatureTaps) -> f64 {
    let term = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum()
    };
    term(&teacher.f1, &student.f1) + term(&teacher.f2, &student.f2) + term(&teacher.f3, &student.f3)
}

/// Weighted total of the three components.
pub fn total_loss(rec: f64, vel: f64, feat: f64, weights: &LossWeights) -> f64 {
    weights.rec * rec + weights.vel * vel + weights.feat * feat
}

/// A contiguous run of frames within one dataset item.
#[derive(Debug, Clone, Copy)]
struct Run {
    item: usize,
    start: usize,
    len: usize,
}

fn collect_runs(dataset: &PseudoLabelDataset, batch_frames: usize) -> Vec<Run> {
    let mut runs = Vec::new();
    for (item, it) in dataset.items.iter().enumerate() {
        let n = it.frames.len();
        let mut start = 0;
        while start < n {
            let len = batch_frames.min(n - start);
            // Runs shorter than 2 frames cannot carry a velocity term.
            if len >= 2 {
                runs.push(Run { item, start, len });
            }
            start += len;
        }
    }
    runs
}

/// Plain output-supervised distillation against the dataset's pseudo-labels.
pub fn train_heterogeneous(
    dataset: &PseudoLabelDataset,
    student: &mut StudentNet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_loop(dataset, student, None, cfg)
}

/// Second-stage distillation: output supervision from the pseudo-labels plus
/// feature supervision from a frozen intermediate teacher. The teacher taps
/// are computed on its own future-context windows, the student on its own,
/// which is what makes reduced-latency students learn predictive features.
pub fn train_hybrid(
    dataset: &PseudoLabelDataset,
    intermediate: &StudentNet,
    student: &mut StudentNet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    // With a zero feature weight the feature branch is not built at all, so
    // the run is byte-identical to plain distillation under the same seed.
    let teacher = (cfg.weights.feat > 0.0).then_some(intermediate);
    train_loop(dataset, student, teacher, cfg)
}

/// Continue optimization at a low rate with fresh Adam state. Zero epochs is
/// the identity.
pub fn finetune(
    dataset: &PseudoLabelDataset,
    student: &mut StudentNet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_loop(dataset, student, None, cfg)
}

fn train_loop(
    dataset: &PseudoLabelDataset,
    student: &mut StudentNet,
    teacher: Option<&StudentNet>,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if dataset.items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !cfg.weights.validate() {
        return Err(TrainError::BadLearningRate { got: -1.0 });
    }
    let runs = collect_runs(dataset, cfg.batch_frames);
    let mut report = TrainReport::default();
    if cfg.epochs == 0 || runs.is_empty() {
        return Ok(report);
    }

    let d_student = student.config().future_ms;

    // Frozen-teacher taps depend only on the window, so compute them once.
    let teacher_taps: Option<Vec<Vec<FeatureTaps>>> = match teacher {
        Some(t) => {
            let d_teacher = t.config().future_ms;
            let mut all = Vec::with_capacity(dataset.items.len());
            for it in &dataset.items {
                let taps: Result<Vec<FeatureTaps>, TrainError> = (0..it.frames.len())
                    .into_par_iter()
                    .map(|k| {
                        let w = extract_window(&it.track, k, d_teacher)?;
                        Ok(t.forward_with_taps(&w)?.1)
                    })
                    .collect();
                all.push(taps?);
            }
            Some(all)
        }
        None => None,
    };

    let mut working: Vec<Tensor<f32>> = student.params().iter().map(|p| p.tensor.clone()).collect();
    let mut adam = AdamState::new(&working, AdamConfig::with_lr(cfg.learning_rate));
    let mut step_idx = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = runs.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        order.shuffle(&mut rng);

        let subset_len = order.len().div_ceil(cfg.subset_count);
        let mut epoch_acc = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut epoch_steps = 0usize;

        for subset in order.chunks(subset_len) {
            for run in subset {
                let item = &dataset.items[run.item];
                let mut g: Graph<f32> = Graph::new();
                let param_ids: Vec<NodeId> =
                    working.iter().map(|t| g.leaf(t.clone())).collect();

                let mut outs = Vec::with_capacity(run.len);
                let mut rec_terms = Vec::with_capacity(run.len);
                let mut feat_terms = Vec::new();
                for k in run.start..run.start + run.len {
                    let w = extract_window(&item.track, k, d_student)?;
                    let win = StudentNet::lift_window(&mut g, w.samples());
                    let (out, taps) = student.graph_forward(&mut g, &param_ids, win)?;
                    outs.push(out);

                    let target = g.leaf(Tensor::from_vec(item.frames[k].as_slice().to_vec())
                        .expect("labels are finite"));
                    let diff = g.sub(out, target)?;
                    rec_terms.push(g.sq_norm(diff)?);

                    if let Some(tt) = &teacher_taps {
                        let frame_taps = &tt[run.item][k];
                        for (node, teacher_vec) in [
                            (taps[0], &frame_taps.f1),
                            (taps[1], &frame_taps.f2),
                            (taps[2], &frame_taps.f3),
                        ] {
                            let t_leaf = g.leaf(
                                Tensor::from_vec(teacher_vec.clone()).expect("taps are finite"),
                            );
                            let d = g.sub(node, t_leaf)?;
                            feat_terms.push(g.sq_norm(d)?);
                        }
                    }
                }

                let rec_sum = g.add_n(&rec_terms)?;
                let rec = g.scale(rec_sum, 1.0 / run.len as f64)?;

                let mut vel_terms = Vec::with_capacity(run.len - 1);
                for t in 1..run.len {
                    let dp = g.sub(outs[t], outs[t - 1])?;
                    let k = run.start + t;
                    let dv: Vec<f32> = item.frames[k]
                        .as_slice()
                        .iter()
                        .zip(item.frames[k - 1].as_slice())
                        .map(|(a, b)| a - b)
                        .collect();
                    let dv_leaf = g.leaf(Tensor::from_vec(dv).expect("finite"));
                    let d = g.sub(dp, dv_leaf)?;
                    vel_terms.push(g.sq_norm(d)?);
                }
                let vel_sum = g.add_n(&vel_terms)?;
                let vel = g.scale(vel_sum, 1.0 / (run.len - 1) as f64)?;

                let feat = if feat_terms.is_empty() {
                    None
                } else {
                    let s = g.add_n(&feat_terms)?;
                    Some(g.scale(s, 1.0 / run.len as f64)?)
                };

                let rec_w = g.scale(rec, cfg.weights.rec)?;
                let vel_w = g.scale(vel, cfg.weights.vel)?;
                let mut total = g.add(rec_w, vel_w)?;
                if let Some(f) = feat {
                    let f_w = g.scale(f, cfg.weights.feat)?;
                    total = g.add(total, f_w)?;
                }

                let rec_v = g.scalar_value(rec) as f64;
                let vel_v = g.scalar_value(vel) as f64;
                let feat_v = feat.map_or(0.0, |f| g.scalar_value(f) as f64);
                let total_v = g.scalar_value(total) as f64;

                let grads = g.backward(total)?;
                let param_grads: Vec<Option<Vec<f32>>> = param_ids
                    .iter()
                    .map(|&id| grads.get(id).map(|s| s.to_vec()))
                    .collect();
                adam.step(&mut working, &param_grads)?;

                report.steps.push(StepLog {
                    step: step_idx,
                    epoch,
                    rec: rec_v,
                    vel: vel_v,
                    feat: feat_v,
                    total: total_v,
                });
                step_idx += 1;
                epoch_acc.0 += rec_v;
                epoch_acc.1 += vel_v;
                epoch_acc.2 += feat_v;
                epoch_acc.3 += total_v;
                epoch_steps += 1;
            }
        }

        let n = epoch_steps as f64;
        report.epochs.push(EpochLog {
            epoch,
            rec: epoch_acc.0 / n,
            vel: epoch_acc.1 / n,
            feat: epoch_acc.2 / n,
            total: epoch_acc.3 / n,
        });
    }

    for (slot, tensor) in student.params_mut().iter_mut().zip(working) {
        slot.tensor = tensor;
    }
    Ok(report)
}

/// Offline per-frame inference over a whole track.
pub fn predict_track(net: &StudentNet, track: &crate::audio::AudioTrack) -> Result<Vec<RigFrame>, TrainError> {
    let n = crate::audio::frame_count(track);
    let d = net.config().future_ms;
    let frames: Result<Vec<RigFrame>, TrainError> = (0..n)
        .map(|k| {
            let w = extract_window(track, k, d)?;
            Ok(net.forward(&w)?)
        })
        .collect();
    frames
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioTrack;
    use crate::student::{build_student, StudentConfig};
    use crate::teacher::{generate_dataset, SyntheticTeacher};
    use crate::SAMPLE_RATE;

    fn frame_of(v: f32) -> RigFrame {
        RigFrame::try_from_slice(&[v; RIG_DIM]).unwrap()
    }

    fn rand_frames(n: usize, seed: u64) -> Vec<RigFrame> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..RIG_DIM).map(|_| rng.random_range(-0.9..0.9)).collect();
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect()
    }

    #[test]
    fn rec_loss_basics() {
        let a = rand_frames(3, 1);
        assert_eq!(loss_rec(&a, &a).unwrap(), 0.0);

        // Unit offset in one coordinate of every frame -> 1.0.
        let mut b = a.clone();
        for f in &mut b {
            let mut v = *f.values();
            v[5] = (v[5] + 1.0).min(1.0);
            *f = RigFrame::try_from_slice(&v).unwrap();
        }
        // Construct so the offset is exactly 1 (avoid the clamp).
        let base: Vec<RigFrame> = (0..3).map(|_| frame_of(-0.5)).collect();
        let offset: Vec<RigFrame> = (0..3)
            .map(|_| {
                let mut v = [-0.5f32; RIG_DIM];
                v[0] = 0.5;
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect();
        assert!((loss_rec(&base, &offset).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rec_loss_matches_double_loop_oracle() {
        let a = rand_frames(3, 2);
        let b = rand_frames(3, 3);
        let mut oracle = 0.0f64;
        for t in 0..3 {
            for i in 0..RIG_DIM {
                let d = (a[t].as_slice()[i] - b[t].as_slice()[i]) as f64;
                oracle += d * d;
            }
        }
        oracle /= 3.0;
        assert!((loss_rec(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(
            loss_rec(&a, &b[..2].to_vec()).unwrap_err(),
            LossError::LengthMismatch { a: 3, b: 2 }
        );
    }

    #[test]
    fn vel_loss_constant_sequences_are_zero() {
        let a: Vec<RigFrame> = (0..4).map(|_| frame_of(0.3)).collect();
        let b: Vec<RigFrame> = (0..4).map(|_| frame_of(-0.2)).collect();
        assert_eq!(loss_vel(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn vel_loss_is_shift_invariant() {
        let base = rand_frames(5, 4);
        let shifted: Vec<RigFrame> = base
            .iter()
            .map(|f| {
                let v: Vec<f32> = f.as_slice().iter().map(|x| (x * 0.5) + 0.05).collect();
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect();
        // Shift both sides by the same per-sequence constant: velocities equal.
        let l1 = loss_vel(&base, &base).unwrap();
        assert_eq!(l1, 0.0);
        let l2 = loss_vel(&shifted, &shifted).unwrap();
        assert_eq!(l2, 0.0);
        assert_eq!(
            loss_vel(&base[..1].to_vec(), &base[..1].to_vec()).unwrap_err(),
            LossError::TooShort { need: 2, got: 1 }
        );
    }

    #[test]
    fn vel_loss_matches_finite_difference_oracle() {
        let a = rand_frames(4, 5);
        let b = rand_frames(4, 6);
        let mut oracle = 0.0f64;
        for t in 1..4 {
            for i in 0..RIG_DIM {
                let dp = (a[t].as_slice()[i] - a[t - 1].as_slice()[i]) as f64;
                let dt = (b[t].as_slice()[i] - b[t - 1].as_slice()[i]) as f64;
                oracle += (dp - dt) * (dp - dt);
            }
        }
        oracle /= 3.0;
        assert!((loss_vel(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn feat_loss_zero_for_identical_taps_and_matches_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mk = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect() };
        let a = FeatureTaps { f1: mk(150), f2: mk(150), f3: mk(78) };
        let b = FeatureTaps { f1: mk(150), f2: mk(150), f3: mk(78) };
        assert_eq!(loss_feat(&a, &a), 0.0);

        let mut oracle = 0.0f64;
        for (x, y) in a.f1.iter().zip(&b.f1).chain(a.f2.iter().zip(&b.f2)).chain(a.f3.iter().zip(&b.f3)) {
            let d = (*x - *y) as f64;
            oracle += d * d;
        }
        assert!((loss_feat(&a, &b) - oracle).abs() < 1e-10);
    }

    #[test]
    fn total_loss_weightings() {
        let w = LossWeights::heterogeneous();
        assert_eq!(total_loss(2.0, 3.0, 100.0, &w), 0.1 * 2.0 + 0.9 * 3.0);
        let jitter = LossWeights { rec: 0.1, vel: 9.0, feat: 0.1 };
        assert!((total_loss(1.0, 1.0, 1.0, &jitter) - 9.2).abs() < 1e-12);
        let zero = LossWeights { rec: 0.0, vel: 0.0, feat: 0.0 };
        assert_eq!(total_loss(5.0, 6.0, 7.0, &zero), 0.0);
    }

    fn tiny_dataset(seconds: usize, tracks: usize, seed: u64) -> PseudoLabelDataset {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = SyntheticTeacher::new(seed);
        let list: Vec<(String, AudioTrack)> = (0..tracks)
            .map(|i| {
                let samples: Vec<f32> = (0..seconds * SAMPLE_RATE as usize)
                    .map(|j| {
                        let t = j as f32 / SAMPLE_RATE as f32;
                        let f = 200.0 + 150.0 * (i as f32) + 50.0 * (0.5 * t).sin();
                        0.5 * (std::f32::consts::TAU * f * t).sin() + rng.random_range(-0.05..0.05)
                    })
                    .map(|v| v.clamp(-1.0, 1.0))
                    .collect();
                (format!("t{i}.wav"), AudioTrack::new(samples).unwrap())
            })
            .collect();
        generate_dataset(&list, &teacher).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = tiny_dataset(1, 1, 0);
        let mut net = build_student(StudentConfig::new(2, 256, 0).unwrap());
        let before: Vec<_> = net.params().iter().map(|p| p.tensor.clone()).collect();
        let mut cfg = TrainConfig::heterogeneous(2, 0);
        cfg.learning_rate = 0.0;
        train_heterogeneous(&ds, &mut net, &cfg).unwrap();
        for (b, p) in before.iter().zip(net.params()) {
            assert_eq!(b, &p.tensor);
        }

        cfg.learning_rate = -1e-4;
        assert!(matches!(
            train_heterogeneous(&ds, &mut net, &cfg),
            Err(TrainError::BadLearningRate { .. })
        ));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let ds = tiny_dataset(1, 1, 1);
        let mut net = build_student(StudentConfig::new(2, 256, 3).unwrap());
        let before: Vec<_> = net.params().iter().map(|p| p.tensor.clone()).collect();
        let cfg = TrainConfig::finetune(0, 0);
        let report = finetune(&ds, &mut net, &cfg).unwrap();
        assert!(report.steps.is_empty());
        for (b, p) in before.iter().zip(net.params()) {
            assert_eq!(b, &p.tensor);
        }
    }

    #[test]
    fn training_is_deterministic_under_a_seed() {
        let ds = tiny_dataset(1, 2, 2);
        let cfg = TrainConfig::heterogeneous(2, 77);
        let mut a = build_student(StudentConfig::new(4, 256, 5).unwrap());
        let ra = train_heterogeneous(&ds, &mut a, &cfg).unwrap();
        let mut b = build_student(StudentConfig::new(4, 256, 5).unwrap());
        let rb = train_heterogeneous(&ds, &mut b, &cfg).unwrap();
        assert_eq!(ra.steps, rb.steps);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.tensor, y.tensor);
        }
    }

    #[test]
    fn hybrid_with_zero_feat_weight_equals_heterogeneous_bytewise() {
        let ds = tiny_dataset(1, 2, 3);
        let teacher_net = build_student(StudentConfig::new(4, 256, 9).unwrap());
        let mut cfg = TrainConfig::hybrid(2, 13);
        cfg.weights.feat = 0.0;

        let mut a = build_student(StudentConfig::new(4, 64, 5).unwrap());
        let ra = train_hybrid(&ds, &teacher_net, &mut a, &cfg).unwrap();

        let mut cfg_het = cfg.clone();
        cfg_het.mode = TrainMode::Heterogeneous;
        let mut b = build_student(StudentConfig::new(4, 64, 5).unwrap());
        let rb = train_heterogeneous(&ds, &mut b, &cfg_het).unwrap();

        assert_eq!(ra.steps, rb.steps);
        for (x, y) in a.params().iter().zip(b.params()) {
            for (u, v) in x.tensor.data().iter().zip(y.tensor.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn hybrid_keeps_the_teacher_frozen_and_logs_consistent_totals() {
        let ds = tiny_dataset(1, 1, 4);
        let teacher_net = build_student(StudentConfig::new(4, 256, 9).unwrap());
        let teacher_before: Vec<_> = teacher_net.params().iter().map(|p| p.tensor.clone()).collect();
        let mut student = build_student(StudentConfig::new(4, 64, 5).unwrap());
        let cfg = TrainConfig::hybrid(2, 13);
        let report = train_hybrid(&ds, &teacher_net, &mut student, &cfg).unwrap();

        for (b, p) in teacher_before.iter().zip(teacher_net.params()) {
            assert_eq!(b, &p.tensor, "teacher parameters must stay frozen");
        }
        for s in &report.steps {
            let recombined = total_loss(s.rec, s.vel, s.feat, &cfg.weights);
            assert!(
                (recombined - s.total).abs() < 1e-6 * s.total.abs().max(1.0),
                "logged total {} vs recombination {recombined}",
                s.total
            );
            assert!(s.feat > 0.0, "feature term should be active");
        }
    }
}
