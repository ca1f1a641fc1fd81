//! The real-time student network: a fixed chain of 1-D convolutions, two
//! norm layers, a per-step linear with a big-kernel residual block, and
//! three fully-connected head layers squashed by tanh.
//!
//! The chain is parameterized only by the channel width `C`; the head widths
//! (150, 150, 78) are fixed, which is what makes feature supervision between
//! differently sized students possible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::AudioWindow;
use crate::autodiff::{kernels, ConvSpec, Graph, GraphError, NodeId};
use crate::tensor::{Real, Tensor};
use crate::{RigFrame, RIG_DIM, WINDOW_LEN, WINDOW_MS};

pub const NORM_EPS: f64 = 1e-5;
/// Widths of the two hidden head layers.
pub const HEAD_WIDTH: usize = 150;
/// Maximum future context in milliseconds.
pub const MAX_FUTURE_MS: u32 = WINDOW_MS;

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("channel count must be at least 1")]
    ZeroChannels,
    #[error("future context {got} ms exceeds {MAX_FUTURE_MS} ms")]
    FutureContextTooLong { got: u32 },
    #[error("window has {actual} samples, expected {expected}")]
    WrongWindowLength { expected: usize, actual: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Channel width, future context, and the seed the parameters are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudentConfig {
    pub channels: usize,
    pub future_ms: u32,
    pub seed: u64,
}

impl StudentConfig {
    pub fn new(channels: usize, future_ms: u32, seed: u64) -> Result<Self, StudentError> {
        if channels == 0 {
            return Err(StudentError::ZeroChannels);
        }
        if future_ms > MAX_FUTURE_MS {
            return Err(StudentError::FutureContextTooLong { got: future_ms });
        }
        Ok(StudentConfig { channels, future_ms, seed })
    }
}

/// One execution step of the layer chain.
#[derive(Debug, Clone)]
pub enum Step {
    /// Convolution (covers the per-step linear as kernel 1); weight at
    /// `param`, bias at `param + 1`.
    Conv { spec: ConvSpec, param: usize },
    /// Group normalization; gamma at `param`, beta at `param + 1`.
    GroupNorm { groups: usize, param: usize },
    /// Layer normalization across channels per time step.
    LayerNorm { param: usize },
    Gelu,
    /// Remember the current map as the residual source.
    StashResidual,
    /// Add the stashed map back in.
    AddResidual,
    /// Fully-connected head layer on the flattened features.
    Fc { m: usize, n: usize, param: usize },
    Tanh,
    /// Record the current vector as a supervision tap.
    Tap(TapSlot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapSlot {
    F1,
    F2,
    F3,
}

/// The three fixed-width activation vectors used for feature supervision:
/// the two hidden head outputs and the pre-tanh prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps {
    pub f1: Vec<f32>,
    pub f2: Vec<f32>,
    pub f3: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Analytic per-frame resource accounting at 32-bit precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceReport {
    pub param_count: usize,
    /// Multiply-accumulates for one forward pass.
    pub mac_count: usize,
    /// Parameters plus the largest set of simultaneously live activation
    /// buffers, at 4 bytes per value.
    pub peak_memory_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct StudentNet {
    config: StudentConfig,
    steps: Vec<Step>,
    params: Vec<NamedParam>,
}

fn conv_spec(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> ConvSpec {
    ConvSpec { c_in, c_out, kernel, stride, pad_left: 0, pad_right: 0, groups: 1 }
}

/// The layer chain for channel width `c`, together with parameter
/// descriptors in initialization order.
fn build_plan(c: usize) -> (Vec<Step>, Vec<(String, Vec<usize>)>) {
    let mut steps = Vec::new();
    let mut params: Vec<(String, Vec<usize>)> = Vec::new();

    let add_conv = |steps: &mut Vec<Step>, params: &mut Vec<(String, Vec<usize>)>,
                        name: &str, spec: ConvSpec| {
        let param = params.len();
        params.push((format!("{name}.weight"), vec![spec.c_out, spec.kernel, spec.c_in / spec.groups]));
        params.push((format!("{name}.bias"), vec![spec.c_out]));
        steps.push(Step::Conv { spec, param });
    };

    // Waveform front end: 8192 -> 1637, then strided downsampling to 25.
    add_conv(&mut steps, &mut params, "conv0", conv_spec(1, c, 10, 5));
    let gn_param = params.len();
    params.push(("gn0.gamma".into(), vec![c]));
    params.push(("gn0.beta".into(), vec![c]));
    steps.push(Step::GroupNorm { groups: c, param: gn_param });
    steps.push(Step::Gelu);
    for i in 1..=4 {
        add_conv(&mut steps, &mut params, &format!("conv{i}"), conv_spec(c, c, 3, 2));
        steps.push(Step::Gelu);
    }
    for i in 5..=6 {
        add_conv(&mut steps, &mut params, &format!("conv{i}"), conv_spec(c, c, 2, 2));
        steps.push(Step::Gelu);
    }

    // Per-step linear behind a layer norm; its output feeds the residual.
    let ln0 = params.len();
    params.push(("ln0.gamma".into(), vec![c]));
    params.push(("ln0.beta".into(), vec![c]));
    steps.push(Step::LayerNorm { param: ln0 });
    add_conv(&mut steps, &mut params, "linear0", conv_spec(c, c, 1, 1));
    steps.push(Step::StashResidual);

    // Big-kernel depthwise conv over the 25-step map. Padding 32/31 keeps
    // the length at 25; the table's output column fixes the shape.
    let big = ConvSpec { c_in: c, c_out: c, kernel: 64, stride: 1, pad_left: 32, pad_right: 31, groups: c };
    add_conv(&mut steps, &mut params, "conv7", big);
    steps.push(Step::Gelu);
    steps.push(Step::AddResidual);

    // Tail: 25 -> 12 -> 5 -> 2 -> 1.
    let ln1 = params.len();
    params.push(("ln1.gamma".into(), vec![c]));
    params.push(("ln1.beta".into(), vec![c]));
    steps.push(Step::LayerNorm { param: ln1 });
    for i in 8..=10 {
        add_conv(&mut steps, &mut params, &format!("conv{i}"), conv_spec(c, c, 3, 2));
        steps.push(Step::Gelu);
    }
    add_conv(&mut steps, &mut params, "conv11", conv_spec(c, c, 2, 2));
    steps.push(Step::Gelu);

    // Head: C -> 150 -> 150 -> 78, tanh.
    let add_fc = |steps: &mut Vec<Step>, params: &mut Vec<(String, Vec<usize>)>,
                      name: &str, m: usize, n: usize| {
        let param = params.len();
        params.push((format!("{name}.weight"), vec![m, n]));
        params.push((format!("{name}.bias"), vec![m]));
        steps.push(Step::Fc { m, n, param });
    };
    add_fc(&mut steps, &mut params, "fc0", HEAD_WIDTH, c);
    steps.push(Step::Gelu);
    steps.push(Step::Tap(TapSlot::F1));
    add_fc(&mut steps, &mut params, "fc1", HEAD_WIDTH, HEAD_WIDTH);
    steps.push(Step::Gelu);
    steps.push(Step::Tap(TapSlot::F2));
    add_fc(&mut steps, &mut params, "fc2", RIG_DIM, HEAD_WIDTH);
    steps.push(Step::Tap(TapSlot::F3));
    steps.push(Step::Tanh);

    (steps, params)
}

/// Build the network with Kaiming-uniform (fan-in) weights, zero biases,
/// and unit norm scales, all drawn deterministically from `config.seed`.
pub fn build_student(config: StudentConfig) -> StudentNet {
    let (steps, descriptors) = build_plan(config.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = descriptors
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name.ends_with(".gamma") {
                vec![1.0f32; n]
            } else {
                vec![0.0f32; n]
            };
            NamedParam { name, tensor: Tensor::new(shape, data).expect("finite init") }
        })
        .collect();
    StudentNet { config, steps, params }
}

impl StudentNet {
    pub fn config(&self) -> StudentConfig {
        self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    /// Single-writer access for the trainer.
    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub(crate) fn from_parts(config: StudentConfig, params: Vec<NamedParam>) -> Self {
        let (steps, _) = build_plan(config.channels);
        StudentNet { config, steps, params }
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Expected output shape after every major stage, `(len, channels)` for
    /// maps and `(1, width)` for head vectors.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        let c = self.config.channels;
        let mut chain = vec![(WINDOW_LEN, 1)];
        let mut l = WINDOW_LEN;
        for step in &self.steps {
            match step {
                Step::Conv { spec, .. } => {
                    l = spec.output_len(l);
                    chain.push((l, spec.c_out));
                }
                Step::Fc { m, .. } => chain.push((1, *m)),
                Step::Tanh => chain.push((1, RIG_DIM)),
                _ => {}
            }
        }
        debug_assert_eq!(chain.last(), Some(&(1usize, RIG_DIM)));
        let _ = c;
        chain
    }

    pub fn forward(&self, window: &AudioWindow) -> Result<RigFrame, StudentError> {
        Ok(self.run(window.samples(), false)?.0)
    }

    pub fn forward_with_taps(&self, window: &AudioWindow) -> Result<(RigFrame, FeatureTaps), StudentError> {
        let (frame, taps) = self.run(window.samples(), true)?;
        Ok((frame, taps.expect("taps requested")))
    }

    /// Forward on a raw 8192-sample slice (the streaming engine assembles
    /// windows itself).
    pub fn forward_samples(&self, samples: &[f32]) -> Result<RigFrame, StudentError> {
        Ok(self.run(samples, false)?.0)
    }

    pub fn forward_samples_with_taps(&self, samples: &[f32]) -> Result<(RigFrame, FeatureTaps), StudentError> {
        let (frame, taps) = self.run(samples, true)?;
        Ok((frame, taps.expect("taps requested")))
    }

    fn run(&self, samples: &[f32], want_taps: bool) -> Result<(RigFrame, Option<FeatureTaps>), StudentError> {
        if samples.len() != WINDOW_LEN {
            return Err(StudentError::WrongWindowLength {
                expected: WINDOW_LEN,
                actual: samples.len(),
            });
        }
        // Megabyte-scale buffers are recycled across frames; fresh
        // allocations at these sizes go through mmap and the page faults
        // dominate the per-frame budget.
        let mut cur = scratch::take(WINDOW_LEN);
        cur.copy_from_slice(samples);
        let mut l = WINDOW_LEN;
        let mut c = 1usize;
        let mut residual: Option<Vec<f32>> = None;
        let mut f1 = None;
        let mut f2 = None;
        let mut f3 = None;

        let mut si = 0;
        while si < self.steps.len() {
            let step = &self.steps[si];
            si += 1;
            match step {
                Step::Conv { spec, param } => {
                    let w = self.params[*param].tensor.data();
                    let b = self.params[*param + 1].tensor.data();
                    let l_out = spec.output_len(l);
                    let mut out = scratch::take(l_out * spec.c_out);
                    // Fuse a directly following GELU into the conv blocks.
                    if matches!(self.steps.get(si), Some(Step::Gelu)) {
                        kernels::conv1d_forward_gelu_into(&cur, l, spec, w, b, &mut out);
                        si += 1;
                    } else {
                        kernels::conv1d_forward_into(&cur, l, spec, w, b, &mut out);
                    }
                    scratch::give(std::mem::replace(&mut cur, out));
                    l = l_out;
                    c = spec.c_out;
                }
                Step::GroupNorm { groups, param } => {
                    let gamma = self.params[*param].tensor.data();
                    let beta = self.params[*param + 1].tensor.data();
                    let mut out = scratch::take(cur.len());
                    kernels::group_norm_forward_into(&cur, l, c, *groups, NORM_EPS, gamma, beta, &mut out);
                    scratch::give(std::mem::replace(&mut cur, out));
                }
                Step::LayerNorm { param } => {
                    let gamma = self.params[*param].tensor.data();
                    let beta = self.params[*param + 1].tensor.data();
                    let mut out = scratch::take(cur.len());
                    kernels::layer_norm_forward_into(&cur, l, c, NORM_EPS, gamma, beta, &mut out);
                    scratch::give(std::mem::replace(&mut cur, out));
                }
                Step::Gelu => kernels::gelu_inplace(&mut cur),
                Step::StashResidual => {
                    let mut r = scratch::take(cur.len());
                    r.copy_from_slice(&cur);
                    residual = Some(r);
                }
                Step::AddResidual => {
                    let r = residual.take().expect("residual stashed by the plan");
                    for (v, rv) in cur.iter_mut().zip(&r) {
                        *v += rv;
                    }
                    scratch::give(r);
                }
                Step::Fc { m, n, param } => {
                    let w = self.params[*param].tensor.data();
                    let b = self.params[*param + 1].tensor.data();
                    let out = kernels::linear_forward(&cur, w, b, *m, *n);
                    scratch::give(std::mem::replace(&mut cur, out));
                    l = 1;
                    c = *m;
                }
                Step::Tanh => {
                    for v in cur.iter_mut() {
                        *v = v.tanh();
                    }
                }
                Step::Tap(slot) => {
                    if want_taps {
                        match slot {
                            TapSlot::F1 => f1 = Some(cur.clone()),
                            TapSlot::F2 => f2 = Some(cur.clone()),
                            TapSlot::F3 => f3 = Some(cur.clone()),
                        }
                    }
                }
            }
        }

        let mut values = [0.0f32; RIG_DIM];
        values.copy_from_slice(&cur);
        scratch::give(cur);
        let taps = want_taps.then(|| FeatureTaps {
            f1: f1.expect("tap f1"),
            f2: f2.expect("tap f2"),
            f3: f3.expect("tap f3"),
        });
        Ok((RigFrame::new(values), taps))
    }

    /// Record the forward pass on an autodiff graph. Parameter leaves come
    /// from [`StudentNet::lift_params`]; returns the post-tanh output node
    /// and the three tap nodes.
    pub fn graph_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        param_ids: &[NodeId],
        window: NodeId,
    ) -> Result<(NodeId, [NodeId; 3]), GraphError> {
        let mut cur = window;
        let mut residual = None;
        let mut taps = [None; 3];
        for step in &self.steps {
            match step {
                Step::Conv { spec, param } => {
                    cur = g.conv1d(cur, param_ids[*param], param_ids[*param + 1], *spec)?;
                }
                Step::GroupNorm { groups, param } => {
                    cur = g.group_norm(cur, param_ids[*param], param_ids[*param + 1], *groups, NORM_EPS)?;
                }
                Step::LayerNorm { param } => {
                    cur = g.layer_norm(cur, param_ids[*param], param_ids[*param + 1], NORM_EPS)?;
                }
                Step::Gelu => cur = g.gelu(cur)?,
                Step::StashResidual => residual = Some(cur),
                Step::AddResidual => {
                    cur = g.add(cur, residual.take().expect("residual stashed"))?;
                }
                Step::Fc { param, .. } => {
                    cur = g.linear(cur, param_ids[*param], param_ids[*param + 1])?;
                }
                Step::Tanh => cur = g.tanh(cur)?,
                Step::Tap(slot) => {
                    taps[match slot {
                        TapSlot::F1 => 0,
                        TapSlot::F2 => 1,
                        TapSlot::F3 => 2,
                    }] = Some(cur);
                }
            }
        }
        Ok((cur, taps.map(|t| t.expect("all taps visited"))))
    }

    /// Insert every parameter as a graph leaf (cast to the graph's scalar
    /// type), in parameter order.
    pub fn lift_params<T: Real>(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.tensor.cast())).collect()
    }

    /// Window leaf in the `[len, 1]` layout the first conv expects.
    pub fn lift_window<T: Real>(g: &mut Graph<T>, samples: &[f32]) -> NodeId {
        let data = samples.iter().map(|&v| T::from_f64(v as f64)).collect();
        g.leaf(Tensor::new(vec![samples.len(), 1], data).expect("finite window"))
    }

    /// Analytic parameter, multiply-accumulate, and peak-memory accounting.
    pub fn count_resources(&self) -> ResourceReport {
        let param_count: usize = self.params.iter().map(|p| p.tensor.numel()).sum();

        let mut mac_count = 0usize;
        let mut l = WINDOW_LEN;
        // Live activation accounting mirrors the fast path: convs, norms and
        // head layers write fresh buffers, activations run in place, the
        // residual source stays live from stash to add.
        let mut cur_elems = WINDOW_LEN;
        let mut stash_elems = 0usize;
        let mut peak_elems = cur_elems;
        let bump = |live: usize, peak: &mut usize| {
            if live > *peak {
                *peak = live;
            }
        };

        for step in &self.steps {
            match step {
                Step::Conv { spec, .. } => {
                    let l_out = spec.output_len(l);
                    mac_count += conv_macs(spec, l_out);
                    let out_elems = l_out * spec.c_out;
                    bump(cur_elems + out_elems + stash_elems, &mut peak_elems);
                    cur_elems = out_elems;
                    l = l_out;
                }
                Step::GroupNorm { .. } | Step::LayerNorm { .. } => {
                    bump(cur_elems * 2 + stash_elems, &mut peak_elems);
                }
                Step::Gelu | Step::Tanh | Step::Tap(_) => {}
                Step::StashResidual => {
                    stash_elems = cur_elems;
                    bump(cur_elems + stash_elems, &mut peak_elems);
                }
                Step::AddResidual => stash_elems = 0,
                Step::Fc { m, n, .. } => {
                    mac_count += m * n;
                    bump(cur_elems + m + stash_elems, &mut peak_elems);
                    cur_elems = *m;
                    l = 1;
                }
            }
        }

        ResourceReport {
            param_count,
            mac_count,
            peak_memory_bytes: 4 * (param_count + peak_elems),
        }
    }
}

/// Multiply-accumulates of one conv layer: `c_out * (c_in/groups) * k * l_out`.
pub fn conv_macs(spec: &ConvSpec, l_out: usize) -> usize {
    spec.c_out * (spec.c_in / spec.groups) * spec.kernel * l_out
}

/// Per-thread recycling of feature-map buffers for the inference path.
mod scratch {
    use std::cell::RefCell;

    const MAX_POOLED: usize = 8;

    thread_local! {
        static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
    }

    pub fn take(n: usize) -> Vec<f32> {
        let reused = POOL.with(|p| p.borrow_mut().pop());
        match reused {
            Some(mut v) => {
                v.clear();
                v.resize(n, 0.0);
                v
            }
            None => vec![0.0; n],
        }
    }

    pub fn give(v: Vec<f32>) {
        if v.capacity() == 0 {
            return;
        }
        POOL.with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < MAX_POOLED {
                p.push(v);
            }
        });
    }
}
