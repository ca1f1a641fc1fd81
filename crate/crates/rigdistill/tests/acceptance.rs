//! Acceptance suite. Each criterion runs sequentially and prints one
//! pass/fail line; the process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigdistill::audio::AudioTrack;
use rigdistill::autodiff::gradcheck;
use rigdistill::metrics::{
    jitter, pbm_accuracy, rig_mse, sign_test_p, LipGeometry, PhonemeIntervals, VertexMap,
};
use rigdistill::stream::{ensemble_combine, StreamEngine, StreamMode, SMOOTHING_MS};
use rigdistill::student::{build_student, conv_macs, StudentConfig};
use rigdistill::teacher::{generate_dataset, SyntheticTeacher};
use rigdistill::trainer::{
    loss_feat, loss_rec, loss_vel, predict_track, total_loss, train_heterogeneous, train_hybrid,
    LossWeights, TrainConfig,
};
use rigdistill::{RigFrame, RIG_DIM, SAMPLE_RATE, WINDOW_LEN};

type Outcome = Result<String, String>;

fn main() {
    rigdistill::init_threads_from_env();
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("01 shape-chain", c01_shape_chain),
        ("02 mac-accounting", c02_mac_accounting),
        ("03 memory-accounting", c03_memory_accounting),
        ("04 gradient-correctness", c04_gradients),
        ("05 loss-identities", c05_loss_identities),
        ("08 ensemble-smoothing", c08_ensemble_smoothing),
        ("09 metric-oracles", c09_metric_oracles),
        ("10 streaming-equivalence-throughput", c10_streaming),
        ("11 latency-ledger", c11_latency_ledger),
        ("06 closed-loop-distillation", c06_closed_loop),
        ("07 hybrid-kd-direction", c07_hybrid_direction),
    ];

    let mut failures = 0;
    for (name, f) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let dt = t0.elapsed();
        match outcome {
            Ok(detail) => println!("acceptance {name}: PASS ({detail}) [{dt:.1?}]"),
            Err(reason) => {
                failures += 1;
                println!("acceptance {name}: FAIL ({reason}) [{dt:.1?}]");
            }
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// 1. Table-published output shapes, exactly, for C in {64, 128, 256}.
fn c01_shape_chain() -> Outcome {
    const LENS: [usize; 14] = [8192, 1637, 818, 408, 203, 101, 50, 25, 25, 25, 12, 5, 2, 1];
    for c in [64usize, 128, 256] {
        let net = build_student(StudentConfig::new(c, 256, 0).unwrap());
        let chain = net.shape_chain();
        check(chain.len() == 18, format!("C={c}: {} stages", chain.len()))?;
        for (i, &len) in LENS.iter().enumerate() {
            let want = (len, if i == 0 { 1 } else { c });
            check(chain[i] == want, format!("C={c} stage {i}: {:?} != {:?}", chain[i], want))?;
        }
        let head = [(1, 150), (1, 150), (1, RIG_DIM), (1, RIG_DIM)];
        check(chain[14..] == head, format!("C={c} head: {:?}", &chain[14..]))?;
    }
    Ok("8192->1637->...->1->150->150->78->78 for C in {64,128,256}".into())
}

// 2. Analytic multiply-accumulate counts against the published table.
fn c02_mac_accounting() -> Outcome {
    let mac = |c: usize| build_student(StudentConfig::new(c, 256, 0).unwrap()).count_resources().mac_count as f64;
    let (m256, m128, m64) = (mac(256), mac(128), mac(64));
    check((m256 - 0.33e9).abs() / 0.33e9 <= 0.10, format!("C=256 MACs {m256:.3e}"))?;
    check((m128 - 0.083e9).abs() / 0.083e9 <= 0.15, format!("C=128 MACs {m128:.3e}"))?;
    check((m64 - 0.021e9).abs() / 0.021e9 <= 0.20, format!("C=64 MACs {m64:.3e}"))?;
    let (r1, r2) = (m256 / m128, m128 / m64);
    check((3.8..=4.2).contains(&r1), format!("ratio 256/128 = {r1:.3}"))?;
    check((3.8..=4.2).contains(&r2), format!("ratio 128/64 = {r2:.3}"))?;
    // Definitional single-conv product.
    let spec = rigdistill::autodiff::ConvSpec {
        c_in: 2, c_out: 3, kernel: 2, stride: 1, pad_left: 0, pad_right: 0, groups: 1,
    };
    check(conv_macs(&spec, 5) == 60, "single conv MAC product")?;
    Ok(format!("MACs {m256:.3e}/{m128:.3e}/{m64:.3e}, ratios {r1:.2}/{r2:.2}"))
}

// 3. Peak inference memory at 32-bit precision.
fn c03_memory_accounting() -> Outcome {
    let peak = |c: usize| build_student(StudentConfig::new(c, 256, 0).unwrap()).count_resources();
    let r128 = peak(128);
    let r64 = peak(64);
    check(r128.peak_memory_bytes <= 10 * 1024 * 1024, format!("C=128 peak {}", r128.peak_memory_bytes))?;
    check(r64.peak_memory_bytes <= 5 * 1024 * 1024, format!("C=64 peak {}", r64.peak_memory_bytes))?;
    check(r128.peak_memory_bytes >= 4 * r128.param_count, "peak below parameter bytes")?;
    Ok(format!(
        "C=128 {:.2} MB, C=64 {:.2} MB",
        r128.peak_memory_bytes as f64 / 1048576.0,
        r64.peak_memory_bytes as f64 / 1048576.0
    ))
}

// 4. Finite-difference gradient checks: every op over 100 seeds plus the
// full C=16 network.
fn c04_gradients() -> Outcome {
    let mut worst_op = 0.0f64;
    for seed in 0..100 {
        for checkres in gradcheck::op_suite(seed) {
            worst_op = worst_op.max(checkres.max_rel_err);
            check(
                checkres.pass,
                format!("op {} failed at seed {seed}: {:.3e}", checkres.op, checkres.max_rel_err),
            )?;
        }
    }
    let mut worst_net = 0.0f64;
    for seed in 0..100 {
        let err = gradcheck::full_net_max_rel_err(16, seed, 3);
        worst_net = worst_net.max(err);
        check(err < gradcheck::TOLERANCE, format!("full net failed at seed {seed}: {err:.3e}"))?;
    }
    Ok(format!("ops worst {worst_op:.2e}, full C=16 net worst {worst_net:.2e}, tol 1e-4"))
}

// 5. Loss identities and invariances.
fn c05_loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Weighted-total reduction at alpha_feat = 0.
    let (rec, vel, feat) = (0.37, 1.21, 9.5);
    let w7 = LossWeights { rec: 0.1, vel: 0.9, feat: 0.0 };
    let w4 = LossWeights::heterogeneous();
    check(
        (total_loss(rec, vel, feat, &w7) - total_loss(rec, vel, 0.0, &w4)).abs() < 1e-7,
        "weighted reduction",
    )?;

    // Training-path reduction: hybrid with zero feature weight is
    // byte-identical to plain distillation under the same seed.
    let teacher = SyntheticTeacher::new(5);
    let tracks = vec![("a.wav".to_string(), constant_tone(1.0, 320.0))];
    let ds = generate_dataset(&tracks, &teacher).unwrap();
    let s0 = build_student(StudentConfig::new(4, 256, 2).unwrap());
    let mut cfg = TrainConfig::hybrid(2, 9);
    cfg.weights.feat = 0.0;
    let mut a = build_student(StudentConfig::new(4, 64, 3).unwrap());
    let ra = train_hybrid(&ds, &s0, &mut a, &cfg).unwrap();
    let mut b = build_student(StudentConfig::new(4, 64, 3).unwrap());
    let rb = train_heterogeneous(&ds, &mut b, &cfg).unwrap();
    for (x, y) in ra.steps.iter().zip(&rb.steps) {
        check((x.total - y.total).abs() <= 1e-7 * x.total.abs().max(1.0), "Eq.4/Eq.7 reduction")?;
    }
    for (pa, pb) in a.params().iter().zip(b.params()) {
        check(pa.tensor == pb.tensor, "parameters diverged at alpha_feat = 0")?;
    }

    // Velocity loss: zero for constant sequences; a sequence offset from
    // its target by a per-frame constant has zero velocity loss (dyadic
    // values keep the cancellation exact in float); adding a shared
    // constant to both sides leaves the loss unchanged.
    let c1: Vec<RigFrame> = (0..5).map(|_| RigFrame::zero()).collect();
    check(loss_vel(&c1, &c1).unwrap() == 0.0, "constant velocity loss")?;
    let dyadic = |rng: &mut ChaCha8Rng, n: usize| -> Vec<RigFrame> {
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..RIG_DIM).map(|_| rng.random_range(-40i32..40) as f32 / 64.0).collect();
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect()
    };
    let t = dyadic(&mut rng, 6);
    let offset_pred: Vec<RigFrame> = t
        .iter()
        .map(|f| {
            let v: Vec<f32> = f.as_slice().iter().map(|x| x + 0.25).collect();
            RigFrame::try_from_slice(&v).unwrap()
        })
        .collect();
    check(loss_vel(&offset_pred, &t).unwrap() == 0.0, "constant-offset velocity loss")?;
    let p = dyadic(&mut rng, 6);
    let shift = |fs: &[RigFrame]| -> Vec<RigFrame> {
        fs.iter()
            .map(|f| {
                let v: Vec<f32> = f.as_slice().iter().map(|x| x + 0.125).collect();
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect()
    };
    let base = loss_vel(&p, &t).unwrap();
    let shifted = loss_vel(&shift(&p), &shift(&t)).unwrap();
    check(shifted == base, format!("shared-offset invariance: {shifted} vs {base}"))?;

    // Feature loss is zero for identical taps.
    let net = build_student(StudentConfig::new(4, 256, 7).unwrap());
    let track = constant_tone(1.0, 500.0);
    let w = rigdistill::audio::extract_window(&track, 10, 256).unwrap();
    let (_, taps) = net.forward_with_taps(&w).unwrap();
    check(loss_feat(&taps, &taps) == 0.0, "identical taps")?;
    check(loss_rec(&p, &p).unwrap() == 0.0, "identical rec")?;
    Ok("Eq.4/Eq.7 reduction byte-exact, velocity invariances, zero feature loss".into())
}

// 6. Closed-loop distillation drives the reconstruction loss below 5% of
// its initial value and is deterministic under the seed.
fn c06_closed_loop() -> Outcome {
    let teacher = SyntheticTeacher::new(11);
    let tracks: Vec<(String, AudioTrack)> = (0..3)
        .map(|i| (format!("t{i}.wav"), modulated_audio(2.0, 40 + i as u64)))
        .collect();
    let ds = generate_dataset(&tracks, &teacher).unwrap();

    let cfg = TrainConfig::heterogeneous(200, 77);
    let mut net = build_student(StudentConfig::new(16, 256, 5).unwrap());
    let report = train_heterogeneous(&ds, &mut net, &cfg).unwrap();
    let initial = report.epochs[0].rec;
    let final_rec = report.epochs.last().unwrap().rec;
    check(
        final_rec < 0.05 * initial,
        format!("rec {final_rec:.4} not below 5% of initial {initial:.4}"),
    )?;

    // Determinism: the first epochs replay bit-identically.
    let mut cfg_short = cfg.clone();
    cfg_short.epochs = 8;
    let mut n1 = build_student(StudentConfig::new(16, 256, 5).unwrap());
    let r1 = train_heterogeneous(&ds, &mut n1, &cfg_short).unwrap();
    let mut n2 = build_student(StudentConfig::new(16, 256, 5).unwrap());
    let r2 = train_heterogeneous(&ds, &mut n2, &cfg_short).unwrap();
    check(r1.steps == r2.steps, "step logs diverged under the same seed")?;
    for (x, y) in n1.params().iter().zip(n2.params()) {
        check(x.tensor == y.tensor, "parameters diverged under the same seed")?;
    }
    check(
        report.steps[..r1.steps.len()] == r1.steps[..],
        "short rerun diverged from the long run's prefix",
    )?;
    Ok(format!("rec {initial:.3} -> {final_rec:.4} ({:.2}%)", 100.0 * final_rec / initial))
}

// 7. Predictive feature supervision direction: the d' = 64 student trained
// with the feature loss reaches a rig MSE on held-out audio no worse than
// its alpha_feat = 0 twin, in the median over 5 seeds.
fn c07_hybrid_direction() -> Outcome {
    // Twins share the intermediate teacher, their init, and the batch
    // order; the feature term is the only difference. The training budget
    // is finite (45 epochs) because the supervision's robust effect at
    // desk scale is faster convergence toward the teacher's solution.
    let mut with_feat = Vec::new();
    let mut without = Vec::new();
    let mut wins = 0;
    for seed in 0..5u64 {
        let teacher = SyntheticTeacher::new(100 + seed);
        let train_tracks: Vec<(String, AudioTrack)> = (0..3)
            .map(|i| (format!("t{i}.wav"), modulated_audio(2.0, seed * 10 + i)))
            .collect();
        let held: Vec<AudioTrack> = (0..2).map(|i| modulated_audio(2.5, seed * 10 + 7 + i)).collect();
        let ds = generate_dataset(&train_tracks, &teacher).unwrap();
        let held_labels: Vec<Vec<RigFrame>> = held.iter().map(|t| teacher.label_sequence(t)).collect();

        let mut s0 = build_student(StudentConfig::new(12, 256, 200 + seed).unwrap());
        train_heterogeneous(&ds, &mut s0, &TrainConfig::heterogeneous(140, 300 + seed)).unwrap();

        let run_twin = |feat: f64| {
            let mut student = build_student(StudentConfig::new(12, 64, 400 + seed).unwrap());
            let mut cfg = TrainConfig::hybrid(45, 500 + seed);
            cfg.weights.feat = feat;
            train_hybrid(&ds, &s0, &mut student, &cfg).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for (track, labels) in held.iter().zip(&held_labels) {
                let preds = predict_track(&student, track).unwrap();
                num += rig_mse(&preds, labels).unwrap() * labels.len() as f64;
                den += labels.len() as f64;
            }
            num / den
        };
        let mse_f = run_twin(0.1);
        let mse_p = run_twin(0.0);
        if mse_f <= mse_p {
            wins += 1;
        }
        with_feat.push(mse_f);
        without.push(mse_p);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let mf = median(&mut with_feat);
    let mp = median(&mut without);
    check(
        mf <= mp,
        format!("median with supervision {mf:.5} vs without {mp:.5} ({wins}/5 wins)"),
    )?;
    Ok(format!("median MSE {mf:.5} (with) <= {mp:.5} (without), {wins}/5 seeds"))
}

// 8. Ensemble smoothing reduces jitter on noise-perturbed 60 fps streams
// (sign test over 20 seeds), and the degenerate weights are bit-identical
// to the unsmoothed stream.
fn c08_ensemble_smoothing() -> Outcome {
    let geom = dyadic_geometry(3);
    let mut wins = 0;
    let n_seeds = 20;
    for seed in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed as u64);
        // Smooth base trajectory sampled at 60 fps, i.i.d. noise per
        // sub-prediction.
        let frames_60: Vec<RigFrame> = (0..240)
            .map(|j| {
                let t = j as f64 / 60.0;
                let v: Vec<f32> = (0..RIG_DIM)
                    .map(|i| {
                        let base = 0.55 * ((1.3 * t + i as f64 * 0.21).sin()) as f32;
                        (base + rng.random_range(-0.12..0.12)).clamp(-1.0, 1.0)
                    })
                    .collect();
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect();
        // Rendered at 30 fps: plain takes the on-frame sub-prediction.
        let plain: Vec<RigFrame> = (1..119).map(|k| frames_60[2 * k].clone()).collect();
        let smoothed: Vec<RigFrame> = (1..119)
            .map(|k| {
                ensemble_combine(
                    &frames_60[2 * k - 1],
                    &frames_60[2 * k],
                    &frames_60[2 * k + 1],
                    [1.0 / 3.0; 3],
                )
                .unwrap()
            })
            .collect();
        let jp = jitter(&plain, &geom).unwrap();
        let js = jitter(&smoothed, &geom).unwrap();
        if js < jp {
            wins += 1;
        }
    }
    let p = sign_test_p(wins, n_seeds);
    check(p < 0.05, format!("sign test p = {p:.4} with {wins}/{n_seeds} wins"))?;

    // Degenerate weights reproduce the plain stream bit for bit.
    let net = Arc::new(build_student(StudentConfig::new(4, 64, 31).unwrap()));
    let track = modulated_audio(2.0, 77);
    let run = |mode: StreamMode| {
        let mut eng = StreamEngine::new(Arc::clone(&net), mode).unwrap();
        let mut out = Vec::new();
        let mut fed = 0;
        while fed < track.samples().len() {
            fed += eng.push_audio(&track.samples()[fed..]).unwrap();
            out.extend(eng.drain_ready().unwrap());
        }
        out
    };
    let plain = run(StreamMode::Plain);
    let degenerate = run(StreamMode::Ensemble { alphas: [0.0, 1.0, 0.0] });
    check(!degenerate.is_empty(), "no frames emitted")?;
    for (a, b) in plain.iter().zip(&degenerate) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            check(x.to_bits() == y.to_bits(), "alpha=(0,1,0) diverged from plain")?;
        }
    }
    Ok(format!("sign test p = {p:.2e} ({wins}/{n_seeds}); degenerate weights bit-identical"))
}

// 9. Metric oracles: zero jitter on affine trajectories, saturated
// lip-closure accuracies, and the +-2 frame tolerance rule.
fn c09_metric_oracles() -> Outcome {
    // Dyadic construction keeps every product exact, so the second
    // difference is exactly zero.
    let geom = dyadic_geometry(5);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f32> = (0..RIG_DIM).map(|_| rng.random_range(-64i32..64) as f32 / 256.0).collect();
        let slope: Vec<f32> = (0..RIG_DIM).map(|_| rng.random_range(-8i32..8) as f32 / 4096.0).collect();
        let frames: Vec<RigFrame> = (0..40)
            .map(|t| {
                let v: Vec<f32> = base.iter().zip(&slope).map(|(b, s)| b + s * t as f32).collect();
                RigFrame::try_from_slice(&v).unwrap()
            })
            .collect();
        let j = jitter(&frames, &geom).unwrap();
        check(j == 0.0, format!("affine trajectory jitter {j:.3e} at seed {seed}"))?;
    }

    // Lip-distance dial: distance equals rig[0].
    let mut upper = VertexMap { matrix: vec![0.0; 3 * RIG_DIM], offset: [0.0; 3] };
    upper.matrix[RIG_DIM] = 1.0;
    let dial = LipGeometry {
        upper,
        lower: VertexMap { matrix: vec![0.0; 3 * RIG_DIM], offset: [0.0; 3] },
    };
    let iv = PhonemeIntervals::parse_tsv("0.0\t0.2\tp\n0.5\t0.6\ta\n0.8\t1.0\tm\n").unwrap();
    let rig = |d: f32| {
        let mut v = [0.0f32; RIG_DIM];
        v[0] = d;
        RigFrame::try_from_slice(&v).unwrap()
    };
    let closed: Vec<RigFrame> = (0..31).map(|_| rig(0.0)).collect();
    let open: Vec<RigFrame> = (0..31).map(|_| rig(0.2)).collect();
    check(pbm_accuracy(&closed, &iv, &dial, 0.15, 2).unwrap() == 100.0, "all-closed accuracy")?;
    check(pbm_accuracy(&open, &iv, &dial, 0.15, 2).unwrap() == 0.0, "all-open accuracy")?;

    // A closure two frames away counts through the tolerance window.
    let single = PhonemeIntervals::parse_tsv("0.19\t0.21\tb\n").unwrap();
    let mut frames: Vec<RigFrame> = (0..31).map(|_| rig(0.2)).collect();
    frames[8] = rig(0.1);
    check(pbm_accuracy(&frames, &single, &dial, 0.15, 2).unwrap() == 100.0, "tolerance hit")?;
    check(pbm_accuracy(&frames, &single, &dial, 0.15, 0).unwrap() == 0.0, "zero tolerance miss")?;
    Ok("affine jitter exactly 0; PBM 100%/0%; +-2 frame rule".into())
}

// 10. Streamed outputs are bit-identical to offline inference, and the
// C=256 engine sustains at least 60 single-frame inferences per second.
fn c10_streaming() -> Outcome {
    // Bit-exact equivalence on a small model.
    let net = Arc::new(build_student(StudentConfig::new(8, 256, 3).unwrap()));
    let track = modulated_audio(2.0, 5);
    for mode in [StreamMode::Plain, StreamMode::ensemble_thirds()] {
        let mut eng = StreamEngine::new(Arc::clone(&net), mode).unwrap();
        let mut frames = Vec::new();
        let mut fed = 0;
        while fed < track.samples().len() {
            fed += eng.push_audio(&track.samples()[fed..]).unwrap();
            frames.extend(eng.drain_ready().unwrap());
        }
        check(frames.len() > 30, "too few streamed frames")?;
        for (k, frame) in frames.iter().enumerate() {
            let offline = offline_frame(&net, &track, k, mode)?;
            for (a, b) in frame.as_slice().iter().zip(offline.as_slice()) {
                check(a.to_bits() == b.to_bits(), format!("frame {k} diverged in {mode:?}"))?;
            }
        }
    }

    // Sustained single-frame inference rate at C=256 in a pinned
    // single-thread pool: on a contended host the tail of cross-thread
    // scheduling dominates the mean, so the stable configuration is the
    // honest sustained number.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let fps = pool.install(|| {
        let net = Arc::new(build_student(StudentConfig::new(256, 256, 9).unwrap()));
        let track = modulated_audio(8.0, 13);
        let mut eng = StreamEngine::new(Arc::clone(&net), StreamMode::Plain).unwrap();
        // Warm caches and tables.
        let mut fed = 0;
        let mut warm = 0;
        while warm < 5 && fed < track.samples().len() {
            fed += eng.push_audio(&track.samples()[fed..]).unwrap();
            warm += eng.drain_ready().unwrap().len();
        }
        let t0 = Instant::now();
        let mut frames = 0usize;
        while fed < track.samples().len() {
            fed += eng.push_audio(&track.samples()[fed..]).unwrap();
            frames += eng.drain_ready().unwrap().len();
        }
        frames as f64 / t0.elapsed().as_secs_f64()
    });
    check(fps >= 60.0, format!("sustained {fps:.1} inferences/s < 60"))?;
    Ok(format!("bit-exact streaming in both modes; {fps:.0} inferences/s at C=256"))
}

// 11. Latency ledger arithmetic for the smoothed 64 ms configuration.
fn c11_latency_ledger() -> Outcome {
    let net = Arc::new(build_student(StudentConfig::new(8, 64, 1).unwrap()));
    let mut eng = StreamEngine::new(Arc::clone(&net), StreamMode::ensemble_thirds()).unwrap();
    let track = modulated_audio(5.0, 3);
    let mut fed = 0;
    let mut frames = 0;
    while fed < track.samples().len() {
        fed += eng.push_audio(&track.samples()[fed..]).unwrap();
        frames += eng.drain_ready().unwrap().len();
    }
    check(frames >= 100, format!("only {frames} frames processed"))?;
    let report = eng.latency_report().map_err(|e| e.to_string())?;
    check(report.future_context_ms == 64.0, format!("future {}", report.future_context_ms))?;
    check(report.smoothing_ms == SMOOTHING_MS, format!("smoothing {}", report.smoothing_ms))?;
    let ledger = report.future_context_ms + report.smoothing_ms;
    check((ledger - 80.7).abs() < 1e-9, format!("future+smoothing {ledger}"))?;
    let identity = report.future_context_ms + report.smoothing_ms + report.inference_p95_ms;
    check((report.total_ms - identity).abs() < 1e-12, "total identity")?;

    // Plain d=256 reports its future context unchanged.
    let net256 = Arc::new(build_student(StudentConfig::new(8, 256, 1).unwrap()));
    let mut plain = StreamEngine::new(net256, StreamMode::Plain).unwrap();
    let mut fed = 0;
    while fed < track.samples().len() {
        fed += plain.push_audio(&track.samples()[fed..]).unwrap();
        plain.drain_ready().map_err(|e| e.to_string())?;
    }
    let r2 = plain.latency_report().map_err(|e| e.to_string())?;
    check(r2.future_context_ms == 256.0 && r2.smoothing_ms == 0.0, "plain d=256 ledger")?;
    Ok(format!("future+smoothing = {ledger} ms (64 + 16.7); total identity holds"))
}

// Shared fixtures.

fn constant_tone(seconds: f32, freq: f32) -> AudioTrack {
    let n = (seconds * SAMPLE_RATE as f32) as usize;
    AudioTrack::new(
        (0..n)
            .map(|i| 0.5 * (std::f32::consts::TAU * freq * i as f32 / SAMPLE_RATE as f32).sin())
            .collect(),
    )
    .unwrap()
}

/// Slowly modulated multi-tone audio; band energies drift smoothly so the
/// near future is predictable from the past.
fn modulated_audio(seconds: f32, seed: u64) -> AudioTrack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f32) as usize;
    let tones: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(150.0..2500.0f32),
                rng.random_range(0.15..0.45f32),
                rng.random_range(0.2..0.9f32),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f32 / SAMPLE_RATE as f32;
            let mut v = 0.0f32;
            for &(f, a, er, ep) in &tones {
                let env = 0.5 * (1.0 + (std::f32::consts::TAU * er * t + ep).sin());
                v += a * env * (std::f32::consts::TAU * f * t).sin();
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    AudioTrack::new(samples).unwrap()
}

/// Geometry whose coefficients are small dyadic rationals, so affine rig
/// trajectories map to exactly affine vertex trajectories in f64.
fn dyadic_geometry(seed: u64) -> LipGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = |off: f32| VertexMap {
        matrix: (0..3 * RIG_DIM).map(|_| rng.random_range(-512i32..512) as f32 / 1024.0).collect(),
        offset: [0.0, off, 0.0],
    };
    LipGeometry { upper: map(0.25), lower: map(0.0) }
}

fn offline_frame(
    net: &Arc<rigdistill::student::StudentNet>,
    track: &AudioTrack,
    k: usize,
    mode: StreamMode,
) -> Result<RigFrame, String> {
    use rigdistill::audio::window_start;
    use rigdistill::stream::sample_of_60fps;
    let d = net.config().future_ms;
    let past = (512 - d) as i64 * 16;
    let at = |start: i64| -> Result<RigFrame, String> {
        let mut buf = vec![0.0f32; WINDOW_LEN];
        let s = track.samples();
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = start + i as i64;
            if idx >= 0 && (idx as usize) < s.len() {
                *slot = s[idx as usize];
            }
        }
        net.forward_samples(&buf).map_err(|e| e.to_string())
    };
    match mode {
        StreamMode::Plain => at(window_start(k, d)),
        StreamMode::Ensemble { alphas } => {
            // Sub-predictions sit on the exact 60 fps grid.
            let j = 2 * k as i64;
            let prev = at(sample_of_60fps(j - 1) - past)?;
            let curr = at(sample_of_60fps(j) - past)?;
            let next = at(sample_of_60fps(j + 1) - past)?;
            ensemble_combine(&prev, &curr, &next, alphas).map_err(|e| e.to_string())
        }
    }
}
