//! Subcommand implementations over the library crate.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;

use rigdistill::audio::load_wav;
use rigdistill::autodiff::gradcheck;
use rigdistill::checkpoint::{load_checkpoint, save_checkpoint};
use rigdistill::metrics::{evaluate, EvalItem, LipGeometry, PhonemeIntervals};
use rigdistill::stream::{Poll, StreamEngine, StreamMode};
use rigdistill::student::{build_student, StudentConfig, StudentNet};
use rigdistill::teacher::{generate_dataset, load_labels, save_labels, PseudoLabelDataset, SyntheticTeacher};
use rigdistill::trainer::{
    finetune, train_heterogeneous, train_hybrid, TrainConfig, TrainMode, TrainReport,
};

use crate::manifest::RunManifest;
use crate::Cmd;

pub enum CliError {
    Validation(String),
    Runtime(String),
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// Training settings as a JSON document; every field is optional and CLI
/// flags override file values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    batch_frames: Option<usize>,
    subset_count: Option<usize>,
    mode: Option<String>,
    alpha_rec: Option<f64>,
    alpha_vel: Option<f64>,
    alpha_feat: Option<f64>,
    seed: Option<u64>,
    channels: Option<usize>,
    future_ms: Option<u32>,
}

struct Resolved {
    train: TrainConfig,
    channels: usize,
    future_ms: u32,
}

#[allow(clippy::too_many_arguments)]
fn resolve_config(
    config_path: Option<&Path>,
    mode: TrainMode,
    seed: Option<u64>,
    channels: Option<usize>,
    future_ms: Option<u32>,
    epochs: Option<usize>,
) -> Result<Resolved, CliError> {
    let file: FileConfig = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| validation(format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };

    if let Some(m) = &file.mode {
        let expected = match mode {
            TrainMode::Heterogeneous => "heterogeneous",
            TrainMode::Hybrid => "hybrid",
            TrainMode::Finetune => "finetune",
        };
        if m != expected {
            return Err(validation(format!(
                "config mode {m:?} does not match the {expected} subcommand"
            )));
        }
    }

    let mut train = match mode {
        TrainMode::Heterogeneous => TrainConfig::heterogeneous(2, 0),
        TrainMode::Hybrid => TrainConfig::hybrid(2, 0),
        TrainMode::Finetune => TrainConfig::finetune(10, 0),
    };
    if let Some(v) = file.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = file.epochs {
        train.epochs = v;
    }
    if let Some(v) = file.batch_frames {
        train.batch_frames = v;
    }
    if let Some(v) = file.subset_count {
        train.subset_count = v;
    }
    let mut weights = train.weights;
    if let Some(v) = file.alpha_rec {
        weights.rec = v;
    }
    if let Some(v) = file.alpha_vel {
        weights.vel = v;
    }
    if let Some(v) = file.alpha_feat {
        weights.feat = v;
    }
    if !weights.validate() {
        return Err(validation("loss weights must be non-negative"));
    }
    train.weights = weights;
    if let Some(v) = file.seed {
        train.seed = v;
    }
    if let Some(v) = seed {
        train.seed = v;
    }
    if let Some(v) = epochs {
        train.epochs = v;
    }
    if train.learning_rate < 0.0 {
        return Err(validation(format!("learning_rate must be non-negative, got {}", train.learning_rate)));
    }

    let channels = channels.or(file.channels).unwrap_or(64);
    let future_ms = future_ms.or(file.future_ms).unwrap_or(256);
    if channels == 0 {
        return Err(validation("channels must be at least 1"));
    }
    if future_ms > 512 {
        return Err(validation(format!("future-ms {future_ms} exceeds the 512 ms window")));
    }
    Ok(Resolved { train, channels, future_ms })
}

fn resolved_json(r: &Resolved) -> serde_json::Value {
    json!({
        "learning_rate": r.train.learning_rate,
        "epochs": r.train.epochs,
        "batch_frames": r.train.batch_frames,
        "subset_count": r.train.subset_count,
        "mode": match r.train.mode {
            TrainMode::Heterogeneous => "heterogeneous",
            TrainMode::Hybrid => "hybrid",
            TrainMode::Finetune => "finetune",
        },
        "alpha_rec": r.train.weights.rec,
        "alpha_vel": r.train.weights.vel,
        "alpha_feat": r.train.weights.feat,
        "seed": r.train.seed,
        "channels": r.channels,
        "future_ms": r.future_ms,
    })
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(validation(format!("{} is not a directory", dir.display())));
    }
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(validation(format!("no wav files in {}", dir.display())));
    }
    Ok(wavs)
}

fn load_dataset(labels: &Path, corpus: &Path) -> Result<PseudoLabelDataset, CliError> {
    if !labels.is_file() {
        return Err(validation(format!("label file {} does not exist", labels.display())));
    }
    if !corpus.is_dir() {
        return Err(validation(format!("corpus {} is not a directory", corpus.display())));
    }
    load_labels(labels, corpus).map_err(runtime)
}

fn write_train_outputs(
    report: &TrainReport,
    student: &StudentNet,
    out: &Path,
) -> Result<PathBuf, CliError> {
    save_checkpoint(student, out).map_err(runtime)?;
    let log_path = out.with_extension("log.csv");
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(runtime)?;
    std::fs::write(&log_path, buf).map_err(runtime)?;
    Ok(log_path)
}

pub fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Pseudolabel { corpus, seed, out } => {
            let wavs = list_wavs(&corpus)?;
            let tracks: Result<Vec<(String, _)>, CliError> = wavs
                .iter()
                .map(|p| {
                    let name = p.file_name().unwrap().to_string_lossy().into_owned();
                    load_wav(p)
                        .map(|t| (name, t))
                        .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
                })
                .collect();
            let teacher = SyntheticTeacher::new(seed);
            let dataset = generate_dataset(&tracks?, &teacher).map_err(runtime)?;
            save_labels(&dataset, &out).map_err(runtime)?;
            RunManifest::new("pseudolabel", seed)
                .input("corpus", &corpus)
                .output(&out)
                .resolved(json!({ "seed": seed, "tracks": dataset.items.len() }))
                .write_next_to(&out)
                .map_err(runtime)?;
            println!("wrote {} ({} tracks)", out.display(), dataset.items.len());
            Ok(())
        }

        Cmd::Distill { labels, corpus, config, seed, channels, future_ms, epochs, out } => {
            let resolved = resolve_config(
                config.as_deref(),
                TrainMode::Heterogeneous,
                seed,
                channels,
                future_ms,
                epochs,
            )?;
            let dataset = load_dataset(&labels, &corpus)?;
            let cfg = StudentConfig::new(resolved.channels, resolved.future_ms, resolved.train.seed)
                .map_err(|e| validation(e.to_string()))?;
            let mut student = build_student(cfg);
            let report = train_heterogeneous(&dataset, &mut student, &resolved.train).map_err(runtime)?;
            let log = write_train_outputs(&report, &student, &out)?;
            RunManifest::new("distill", resolved.train.seed)
                .input("labels", &labels)
                .input("corpus", &corpus)
                .output(&out)
                .output(&log)
                .resolved(resolved_json(&resolved))
                .write_next_to(&out)
                .map_err(runtime)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Hybrid { labels, corpus, s0, config, seed, channels, future_ms, epochs, out } => {
            if !s0.is_file() {
                return Err(validation(format!("teacher checkpoint {} does not exist", s0.display())));
            }
            let resolved =
                resolve_config(config.as_deref(), TrainMode::Hybrid, seed, channels, future_ms, epochs)?;
            let dataset = load_dataset(&labels, &corpus)?;
            let intermediate = load_checkpoint(&s0).map_err(runtime)?;
            let cfg = StudentConfig::new(resolved.channels, resolved.future_ms, resolved.train.seed)
                .map_err(|e| validation(e.to_string()))?;
            let mut student = build_student(cfg);
            let report =
                train_hybrid(&dataset, &intermediate, &mut student, &resolved.train).map_err(runtime)?;
            let log = write_train_outputs(&report, &student, &out)?;
            RunManifest::new("hybrid", resolved.train.seed)
                .input("labels", &labels)
                .input("corpus", &corpus)
                .input("s0", &s0)
                .output(&out)
                .output(&log)
                .resolved(resolved_json(&resolved))
                .write_next_to(&out)
                .map_err(runtime)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Finetune { labels, corpus, checkpoint, config, seed, epochs, out } => {
            if !checkpoint.is_file() {
                return Err(validation(format!("checkpoint {} does not exist", checkpoint.display())));
            }
            let mut student = load_checkpoint(&checkpoint).map_err(runtime)?;
            let resolved = resolve_config(
                config.as_deref(),
                TrainMode::Finetune,
                seed,
                Some(student.config().channels),
                Some(student.config().future_ms),
                epochs,
            )?;
            let dataset = load_dataset(&labels, &corpus)?;
            let report = finetune(&dataset, &mut student, &resolved.train).map_err(runtime)?;
            let log = write_train_outputs(&report, &student, &out)?;
            RunManifest::new("finetune", resolved.train.seed)
                .input("labels", &labels)
                .input("corpus", &corpus)
                .input("checkpoint", &checkpoint)
                .output(&out)
                .output(&log)
                .resolved(resolved_json(&resolved))
                .write_next_to(&out)
                .map_err(runtime)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Eval { checkpoint, corpus, labels, intervals, geometry, threshold, tolerance_frames, out } => {
            // Enumerate every missing artifact before any compute.
            let mut missing = Vec::new();
            for (name, p) in [("checkpoint", &checkpoint), ("labels", &labels), ("geometry", &geometry)] {
                if !p.is_file() {
                    missing.push(format!("{name}: {}", p.display()));
                }
            }
            if !corpus.is_dir() {
                missing.push(format!("corpus: {}", corpus.display()));
            }
            if !intervals.is_dir() {
                missing.push(format!("intervals: {}", intervals.display()));
            }
            if !missing.is_empty() {
                return Err(validation(format!("missing artifacts: {}", missing.join("; "))));
            }
            let net = load_checkpoint(&checkpoint).map_err(runtime)?;
            let dataset = load_dataset(&labels, &corpus)?;
            let geom = LipGeometry::load(&geometry).map_err(runtime)?;

            let mut items = Vec::new();
            let mut missing_tsv = Vec::new();
            for item in &dataset.items {
                let stem = Path::new(&item.track_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| item.track_path.clone());
                let tsv = intervals.join(format!("{stem}.tsv"));
                if !tsv.is_file() {
                    missing_tsv.push(tsv.display().to_string());
                    continue;
                }
                let iv = PhonemeIntervals::load_tsv(&tsv).map_err(runtime)?;
                items.push(EvalItem {
                    name: item.track_path.clone(),
                    track: item.track.clone(),
                    labels: item.frames.clone(),
                    intervals: iv,
                });
            }
            if !missing_tsv.is_empty() {
                return Err(validation(format!("missing interval files: {}", missing_tsv.join("; "))));
            }

            let report = evaluate(&net, &items, &geom, threshold, tolerance_frames).map_err(runtime)?;
            std::fs::write(&out, report.to_csv()).map_err(runtime)?;
            RunManifest::new("eval", 0)
                .input("checkpoint", &checkpoint)
                .input("corpus", &corpus)
                .input("labels", &labels)
                .input("intervals", &intervals)
                .input("geometry", &geometry)
                .output(&out)
                .resolved(json!({
                    "threshold": threshold,
                    "tolerance_frames": tolerance_frames,
                    "channels": report.channels,
                    "future_ms": report.future_ms,
                }))
                .write_next_to(&out)
                .map_err(runtime)?;
            println!("{}", report.to_csv().trim_end());
            Ok(())
        }

        Cmd::Account { channels, future_ms, out } => {
            let cfg = StudentConfig::new(channels, future_ms, 0).map_err(|e| validation(e.to_string()))?;
            let net = build_student(cfg);
            let r = net.count_resources();
            let text = format!(
                "channels: {channels}\nfuture_ms: {future_ms}\nparam_count: {}\nmac_count: {}\npeak_memory_bytes: {}\n",
                r.param_count, r.mac_count, r.peak_memory_bytes
            );
            print!("{text}");
            if let Some(out) = out {
                std::fs::write(&out, &text).map_err(runtime)?;
                RunManifest::new("account", 0)
                    .output(&out)
                    .resolved(json!({ "channels": channels, "future_ms": future_ms }))
                    .write_next_to(&out)
                    .map_err(runtime)?;
            }
            Ok(())
        }

        Cmd::Gradcheck { seed, size, rounds } => {
            if size == 0 {
                return Err(validation("size must be at least 1"));
            }
            let mut all_pass = true;
            let mut worst: Vec<(&'static str, f64)> = Vec::new();
            for round in 0..rounds {
                for check in gradcheck::op_suite(seed.wrapping_add(round)) {
                    all_pass &= check.pass;
                    match worst.iter_mut().find(|(op, _)| *op == check.op) {
                        Some(slot) => slot.1 = slot.1.max(check.max_rel_err),
                        None => worst.push((check.op, check.max_rel_err)),
                    }
                }
            }
            for (op, err) in &worst {
                println!(
                    "op {op}: max_rel_err {err:.3e} {}",
                    if *err < gradcheck::TOLERANCE { "PASS" } else { "FAIL" }
                );
            }
            let net_err = gradcheck::full_net_max_rel_err(size, seed, 32);
            let net_pass = net_err < gradcheck::TOLERANCE;
            all_pass &= net_pass;
            println!(
                "full network C={size}: max_rel_err {net_err:.3e} {}",
                if net_pass { "PASS" } else { "FAIL" }
            );
            if all_pass {
                println!("gradcheck PASS ({rounds} rounds, tolerance {})", gradcheck::TOLERANCE);
                Ok(())
            } else {
                Err(CliError::Runtime("gradient check failed".into()))
            }
        }

        Cmd::Stream { checkpoint, mode, alphas } => {
            if !checkpoint.is_file() {
                return Err(validation(format!("checkpoint {} does not exist", checkpoint.display())));
            }
            let mode = match mode.as_str() {
                "plain" => {
                    if alphas.is_some() {
                        return Err(validation("--alphas only applies to ensemble mode"));
                    }
                    StreamMode::Plain
                }
                "ensemble" => {
                    let alphas = match alphas {
                        None => [1.0 / 3.0; 3],
                        Some(s) => parse_alphas(&s)?,
                    };
                    StreamMode::Ensemble { alphas }
                }
                other => return Err(validation(format!("unknown mode {other:?}, expected plain|ensemble"))),
            };
            let net = load_checkpoint(&checkpoint).map_err(runtime)?;
            let mut engine = StreamEngine::new(Arc::new(net), mode).map_err(|e| validation(e.to_string()))?;

            let stdin = std::io::stdin();
            let mut reader = stdin.lock();
            let stdout = std::io::stdout();
            let mut writer = BufWriter::new(stdout.lock());
            let mut frame_index = 0usize;
            let mut carry: Vec<u8> = Vec::new();
            let mut chunk = [0u8; 8192];
            loop {
                let n = reader.read(&mut chunk).map_err(runtime)?;
                if n == 0 {
                    break;
                }
                carry.extend_from_slice(&chunk[..n]);
                let full = carry.len() / 2 * 2;
                let samples: Vec<f32> = carry[..full]
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                    .collect();
                carry.drain(..full);
                let mut offset = 0;
                while offset < samples.len() {
                    offset += engine.push_audio(&samples[offset..]).map_err(runtime)?;
                    emit_frames(&mut engine, &mut writer, &mut frame_index)?;
                }
            }
            emit_frames(&mut engine, &mut writer, &mut frame_index)?;
            writer.flush().map_err(runtime)?;
            Ok(())
        }
    }
}

fn emit_frames(
    engine: &mut StreamEngine,
    writer: &mut impl Write,
    frame_index: &mut usize,
) -> Result<(), CliError> {
    loop {
        match engine.next_frame().map_err(runtime)? {
            Poll::NotReady => return Ok(()),
            Poll::Ready(frame) => {
                write!(writer, "{frame_index}").map_err(runtime)?;
                for v in frame.as_slice() {
                    write!(writer, ",{v}").map_err(runtime)?;
                }
                writeln!(writer).map_err(runtime)?;
                *frame_index += 1;
            }
        }
    }
}

fn parse_alphas(s: &str) -> Result<[f32; 3], CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(validation(format!("--alphas expects a,b,c, got {s:?}")));
    }
    let mut out = [0.0f32; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|e| validation(format!("bad alpha {p:?}: {e}")))?;
    }
    Ok(out)
}
