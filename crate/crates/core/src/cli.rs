//! Command-line surface of the `bivm` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backend::Part;
use crate::bench;
use crate::error::{Error, Result};
use crate::frames;
use crate::info;
use crate::metrics;
use crate::model::{checkpoint, profile, MaskMode, Model, ModelConfig};
use crate::synth::{self, SynthConfig};
use crate::train::{self, StagePlan, Teacher};
use crate::verify::{self, Suite};

/// Exit status for a run that completed but failed a check.
pub const EXIT_FAILED: i32 = 1;
/// Exit status for malformed arguments.
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "bivm", version, about = "1-bit convolution kernels and a sparse binarized video-matting network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Matte a directory of frames.
    Infer {
        /// Checkpoint file, or a preset name / TOML config for fresh weights.
        #[arg(long)]
        model: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the upsampled binary masks.
        #[arg(long)]
        dump_mask: bool,
        /// Evaluate the sparse decoder with all-ones masks.
        #[arg(long)]
        dense: bool,
    },
    /// Parameter storage and FLOPs of a configuration.
    Profile {
        #[arg(long, default_value = "bivm")]
        model: String,
        /// Frame size as HxW.
        #[arg(long, default_value = "288x512", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Runs one training stage on a synthetic dataset.
    TrainToy {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Starting checkpoint, or a preset name / TOML config.
        #[arg(long, default_value = "toy")]
        model: String,
        /// Where to write the trained checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the stage's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Full-precision teacher checkpoint for distillation (default: the
        /// student with binarization off).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Deterministic self-checks.
    Verify {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
    },
    /// Packed-vs-float convolution latency.
    Bench {
        #[arg(long, default_value_t = 30)]
        runs: usize,
        /// Comma-separated worker counts.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        threads: Vec<usize>,
        /// CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Information-plane trajectory of a binarized and a full-precision model.
    InfoPlane {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "toy")]
        model: String,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = info::DEFAULT_BINS)]
        bins: usize,
        /// Output directory for `binary.csv` and `float.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a synthetic composite dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 15)]
        frames: usize,
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Matting metrics of a model on a dataset.
    Evaluate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad dimension `{v}`"));
    Ok((p(h)?, p(w)?))
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A checkpoint path, or a config (preset or TOML) with seed-0 weights.
pub fn load_model(spec: &str) -> Result<Model> {
    let p = Path::new(spec);
    if p.is_file() && std::fs::read(p)?.starts_with(checkpoint::MAGIC) {
        return checkpoint::load(p);
    }
    Model::new(ModelConfig::load(spec)?, 0)
}

/// Same architecture with every binarized part switched to full precision.
pub fn float_variant(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.name = format!("{}-fp", c.name);
    c.encoder.binary = false;
    c.decoder.binary = false;
    c.decoder.gru_binary = false;
    c
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Infer { model, input, out: dir, dump_mask, dense } => {
            let m = load_model(&model)?;
            let clip = frames::read_clip(&input)?;
            let r = m.infer(&clip, if dense { MaskMode::Full } else { MaskMode::Computed })?;
            for (sub, t) in [("alpha", &r.alpha), ("fgr", &r.fgr)] {
                let d = dir.join(sub);
                std::fs::create_dir_all(&d)?;
                for i in 0..t.shape().n {
                    frames::write_png(&d.join(frame_name(i)), &t.slice_batch(i, 1)?)?;
                }
            }
            writeln!(out, "{} frames -> {}", clip.shape().n, dir.display())?;
            if dump_mask {
                for (k, mask) in &r.masks {
                    let d = dir.join(format!("mask_x{k}"));
                    std::fs::create_dir_all(&d)?;
                    let t = mask.to_dense();
                    for i in 0..mask.n {
                        frames::write_png(&d.join(frame_name(i)), &t.slice_batch(i, 1)?)?;
                    }
                    writeln!(out, "mask x{k}: {}x{} density {:.4}", mask.h, mask.w, mask.density())?;
                }
                if r.masks.is_empty() {
                    writeln!(out, "model has no sparse decoder; no masks written")?;
                }
            }
            Ok(true)
        }
        Command::Profile { model, size: (h, w) } => {
            let cfg = load_model(&model)?.cfg;
            let p = profile(&cfg, h, w)?;
            writeln!(out, "model {} at {h}x{w} (HxW)", cfg.name)?;
            writeln!(out, "{:<9} {:>10} {:>7} {:>10} {:>7}", "part", "GFLOPs", "share", "MB", "share")?;
            for part in Part::ALL {
                writeln!(
                    out,
                    "{:<9} {:>10.4} {:>6.1}% {:>10.4} {:>6.1}%",
                    part.name(),
                    p.flops.get(&part).copied().unwrap_or(0.0) / 1e9,
                    100.0 * p.flop_share(part),
                    p.bytes.get(&part).copied().unwrap_or(0.0) / (1024.0 * 1024.0),
                    100.0 * p.byte_share(part),
                )?;
            }
            writeln!(out, "{:<9} {:>10.4} {:>7} {:>10.4}", "total", p.gflops(), "", p.params_mb())?;
            writeln!(out, "binary MACs {:.4e}, float MACs {:.4e}, mask density {:.2}", p.binary_macs, p.float_macs, p.density)?;
            Ok(true)
        }
        Command::TrainToy { stage, data, model, out: ckpt, log, steps, teacher, seed } => {
            let mut m = load_model(&model)?;
            let clips = synth::load_dataset(&data)?;
            let mut plan = StagePlan::for_stage(stage as usize)?;
            if let Some(s) = steps {
                plan = plan.with_steps(s);
            }
            let teacher = match teacher {
                Some(p) => Teacher::Model(checkpoint::load(p)?),
                None => Teacher::FloatMode,
            };
            let mad0 = train::dataset_mad(&m, &clips)?;
            let tlog = train::run_stage(&mut m, &plan, &clips, seed, &teacher)?;
            let mad1 = train::dataset_mad(&m, &clips)?;
            let (first, last) = match (tlog.rows.first(), tlog.rows.last()) {
                (Some(a), Some(b)) => (a.loss.matting(), b.loss.matting()),
                _ => (f64::NAN, f64::NAN),
            };
            writeln!(out, "stage {stage}: {} steps, L^M {first:.5} -> {last:.5}, MAD {mad0:.5} -> {mad1:.5}, tau* {:.5}", plan.steps, tlog.tau_star)?;
            if let Some(p) = log {
                tlog.save(&p)?;
            }
            if let Some(p) = ckpt {
                checkpoint::save(&m, &p)?;
                writeln!(out, "checkpoint -> {}", p.display())?;
            }
            Ok(true)
        }
        Command::Verify { suite } => {
            let results = verify::run(suite)?;
            for r in &results {
                writeln!(out, "{r}")?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            writeln!(out, "{} checks, {failed} failed", results.len())?;
            Ok(failed == 0)
        }
        Command::Bench { runs, threads, out: dest, seed } => {
            let cap = thread_cap();
            let threads: Vec<usize> = threads.into_iter().map(|t| cap.map_or(t, |c| t.min(c))).collect();
            let rows = bench::bench(&bench::default_cases(), runs, &threads, seed)?;
            match dest {
                Some(p) => bench::write_csv(&rows, std::io::BufWriter::new(std::fs::File::create(p)?))?,
                None => bench::write_csv(&rows, &mut *out)?,
            }
            Ok(true)
        }
        Command::InfoPlane { data, model, epochs, bins, out: dir, seed } => {
            let clips = synth::load_dataset(&data)?;
            let cfg = load_model(&model)?.cfg;
            std::fs::create_dir_all(&dir)?;
            for (name, c) in [("binary", cfg.clone()), ("float", float_variant(&cfg))] {
                let mut m = Model::new(c, seed)?;
                let pts = info::info_plane_log(&mut m, &clips, epochs, bins, seed)?;
                info::save_info_csv(&pts, &dir.join(format!("{name}.csv")))?;
                if let Some(p) = pts.last() {
                    writeln!(out, "{name}: epoch {} I(X;T) {:.4} I(T;Y) {:.4}", p.epoch, p.i_xt, p.i_ty)?;
                }
            }
            Ok(true)
        }
        Command::Synth { out: dir, clips, frames, size: (h, w), seed } => {
            let ds = synth::synth_dataset(&SynthConfig { clips, frames, h, w, seed })?;
            synth::save_dataset(&dir, &ds)?;
            writeln!(out, "{clips} clips of {frames} frames at {h}x{w} -> {}", dir.display())?;
            Ok(true)
        }
        Command::Evaluate { model, data, out: dest } => {
            let m = load_model(&model)?;
            let clips = synth::load_dataset(&data)?;
            let r = metrics::evaluate_model(&m, &clips)?;
            match dest {
                Some(p) => r.write_csv(std::io::BufWriter::new(std::fs::File::create(p)?))?,
                None => r.write_csv(&mut *out)?,
            }
            Ok(true)
        }
    }
}

/// Worker cap from `BIVM_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("BIVM_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}
