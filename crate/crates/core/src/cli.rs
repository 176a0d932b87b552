//! The `mdnet` command line: pretrain, track, eval, synth and gradcheck.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalGrid};
use crate::io;
use crate::model::{MDNet, MDNetConfig};
use crate::synth::{generate_sequence, SyntheticSequenceSpec};
use crate::tensor::gradcheck::{run_suite, OpKind, DEFAULT_TOLERANCE};
use crate::tracker::{Tracker, TrackerConfig};
use crate::trainer::{build_domain_dataset, calibrate, pretrain, PretrainConfig, OFFLINE_SAMPLES};

#[derive(Debug, Parser)]
#[command(name = "mdnet", version, about = "Multi-domain network tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain shared layers on a directory of sequence directories.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: usize,
        /// Channel scale in (0, 1]; 1 is the full-size network.
        #[arg(long, default_value_t = 0.125)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Track one sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for frames with the reported box drawn in.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Precision and success curves of a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic sequence from a key = value spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of the layer kernels.
    Gradcheck {
        /// Comma-separated op names; all differentiable ops by default.
        #[arg(long, value_delimiter = ',')]
        ops: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 2,
        Error::Config(_) => 3,
        Error::Input(_) | Error::Parse { .. } => 4,
        Error::Io(_) | Error::Image(_) => 5,
        Error::Checkpoint(_) | Error::UnsupportedVersion(_) => 6,
        Error::Shape(_) | Error::NonFinite(_) => 7,
        Error::SamplingExhausted(_) => 8,
    }
}

/// Exit code when gradient checks ran but some failed.
pub const GRADCHECK_FAILED: i32 = 1;

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Pretrain {
            data,
            out,
            iters,
            scale,
            seed,
        } => cmd_pretrain(&data, &out, iters, scale, seed),
        Command::Track {
            model,
            seq,
            out,
            overlay,
            seed,
        } => cmd_track(&model, &seq, &out, overlay.as_deref(), seed),
        Command::Eval { results, gt, out } => cmd_eval(&results, &gt, &out),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Gradcheck { ops, shapes, seed } => cmd_gradcheck(ops, shapes, seed),
    }
}

fn cmd_pretrain(data: &Path, out: &Path, iters: usize, scale: f64, seed: u64) -> Result<i32> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(io::GROUNDTRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::input(format!("no sequence directories under {}", data.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut datasets = Vec::with_capacity(dirs.len());
    for (d, dir) in dirs.iter().enumerate() {
        let (frames, gt) = io::load_sequence(dir)?;
        datasets.push(build_domain_dataset(d, frames, gt, &OFFLINE_SAMPLES, &mut rng)?);
    }
    let k = datasets.len();
    let config = MDNetConfig::scaled(k, scale, scale >= 1.0)?;
    let mut net = MDNet::new(config, &mut rng)?;
    calibrate(&mut net, &datasets, &mut rng)?;
    let cfg = PretrainConfig {
        iterations: iters,
        ..PretrainConfig::for_domains(k)
    };
    let trace = pretrain(&mut net, &datasets, &cfg, &mut rng)?;
    io::save_checkpoint(&net, out)?;
    let mut csv = String::from("iteration,domain,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{},{l}\n", i % k));
    }
    let trace_path = out.with_extension("loss.csv");
    fs::write(&trace_path, csv)?;
    println!(
        "pretrained {k} domains for {iters} iterations; final loss {:.4}; wrote {} and {}",
        trace.last().copied().unwrap_or(f32::NAN),
        out.display(),
        trace_path.display()
    );
    Ok(0)
}

fn cmd_track(model: &Path, seq: &Path, out: &Path, overlay: Option<&Path>, seed: u64) -> Result<i32> {
    let net = io::load_checkpoint(model)?;
    let files = io::list_frames(seq)?;
    let gt = io::parse_groundtruth(&seq.join(io::GROUNDTRUTH_FILE))?;
    let first_box = *gt
        .first()
        .ok_or_else(|| Error::input("ground-truth file is empty"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(dir) = overlay {
        fs::create_dir_all(dir)?;
    }
    let mut boxes = Vec::with_capacity(files.len());
    let mut tracker: Option<Tracker> = None;
    for (i, path) in files.iter().enumerate() {
        let frame = io::load_frame(path)?;
        let b = match tracker.as_mut() {
            None => {
                tracker = Some(Tracker::init_first_frame(
                    net.clone(),
                    &frame,
                    &first_box,
                    TrackerConfig::default(),
                    &mut rng,
                )?);
                first_box
            }
            Some(t) => t.step(&frame, i + 1, &mut rng)?.reported,
        };
        if let Some(dir) = overlay {
            io::save_frame(&io::draw_box(&frame, &b, [255, 32, 32]), &dir.join(format!("{:04}.png", i + 1)))?;
        }
        boxes.push(b);
    }
    io::write_results(out, &boxes)?;
    println!("tracked {} frames; wrote {}", boxes.len(), out.display());
    Ok(0)
}

fn cmd_eval(results: &Path, gt: &Path, out: &Path) -> Result<i32> {
    let r = io::parse_groundtruth(results)?;
    let g = io::parse_groundtruth(gt)?;
    let curves = evaluate(&r, &g, &EvalGrid::default())?;
    fs::write(out, curves.to_csv())?;
    println!("{curves}");
    Ok(0)
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<i32> {
    let text = fs::read_to_string(spec_path)?;
    let mut spec = SyntheticSequenceSpec::default();
    for (k, v) in io::parse_key_values(&text, spec_path)? {
        spec.set(&k, &v)?;
    }
    let seq = generate_sequence(&spec)?;
    io::save_sequence(out, &seq.frames, &seq.gt)?;
    println!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(0)
}

fn cmd_gradcheck(ops: Option<Vec<String>>, shapes: usize, seed: u64) -> Result<i32> {
    let kinds = match ops {
        Some(names) => names
            .iter()
            .map(|n| OpKind::parse(n.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => OpKind::DIFFERENTIABLE.to_vec(),
    };
    let reports = run_suite(&kinds, shapes.max(1), seed)?;
    let mut all = true;
    for r in &reports {
        let ok = r.passed(DEFAULT_TOLERANCE);
        all &= ok;
        println!("{} {r}", if ok { "ok  " } else { "FAIL" });
    }
    Ok(if all { 0 } else { GRADCHECK_FAILED })
}
