//! Command-line front end: argument parsing and dispatch to the library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::datagen::{read_png, write_png16, Dataset};
use crate::error::{FanError, Result};
use crate::eval::{normalize_face, EncoderChoice, Protocol};
use crate::exec::Exec;
use crate::gradcheck::{run_suite, Corruption};
use crate::nets::{Checkpoint, Networks};
use crate::objectives::Stage;
use crate::runner::{self, RunDir, TrainOptions};
use crate::trainer::Ablation;

#[derive(Debug, Parser)]
#[command(name = "fan", version, about = "Feature adaptation for low-resolution face recognition")]
pub struct Cli {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the dataset directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Overrides the run directory (relative paths honour FAN_RUN_ROOT).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Runs every per-sample map on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Prints the effective configuration and exits.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Renders the synthetic dataset and its manifest.
    GenData,
    /// Trains one stage in the run directory.
    Train(TrainArgs),
    /// Evaluates a checkpoint under one protocol and writes the report.
    Eval(EvalArgs),
    /// Writes Dec(Enc_L(x), 0) for one input image.
    Normalize(NormalizeArgs),
    /// Finite-difference check of every adjoint at reduced size.
    Gradcheck(GradcheckArgs),
    /// Summarizes the artifacts of the run directory.
    Report,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// One of 1.1, 1.2, 2, finetune.
    #[arg(long)]
    pub stage: Stage,
    /// no-rsa, no-dec, paired-only, unpaired-only or mixed (stage 2 and finetune).
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// Continues from the last epoch-boundary state of this stage.
    #[arg(long)]
    pub resume: bool,
    /// Stops after this many steps, keeping resume state.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// verify-fixed8x, verify-rsa, identify, probe or psnr-baseline.
    #[arg(long)]
    pub protocol: Protocol,
    /// auto, enc_h or enc_l.
    #[arg(long, default_value = "auto")]
    pub encoder: EncoderChoice,
    /// Report path; defaults to `<run dir>/eval.<protocol>.<checkpoint stem>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed of the reduced fixture.
    #[arg(long, default_value_t = 7)]
    pub fixture_seed: u64,
    /// Scales the decoder adjoint to prove the suite catches errors.
    #[arg(long, hide = true)]
    pub corrupt_decoder: Option<f64>,
}

/// Exit code for a gradient check that ran but found mismatches.
pub const EXIT_CHECK_FAILED: i32 = 1;

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data_dir {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(d) = &cli.run_dir {
        cfg.paths.run_dir = d.clone();
    }
    cfg.paths.run_dir = cfg.run_dir();
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = effective_config(&cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let say = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| FanError::io("<stdout>", e));
    if cli.print_config {
        write!(out, "{}", cfg.to_toml()).map_err(|e| FanError::io("<stdout>", e))?;
        return Ok(0);
    }
    let Some(cmd) = cli.command else {
        return Err(FanError::validation("no command given; see --help"));
    };
    match cmd {
        Command::GenData => {
            let ds = Dataset::generate(&cfg.data, cfg.seed, exec)?;
            ds.write_dir(&cfg.paths.data_dir)?;
            say(out, format!("wrote {} images to {}", ds.samples.len(), cfg.paths.data_dir.display()))?;
        }
        Command::Train(a) => {
            let dir = RunDir::lock(&cfg.paths.run_dir)?;
            let opts = TrainOptions {
                ablation: a.ablate,
                resume: a.resume,
                stop_after: a.stop_after,
                exec,
            };
            let o = runner::train_stage(&cfg, &dir, a.stage, &opts)?;
            match o.checkpoint {
                Some(p) => say(out, format!("stage {} done after {} steps: {}", a.stage, o.steps_done, p.display()))?,
                None => say(out, format!("stage {} paused at step {}/{}; continue with --resume", a.stage, o.steps_done, o.total_steps))?,
            }
        }
        Command::Eval(a) => {
            let report = runner::evaluate(&cfg, &a.checkpoint, a.protocol, a.encoder, exec)?;
            let path = a.out.unwrap_or_else(|| default_report_path(&cfg.paths.run_dir, &a.checkpoint, a.protocol));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| FanError::io(parent, e))?;
            }
            runner::write_snapshot(&cfg.paths.run_dir, &cfg)?;
            fs::write(&path, report.to_csv()).map_err(|e| FanError::io(&path, e))?;
            write!(out, "{}", report.to_csv()).map_err(|e| FanError::io("<stdout>", e))?;
        }
        Command::Normalize(a) => {
            let ck = Checkpoint::load(&a.checkpoint, Some(&cfg.net))?;
            let nets = Networks::new(&cfg.net)?;
            let img = read_png(&a.input)?;
            let n_low = cfg.degradation.n_low;
            if img.height().min(img.width()) < n_low {
                return Err(FanError::validation(format!(
                    "input is {}x{}, smaller than the {n_low}-pixel minimum",
                    img.height(),
                    img.width()
                )));
            }
            let face = normalize_face(&nets, &ck.store, &img)?;
            write_png16(&face, &a.output)?;
            say(out, format!("wrote {}", a.output.display()))?;
        }
        Command::Gradcheck(a) => {
            let corruption = match a.corrupt_decoder {
                Some(s) => Corruption::ScaleDecoder(s),
                None => Corruption::None,
            };
            let report = run_suite(a.fixture_seed, corruption)?;
            write!(out, "{}", report.table()).map_err(|e| FanError::io("<stdout>", e))?;
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            say(out, format!("{verdict} in {:.1}s", report.seconds))?;
            if !report.passed() {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Report => {
            write!(out, "{}", run_report(&cfg.paths.run_dir)?).map_err(|e| FanError::io("<stdout>", e))?;
        }
    }
    Ok(0)
}

fn default_report_path(run_dir: &Path, checkpoint: &Path, protocol: Protocol) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    run_dir.join(format!("eval.{protocol}.{stem}.csv"))
}

/// Lists checkpoints with fingerprints, the final logged total of each
/// metrics log, and every report row found in the run directory.
pub fn run_report(dir: &Path) -> Result<String> {
    let entries = fs::read_dir(dir).map_err(|e| FanError::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut s = String::new();
    for n in &names {
        let p = dir.join(n);
        if n.ends_with(".ckpt") {
            let ck = Checkpoint::load(&p, None)?;
            s.push_str(&format!(
                "checkpoint {n} stage={} step={} sha256={}\n",
                ck.header.stage,
                ck.header.step,
                ck.fingerprint()
            ));
        } else if n.ends_with(".metrics.csv") {
            let text = fs::read_to_string(&p).map_err(|e| FanError::io(&p, e))?;
            if let Some(last) = text.lines().rev().find(|l| l.split(',').nth(2) == Some("total")) {
                let f: Vec<&str> = last.split(',').collect();
                s.push_str(&format!("metrics {n} last_step={} total={}\n", f[0], f[4]));
            }
        } else if n.starts_with("eval.") && n.ends_with(".csv") {
            let text = fs::read_to_string(&p).map_err(|e| FanError::io(&p, e))?;
            for l in text.lines().skip(1) {
                s.push_str(&format!("report {n} {l}\n"));
            }
        }
    }
    Ok(s)
}
