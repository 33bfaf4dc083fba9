//! Run-directory orchestration shared by the command-line front end and the
//! integration tests: config snapshot, lock, per-stage checkpoints, metrics
//! logs and resumable optimizer state.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::datagen::{Dataset, Split};
use crate::error::{FanError, Result};
use crate::eval::{EncoderChoice, EvalReport, Evaluator, Protocol};
use crate::exec::Exec;
use crate::nets::{Checkpoint, Networks, ParamStore, Tensor};
use crate::objectives::Stage;
use crate::trainer::{prepare_stage, Ablation, Control, OptimState, Progress, StagePlan, Trainer, METRICS_HEADER};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const LOCK_FILE: &str = "train.lock";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

const OPTIM_PREFIX: &str = "optim:";

/// Exclusive handle on a run directory; the lock file goes away on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn lock(root: &Path) -> Result<RunDir> {
        fs::create_dir_all(root).map_err(|e| FanError::io(root, e))?;
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| FanError::io(&lock, e))?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(FanError::config(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    root.display(),
                    lock.display()
                )));
            }
            Err(e) => return Err(FanError::io(&lock, e)),
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Writes the config snapshot and seed record.
pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FanError::io(dir, e))?;
    let c = dir.join(CONFIG_FILE);
    fs::write(&c, cfg.to_toml()).map_err(|e| FanError::io(&c, e))?;
    let s = dir.join(SEED_FILE);
    fs::write(&s, format!("{}\n", cfg.seed)).map_err(|e| FanError::io(&s, e))
}

/// File stem of a stage's artifacts, e.g. `stage2` or `stage2.no-rsa`.
pub fn artifact_stem(stage: Stage, ablation: Option<Ablation>) -> String {
    let base = stage.checkpoint_name().trim_end_matches(".ckpt");
    match ablation {
        Some(a) => format!("{base}.{a}"),
        None => base.to_string(),
    }
}

pub fn checkpoint_path(dir: &Path, stage: Stage, ablation: Option<Ablation>) -> PathBuf {
    dir.join(format!("{}.ckpt", artifact_stem(stage, ablation)))
}

pub fn metrics_path(dir: &Path, stage: Stage, ablation: Option<Ablation>) -> PathBuf {
    dir.join(format!("{}.metrics.csv", artifact_stem(stage, ablation)))
}

pub fn resume_path(dir: &Path, stage: Stage, ablation: Option<Ablation>) -> PathBuf {
    dir.join(format!("{}.resume.ckpt", artifact_stem(stage, ablation)))
}

/// Checkpoint a stage starts from, if any.
fn input_checkpoint(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::S1_1 => None,
        Stage::S1_2 => Some(Stage::S1_1),
        Stage::S2 => Some(Stage::S1_2),
        Stage::Finetune => Some(Stage::S2),
    }
}

/// Loads the generated dataset and checks it matches the config.
pub fn load_dataset(cfg: &RunConfig, exec: Exec) -> Result<Dataset> {
    let dir = &cfg.paths.data_dir;
    if !dir.join(crate::datagen::MANIFEST_FILE).is_file() {
        return Err(FanError::Prerequisite(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    let ds = Dataset::read_dir(dir, exec)?;
    let side_ok = ds.samples.iter().all(|s| s.image.side() == cfg.data.side);
    let n_eval = ds.indices_by_identity(Split::Eval).len();
    if ds.n_train_identities != cfg.data.n_train_identities
        || n_eval != cfg.data.n_eval_identities
        || !side_ok
    {
        return Err(FanError::config(format!(
            "dataset at {} does not match the config (identities or image size differ)",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Packs model parameters and optimizer moments into one checkpoint store.
fn pack_resume(store: &ParamStore, progress: &Progress) -> Result<ParamStore> {
    let mut out = store.clone();
    for (group, st) in &progress.optim {
        let base = format!("{OPTIM_PREFIX}{group}:");
        out.insert(format!("{base}step"), Tensor::from_vec(&[1], vec![st.step as f64])?)?;
        for (name, t) in &st.m {
            out.insert(format!("{base}m:{name}"), t.clone())?;
        }
        for (name, t) in &st.v {
            out.insert(format!("{base}v:{name}"), t.clone())?;
        }
    }
    out.version = store.version;
    Ok(out)
}

fn unpack_resume(ck: Checkpoint, path: &Path) -> Result<(ParamStore, Progress)> {
    let mut store = ParamStore::default();
    let mut optim: BTreeMap<String, OptimState> = BTreeMap::new();
    let bad = || FanError::format(path, "malformed optimizer entry");
    for (name, p) in ck.store.iter() {
        let Some(rest) = name.strip_prefix(OPTIM_PREFIX) else {
            store.insert(name.clone(), p.value.clone())?;
            if !p.trainable {
                store.freeze(&[name.as_str()])?;
            }
            continue;
        };
        let (group, rest) = rest.split_once(':').ok_or_else(bad)?;
        let st = optim.entry(group.to_string()).or_default();
        if rest == "step" {
            st.step = p.value.data()[0] as u64;
        } else if let Some(n) = rest.strip_prefix("m:") {
            st.m.insert(n.to_string(), p.value.clone());
        } else if let Some(n) = rest.strip_prefix("v:") {
            st.v.insert(n.to_string(), p.value.clone());
        } else {
            return Err(bad());
        }
    }
    store.version = ck.header.store_version;
    Ok((
        store,
        Progress {
            step: ck.header.step,
            optim,
        },
    ))
}

/// Options of one `train` invocation.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub ablation: Option<Ablation>,
    pub resume: bool,
    /// Stops after this many total steps, leaving resume state behind.
    pub stop_after: Option<u64>,
    pub exec: Exec,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Option<PathBuf>,
    pub steps_done: u64,
    pub total_steps: u64,
}

/// Resolved plan for `stage` with an optional ablation applied.
pub fn stage_plan(cfg: &RunConfig, stage: Stage, ablation: Option<Ablation>) -> Result<StagePlan> {
    let mut plan = cfg.plan(stage);
    if let Some(a) = ablation {
        a.apply(&mut plan, cfg.degradation.fixed_factor);
    }
    plan.validate()?;
    Ok(plan)
}

/// Runs one stage inside the run directory. Writes `<stem>.ckpt` and
/// `<stem>.metrics.csv`; saves resume state at every epoch boundary and
/// `last_good.ckpt` if the run diverges.
pub fn train_stage(cfg: &RunConfig, dir: &RunDir, stage: Stage, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = dir.path();
    let plan = stage_plan(cfg, stage, opts.ablation)?;
    let nets = Networks::new(&cfg.net)?;
    let resume_file = resume_path(root, stage, opts.ablation);
    let resuming = opts.resume && resume_file.is_file();

    let (mut store, mut progress) = if resuming {
        unpack_resume(Checkpoint::load(&resume_file, Some(&cfg.net))?, &resume_file)?
    } else {
        let mut store = match input_checkpoint(stage) {
            None => ParamStore::default(),
            Some(prev) => {
                let p = checkpoint_path(root, prev, None);
                if !p.is_file() {
                    return Err(FanError::Prerequisite(format!(
                        "stage {stage} needs {}; train stage {prev} first",
                        p.display()
                    )));
                }
                Checkpoint::load(&p, Some(&cfg.net))?.store
            }
        };
        prepare_stage(&nets, &mut store, &plan, cfg.seed, cfg.enc_l_init)?;
        (store, Progress::default())
    };
    let dataset = load_dataset(cfg, opts.exec)?;
    write_snapshot(root, cfg)?;

    let metrics_file = metrics_path(root, stage, opts.ablation);
    let kept = if resuming { kept_metric_lines(&metrics_file, progress.step)? } else { Vec::new() };
    let file = File::create(&metrics_file).map_err(|e| FanError::io(&metrics_file, e))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| FanError::io(&metrics_file, e))?;
    for l in &kept {
        writeln!(metrics, "{l}").map_err(|e| FanError::io(&metrics_file, e))?;
    }

    let trainer = Trainer {
        nets: &nets,
        dataset: &dataset,
        degradation: &cfg.degradation,
        seed: cfg.seed,
        exec: opts.exec,
    };
    let n_train = dataset.train_indices().len();
    let per_epoch = n_train.div_ceil(plan.batch_size).max(1) as u64;
    let tag = stage.tag();
    let mut on_step = |s: &ParamStore, p: &Progress, rows: &[crate::trainer::MetricRow]| -> Result<Control> {
        for r in rows {
            writeln!(metrics, "{}", r.csv()).map_err(|e| FanError::io(&metrics_file, e))?;
        }
        if p.step % per_epoch == 0 || opts.stop_after.is_some_and(|n| p.step >= n) {
            metrics.flush().map_err(|e| FanError::io(&metrics_file, e))?;
            Checkpoint::new(&cfg.net, tag, p.step, pack_resume(s, p)?).save(&resume_file)?;
        }
        Ok(match opts.stop_after {
            Some(n) if p.step >= n => Control::Stop,
            _ => Control::Continue,
        })
    };
    let result = trainer.run_stage(&plan, &mut store, &mut progress, &mut on_step);
    metrics.flush().map_err(|e| FanError::io(&metrics_file, e))?;
    let result = match result {
        Ok(r) => r,
        Err(e @ FanError::Divergence { .. }) => {
            // the trainer restored the pre-step parameters
            Checkpoint::new(&cfg.net, tag, progress.step, store).save(&root.join(LAST_GOOD_FILE))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if !result.completed {
        return Ok(TrainOutcome {
            checkpoint: None,
            steps_done: progress.step,
            total_steps: result.total_steps,
        });
    }
    let out = checkpoint_path(root, stage, opts.ablation);
    Checkpoint::new(&cfg.net, tag, progress.step, store).save(&out)?;
    if resume_file.exists() {
        fs::remove_file(&resume_file).map_err(|e| FanError::io(&resume_file, e))?;
    }
    Ok(TrainOutcome {
        checkpoint: Some(out),
        steps_done: progress.step,
        total_steps: result.total_steps,
    })
}

/// Metric lines of steps before `step` from an earlier, interrupted run.
fn kept_metric_lines(path: &Path, step: u64) -> Result<Vec<String>> {
    let Ok(f) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines().skip(1) {
        let line = line.map_err(|e| FanError::io(path, e))?;
        let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
        if s.is_some_and(|s| s < step) {
            out.push(line);
        }
    }
    Ok(out)
}

/// Evaluates a checkpoint and appends its fingerprint to the report.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    protocol: Protocol,
    encoder: EncoderChoice,
    exec: Exec,
) -> Result<EvalReport> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint, Some(&cfg.net))?;
    let nets = Networks::new(&cfg.net)?;
    let dataset = load_dataset(cfg, exec)?;
    let ev = Evaluator {
        nets: &nets,
        store: &ck.store,
        dataset: &dataset,
        degradation: &cfg.degradation,
        config: &cfg.eval,
        seed: cfg.seed,
        exec,
    };
    let mut report = ev.run(protocol, encoder)?;
    report.rows.push(("checkpoint.sha256".into(), ck.fingerprint()));
    Ok(report)
}
