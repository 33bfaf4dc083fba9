mod common;

use std::fs;

use fan_core::config::RunConfig;
use fan_core::datagen::Dataset;
use fan_core::eval::{EncoderChoice, Protocol};
use fan_core::exec::Exec;
use fan_core::nets::Checkpoint;
use fan_core::objectives::Stage;
use fan_core::runner::{self, checkpoint_path, metrics_path, resume_path, RunDir, TrainOptions};

fn generate(cfg: &RunConfig) {
    let ds = Dataset::generate(&cfg.data, cfg.seed, Exec::default()).unwrap();
    ds.write_dir(&cfg.paths.data_dir).unwrap();
}

fn opts() -> TrainOptions {
    TrainOptions::default()
}

fn run_all(cfg: &RunConfig) -> Vec<u8> {
    let dir = RunDir::lock(&cfg.paths.run_dir).unwrap();
    for s in [Stage::S1_1, Stage::S1_2, Stage::S2] {
        runner::train_stage(cfg, &dir, s, &opts()).unwrap();
    }
    fs::read(checkpoint_path(dir.path(), Stage::S2, None)).unwrap()
}

#[test]
fn same_seed_same_bytes_different_seed_differs() {
    let t = tempfile::tempdir().unwrap();
    let mut a = common::tiny_config(&t.path().join("a"));
    a.plans[0].epochs = 2;
    generate(&a);
    let mut b = a.clone();
    b.paths.run_dir = t.path().join("b_run");
    let ca = run_all(&a);
    let cb = run_all(&b);
    assert_eq!(ca, cb);
    for (sa, sb) in [(Stage::S1_1, Stage::S1_1), (Stage::S1_2, Stage::S1_2)] {
        assert_eq!(
            fs::read(metrics_path(&a.paths.run_dir, sa, None)).unwrap(),
            fs::read(metrics_path(&b.paths.run_dir, sb, None)).unwrap()
        );
    }
    let ck = checkpoint_path(&a.paths.run_dir, Stage::S2, None);
    let ra = runner::evaluate(&a, &ck, Protocol::VerifyRsa, EncoderChoice::Auto, Exec::default()).unwrap();
    let rb = runner::evaluate(&b, &ck, Protocol::VerifyRsa, EncoderChoice::Auto, Exec::Sequential).unwrap();
    assert_eq!(ra.to_csv(), rb.to_csv());

    let mut c = a.clone();
    c.seed = 2;
    c.paths.run_dir = t.path().join("c_run");
    assert_ne!(run_all(&c), ca);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let t = tempfile::tempdir().unwrap();
    let a = common::tiny_config(t.path());
    generate(&a);
    let mut b = a.clone();
    b.paths.run_dir = t.path().join("seq");
    let da = RunDir::lock(&a.paths.run_dir).unwrap();
    let db = RunDir::lock(&b.paths.run_dir).unwrap();
    runner::train_stage(&a, &da, Stage::S1_1, &opts()).unwrap();
    let seq = TrainOptions {
        exec: Exec::Sequential,
        ..opts()
    };
    runner::train_stage(&b, &db, Stage::S1_1, &seq).unwrap();
    assert_eq!(
        fs::read(checkpoint_path(da.path(), Stage::S1_1, None)).unwrap(),
        fs::read(checkpoint_path(db.path(), Stage::S1_1, None)).unwrap()
    );
}

#[test]
fn interrupted_then_resumed_matches_uninterrupted() {
    let t = tempfile::tempdir().unwrap();
    let mut a = common::tiny_config(t.path());
    // 24 train images, batch 8: 3 steps per epoch, 9 steps in total
    a.plans[1].epochs = 3;
    generate(&a);
    let mut b = a.clone();
    b.paths.run_dir = t.path().join("resumed");

    let da = RunDir::lock(&a.paths.run_dir).unwrap();
    runner::train_stage(&a, &da, Stage::S1_1, &opts()).unwrap();
    runner::train_stage(&a, &da, Stage::S1_2, &opts()).unwrap();

    let db = RunDir::lock(&b.paths.run_dir).unwrap();
    runner::train_stage(&b, &db, Stage::S1_1, &opts()).unwrap();
    let stop = TrainOptions {
        stop_after: Some(4),
        ..opts()
    };
    let o = runner::train_stage(&b, &db, Stage::S1_2, &stop).unwrap();
    assert!(o.checkpoint.is_none());
    assert_eq!((o.steps_done, o.total_steps), (4, 9));
    assert!(resume_path(db.path(), Stage::S1_2, None).is_file());
    let resumed = TrainOptions {
        resume: true,
        ..opts()
    };
    let o = runner::train_stage(&b, &db, Stage::S1_2, &resumed).unwrap();
    assert_eq!(o.steps_done, 9);
    assert!(!resume_path(db.path(), Stage::S1_2, None).exists());

    let ca = Checkpoint::load(&checkpoint_path(da.path(), Stage::S1_2, None), None).unwrap();
    let cb = Checkpoint::load(&checkpoint_path(db.path(), Stage::S1_2, None), None).unwrap();
    assert_eq!(ca.to_bytes(), cb.to_bytes());
    assert_eq!(
        fs::read_to_string(metrics_path(da.path(), Stage::S1_2, None)).unwrap(),
        fs::read_to_string(metrics_path(db.path(), Stage::S1_2, None)).unwrap()
    );
}

#[test]
fn finetune_with_zero_iterations_keeps_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let mut a = common::tiny_config(t.path());
    a.finetune.iterations = Some(0);
    generate(&a);
    let d = RunDir::lock(&a.paths.run_dir).unwrap();
    for s in [Stage::S1_1, Stage::S1_2, Stage::S2, Stage::Finetune] {
        runner::train_stage(&a, &d, s, &opts()).unwrap();
    }
    let s2 = Checkpoint::load(&checkpoint_path(d.path(), Stage::S2, None), None).unwrap();
    let ft = Checkpoint::load(&checkpoint_path(d.path(), Stage::Finetune, None), None).unwrap();
    assert_eq!(s2.store, ft.store);
}

#[test]
fn metrics_log_totals_match_weighted_terms() {
    let t = tempfile::tempdir().unwrap();
    let a = common::tiny_config(t.path());
    generate(&a);
    let d = RunDir::lock(&a.paths.run_dir).unwrap();
    for s in [Stage::S1_1, Stage::S1_2, Stage::S2] {
        runner::train_stage(&a, &d, s, &opts()).unwrap();
        let text = fs::read_to_string(metrics_path(d.path(), s, None)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,stage,term,weight,value"));
        let mut sums = std::collections::BTreeMap::<u64, (f64, Option<f64>)>::new();
        for l in lines {
            let f: Vec<&str> = l.split(',').collect();
            let step: u64 = f[0].parse().unwrap();
            let (w, v): (f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap());
            let e = sums.entry(step).or_default();
            match f[2] {
                "total" => e.1 = Some(v),
                t if t.starts_with("adv.") => {}
                _ => e.0 += w * v,
            }
        }
        let expected = a.plan(s).total_steps(24) as u64;
        assert_eq!(sums.len() as u64, expected, "stage {s}");
        for (step, (sum, total)) in sums {
            let total = total.expect("total row");
            assert!((sum - total).abs() <= 1e-6 * total.abs().max(1.0), "stage {s} step {step}: {sum} vs {total}");
        }
    }
}
