#![allow(dead_code)]

pub mod oracles;

use std::path::Path;

use fan_core::config::RunConfig;

/// A config small enough for end-to-end tests to run in seconds.
pub fn tiny_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.paths.data_dir = root.join("data");
    c.paths.run_dir = root.join("run");
    c.data.n_train_identities = 4;
    c.data.n_eval_identities = 4;
    c.data.side = 16;
    c.data.poses = vec![-15.0, 0.0, 15.0];
    c.data.illuminations = vec![1.0];
    c.data.occlusions = vec![false, true];
    c.net.image_side = 16;
    c.net.n_identities = 4;
    c.net.d_f = 8;
    c.net.d_z = 4;
    c.net.widths = vec![4, 8];
    c.degradation.n_high = 16;
    c.degradation.fixed_factor = 2;
    c.eval.n_pairs = 40;
    for p in &mut c.plans {
        p.epochs = 1;
        p.batch_size = 8;
    }
    c.finetune.iterations = Some(3);
    c.finetune.batch_size = 8;
    c.validate().expect("tiny config is valid");
    c
}
