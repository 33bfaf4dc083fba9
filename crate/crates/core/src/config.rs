//! Run configuration: one TOML file holding every setting of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetConfig, DegradationConfig};
use crate::error::{FanError, Result};
use crate::eval::EvalConfig;
use crate::nets::NetConfig;
use crate::objectives::Stage;
use crate::trainer::{default_plans, finetune_plan, EncLInit, StagePlan, FINETUNE_ITERATIONS, FINETUNE_LR};

/// Overrides the root that a relative `paths.run_dir` is resolved against.
pub const RUN_ROOT_ENV: &str = "FAN_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub enc_l_init: EncLInit,
    pub paths: Paths,
    pub net: NetConfig,
    pub data: DatasetConfig,
    pub degradation: DegradationConfig,
    pub eval: EvalConfig,
    /// Stages 1.1, 1.2 and 2 in order.
    pub plans: Vec<StagePlan>,
    pub finetune: StagePlan,
}

/// Desk-scale learning rates and epoch counts. The published schedule
/// (see [`RunConfig::published_schedule`]) is sized for millions of images;
/// on a few hundred synthetic images its rates barely move the weights.
pub const DESK_EPOCHS: [usize; 3] = [30, 16, 6];
pub const DESK_LR: [f64; 3] = [1e-3, 1e-3, 1e-3];
/// Stage-1.2 weight of the z term. The squared distance to the uniform
/// output has a vanishing gradient near its optimum, so the default of 0.1
/// leaves identity in z.
pub const DESK_LAMBDA_Z: f64 = 300.0;
/// Keeps the FC adversary learning as fast as Enc_Z shrinks its input.
pub const DESK_FC_LR_SCALE: f64 = 100.0;
pub const DESK_FINETUNE_ITERATIONS: usize = 400;
pub const DESK_FINETUNE_LR: f64 = 1e-3;

impl Default for RunConfig {
    fn default() -> Self {
        let mut plans = default_plans(1.0).expect("positive multiplier");
        for (i, p) in plans.iter_mut().enumerate() {
            p.epochs = DESK_EPOCHS[i];
            p.learning_rate = DESK_LR[i];
        }
        plans[1].weights.lambda_z = DESK_LAMBDA_Z;
        plans[1].fc_lr_scale = DESK_FC_LR_SCALE;
        RunConfig {
            seed: 1,
            enc_l_init: EncLInit::default(),
            paths: Paths::default(),
            net: NetConfig::default(),
            data: DatasetConfig::default(),
            degradation: DegradationConfig::default(),
            eval: EvalConfig::default(),
            plans,
            finetune: finetune_plan(DESK_FINETUNE_ITERATIONS, DESK_FINETUNE_LR),
        }
    }
}

impl RunConfig {
    /// The published learning rates and epochs scaled by `epoch_multiplier`.
    pub fn published_schedule(epoch_multiplier: f64) -> Result<Self> {
        Ok(RunConfig {
            plans: default_plans(epoch_multiplier)?,
            finetune: finetune_plan(FINETUNE_ITERATIONS, FINETUNE_LR),
            ..RunConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.data.validate()?;
        self.degradation.validate()?;
        self.eval.validate()?;
        if self.net.n_identities != self.data.n_train_identities {
            return Err(FanError::config(format!(
                "net.n_identities ({}) must equal data.n_train_identities ({})",
                self.net.n_identities, self.data.n_train_identities
            )));
        }
        if self.net.image_side != self.data.side || self.degradation.n_high != self.data.side {
            return Err(FanError::config(
                "net.image_side, data.side and degradation.n_high must agree",
            ));
        }
        let stages: Vec<Stage> = self.plans.iter().map(|p| p.stage).collect();
        if stages != [Stage::S1_1, Stage::S1_2, Stage::S2] {
            return Err(FanError::config("plans must list stages 1.1, 1.2 and 2 in order"));
        }
        if self.finetune.stage != Stage::Finetune {
            return Err(FanError::config("finetune plan must have stage \"finetune\""));
        }
        for p in self.plans.iter().chain(std::iter::once(&self.finetune)) {
            p.validate()?;
        }
        Ok(())
    }

    pub fn plan(&self, stage: Stage) -> StagePlan {
        match stage {
            Stage::Finetune => self.finetune.clone(),
            s => self
                .plans
                .iter()
                .find(|p| p.stage == s)
                .cloned()
                .expect("validated plans cover every stage"),
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| FanError::config(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FanError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Run directory, with a relative path placed under `$FAN_RUN_ROOT`
    /// when that variable is set.
    pub fn run_dir(&self) -> PathBuf {
        resolve_run_dir(&self.paths.run_dir, std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
    }
}

pub fn resolve_run_dir(run_dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(r) if run_dir.is_relative() => r.join(run_dir),
        _ => run_dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn published_schedule_keeps_large_scale_rates() {
        let c = RunConfig::published_schedule(0.5).unwrap();
        let e: Vec<usize> = c.plans.iter().map(|p| p.epochs).collect();
        assert_eq!(e, vec![6, 4, 3]);
        assert_eq!(c.plans[2].learning_rate, 2e-5);
        assert_eq!(c.finetune.iterations, Some(1000));
        assert_eq!(c.finetune.learning_rate, 1e-5);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut c = RunConfig::default();
        c.net.n_identities = 7;
        assert!(matches!(c.validate(), Err(FanError::Config(_))));
        let mut c = RunConfig::default();
        c.plans.swap(0, 1);
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n", Path::new("x")).is_err());
    }

    #[test]
    fn run_root_applies_to_relative_paths() {
        let root = Some(PathBuf::from("/tmp/root"));
        assert_eq!(resolve_run_dir(Path::new("r"), root.clone()), PathBuf::from("/tmp/root/r"));
        assert_eq!(resolve_run_dir(Path::new("/abs"), root), PathBuf::from("/abs"));
        assert_eq!(resolve_run_dir(Path::new("r"), None), PathBuf::from("r"));
    }
}
