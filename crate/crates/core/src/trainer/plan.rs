use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::LowResMode;
use crate::error::{FanError, Result};
use crate::nets::Model;
use crate::objectives::{LossWeights, Stage};

/// How a stage composes its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// High-resolution image plus a degraded copy of the same image.
    HrPlusLr,
    HrOnly,
    /// Low-resolution input degraded from the target itself.
    Paired,
    /// Low-resolution input from a different image of the same identity.
    Unpaired,
    /// Alternates paired and unpaired samples within each batch.
    Mixed,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::HrPlusLr => "hr_plus_lr",
            DataMode::HrOnly => "hr_only",
            DataMode::Paired => "paired",
            DataMode::Unpaired => "unpaired",
            DataMode::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: BTreeSet<Model>,
    pub frozen: BTreeSet<Model>,
    pub epochs: usize,
    /// When set, the stage runs exactly this many optimizer steps instead of
    /// `epochs` passes over the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub data_mode: DataMode,
    pub low_res: LowResMode,
    /// Multiplies the learning rate of the FC adversary in stage 1.2.
    #[serde(default = "unit_scale")]
    pub fc_lr_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

pub const PUBLISHED_LR_STAGE1: f64 = 2e-4;
pub const PUBLISHED_LR_STAGE2: f64 = 2e-5;
pub const FINETUNE_LR: f64 = 1e-5;
pub const FINETUNE_ITERATIONS: usize = 1000;
pub const DEFAULT_BATCH: usize = 32;

fn set(models: &[Model]) -> BTreeSet<Model> {
    models.iter().copied().collect()
}

/// Models trained and frozen by each stage.
pub fn freeze_sets(stage: Stage) -> (BTreeSet<Model>, BTreeSet<Model>) {
    use Model::*;
    match stage {
        Stage::S1_1 => (set(&[EncH]), set(&[])),
        Stage::S1_2 => (set(&[EncZ, Fc, Dec, Dis]), set(&[EncH])),
        Stage::S2 | Stage::Finetune => (set(&[EncL]), set(&[EncH, EncZ, Dec, Dis])),
    }
}

fn scaled_epochs(epochs: usize, multiplier: f64) -> usize {
    ((epochs as f64 * multiplier).round() as usize).max(1)
}

impl StagePlan {
    pub fn new(stage: Stage, epochs: usize, learning_rate: f64) -> Self {
        let (trainable, frozen) = freeze_sets(stage);
        let data_mode = match stage {
            Stage::S1_1 => DataMode::HrPlusLr,
            Stage::S1_2 => DataMode::HrOnly,
            Stage::S2 => DataMode::Paired,
            Stage::Finetune => DataMode::Mixed,
        };
        StagePlan {
            stage,
            trainable,
            frozen,
            epochs,
            iterations: None,
            learning_rate,
            batch_size: DEFAULT_BATCH,
            weights: LossWeights::default(),
            data_mode,
            low_res: LowResMode::RandomScale,
            fc_lr_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.trainable.intersection(&self.frozen).next() {
            return Err(FanError::validation(format!(
                "stage {}: {m} is both trainable and frozen",
                self.stage
            )));
        }
        let (t, f) = freeze_sets(self.stage);
        if self.trainable != t || self.frozen != f {
            return Err(FanError::validation(format!(
                "stage {} must train {:?} with {:?} frozen",
                self.stage, t, f
            )));
        }
        if self.batch_size == 0 {
            return Err(FanError::validation("batch_size must be positive"));
        }
        if self.iterations.is_none() && self.epochs == 0 {
            return Err(FanError::validation("epochs must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FanError::validation("learning rate must be positive"));
        }
        if !(self.fc_lr_scale.is_finite() && self.fc_lr_scale > 0.0) {
            return Err(FanError::validation("fc_lr_scale must be positive"));
        }
        let mode_ok = match self.stage {
            Stage::S1_1 => self.data_mode == DataMode::HrPlusLr,
            Stage::S1_2 => self.data_mode == DataMode::HrOnly,
            Stage::S2 | Stage::Finetune => matches!(
                self.data_mode,
                DataMode::Paired | DataMode::Unpaired | DataMode::Mixed
            ),
        };
        if !mode_ok {
            return Err(FanError::validation(format!(
                "data mode {} not valid for stage {}",
                self.data_mode, self.stage
            )));
        }
        if let LowResMode::Fixed(0) = self.low_res {
            return Err(FanError::validation("fixed factor must be positive"));
        }
        self.weights.validate()
    }

    /// Checks that every model present is either trained or frozen.
    pub fn check_coverage(&self, present: &[Model]) -> Result<()> {
        for m in present {
            if !self.trainable.contains(m) && !self.frozen.contains(m) {
                return Err(FanError::validation(format!(
                    "stage {}: {m} is neither trainable nor frozen",
                    self.stage
                )));
            }
        }
        Ok(())
    }

    /// Optimizer steps for a training set of `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        match self.iterations {
            Some(it) => it,
            None => self.epochs * n.div_ceil(self.batch_size),
        }
    }
}

/// The three training stages with the published learning rates and epoch
/// counts, epochs scaled by `epoch_multiplier`.
pub fn default_plans(epoch_multiplier: f64) -> Result<Vec<StagePlan>> {
    if !(epoch_multiplier.is_finite() && epoch_multiplier > 0.0) {
        return Err(FanError::validation("epoch multiplier must be positive"));
    }
    Ok(vec![
        StagePlan::new(Stage::S1_1, scaled_epochs(12, epoch_multiplier), PUBLISHED_LR_STAGE1),
        StagePlan::new(Stage::S1_2, scaled_epochs(8, epoch_multiplier), PUBLISHED_LR_STAGE1),
        StagePlan::new(Stage::S2, scaled_epochs(6, epoch_multiplier), PUBLISHED_LR_STAGE2),
    ])
}

pub fn finetune_plan(iterations: usize, learning_rate: f64) -> StagePlan {
    let mut p = StagePlan::new(Stage::Finetune, 1, learning_rate);
    p.iterations = Some(iterations);
    p
}

/// Stage-2 ablations, one per reported variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Fixed-factor degradation instead of random scale augmentation.
    NoRsa,
    /// Feature-level loss only.
    NoDec,
    PairedOnly,
    UnpairedOnly,
    Mixed,
}

impl Ablation {
    pub fn apply(self, plan: &mut StagePlan, fixed_factor: usize) {
        if !matches!(plan.stage, Stage::S2 | Stage::Finetune) {
            return;
        }
        match self {
            Ablation::NoRsa => plan.low_res = LowResMode::Fixed(fixed_factor),
            Ablation::NoDec => {
                plan.weights.lambda_enc_dec = 0.0;
                plan.weights.lambda_id = 0.0;
                plan.weights.lambda_gan = 0.0;
            }
            Ablation::PairedOnly => plan.data_mode = DataMode::Paired,
            Ablation::UnpairedOnly => plan.data_mode = DataMode::Unpaired,
            Ablation::Mixed => plan.data_mode = DataMode::Mixed,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoRsa => "no-rsa",
            Ablation::NoDec => "no-dec",
            Ablation::PairedOnly => "paired-only",
            Ablation::UnpairedOnly => "unpaired-only",
            Ablation::Mixed => "mixed",
        })
    }
}

impl FromStr for Ablation {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-rsa" => Ok(Ablation::NoRsa),
            "no-dec" => Ok(Ablation::NoDec),
            "paired-only" => Ok(Ablation::PairedOnly),
            "unpaired-only" => Ok(Ablation::UnpairedOnly),
            "mixed" => Ok(Ablation::Mixed),
            other => Err(FanError::validation(format!("unknown ablation {other:?}"))),
        }
    }
}
