use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::{optimizer_step, OptimState};
use super::plan::{DataMode, StagePlan};
use crate::datagen::{low_res, unpaired_degrade_with, Dataset, DegradationConfig, Split};
use crate::error::{FanError, Result};
use crate::exec::Exec;
use crate::nets::{Grads, Model, Networks, ParamStore, Tensor};
use crate::objectives::{
    dis_step_loss, fc_step_loss, stage_loss, Breakdown, Models, Stage, StageBatch,
};
use crate::rng::stream;

/// How Enc_L is created before stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncLInit {
    Random,
    #[default]
    EncHCopy,
}

/// Creates Enc_L parameters. `EncHCopy` duplicates the Enc_H feature
/// extractor (not its pretraining classifier).
pub fn init_enc_l(nets: &Networks, store: &mut ParamStore, mode: EncLInit, seed: u64) -> Result<()> {
    if store.has_prefix(Model::EncL.prefix()) {
        return Err(FanError::validation("Enc_L already exists"));
    }
    match mode {
        EncLInit::Random => nets.init_model(store, Model::EncL, seed),
        EncLInit::EncHCopy => {
            nets.enc_h.check(store).map_err(|_| {
                FanError::Prerequisite("copying into Enc_L needs a trained Enc_H".into())
            })?;
            for (name, _, _) in nets.enc_l.param_shapes() {
                let src = format!("enc_h{}", &name["enc_l".len()..]);
                let v = store.value(&src).clone();
                store.insert(name, v)?;
            }
            Ok(())
        }
    }
}

/// Creates the stage's trainable models when absent, checks prerequisites
/// and applies the plan's freeze flags.
pub fn prepare_stage(
    nets: &Networks,
    store: &mut ParamStore,
    plan: &StagePlan,
    seed: u64,
    enc_l_init: EncLInit,
) -> Result<()> {
    plan.validate()?;
    for &m in plan.stage.prerequisites() {
        if !nets.has_model(store, m) {
            return Err(FanError::Prerequisite(format!(
                "stage {} needs a trained {m}; run the earlier stages first",
                plan.stage
            )));
        }
    }
    if matches!(plan.stage, Stage::S2 | Stage::Finetune) {
        // the identity adversary plays no part after stage 1.2
        store.remove_model(Model::Fc.prefix());
    }
    for &m in &plan.trainable {
        if !store.has_prefix(m.prefix()) {
            if m == Model::EncL {
                init_enc_l(nets, store, enc_l_init, seed)?;
            } else {
                nets.init_model(store, m, seed)?;
            }
        }
        nets.check_model(store, m)?;
    }
    let present: Vec<Model> = Model::ALL
        .into_iter()
        .filter(|&m| store.has_prefix(m.prefix()))
        .collect();
    plan.check_coverage(&present)?;
    for m in &plan.trainable {
        store.unfreeze(&[m.prefix()])?;
    }
    for m in &plan.frozen {
        store.freeze(&[m.prefix()])?;
    }
    Ok(())
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub stage: Stage,
    pub term: String,
    pub weight: f64,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "step,stage,term,weight,value";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:e},{:e}",
            self.step, self.stage, self.term, self.weight, self.value
        )
    }
}

/// Optimizer state of a stage in progress: steps done and one Adam state
/// per update group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub optim: BTreeMap<String, OptimState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub total_steps: u64,
    pub completed: bool,
    pub metrics: Vec<MetricRow>,
}

/// Everything a stage reads besides the plan and the parameters.
pub struct Trainer<'a> {
    pub nets: &'a Networks,
    pub dataset: &'a Dataset,
    pub degradation: &'a DegradationConfig,
    pub seed: u64,
    pub exec: Exec,
}

fn stage_code(stage: Stage) -> u64 {
    match stage {
        Stage::S1_1 => 11,
        Stage::S1_2 => 12,
        Stage::S2 => 2,
        Stage::Finetune => 3,
    }
}

struct TrainSet {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    /// For each sample, the other training samples of its identity.
    partners: Vec<Vec<usize>>,
    sources: Vec<usize>,
}

impl<'a> Trainer<'a> {
    fn train_set(&self) -> Result<TrainSet> {
        let idx = self.dataset.train_indices();
        if idx.is_empty() {
            return Err(FanError::config("dataset has no training samples"));
        }
        let pos: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let by_id = self.dataset.indices_by_identity(Split::Train);
        let mut partners = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &self.dataset.samples[i];
            if s.identity_id >= self.nets.cfg.n_identities {
                return Err(FanError::config(format!(
                    "training identity {} exceeds n_identities {}",
                    s.identity_id, self.nets.cfg.n_identities
                )));
            }
            labels.push(s.identity_id);
            partners.push(
                by_id[&s.identity_id]
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|j| pos[j])
                    .collect(),
            );
        }
        let images = idx
            .iter()
            .map(|&i| Tensor::from_image(&self.dataset.samples[i].image))
            .collect();
        Ok(TrainSet {
            images,
            labels,
            partners,
            sources: idx,
        })
    }

    fn batch_positions(&self, plan: &StagePlan, n: usize, step: u64) -> Vec<usize> {
        let per_epoch = n.div_ceil(plan.batch_size) as u64;
        let epoch = step / per_epoch;
        let b = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.seed, "order", &[stage_code(plan.stage), epoch]));
        order[b * plan.batch_size..((b + 1) * plan.batch_size).min(n)].to_vec()
    }

    fn low_res_input(&self, plan: &StagePlan, set: &TrainSet, pos: usize, unpaired: bool, rng: &mut crate::rng::Rng) -> Result<Tensor> {
        let src = if unpaired {
            let p = &set.partners[pos];
            if p.is_empty() {
                return Err(FanError::config("unpaired mode needs two images per identity"));
            }
            p[rng.random_range(0..p.len())]
        } else {
            pos
        };
        let img = &self.dataset.samples[set.sources[src]].image;
        let lr = if unpaired {
            unpaired_degrade_with(img, self.degradation, plan.low_res, rng)?
        } else {
            low_res(img, self.degradation, plan.low_res, rng)?.0
        };
        Ok(Tensor::from_image(&lr))
    }

    fn make_batch(&self, plan: &StagePlan, set: &TrainSet, step: u64) -> Result<StageBatch> {
        let positions = self.batch_positions(plan, set.images.len(), step);
        let hr: Vec<Tensor> = positions.iter().map(|&p| set.images[p].clone()).collect();
        let labels: Vec<usize> = positions.iter().map(|&p| set.labels[p]).collect();
        let code = stage_code(plan.stage);
        let lr_for = |unpaired: &(dyn Fn(usize) -> bool + Sync)| -> Result<Vec<Tensor>> {
            let items: Vec<(usize, usize)> = positions.iter().copied().enumerate().collect();
            self.exec.try_map(&items, |&(j, p)| {
                let mut rng = stream(self.seed, "sample", &[code, step, j as u64]);
                self.low_res_input(plan, set, p, unpaired(j), &mut rng)
            })
        };
        Ok(match plan.data_mode {
            DataMode::HrPlusLr => StageBatch::Pretrain {
                lr: lr_for(&|_| false)?,
                hr,
                labels,
            },
            DataMode::HrOnly => StageBatch::Disentangle { hr, labels },
            DataMode::Paired => StageBatch::Adapt {
                lr: lr_for(&|_| false)?,
                hr,
            },
            DataMode::Unpaired => StageBatch::Adapt {
                lr: lr_for(&|_| true)?,
                hr,
            },
            DataMode::Mixed => StageBatch::Adapt {
                lr: lr_for(&|j| j % 2 == 1)?,
                hr,
            },
        })
    }

    fn update(
        &self,
        store: &mut ParamStore,
        progress: &mut Progress,
        group: &str,
        mut grads: Grads,
        prefixes: &[&str],
        lr: f64,
    ) -> Result<()> {
        grads.retain_prefix(prefixes);
        let opt = progress.optim.entry(group.to_string()).or_default();
        optimizer_step(store, &grads, opt, lr)
    }

    fn diverged(stage: Stage, step: u64, what: &str) -> FanError {
        FanError::Divergence {
            stage: stage.to_string(),
            step,
            detail: format!("non-finite {what}"),
        }
    }

    /// One optimizer step of `plan` at `progress.step`. On divergence the
    /// store is restored to its state before the step.
    fn step(
        &self,
        plan: &StagePlan,
        set: &TrainSet,
        store: &mut ParamStore,
        progress: &mut Progress,
    ) -> Result<Vec<MetricRow>> {
        let step = progress.step;
        let batch = self.make_batch(plan, set, step)?;
        let snapshot = (store.clone(), progress.clone());
        let lr = plan.learning_rate;
        let mut rows = Vec::new();
        let row = |term: &str, weight: f64, value: f64| MetricRow {
            step,
            stage: plan.stage,
            term: term.to_string(),
            weight,
            value,
        };
        let result = (|| -> Result<()> {
            let check = |v: f64, g: &Grads, what: &str| {
                if v.is_finite() && g.is_finite() {
                    Ok(())
                } else {
                    Err(Self::diverged(plan.stage, step, what))
                }
            };
            if plan.stage == Stage::S1_2 {
                let StageBatch::Disentangle { hr, labels } = &batch else {
                    unreachable!("stage 1.2 uses hr-only batches")
                };
                let (v, g) = dis_step_loss(Models::new(self.nets, store), hr, self.exec)?;
                check(v, &g, "discriminator loss")?;
                self.update(store, progress, "dis", g, &["dis"], lr)?;
                rows.push(row("adv.dis", 1.0, v));
                let (v, g) = fc_step_loss(Models::new(self.nets, store), hr, labels, self.exec)?;
                check(v, &g, "FC loss")?;
                self.update(store, progress, "fc", g, &["fc"], lr * plan.fc_lr_scale)?;
                rows.push(row("adv.fc", 1.0, v));
            }
            let (bd, g) = stage_loss(plan.stage, &batch, Models::new(self.nets, store), &plan.weights, self.exec)?;
            let total = bd.total();
            check(total, &g, "stage loss")?;
            let prefixes: Vec<&str> = plan
                .trainable
                .iter()
                .filter(|m| !(plan.stage == Stage::S1_2 && matches!(m, Model::Dis | Model::Fc)))
                .map(|m| m.prefix())
                .collect();
            self.update(store, progress, "main", g, &prefixes, lr)?;
            push_breakdown(&mut rows, &bd, step, plan.stage);
            Ok(())
        })();
        if let Err(e) = result {
            *store = snapshot.0;
            *progress = snapshot.1;
            return Err(e);
        }
        progress.step += 1;
        Ok(rows)
    }

    /// Runs `plan` from `progress.step` to the end, calling `on_step` after
    /// every step. `prepare_stage` must have been applied to `store`.
    pub fn run_stage(
        &self,
        plan: &StagePlan,
        store: &mut ParamStore,
        progress: &mut Progress,
        on_step: &mut dyn FnMut(&ParamStore, &Progress, &[MetricRow]) -> Result<Control>,
    ) -> Result<StageResult> {
        plan.validate()?;
        Models::new(self.nets, store).require(plan.stage.prerequisites(), plan.stage)?;
        let set = self.train_set()?;
        let total = plan.total_steps(set.images.len()) as u64;
        let mut metrics = Vec::new();
        while progress.step < total {
            let rows = self.step(plan, &set, store, progress)?;
            let control = on_step(store, progress, &rows)?;
            metrics.extend(rows);
            if control == Control::Stop && progress.step < total {
                return Ok(StageResult {
                    total_steps: total,
                    completed: false,
                    metrics,
                });
            }
        }
        Ok(StageResult {
            total_steps: total,
            completed: true,
            metrics,
        })
    }

    /// Prepares and runs a whole stage without intermediate callbacks.
    pub fn train(&self, plan: &StagePlan, store: &mut ParamStore, enc_l_init: EncLInit) -> Result<StageResult> {
        prepare_stage(self.nets, store, plan, self.seed, enc_l_init)?;
        self.run_stage(plan, store, &mut Progress::default(), &mut |_, _, _| Ok(Control::Continue))
    }
}

fn push_breakdown(rows: &mut Vec<MetricRow>, bd: &Breakdown, step: u64, stage: Stage) {
    for t in &bd.terms {
        rows.push(MetricRow {
            step,
            stage,
            term: t.name.to_string(),
            weight: t.weight,
            value: t.value,
        });
    }
    rows.push(MetricRow {
        step,
        stage,
        term: "total".into(),
        weight: 1.0,
        value: bd.total(),
    });
}
