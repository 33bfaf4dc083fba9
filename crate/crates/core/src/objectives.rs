//! Training objectives and their gradient routing.
//!
//! Primitive losses take batches and return the scalar value together with
//! the gradient w.r.t. their trainable input. The per-stage compositions
//! evaluate one sample at a time (so samples can run on separate workers),
//! push gradients back only into the networks that are trained by that term,
//! and average over the batch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FanError, Result};
use crate::exec::Exec;
use crate::nets::{softmax, softmax_backward, Grads, Model, Networks, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1.1")]
    S1_1,
    #[serde(rename = "1.2")]
    S1_2,
    #[serde(rename = "2")]
    S2,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::S1_1 => "1.1",
            Stage::S1_2 => "1.2",
            Stage::S2 => "2",
            Stage::Finetune => "finetune",
        }
    }

    pub fn checkpoint_name(self) -> &'static str {
        match self {
            Stage::S1_1 => "stage1_1.ckpt",
            Stage::S1_2 => "stage1_2.ckpt",
            Stage::S2 => "stage2.ckpt",
            Stage::Finetune => "finetune.ckpt",
        }
    }

    /// Models whose parameters must already exist when the stage starts.
    pub fn prerequisites(self) -> &'static [Model] {
        match self {
            Stage::S1_1 => &[],
            Stage::S1_2 => &[Model::EncH],
            Stage::S2 => &[Model::EncH, Model::EncZ, Model::Dec, Model::Dis],
            Stage::Finetune => &[Model::EncH, Model::EncL, Model::EncZ, Model::Dec, Model::Dis],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1.1" | "1_1" => Ok(Stage::S1_1),
            "1.2" | "1_2" => Ok(Stage::S1_2),
            "2" => Ok(Stage::S2),
            "finetune" | "ft" => Ok(Stage::Finetune),
            _ => Err(FanError::validation(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dec: f64,
    pub lambda_id: f64,
    pub lambda_gan: f64,
    pub lambda_z: f64,
    pub lambda_enc: f64,
    pub lambda_enc_dec: f64,
    /// Target feature norm of the m-L2 pretraining regularizer.
    pub margin_m: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dec: 1.0,
            lambda_id: 0.1,
            lambda_gan: 0.01,
            lambda_z: 0.1,
            lambda_enc: 1.0,
            lambda_enc_dec: 1.0,
            margin_m: 10.0,
            lambda_m: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_dec: 0.0,
            lambda_id: 0.0,
            lambda_gan: 0.0,
            lambda_z: 0.0,
            lambda_enc: 0.0,
            lambda_enc_dec: 0.0,
            margin_m: 10.0,
            lambda_m: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_dec,
            self.lambda_id,
            self.lambda_gan,
            self.lambda_z,
            self.lambda_enc,
            self.lambda_enc_dec,
            self.lambda_m,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(FanError::validation("loss weights must be finite and >= 0"));
        }
        if !(self.margin_m.is_finite() && self.margin_m > 0.0) {
            return Err(FanError::validation("margin m must be > 0"));
        }
        Ok(())
    }
}

/// The all-`1/N_D` target of the non-identity classification loss.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformTarget(Tensor);

impl UniformTarget {
    pub fn new(n_identities: usize) -> Self {
        UniformTarget(Tensor::vector(vec![1.0 / n_identities as f64; n_identities]))
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

/// Scalar loss and its gradient w.r.t. the first batch argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Vec<Tensor>,
}

fn check_pairs(a: &[Tensor], b: &[Tensor], what: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(FanError::validation(format!(
            "{what}: batches must be non-empty and equal length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(FanError::validation(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of `||p - y_z||^2`.
pub fn loss_z(fc_out: &[Tensor], n_identities: usize) -> Result<Loss> {
    if fc_out.is_empty() {
        return Err(FanError::validation("loss_z: empty batch"));
    }
    let target = UniformTarget::new(n_identities);
    let b = fc_out.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(fc_out.len());
    for p in fc_out {
        if p.len() != n_identities {
            return Err(FanError::validation(format!(
                "loss_z: row has {} entries, N_D = {n_identities}",
                p.len()
            )));
        }
        let diff: Vec<f64> = p.data().iter().zip(target.values()).map(|(a, t)| a - t).collect();
        value += diff.iter().map(|d| d * d).sum::<f64>();
        grad.push(Tensor::vector(diff.iter().map(|d| 2.0 * d / b).collect()));
    }
    Ok(Loss {
        value: value / b,
        grad,
    })
}

/// Mean negative log-likelihood of the true identity under the FC output.
pub fn loss_fc_adversary(fc_out: &[Tensor], labels: &[usize]) -> Result<Loss> {
    if fc_out.is_empty() || fc_out.len() != labels.len() {
        return Err(FanError::validation("loss_fc_adversary: batch/label length mismatch"));
    }
    let b = fc_out.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(fc_out.len());
    for (p, &y) in fc_out.iter().zip(labels) {
        if y >= p.len() {
            return Err(FanError::validation(format!("label {y} out of range 0..{}", p.len())));
        }
        let py = p.data()[y].max(1e-300);
        value -= py.ln();
        let mut g = vec![0.0; p.len()];
        g[y] = -1.0 / (b * py);
        grad.push(Tensor::vector(g));
    }
    Ok(Loss {
        value: value / b,
        grad,
    })
}

/// Per-pixel mean squared error, averaged over the batch.
pub fn loss_dec(x_rec: &[Tensor], x_target: &[Tensor]) -> Result<Loss> {
    check_pairs(x_rec, x_target, "loss_dec")?;
    let b = x_rec.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(x_rec.len());
    for (r, t) in x_rec.iter().zip(x_target) {
        let n = r.len() as f64;
        value += r.sq_dist(t) / n;
        let g = r.data().iter().zip(t.data()).map(|(a, c)| 2.0 * (a - c) / (n * b)).collect();
        grad.push(Tensor::from_vec(r.shape(), g)?);
    }
    Ok(Loss {
        value: value / b,
        grad,
    })
}

/// Mean over the batch of `||a - b||^2`; gradient w.r.t. `a`.
pub fn loss_enc(f_l: &[Tensor], f_h: &[Tensor]) -> Result<Loss> {
    check_pairs(f_l, f_h, "loss_enc")?;
    let b = f_l.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(f_l.len());
    for (a, t) in f_l.iter().zip(f_h) {
        value += a.sq_dist(t);
        grad.push(Tensor::vector(
            a.data().iter().zip(t.data()).map(|(x, y)| 2.0 * (x - y) / b).collect(),
        ));
    }
    Ok(Loss {
        value: value / b,
        grad,
    })
}

/// Identity-preservation loss through the fixed Enc_H. Gradients flow to
/// `x_gen` only; Enc_H parameters receive nothing.
pub fn loss_id(nets: &Networks, store: &ParamStore, x_gen: &[Tensor], f_target: &[Tensor]) -> Result<Loss> {
    if x_gen.len() != f_target.len() || x_gen.is_empty() {
        return Err(FanError::validation("loss_id: batch length mismatch"));
    }
    nets.enc_h.check(store)?;
    let b = x_gen.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(x_gen.len());
    for (x, f) in x_gen.iter().zip(f_target) {
        let tape = nets.enc_h.forward(store, x)?;
        let d = loss_enc(std::slice::from_ref(tape.output()), std::slice::from_ref(f))?;
        value += d.value;
        let dx = nets.enc_h.backward(store, &tape, &d.grad[0].clone().scaled(1.0 / b), None);
        grad.push(dx);
    }
    Ok(Loss {
        value: value / b,
        grad,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a two-sided loss w.r.t. real and fake logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GanDLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

/// `mean BCE(real -> 1) + mean BCE(fake -> 0)`.
pub fn loss_gan_d(logits_real: &[f64], logits_fake: &[f64]) -> Result<GanDLoss> {
    if logits_real.is_empty() || logits_fake.is_empty() {
        return Err(FanError::validation("loss_gan_d: empty logits"));
    }
    if logits_real.iter().chain(logits_fake).any(|l| !l.is_finite()) {
        return Err(FanError::validation("loss_gan_d: non-finite logit"));
    }
    let (nr, nf) = (logits_real.len() as f64, logits_fake.len() as f64);
    let value = logits_real.iter().map(|&l| softplus(-l)).sum::<f64>() / nr
        + logits_fake.iter().map(|&l| softplus(l)).sum::<f64>() / nf;
    Ok(GanDLoss {
        value,
        grad_real: logits_real.iter().map(|&l| -sigmoid(-l) / nr).collect(),
        grad_fake: logits_fake.iter().map(|&l| sigmoid(l) / nf).collect(),
    })
}

/// Non-saturating generator loss `mean BCE(fake -> 1)`.
pub fn loss_gan_g(logits_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits_fake.is_empty() || logits_fake.iter().any(|l| !l.is_finite()) {
        return Err(FanError::validation("loss_gan_g: empty or non-finite logits"));
    }
    let n = logits_fake.len() as f64;
    let value = logits_fake.iter().map(|&l| softplus(-l)).sum::<f64>() / n;
    Ok((value, logits_fake.iter().map(|&l| -sigmoid(-l) / n).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLoss {
    pub value: f64,
    pub cross_entropy: f64,
    pub margin: f64,
    pub grad_features: Vec<Tensor>,
    pub grad_logits: Vec<Tensor>,
}

/// Softmax cross-entropy plus `lambda_m * mean((||f|| - m)^2)`.
pub fn loss_pretrain(
    features: &[Tensor],
    logits: &[Tensor],
    labels: &[usize],
    m: f64,
    lambda_m: f64,
) -> Result<PretrainLoss> {
    if !(m > 0.0) {
        return Err(FanError::validation("loss_pretrain: m must be > 0"));
    }
    if features.is_empty() || features.len() != logits.len() || logits.len() != labels.len() {
        return Err(FanError::validation("loss_pretrain: batch length mismatch"));
    }
    let b = features.len() as f64;
    let (mut ce, mut reg) = (0.0, 0.0);
    let mut grad_features = Vec::with_capacity(features.len());
    let mut grad_logits = Vec::with_capacity(features.len());
    for ((f, l), &y) in features.iter().zip(logits).zip(labels) {
        if y >= l.len() {
            return Err(FanError::validation(format!("label {y} out of range 0..{}", l.len())));
        }
        let p = softmax(l);
        // log-softmax directly for accuracy
        let mx = l.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + l.data().iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        ce += lse - l.data()[y];
        let mut gl: Vec<f64> = p.data().iter().map(|v| v / b).collect();
        gl[y] -= 1.0 / b;
        grad_logits.push(Tensor::vector(gl));

        let norm = f.norm();
        reg += (norm - m) * (norm - m);
        let gf = if norm > 1e-12 {
            let c = lambda_m * 2.0 * (norm - m) / (norm * b);
            f.data().iter().map(|v| c * v).collect()
        } else {
            vec![0.0; f.len()]
        };
        grad_features.push(Tensor::vector(gf));
    }
    let (ce, reg) = (ce / b, reg / b);
    Ok(PretrainLoss {
        value: ce + lambda_m * reg,
        cross_entropy: ce,
        margin: reg,
        grad_features,
        grad_logits,
    })
}

/// Image-level adaptation loss `MSE(Dec(f_l, Enc_Z(x_h)), x_h)` through the
/// fixed Enc_Z and Dec. Gradient is w.r.t. `f_l`.
pub fn loss_enc_dec(nets: &Networks, store: &ParamStore, f_l: &[Tensor], x_h: &[Tensor]) -> Result<Loss> {
    if f_l.len() != x_h.len() || f_l.is_empty() {
        return Err(FanError::validation("loss_enc_dec: batch length mismatch"));
    }
    nets.enc_z.check(store)?;
    nets.dec.check(store)?;
    let b = f_l.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(f_l.len());
    for (f, x) in f_l.iter().zip(x_h) {
        let z = nets.enc_z.infer(store, x)?;
        let tape = nets.dec.forward(store, &nets.dec_input(f, &z)?)?;
        let l = loss_dec(std::slice::from_ref(tape.output()), std::slice::from_ref(x))?;
        value += l.value;
        let g = nets.dec.backward(store, &tape, &l.grad[0].clone().scaled(1.0 / b), None);
        grad.push(nets.split_dec_grad(&g).0);
    }
    Ok(Loss {
        value: value / b,
        grad,
    })
}

/// One named loss term with the weight it enters the total with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub terms: Vec<Term>,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    fn push(&mut self, name: &str, weight: f64, value: f64) {
        self.terms.push(Term {
            name: name.to_string(),
            weight,
            value,
        });
    }

    pub fn is_finite(&self) -> bool {
        self.terms.iter().all(|t| t.value.is_finite())
    }

    /// Element-wise mean of per-sample breakdowns with identical term lists.
    fn mean(parts: &[Breakdown]) -> Breakdown {
        let mut out = parts[0].clone();
        for t in out.terms.iter_mut() {
            t.value = 0.0;
        }
        for p in parts {
            for (o, t) in out.terms.iter_mut().zip(&p.terms) {
                o.value += t.value;
            }
        }
        for t in out.terms.iter_mut() {
            t.value /= parts.len() as f64;
        }
        out
    }
}

/// Read-only view of the networks and their parameters.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub nets: &'a Networks,
    pub store: &'a ParamStore,
}

impl<'a> Models<'a> {
    pub fn new(nets: &'a Networks, store: &'a ParamStore) -> Self {
        Models { nets, store }
    }

    pub fn require(&self, models: &[Model], stage: Stage) -> Result<()> {
        for &m in models {
            if !self.nets.has_model(self.store, m) {
                return Err(FanError::config(format!("stage {stage} needs {m}, which is not loaded")));
            }
        }
        Ok(())
    }
}

/// Inputs of one training step.
#[derive(Debug, Clone)]
pub enum StageBatch {
    /// Stage 1.1: high-resolution images, their degraded versions, labels.
    Pretrain {
        hr: Vec<Tensor>,
        lr: Vec<Tensor>,
        labels: Vec<usize>,
    },
    /// Stage 1.2: high-resolution images only.
    Disentangle { hr: Vec<Tensor>, labels: Vec<usize> },
    /// Stage 2 / fine-tuning: `lr[i]` is the low-resolution input whose
    /// target is `hr[i]` (paired or unpaired).
    Adapt { hr: Vec<Tensor>, lr: Vec<Tensor> },
}

impl StageBatch {
    pub fn len(&self) -> usize {
        match self {
            StageBatch::Pretrain { hr, .. } => hr.len(),
            StageBatch::Disentangle { hr, .. } => hr.len(),
            StageBatch::Adapt { hr, .. } => hr.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type SampleOut = Result<(Breakdown, Grads)>;

fn reduce(parts: Vec<SampleOut>) -> Result<(Breakdown, Grads)> {
    let parts: Vec<(Breakdown, Grads)> = parts.into_iter().collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let breakdowns: Vec<Breakdown> = parts.iter().map(|p| p.0.clone()).collect();
    let mut grads = Grads::default();
    for (_, g) in &parts {
        grads.merge(g);
    }
    grads.scale(1.0 / n);
    Ok((Breakdown::mean(&breakdowns), grads))
}

fn one(t: &Tensor) -> &[Tensor] {
    std::slice::from_ref(t)
}

/// Weighted training objective for a stage, averaged over the batch, with
/// gradients for the stage's trainable networks only. For stage 1.2 this is
/// the generator side; the adversaries use [`dis_step_loss`] and
/// [`fc_step_loss`].
pub fn stage_loss(
    stage: Stage,
    batch: &StageBatch,
    models: Models<'_>,
    weights: &LossWeights,
    exec: Exec,
) -> Result<(Breakdown, Grads)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(FanError::validation("empty batch"));
    }
    match (stage, batch) {
        (Stage::S1_1, StageBatch::Pretrain { hr, lr, labels }) => {
            models.require(&[Model::EncH], stage)?;
            if lr.len() != hr.len() || labels.len() != hr.len() {
                return Err(FanError::validation("pretrain batch length mismatch"));
            }
            reduce(exec.map_range(hr.len(), |i| {
                pretrain_sample(models, &hr[i], &lr[i], labels[i], weights)
            }))
        }
        (Stage::S1_2, StageBatch::Disentangle { hr, .. }) => {
            models.require(&[Model::EncH, Model::EncZ, Model::Dec, Model::Dis, Model::Fc], stage)?;
            reduce(exec.map_range(hr.len(), |i| generator_sample(models, &hr[i], weights)))
        }
        (Stage::S2 | Stage::Finetune, StageBatch::Adapt { hr, lr }) => {
            models.require(&[Model::EncH, Model::EncL, Model::EncZ, Model::Dec, Model::Dis], stage)?;
            if lr.len() != hr.len() {
                return Err(FanError::validation("adaptation batch length mismatch"));
            }
            reduce(exec.map_range(hr.len(), |i| adapt_sample(models, &hr[i], &lr[i], weights)))
        }
        _ => Err(FanError::config(format!("batch kind does not match stage {stage}"))),
    }
}

fn pretrain_sample(models: Models<'_>, hr: &Tensor, lr: &Tensor, label: usize, w: &LossWeights) -> SampleOut {
    let Models { nets, store } = models;
    let mut grads = Grads::default();
    let mut value = 0.0;
    for x in [hr, lr] {
        let tape = nets.enc_h.forward(store, x)?;
        let f = tape.output();
        let ctape = nets.enc_h_cls.forward(store, f)?;
        let l = loss_pretrain(one(f), one(ctape.output()), &[label], w.margin_m, w.lambda_m)?;
        value += 0.5 * l.value;
        let gl = l.grad_logits[0].clone().scaled(0.5);
        let mut gf = nets.enc_h_cls.backward(store, &ctape, &gl, Some(&mut grads));
        gf.add_scaled(&l.grad_features[0], 0.5);
        nets.enc_h.backward(store, &tape, &gf, Some(&mut grads));
    }
    let mut bd = Breakdown::default();
    bd.push("pretrain", 1.0, value);
    Ok((bd, grads))
}

fn generator_sample(models: Models<'_>, x_h: &Tensor, w: &LossWeights) -> SampleOut {
    let Models { nets, store } = models;
    let mut grads = Grads::default();
    let mut bd = Breakdown::default();
    let f_h = nets.enc_h.infer(store, x_h)?;
    let ztape = nets.enc_z.forward(store, x_h)?;
    let z = ztape.output();
    let mut dz = Tensor::zeros(z.shape());

    let need_rec = w.lambda_dec > 0.0 || w.lambda_id > 0.0 || w.lambda_gan > 0.0;
    if need_rec {
        // x_h' = Dec(f_h, z_h) and x_h0' = Dec(f_h, 0)
        let rec = nets.dec.forward(store, &nets.dec_input(&f_h, z)?)?;
        let norm = nets.dec.forward(store, &nets.dec_input(&f_h, &nets.zero_z())?)?;
        let mut g_rec = Tensor::zeros(rec.output().shape());
        let mut g_norm = Tensor::zeros(norm.output().shape());
        if w.lambda_dec > 0.0 {
            let l = loss_dec(one(rec.output()), one(x_h))?;
            bd.push("dec", w.lambda_dec, l.value);
            g_rec.add_scaled(&l.grad[0], w.lambda_dec);
        }
        if w.lambda_id > 0.0 {
            let a = loss_id(nets, store, one(rec.output()), one(&f_h))?;
            let b = loss_id(nets, store, one(norm.output()), one(&f_h))?;
            bd.push("id", w.lambda_id, a.value + b.value);
            g_rec.add_scaled(&a.grad[0], w.lambda_id);
            g_norm.add_scaled(&b.grad[0], w.lambda_id);
        }
        if w.lambda_gan > 0.0 {
            let ta = nets.dis.forward(store, rec.output())?;
            let tb = nets.dis.forward(store, norm.output())?;
            let (va, ga) = loss_gan_g(&[ta.output().data()[0]])?;
            let (vb, gb) = loss_gan_g(&[tb.output().data()[0]])?;
            bd.push("gan", w.lambda_gan, va + vb);
            let da = nets.dis.backward(store, &ta, &Tensor::vector(vec![w.lambda_gan * ga[0]]), None);
            let db = nets.dis.backward(store, &tb, &Tensor::vector(vec![w.lambda_gan * gb[0]]), None);
            g_rec.add_assign(&da);
            g_norm.add_assign(&db);
        }
        let gin = nets.dec.backward(store, &rec, &g_rec, Some(&mut grads));
        dz.add_assign(&nets.split_dec_grad(&gin).1);
        nets.dec.backward(store, &norm, &g_norm, Some(&mut grads));
    }
    if w.lambda_z > 0.0 {
        // FC passes the gradient through without receiving any itself
        let ftape = nets.fc.forward(store, z)?;
        let p = softmax(ftape.output());
        let l = loss_z(one(&p), nets.cfg.n_identities)?;
        bd.push("z", w.lambda_z, l.value);
        let dlogits = softmax_backward(&p, &l.grad[0].clone().scaled(w.lambda_z));
        dz.add_assign(&nets.fc.backward(store, &ftape, &dlogits, None));
    }
    if !bd.terms.is_empty() {
        nets.enc_z.backward(store, &ztape, &dz, Some(&mut grads));
    }
    Ok((bd, grads))
}

fn adapt_sample(models: Models<'_>, x_h: &Tensor, x_l: &Tensor, w: &LossWeights) -> SampleOut {
    let Models { nets, store } = models;
    let mut grads = Grads::default();
    let mut bd = Breakdown::default();
    let ltape = nets.enc_l.forward(store, x_l)?;
    let f_l = ltape.output();
    let f_h = nets.enc_h.infer(store, x_h)?;
    let mut df = Tensor::zeros(f_l.shape());

    if w.lambda_enc > 0.0 {
        let l = loss_enc(one(f_l), one(&f_h))?;
        bd.push("enc", w.lambda_enc, l.value);
        df.add_scaled(&l.grad[0], w.lambda_enc);
    }
    if w.lambda_enc_dec > 0.0 {
        let l = loss_enc_dec(nets, store, one(f_l), one(x_h))?;
        bd.push("enc_dec", w.lambda_enc_dec, l.value);
        df.add_scaled(&l.grad[0], w.lambda_enc_dec);
    }
    if w.lambda_id > 0.0 || w.lambda_gan > 0.0 {
        let norm = nets.dec.forward(store, &nets.dec_input(f_l, &nets.zero_z())?)?;
        let mut g_norm = Tensor::zeros(norm.output().shape());
        if w.lambda_id > 0.0 {
            let l = loss_id(nets, store, one(norm.output()), one(&f_h))?;
            bd.push("id", w.lambda_id, l.value);
            g_norm.add_scaled(&l.grad[0], w.lambda_id);
        }
        if w.lambda_gan > 0.0 {
            let t = nets.dis.forward(store, norm.output())?;
            let (v, g) = loss_gan_g(&[t.output().data()[0]])?;
            bd.push("gan", w.lambda_gan, v);
            g_norm.add_assign(&nets.dis.backward(store, &t, &Tensor::vector(vec![w.lambda_gan * g[0]]), None));
        }
        let gin = nets.dec.backward(store, &norm, &g_norm, None);
        df.add_assign(&nets.split_dec_grad(&gin).0);
    }
    if !bd.terms.is_empty() {
        nets.enc_l.backward(store, &ltape, &df, Some(&mut grads));
    }
    Ok((bd, grads))
}

/// Discriminator objective on real `x_h` versus the current reconstructions
/// `Dec(f_h, z_h)` and normalizations `Dec(f_h, 0)`; gradients reach Dis only.
pub fn dis_step_loss(models: Models<'_>, hr: &[Tensor], exec: Exec) -> Result<(f64, Grads)> {
    let Models { nets, store } = models;
    models.require(&[Model::EncH, Model::EncZ, Model::Dec, Model::Dis], Stage::S1_2)?;
    if hr.is_empty() {
        return Err(FanError::validation("empty batch"));
    }
    let parts = exec.map(hr, |x_h| -> Result<(f64, Grads)> {
        let f_h = nets.enc_h.infer(store, x_h)?;
        let z = nets.enc_z.infer(store, x_h)?;
        let rec = nets.dec.infer(store, &nets.dec_input(&f_h, &z)?)?;
        let norm = nets.dec.infer(store, &nets.dec_input(&f_h, &nets.zero_z())?)?;
        let tr = nets.dis.forward(store, x_h)?;
        let ta = nets.dis.forward(store, &rec)?;
        let tb = nets.dis.forward(store, &norm)?;
        let l = loss_gan_d(
            &[tr.output().data()[0]],
            &[ta.output().data()[0], tb.output().data()[0]],
        )?;
        let mut g = Grads::default();
        nets.dis.backward(store, &tr, &Tensor::vector(vec![l.grad_real[0]]), Some(&mut g));
        nets.dis.backward(store, &ta, &Tensor::vector(vec![l.grad_fake[0]]), Some(&mut g));
        nets.dis.backward(store, &tb, &Tensor::vector(vec![l.grad_fake[1]]), Some(&mut g));
        Ok((l.value, g))
    });
    mean_scalar(parts)
}

/// FC adversary: cross-entropy on `z_h` detached from Enc_Z.
pub fn fc_step_loss(models: Models<'_>, hr: &[Tensor], labels: &[usize], exec: Exec) -> Result<(f64, Grads)> {
    let Models { nets, store } = models;
    models.require(&[Model::EncZ, Model::Fc], Stage::S1_2)?;
    if hr.is_empty() || hr.len() != labels.len() {
        return Err(FanError::validation("fc step: batch/label length mismatch"));
    }
    let idx: Vec<usize> = (0..hr.len()).collect();
    let parts = exec.map(&idx, |&i| -> Result<(f64, Grads)> {
        let z = nets.enc_z.infer(store, &hr[i])?;
        let tape = nets.fc.forward(store, &z)?;
        let p = softmax(tape.output());
        let l = loss_fc_adversary(one(&p), &[labels[i]])?;
        let dlogits = softmax_backward(&p, &l.grad[0]);
        let mut g = Grads::default();
        nets.fc.backward(store, &tape, &dlogits, Some(&mut g));
        Ok((l.value, g))
    });
    mean_scalar(parts)
}

fn mean_scalar(parts: Vec<Result<(f64, Grads)>>) -> Result<(f64, Grads)> {
    let parts: Vec<(f64, Grads)> = parts.into_iter().collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut g = Grads::default();
    let mut v = 0.0;
    for (pv, pg) in &parts {
        v += pv;
        g.merge(pg);
    }
    g.scale(1.0 / n);
    Ok((v / n, g))
}
