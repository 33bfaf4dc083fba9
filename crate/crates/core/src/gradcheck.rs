//! Central finite-difference verification of every network and loss.
//!
//! Error metric per parameter tensor: `||analytic - numeric|| / max(||analytic||,
//! ||numeric||, FLOOR)`. The floor keeps tensors whose true gradient is
//! essentially zero from failing on round-off alone.

use std::time::Instant;

use rand::Rng;

use crate::error::Result;
use crate::exec::Exec;
use crate::nets::{softmax, Grads, Model, NetConfig, Networks, ParamStore, Tensor};
use crate::objectives::{
    dis_step_loss, fc_step_loss, loss_dec, loss_enc, loss_enc_dec, loss_fc_adversary,
    loss_gan_d, loss_gan_g, loss_id, loss_pretrain, loss_z, stage_loss, LossWeights, Models, Stage,
    StageBatch,
};
use crate::rng::stream;

pub const EPS: f64 = 1e-5;
/// Pass threshold for 64-bit arithmetic.
pub const TOL_F64: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<48} {:>12}  status\n", "check", "rel_error");
        for r in &self.results {
            s.push_str(&format!(
                "{:<48} {:>12.3e}  {}\n",
                r.name,
                r.rel_error,
                if r.passed { "pass" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "{} checks, {} failed, {:.2}s\n",
            self.results.len(),
            self.results.iter().filter(|r| !r.passed).count(),
            self.seconds
        ));
        s
    }
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(FLOOR)
}

/// Compares `analytic` against central differences of `f` for every
/// parameter under `prefixes`. Parameters absent from `analytic` are
/// expected to have zero gradient.
pub fn check_params<F>(
    label: &str,
    store: &ParamStore,
    prefixes: &[&str],
    analytic: &Grads,
    f: F,
) -> Vec<CheckResult>
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let names: Vec<String> = prefixes
        .iter()
        .flat_map(|p| store.names_with_prefix(p).cloned().collect::<Vec<_>>())
        .collect();
    let mut out = Vec::new();
    for name in names {
        let n = store.value(&name).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.value(&name).data()[i];
            set_elem(&mut work, &name, i, orig + EPS);
            let fp = f(&work);
            set_elem(&mut work, &name, i, orig - EPS);
            let fm = f(&work);
            set_elem(&mut work, &name, i, orig);
            *slot = (fp - fm) / (2.0 * EPS);
        }
        let a = analytic
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let e = rel_error(&a, &numeric);
        out.push(CheckResult {
            name: format!("{label} d/d {name}"),
            rel_error: e,
            passed: e < TOL_F64,
        });
    }
    out
}

fn set_elem(store: &mut ParamStore, name: &str, i: usize, v: f64) {
    store.param_mut(name).expect("known parameter").value.data_mut()[i] = v;
}

/// Compares an analytic input gradient against central differences.
pub fn check_input<F>(label: &str, x: &Tensor, analytic: &Tensor, f: F) -> CheckResult
where
    F: Fn(&Tensor) -> f64,
{
    let mut work = x.clone();
    let mut numeric = vec![0.0; x.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        work.data_mut()[i] = orig + EPS;
        let fp = f(&work);
        work.data_mut()[i] = orig - EPS;
        let fm = f(&work);
        work.data_mut()[i] = orig;
        *slot = (fp - fm) / (2.0 * EPS);
    }
    let e = rel_error(analytic.data(), &numeric);
    CheckResult {
        name: label.to_string(),
        rel_error: e,
        passed: e < TOL_F64,
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Fixture for the reduced instance: all six networks initialized.
pub struct Fixture {
    pub nets: Networks,
    pub store: ParamStore,
    pub images: Vec<Tensor>,
    pub images_lr: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = NetConfig::reduced();
        let nets = Networks::new(&cfg)?;
        let mut store = ParamStore::default();
        for m in Model::ALL {
            nets.init_model(&mut store, m, seed)?;
        }
        let mut rng = stream(seed, "gradcheck", &[]);
        let side = cfg.image_side;
        let images = (0..2)
            .map(|_| random_tensor(&mut rng, &[1, side, side], 0.9))
            .collect();
        let images_lr = (0..2)
            .map(|_| random_tensor(&mut rng, &[1, side, side], 0.9))
            .collect();
        Ok(Fixture {
            nets,
            store,
            images,
            images_lr,
            labels: vec![0, 2],
        })
    }
}

/// Optional corruption applied to analytic gradients; used to confirm the
/// checker itself rejects a wrong adjoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    ScaleDecoder(f64),
}

fn corrupt(g: &mut Grads, c: Corruption) {
    if let Corruption::ScaleDecoder(s) = c {
        let names: Vec<String> = g.names().filter(|n| n.starts_with("dec.")).cloned().collect();
        let mut scaled = Grads::default();
        for (n, t) in g.iter() {
            if names.contains(n) {
                scaled.accumulate(n, t.shape(), &t.clone().scaled(s).into_data());
            } else {
                scaled.accumulate(n, t.shape(), t.data());
            }
        }
        *g = scaled;
    }
}

/// Runs the full finite-difference suite on the reduced configuration.
pub fn run_suite(seed: u64, corruption: Corruption) -> Result<Report> {
    let t0 = Instant::now();
    let fx = Fixture::new(seed)?;
    let (nets, store) = (&fx.nets, &fx.store);
    let mut rng = stream(seed, "gradcheck-probe", &[]);
    let mut results = Vec::new();
    let cfg = &nets.cfg;

    // network forwards under a random linear probe, parameters and inputs
    let probe_nets = [
        ("enc_h", &nets.enc_h, "enc_h"),
        ("enc_l", &nets.enc_l, "enc_l"),
        ("enc_z", &nets.enc_z, "enc_z"),
        ("dis", &nets.dis, "dis"),
    ];
    for (label, net, prefix) in probe_nets {
        let out_len = net.infer(store, &fx.images[0])?.len();
        let r = random_tensor(&mut rng, &[out_len], 1.0);
        let mut g = Grads::default();
        for x in &fx.images {
            let tape = net.forward(store, x)?;
            net.backward(store, &tape, &r, Some(&mut g));
        }
        let probe = |s: &ParamStore| {
            fx.images
                .iter()
                .map(|x| dot(&net.infer(s, x).expect("forward"), &r))
                .sum::<f64>()
        };
        results.extend(check_params(&format!("{label}_forward"), store, &[prefix], &g, probe));
        let tape = net.forward(store, &fx.images[0])?;
        let dx = net.backward(store, &tape, &r, None);
        results.push(check_input(&format!("{label}_forward d/d input"), &fx.images[0], &dx, |x| {
            dot(&net.infer(store, x).expect("forward"), &r)
        }));
    }

    // decoder, w.r.t. parameters and both inputs
    {
        let f = random_tensor(&mut rng, &[cfg.d_f], 1.0);
        let z = random_tensor(&mut rng, &[cfg.d_z], 1.0);
        let r = random_tensor(&mut rng, &[1, cfg.image_side, cfg.image_side], 1.0);
        let inp = nets.dec_input(&f, &z)?;
        let tape = nets.dec.forward(store, &inp)?;
        let mut g = Grads::default();
        let dinp = nets.dec.backward(store, &tape, &r, Some(&mut g));
        corrupt(&mut g, corruption);
        results.extend(check_params("dec_forward", store, &["dec"], &g, |s| {
            dot(&nets.dec.infer(s, &inp).expect("forward"), &r)
        }));
        results.push(check_input("dec_forward d/d (f, z)", &inp, &dinp, |x| {
            dot(&nets.dec.infer(store, x).expect("forward"), &r)
        }));
    }

    // FC with softmax output
    {
        let z = random_tensor(&mut rng, &[cfg.d_z], 1.0);
        let r = random_tensor(&mut rng, &[cfg.n_identities], 1.0);
        let tape = nets.fc.forward(store, &z)?;
        let p = softmax(tape.output());
        let dl = crate::nets::softmax_backward(&p, &r);
        let mut g = Grads::default();
        let dz = nets.fc.backward(store, &tape, &dl, Some(&mut g));
        let fwd = |s: &ParamStore, z: &Tensor| dot(&softmax(&nets.fc.infer(s, z).expect("fc")), &r);
        results.extend(check_params("fc_forward", store, &["fc"], &g, |s| fwd(s, &z)));
        results.push(check_input("fc_forward d/d z", &z, &dz, |x| fwd(store, x)));
    }

    // primitive losses w.r.t. their inputs
    {
        let p = softmax(&random_tensor(&mut rng, &[cfg.n_identities], 2.0));
        let l = loss_z(std::slice::from_ref(&p), cfg.n_identities)?;
        results.push(check_input("loss_z d/d fc_out", &p, &l.grad[0], |x| {
            loss_z(std::slice::from_ref(x), cfg.n_identities).expect("loss").value
        }));
        let l = loss_fc_adversary(std::slice::from_ref(&p), &[1])?;
        results.push(check_input("loss_fc_adversary d/d fc_out", &p, &l.grad[0], |x| {
            loss_fc_adversary(std::slice::from_ref(x), &[1]).expect("loss").value
        }));

        let a = fx.images[0].clone();
        let b = &fx.images[1];
        let l = loss_dec(std::slice::from_ref(&a), std::slice::from_ref(b))?;
        results.push(check_input("loss_dec d/d x_rec", &a, &l.grad[0], |x| {
            loss_dec(std::slice::from_ref(x), std::slice::from_ref(b)).expect("loss").value
        }));

        let fa = random_tensor(&mut rng, &[cfg.d_f], 2.0);
        let fb = random_tensor(&mut rng, &[cfg.d_f], 2.0);
        let l = loss_enc(std::slice::from_ref(&fa), std::slice::from_ref(&fb))?;
        results.push(check_input("loss_enc d/d f_l", &fa, &l.grad[0], |x| {
            loss_enc(std::slice::from_ref(x), std::slice::from_ref(&fb)).expect("loss").value
        }));

        let l = loss_id(nets, store, std::slice::from_ref(&a), std::slice::from_ref(&fb))?;
        results.push(check_input("loss_id d/d x_gen", &a, &l.grad[0], |x| {
            loss_id(nets, store, std::slice::from_ref(x), std::slice::from_ref(&fb))
                .expect("loss")
                .value
        }));

        let l = loss_enc_dec(nets, store, std::slice::from_ref(&fa), std::slice::from_ref(b))?;
        results.push(check_input("loss_enc_dec d/d f_l", &fa, &l.grad[0], |x| {
            loss_enc_dec(nets, store, std::slice::from_ref(x), std::slice::from_ref(b))
                .expect("loss")
                .value
        }));

        let logits = random_tensor(&mut rng, &[3], 2.0);
        let d = loss_gan_d(&logits.data()[..1], &logits.data()[1..])?;
        let mut ga = d.grad_real.clone();
        ga.extend(&d.grad_fake);
        results.push(check_input("loss_gan_d d/d logits", &logits, &Tensor::vector(ga), |x| {
            loss_gan_d(&x.data()[..1], &x.data()[1..]).expect("loss").value
        }));
        let (_, gg) = loss_gan_g(logits.data())?;
        results.push(check_input("loss_gan_g d/d logits", &logits, &Tensor::vector(gg), |x| {
            loss_gan_g(x.data()).expect("loss").0
        }));

        let feats = random_tensor(&mut rng, &[cfg.d_f], 3.0);
        let lg = random_tensor(&mut rng, &[cfg.n_identities], 2.0);
        let l = loss_pretrain(
            std::slice::from_ref(&feats),
            std::slice::from_ref(&lg),
            &[1],
            2.0,
            0.3,
        )?;
        results.push(check_input("loss_pretrain d/d features", &feats, &l.grad_features[0], |x| {
            loss_pretrain(std::slice::from_ref(x), std::slice::from_ref(&lg), &[1], 2.0, 0.3)
                .expect("loss")
                .value
        }));
        results.push(check_input("loss_pretrain d/d logits", &lg, &l.grad_logits[0], |x| {
            loss_pretrain(std::slice::from_ref(&feats), std::slice::from_ref(x), &[1], 2.0, 0.3)
                .expect("loss")
                .value
        }));
    }

    // composed stage objectives w.r.t. every trained parameter
    let weights = LossWeights {
        lambda_gan: 0.5,
        lambda_id: 0.3,
        lambda_z: 0.7,
        margin_m: 2.0,
        lambda_m: 0.2,
        ..LossWeights::default()
    };
    let exec = Exec::Sequential;
    let stage_cases = [
        (
            Stage::S1_1,
            StageBatch::Pretrain {
                hr: fx.images.clone(),
                lr: fx.images_lr.clone(),
                labels: fx.labels.clone(),
            },
            vec!["enc_h"],
        ),
        (
            Stage::S1_2,
            StageBatch::Disentangle {
                hr: fx.images.clone(),
                labels: fx.labels.clone(),
            },
            vec!["enc_z", "dec"],
        ),
        (
            Stage::S2,
            StageBatch::Adapt {
                hr: fx.images.clone(),
                lr: fx.images_lr.clone(),
            },
            vec!["enc_l"],
        ),
    ];
    for (stage, batch, prefixes) in stage_cases {
        let (_, mut g) = stage_loss(stage, &batch, Models::new(nets, store), &weights, exec)?;
        corrupt(&mut g, corruption);
        let total = |s: &ParamStore| {
            stage_loss(stage, &batch, Models::new(nets, s), &weights, exec)
                .expect("stage loss")
                .0
                .total()
        };
        results.extend(check_params(&format!("stage_{stage}"), store, &prefixes, &g, total));
    }
    {
        let (_, g) = dis_step_loss(Models::new(nets, store), &fx.images, exec)?;
        results.extend(check_params("loss_gan_d(Dis)", store, &["dis"], &g, |s| {
            dis_step_loss(Models::new(nets, s), &fx.images, exec).expect("dis").0
        }));
        let (_, g) = fc_step_loss(Models::new(nets, store), &fx.images, &fx.labels, exec)?;
        results.extend(check_params("loss_fc_adversary(FC)", store, &["fc"], &g, |s| {
            fc_step_loss(Models::new(nets, s), &fx.images, &fx.labels, exec).expect("fc").0
        }));
    }

    Ok(Report {
        results,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
