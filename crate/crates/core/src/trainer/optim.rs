use std::collections::BTreeMap;

use crate::error::{FanError, Result};
use crate::nets::{Grads, ParamStore, Tensor};

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for one group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimState {
    fn default() -> Self {
        OptimState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One bias-corrected Adam step. Parameters that are frozen or absent from
/// `grads` are left untouched, and so are their moments.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &Grads,
    opt: &mut OptimState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = store.get(name)?;
        if p.value.shape() != g.shape() {
            return Err(FanError::validation(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, g) in grads.iter() {
        if !store.is_trainable(name) {
            continue;
        }
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = store.param_mut(name).expect("checked above");
        let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
        for (((w, gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    store.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("m.x", Tensor::vector(vec![v])).unwrap();
        s
    }

    fn grad(v: f64) -> Grads {
        let mut g = Grads::default();
        g.accumulate("m.x", &[1], &[v]);
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.3);
        let mut o = OptimState::default();
        optimizer_step(&mut s, &grad(0.0), &mut o, 0.1).unwrap();
        assert_eq!(s.value("m.x").data()[0], 0.3);
        assert_eq!(o.step, 1);
    }

    #[test]
    fn matches_hand_recurrence() {
        for &(b1, b2) in &[(0.5, 0.999), (0.9, 0.99), (0.0, 0.5)] {
            let mut s = scalar_store(1.0);
            let mut o = OptimState {
                beta1: b1,
                beta2: b2,
                ..OptimState::default()
            };
            let lr = 0.01;
            let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
            for t in 1..=5 {
                optimizer_step(&mut s, &grad(1.0), &mut o, lr).unwrap();
                m = b1 * m + (1.0 - b1);
                v = b2 * v + (1.0 - b2);
                let step = lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + 1e-8);
                if t == 1 {
                    assert!((step - lr).abs() < 1e-9);
                }
                w -= step;
                assert!((s.value("m.x").data()[0] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_untouched() {
        let mut s = scalar_store(2.0);
        s.freeze(&["m"]).unwrap();
        let mut o = OptimState::default();
        optimizer_step(&mut s, &grad(5.0), &mut o, 0.1).unwrap();
        assert_eq!(s.value("m.x").data()[0], 2.0);
        assert!(o.m.is_empty());
    }

    #[test]
    fn bad_gradient_rejected() {
        let mut s = scalar_store(2.0);
        let mut g = Grads::default();
        g.accumulate("m.x", &[2], &[1.0, 1.0]);
        assert!(optimizer_step(&mut s, &g, &mut OptimState::default(), 0.1).is_err());
        let mut g = Grads::default();
        g.accumulate("other", &[1], &[1.0]);
        assert!(optimizer_step(&mut s, &g, &mut OptimState::default(), 0.1).is_err());
    }
}
