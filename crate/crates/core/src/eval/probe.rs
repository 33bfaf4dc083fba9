use crate::error::{FanError, Result};

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent from zero weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `classes x (dim + 1)`, last column is the bias.
    weights: Vec<Vec<f64>>,
}

pub const PROBE_ITERATIONS: usize = 400;
pub const PROBE_LR: f64 = 0.5;
pub const PROBE_L2: f64 = 1e-3;

fn softmax_row(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in logits.iter_mut() {
        *v /= s;
    }
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(FanError::validation("probe needs matching, non-empty features and labels"));
        }
        if classes < 2 || y.iter().any(|&c| c >= classes) {
            return Err(FanError::validation("probe labels outside class range"));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(FanError::validation("probe features differ in length"));
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|d| x.iter().map(|r| r[d]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|d| {
                let var = x.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 }
            })
            .collect();
        let mut probe = LinearProbe {
            mean,
            scale,
            weights: vec![vec![0.0; dim + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..PROBE_ITERATIONS {
            let mut grad = vec![vec![0.0; dim + 1]; classes];
            for (r, &c) in xs.iter().zip(y) {
                let mut p = probe.logits_std(r);
                softmax_row(&mut p);
                p[c] -= 1.0;
                for (g, pk) in grad.iter_mut().zip(&p) {
                    for (gd, xd) in g.iter_mut().zip(r) {
                        *gd += pk * xd;
                    }
                    g[dim] += pk;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for d in 0..=dim {
                    let reg = if d < dim { PROBE_L2 * w[d] } else { 0.0 };
                    w[d] -= PROBE_LR * (g[d] / n + reg);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits_std(&self, r: &[f64]) -> Vec<f64> {
        let dim = r.len();
        self.weights
            .iter()
            .map(|w| w[..dim].iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + w[dim])
            .collect()
    }

    /// Predicted class; ties go to the lower class index.
    pub fn predict(&self, r: &[f64]) -> usize {
        let l = self.logits_std(&self.standardize(r));
        let mut best = 0;
        for (k, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        let hits = x.iter().zip(y).filter(|(r, &c)| self.predict(r) == c).count();
        hits as f64 / x.len() as f64
    }
}

/// Features of one probe sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    pub identity: usize,
    pub pose_bucket: usize,
    /// Probe-training (true) or probe-evaluation (false) half.
    pub fit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub accuracy_f: f64,
    pub accuracy_z: f64,
    pub accuracy_z_pose: f64,
    pub chance_identity: f64,
    pub chance_pose: f64,
}

/// Identity probes on `f` and `z`, and a pose probe on `z`, each fitted on
/// the `fit` half and scored on the rest.
pub fn disentanglement_probe(samples: &[ProbeSample]) -> Result<ProbeReport> {
    let (fit, held): (Vec<&ProbeSample>, Vec<&ProbeSample>) = samples.iter().partition(|s| s.fit);
    if fit.is_empty() || held.is_empty() {
        return Err(FanError::Protocol("probe needs both fit and evaluation samples".into()));
    }
    let n_id = samples.iter().map(|s| s.identity).max().unwrap_or(0) + 1;
    let n_pose = samples.iter().map(|s| s.pose_bucket).max().unwrap_or(0) + 1;
    let run = |get: &dyn Fn(&ProbeSample) -> Vec<f64>, label: &dyn Fn(&ProbeSample) -> usize, classes: usize| -> Result<f64> {
        let x: Vec<Vec<f64>> = fit.iter().map(|s| get(s)).collect();
        let y: Vec<usize> = fit.iter().map(|s| label(s)).collect();
        let p = LinearProbe::fit(&x, &y, classes.max(2))?;
        let hx: Vec<Vec<f64>> = held.iter().map(|s| get(s)).collect();
        let hy: Vec<usize> = held.iter().map(|s| label(s)).collect();
        Ok(p.accuracy(&hx, &hy))
    };
    Ok(ProbeReport {
        accuracy_f: run(&|s| s.f.clone(), &|s| s.identity, n_id)?,
        accuracy_z: run(&|s| s.z.clone(), &|s| s.identity, n_id)?,
        accuracy_z_pose: run(&|s| s.z.clone(), &|s| s.pose_bucket, n_pose)?,
        chance_identity: 1.0 / n_id as f64,
        chance_pose: 1.0 / n_pose as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn one_hot_identity_is_perfect() {
        let mut samples = Vec::new();
        let mut rng = stream(3, "probe-test", &[]);
        for id in 0..6 {
            for k in 0..8 {
                let mut f = vec![0.0; 6];
                f[id] = 1.0;
                let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                samples.push(ProbeSample {
                    f,
                    z,
                    identity: id,
                    pose_bucket: k % 2,
                    fit: k % 2 == 0,
                });
            }
        }
        let r = disentanglement_probe(&samples).unwrap();
        assert_eq!(r.accuracy_f, 1.0);
        assert!(r.accuracy_z < 0.6);
    }

    #[test]
    fn random_features_near_chance() {
        let mut rng = stream(5, "probe-test", &[]);
        let classes = 10;
        let x: Vec<Vec<f64>> = (0..2000).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = (0..2000).map(|_| rng.random_range(0..classes)).collect();
        let p = LinearProbe::fit(&x[..1000], &y[..1000], classes).unwrap();
        let acc = p.accuracy(&x[1000..], &y[1000..]);
        // chance 0.1, binomial sigma ~0.0095 over 1000 samples
        assert!((acc - 0.1).abs() < 0.04, "{acc}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(LinearProbe::fit(&[], &[], 2).is_err());
        assert!(LinearProbe::fit(&[vec![1.0]], &[3], 2).is_err());
        let s = ProbeSample {
            f: vec![1.0],
            z: vec![1.0],
            identity: 0,
            pose_bucket: 0,
            fit: true,
        };
        assert!(disentanglement_probe(&[s]).is_err());
    }
}
