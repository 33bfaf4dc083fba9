//! Brute-force reference implementations of the evaluation metrics.

use fan_core::eval::cosine_distance;

/// Exhaustive threshold search per fold: every candidate is scored by
/// counting, and the first best in ascending order wins.
pub fn verification_oracle(d: &[f64], same: &[bool], folds: usize) -> (Vec<f64>, Vec<f64>) {
    let n = d.len();
    let mut accs = Vec::new();
    let mut ts = Vec::new();
    for k in 0..folds {
        let (lo, hi) = (k * n / folds, (k + 1) * n / folds);
        let train: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
        let mut vals: Vec<f64> = train.iter().map(|&i| d[i]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut cands = vec![f64::NEG_INFINITY];
        cands.extend(vals.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        cands.push(f64::INFINITY);
        let score = |t: f64| train.iter().filter(|&&i| (d[i] < t) == same[i]).count();
        let mut best = cands[0];
        for &c in &cands[1..] {
            if score(c) > score(best) {
                best = c;
            }
        }
        let ok = (lo..hi).filter(|&i| (d[i] < best) == same[i]).count();
        accs.push(ok as f64 / (hi - lo) as f64);
        ts.push(best);
    }
    (accs, ts)
}

/// Balanced labels alternating within each fold so no fold is single-class.
pub fn labels(n: usize) -> Vec<bool> {
    (0..n).map(|i| i % 2 == 0).collect()
}

/// One ROC point per threshold taken from the score set, plus the empty
/// acceptance, sorted by threshold descending.
pub fn roc_oracle(same: &[f64], diff: &[f64]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = same.iter().chain(diff).cloned().collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let tar = same.iter().filter(|&&s| s >= t).count() as f64 / same.len() as f64;
        let far = diff.iter().filter(|&&s| s >= t).count() as f64 / diff.len() as f64;
        pts.push((far, tar));
    }
    pts
}

/// Probability that a genuine score beats an impostor score, ties counting
/// half.
pub fn auc_oracle(same: &[f64], diff: &[f64]) -> f64 {
    let mut wins = 0.0;
    for s in same {
        for d in diff {
            wins += if s > d {
                1.0
            } else if s == d {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (same.len() * diff.len()) as f64
}

pub fn tar_oracle(pts: &[(f64, f64)], far: f64) -> f64 {
    let exact: Vec<f64> = pts.iter().filter(|p| p.0 == far).map(|p| p.1).collect();
    if !exact.is_empty() {
        return exact.iter().cloned().fold(f64::MIN, f64::max);
    }
    for w in pts.windows(2) {
        if w[0].0 < far && far < w[1].0 {
            return w[0].1 + (far - w[0].0) / (w[1].0 - w[0].0) * (w[1].1 - w[0].1);
        }
    }
    unreachable!("ROC spans [0, 1]")
}

pub fn rank1_oracle(gallery: &[Vec<f64>], probes: &[Vec<f64>]) -> Vec<usize> {
    let dist: Vec<Vec<f64>> = probes
        .iter()
        .map(|p| gallery.iter().map(|g| cosine_distance(p, g).unwrap()).collect())
        .collect();
    dist.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::INFINITY, f64::min);
            row.iter().position(|&v| v == m).unwrap()
        })
        .collect()
}
