use crate::error::{FanError, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
/// Peak-to-peak range of images in `[-1, 1]`.
pub const PSNR_PEAK: f64 = 2.0;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(FanError::validation("cannot normalize a zero or non-finite feature"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FanError::validation("feature length mismatch"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return Err(FanError::validation("zero or non-finite feature"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    /// Mean held-out accuracy over folds.
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    /// Threshold chosen for each fold; a pair is "same" when its distance
    /// is below it.
    pub thresholds: Vec<f64>,
}

/// K-fold threshold protocol on pair distances.
///
/// Folds are contiguous. For each fold the candidate thresholds are the
/// midpoints between consecutive distinct distances of the other folds,
/// plus `-inf` and `+inf`; the candidate
/// with the best accuracy on the other folds is applied to the held-out
/// fold, ties going to the smaller threshold. A pair is "same" when its
/// distance is below the threshold.
pub fn verification_from_distances(distances: &[f64], same: &[bool], folds: usize) -> Result<Verification> {
    let n = distances.len();
    if same.len() != n {
        return Err(FanError::validation("distances and labels differ in length"));
    }
    if folds < 2 {
        return Err(FanError::validation("need at least 2 folds"));
    }
    if n < 2 * folds {
        return Err(FanError::Protocol(format!("{n} pairs cannot fill {folds} folds of 2")));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(FanError::validation("non-finite distance"));
    }
    let bounds: Vec<usize> = (0..=folds).map(|k| k * n / folds).collect();
    let mut fold_accuracies = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for k in 0..folds {
        let (lo, hi) = (bounds[k], bounds[k + 1]);
        let held = &same[lo..hi];
        if held.iter().all(|&s| s) || held.iter().all(|&s| !s) {
            return Err(FanError::Protocol(format!("fold {k} holds a single class")));
        }
        let mut train: Vec<(f64, bool)> = (0..n)
            .filter(|i| !(lo..hi).contains(i))
            .map(|i| (distances[i], same[i]))
            .collect();
        train.sort_by(|a, b| a.0.total_cmp(&b.0));
        // sweep cuts in ascending order; `correct` counts training pairs
        // classified right when everything before the cut is "same"
        let n_diff = train.iter().filter(|t| !t.1).count() as i64;
        let mut correct = n_diff;
        let (mut best, mut best_t) = (correct, f64::NEG_INFINITY);
        let mut i = 0;
        while i < train.len() {
            let d = train[i].0;
            while i < train.len() && train[i].0 == d {
                correct += if train[i].1 { 1 } else { -1 };
                i += 1;
            }
            if correct > best {
                best = correct;
                best_t = if i < train.len() {
                    0.5 * (d + train[i].0)
                } else {
                    f64::INFINITY
                };
            }
        }
        let ok = (lo..hi)
            .filter(|&i| (distances[i] < best_t) == same[i])
            .count();
        fold_accuracies.push(ok as f64 / (hi - lo) as f64);
        thresholds.push(best_t);
    }
    Ok(Verification {
        accuracy: fold_accuracies.iter().sum::<f64>() / folds as f64,
        fold_accuracies,
        thresholds,
    })
}

pub fn verification(
    features_a: &[Vec<f64>],
    features_b: &[Vec<f64>],
    same: &[bool],
    folds: usize,
) -> Result<Verification> {
    if features_a.len() != features_b.len() {
        return Err(FanError::validation("pair sides differ in length"));
    }
    let d = features_a
        .iter()
        .zip(features_b)
        .map(|(a, b)| cosine_distance(a, b))
        .collect::<Result<Vec<_>>>()?;
    verification_from_distances(&d, same, folds)
}

/// Empirical ROC as `(far, tar)` points from `(0, 0)` to `(1, 1)`, one per
/// distinct score; a pair is accepted when its similarity is at least the
/// threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub points: Vec<(f64, f64)>,
}

impl Roc {
    pub fn new(scores_same: &[f64], scores_diff: &[f64]) -> Result<Self> {
        if scores_same.is_empty() || scores_diff.is_empty() {
            return Err(FanError::validation("ROC needs genuine and impostor scores"));
        }
        if scores_same.iter().chain(scores_diff).any(|s| !s.is_finite()) {
            return Err(FanError::validation("non-finite score"));
        }
        let mut all: Vec<(f64, bool)> = scores_same
            .iter()
            .map(|&s| (s, true))
            .chain(scores_diff.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (ns, nd) = (scores_same.len() as f64, scores_diff.len() as f64);
        let mut points = vec![(0.0, 0.0)];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < all.len() {
            let s = all[i].0;
            while i < all.len() && all[i].0 == s {
                if all[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push((fp as f64 / nd, tp as f64 / ns));
        }
        Ok(Roc { points })
    }

    /// TAR at a false-accept rate, linearly interpolated along the ROC; on
    /// a vertical run at exactly `far` the highest TAR is returned.
    pub fn tar_at(&self, far: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&far) {
            return Err(FanError::validation(format!("FAR level {far} outside [0, 1]")));
        }
        let p = &self.points;
        let i = p.partition_point(|q| q.0 <= far) - 1;
        if p[i].0 == far || i + 1 == p.len() {
            return Ok(p[i].1);
        }
        let (a, b) = (p[i], p[i + 1]);
        Ok(a.1 + (far - a.0) / (b.0 - a.0) * (b.1 - a.1))
    }

    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TarFar {
    pub tar_at_far: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn tar_far_auc(scores_same: &[f64], scores_diff: &[f64], far_levels: &[f64]) -> Result<TarFar> {
    let roc = Roc::new(scores_same, scores_diff)?;
    let tar_at_far = far_levels
        .iter()
        .map(|&f| Ok((f, roc.tar_at(f)?)))
        .collect::<Result<_>>()?;
    Ok(TarFar {
        tar_at_far,
        auc: roc.auc(),
    })
}

/// Probe native-resolution bands standing in for capture distances.
pub const RESOLUTION_BUCKETS: [(usize, usize); 3] = [(8, 12), (13, 20), (21, 32)];

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRate {
    pub lo: usize,
    pub hi: usize,
    pub correct: usize,
    pub total: usize,
}

impl BucketRate {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rank1 {
    pub overall: f64,
    pub buckets: Vec<BucketRate>,
    /// Gallery index matched by each probe.
    pub matches: Vec<usize>,
}

/// Nearest gallery entry by cosine distance; ties go to the lower gallery
/// index.
pub fn rank1_identification(
    gallery: &[Vec<f64>],
    gallery_ids: &[usize],
    probes: &[Vec<f64>],
    probe_ids: &[usize],
    probe_resolutions: &[usize],
) -> Result<Rank1> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(FanError::validation("empty gallery or probe set"));
    }
    if gallery.len() != gallery_ids.len()
        || probes.len() != probe_ids.len()
        || probes.len() != probe_resolutions.len()
    {
        return Err(FanError::validation("feature and label lengths differ"));
    }
    let mut seen = gallery_ids.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != gallery_ids.len() {
        return Err(FanError::validation("gallery identities must be unique"));
    }
    let mut buckets: Vec<BucketRate> = RESOLUTION_BUCKETS
        .iter()
        .map(|&(lo, hi)| BucketRate {
            lo,
            hi,
            correct: 0,
            total: 0,
        })
        .collect();
    let mut matches = Vec::with_capacity(probes.len());
    let mut correct = 0usize;
    for ((p, &id), &res) in probes.iter().zip(probe_ids).zip(probe_resolutions) {
        let mut best = (0usize, f64::INFINITY);
        for (gi, g) in gallery.iter().enumerate() {
            let d = cosine_distance(p, g)?;
            if d < best.1 {
                best = (gi, d);
            }
        }
        let hit = gallery_ids[best.0] == id;
        correct += usize::from(hit);
        matches.push(best.0);
        if let Some(b) = buckets.iter_mut().find(|b| (b.lo..=b.hi).contains(&res)) {
            b.total += 1;
            b.correct += usize::from(hit);
        }
    }
    Ok(Rank1 {
        overall: correct as f64 / probes.len() as f64,
        buckets,
        matches,
    })
}

/// Peak signal-to-noise ratio for images in `[-1, 1]`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(FanError::validation("psnr needs two equally sized images"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP_DB))
}
