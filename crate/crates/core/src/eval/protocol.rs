use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::infer::{extract_feature, normalize_face, to_input};
use super::metrics::{cosine_distance, psnr, rank1_identification, tar_far_auc, verification_from_distances};
use super::probe::{disentanglement_probe, ProbeSample};
use crate::datagen::{fixed_degrade, rsa_degrade, unpaired_degrade, Dataset, DegradationConfig, Image, Sample, Split};
use crate::error::{FanError, Result};
use crate::exec::Exec;
use crate::nets::{Model, Net, Networks, ParamStore};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Verification pairs, alternating genuine and impostor.
    pub n_pairs: usize,
    pub folds: usize,
    pub far_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 600,
            folds: 10,
            far_levels: vec![0.3, 0.1, 0.01, 0.001],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.n_pairs < 2 * self.folds {
            return Err(FanError::validation("need folds >= 2 and at least 2 pairs per fold"));
        }
        if self.far_levels.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(FanError::validation("FAR levels must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Both sides of each pair down-sampled by the fixed factor.
    VerifyFixed8x,
    /// Both sides at independent random resolutions.
    VerifyRsa,
    /// High-resolution canonical gallery against unpaired low-resolution probes.
    Identify,
    Probe,
    PsnrBaseline,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::VerifyFixed8x,
        Protocol::VerifyRsa,
        Protocol::Identify,
        Protocol::Probe,
        Protocol::PsnrBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::VerifyFixed8x => "verify-fixed8x",
            Protocol::VerifyRsa => "verify-rsa",
            Protocol::Identify => "identify",
            Protocol::Probe => "probe",
            Protocol::PsnrBaseline => "psnr-baseline",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| FanError::validation(format!("unknown protocol {s:?}")))
    }
}

/// Which encoder embeds degraded inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    /// Enc_L when the checkpoint has one, Enc_H otherwise.
    #[default]
    Auto,
    EncH,
    EncL,
}

impl FromStr for EncoderChoice {
    type Err = FanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(EncoderChoice::Auto),
            "enc_h" => Ok(EncoderChoice::EncH),
            "enc_l" => Ok(EncoderChoice::EncL),
            other => Err(FanError::validation(format!("unknown encoder {other:?}"))),
        }
    }
}

/// Metric rows of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub rows: Vec<(String, String)>,
}

impl EvalReport {
    fn new(protocol: Protocol) -> Self {
        EvalReport {
            protocol,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.rows.push((metric.into(), format!("{value:.6}")));
    }

    fn push_text(&mut self, metric: impl Into<String>, value: impl Into<String>) {
        self.rows.push((metric.into(), value.into()));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(m, _)| m == metric)
            .and_then(|(_, v)| v.parse().ok())
    }

    /// `protocol,metric,value` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,metric,value\n");
        for (m, v) in &self.rows {
            s.push_str(&format!("{},{m},{v}\n", self.protocol));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Deterministic pair list over the evaluation identities; even positions
/// are genuine pairs, odd positions impostor pairs.
pub fn make_pairs(dataset: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    let by_id = dataset.indices_by_identity(Split::Eval);
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    if ids.len() < 2 || ids.iter().any(|v| v.len() < 2) {
        return Err(FanError::Protocol(
            "pairs need at least 2 evaluation identities with 2 images each".into(),
        ));
    }
    Ok((0..n_pairs)
        .map(|i| {
            let mut rng = stream(seed, "pairs", &[i as u64]);
            if i % 2 == 0 {
                let v = ids[rng.random_range(0..ids.len())];
                let a = rng.random_range(0..v.len());
                let b = (a + rng.random_range(1..v.len())) % v.len();
                Pair { a: v[a], b: v[b], same: true }
            } else {
                let p = rng.random_range(0..ids.len());
                let q = (p + rng.random_range(1..ids.len())) % ids.len();
                let (vp, vq) = (ids[p], ids[q]);
                Pair {
                    a: vp[rng.random_range(0..vp.len())],
                    b: vq[rng.random_range(0..vq.len())],
                    same: false,
                }
            }
        })
        .collect())
}

/// Runs evaluation protocols against one set of parameters.
pub struct Evaluator<'a> {
    pub nets: &'a Networks,
    pub store: &'a ParamStore,
    pub dataset: &'a Dataset,
    pub degradation: &'a DegradationConfig,
    pub config: &'a EvalConfig,
    pub seed: u64,
    pub exec: Exec,
}

impl<'a> Evaluator<'a> {
    fn encoder(&self, choice: EncoderChoice) -> Result<(&'a Net, Model)> {
        let has = |m| self.nets.has_model(self.store, m);
        let m = match choice {
            EncoderChoice::EncH => Model::EncH,
            EncoderChoice::EncL => Model::EncL,
            EncoderChoice::Auto if has(Model::EncL) => Model::EncL,
            EncoderChoice::Auto => Model::EncH,
        };
        if !has(m) {
            return Err(FanError::config(format!("checkpoint has no trained {m}")));
        }
        let net = if m == Model::EncL { &self.nets.enc_l } else { &self.nets.enc_h };
        Ok((net, m))
    }

    fn features(&self, net: &Net, imgs: &[Image]) -> Result<Vec<Vec<f64>>> {
        self.exec.try_map(imgs, |img| extract_feature(net, self.store, img))
    }

    fn eval_samples(&self) -> Result<Vec<(usize, &'a Sample)>> {
        let v: Vec<(usize, &Sample)> = self
            .dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Eval)
            .collect();
        if v.is_empty() {
            return Err(FanError::Protocol("dataset has no evaluation split".into()));
        }
        Ok(v)
    }

    pub fn run(&self, protocol: Protocol, encoder: EncoderChoice) -> Result<EvalReport> {
        self.config.validate()?;
        self.dataset.check_split_disjoint()?;
        let mut r = EvalReport::new(protocol);
        match protocol {
            Protocol::VerifyFixed8x | Protocol::VerifyRsa => self.verify(protocol, encoder, &mut r)?,
            Protocol::Identify => self.identify(encoder, &mut r)?,
            Protocol::Probe => self.probe(&mut r)?,
            Protocol::PsnrBaseline => self.psnr_baseline(&mut r)?,
        }
        r.push_text("seed", self.seed.to_string());
        Ok(r)
    }

    fn verify(&self, protocol: Protocol, choice: EncoderChoice, r: &mut EvalReport) -> Result<()> {
        let (net, model) = self.encoder(choice)?;
        let pairs = make_pairs(self.dataset, self.config.n_pairs, self.seed)?;
        let sides: Vec<(usize, usize, u64)> = pairs
            .iter()
            .enumerate()
            .flat_map(|(i, p)| [(i, p.a, 0u64), (i, p.b, 1u64)])
            .collect();
        let imgs: Vec<Image> = self.exec.try_map(&sides, |&(i, idx, side)| {
            let img = &self.dataset.samples[idx].image;
            match protocol {
                Protocol::VerifyFixed8x => fixed_degrade(img, self.degradation.fixed_factor),
                _ => {
                    let mut rng = stream(self.seed, "pair-rsa", &[i as u64, side]);
                    Ok(rsa_degrade(img, self.degradation, &mut rng)?.0)
                }
            }
        })?;
        let feats = self.features(net, &imgs)?;
        let dist: Vec<f64> = feats
            .chunks(2)
            .map(|c| cosine_distance(&c[0], &c[1]))
            .collect::<Result<_>>()?;
        let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
        let v = verification_from_distances(&dist, &same, self.config.folds)?;
        let sim_same: Vec<f64> = dist.iter().zip(&same).filter(|(_, s)| **s).map(|(d, _)| 1.0 - d).collect();
        let sim_diff: Vec<f64> = dist.iter().zip(&same).filter(|(_, s)| !**s).map(|(d, _)| 1.0 - d).collect();
        let t = tar_far_auc(&sim_same, &sim_diff, &self.config.far_levels)?;
        r.push_text("encoder", model.to_string());
        r.push("pairs", pairs.len() as f64);
        r.push("accuracy", v.accuracy);
        for (far, tar) in &t.tar_at_far {
            r.push(format!("tar@far={far}"), *tar);
        }
        r.push("auc", t.auc);
        r.push("distance.same", 1.0 - mean(&sim_same));
        r.push("distance.diff", 1.0 - mean(&sim_diff));
        Ok(())
    }

    fn identify(&self, choice: EncoderChoice, r: &mut EvalReport) -> Result<()> {
        let (net, model) = self.encoder(choice)?;
        let samples = self.eval_samples()?;
        let mut gallery: BTreeMap<usize, usize> = BTreeMap::new();
        for &(i, s) in &samples {
            if Dataset::is_canonical(s) {
                gallery.entry(s.identity_id).or_insert(i);
            }
        }
        let ids: Vec<usize> = samples.iter().map(|(_, s)| s.identity_id).collect();
        if ids.iter().any(|id| !gallery.contains_key(id)) {
            return Err(FanError::Protocol("an evaluation identity has no canonical gallery image".into()));
        }
        let g_ids: Vec<usize> = gallery.keys().copied().collect();
        let g_imgs: Vec<Image> = gallery.values().map(|&i| self.dataset.samples[i].image.clone()).collect();
        let g_feat = self.features(&self.nets.enc_h, &g_imgs)?;

        let probes: Vec<(usize, &Sample)> = samples
            .into_iter()
            .filter(|(i, s)| gallery.get(&s.identity_id) != Some(i))
            .collect();
        let p_imgs: Vec<Image> = self.exec.try_map(&probes, |&(i, s)| {
            let mut rng = stream(self.seed, "probe-capture", &[i as u64]);
            unpaired_degrade(&s.image, self.degradation, &mut rng)
        })?;
        let p_feat = self.features(net, &p_imgs)?;
        let p_ids: Vec<usize> = probes.iter().map(|(_, s)| s.identity_id).collect();
        let p_res: Vec<usize> = p_imgs.iter().map(|im| im.native_resolution()).collect();
        let rank = rank1_identification(&g_feat, &g_ids, &p_feat, &p_ids, &p_res)?;
        r.push_text("encoder", model.to_string());
        r.push("probes", probes.len() as f64);
        r.push("rank1", rank.overall);
        for b in &rank.buckets {
            r.push(format!("probes.{}-{}", b.lo, b.hi), b.total as f64);
            if let Some(v) = b.rate() {
                r.push(format!("rank1.{}-{}", b.lo, b.hi), v);
            }
        }

        if self.nets.has_model(self.store, Model::EncL) && self.nets.has_model(self.store, Model::Dec) {
            // Enc_H distance to the gallery: normalized probe versus the
            // bicubic-upsampled probe itself
            let items: Vec<usize> = (0..probes.len()).collect();
            let pairs: Vec<(f64, f64)> = self.exec.try_map(&items, |&k| {
                let g = &g_feat[g_ids.iter().position(|&id| id == p_ids[k]).expect("gallery id")];
                let norm = normalize_face(self.nets, self.store, &p_imgs[k])?;
                let dn = cosine_distance(&extract_feature(&self.nets.enc_h, self.store, &norm)?, g)?;
                let db = cosine_distance(&extract_feature(&self.nets.enc_h, self.store, &p_imgs[k])?, g)?;
                Ok((dn, db))
            })?;
            let dn: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let db: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let closer = pairs.iter().filter(|(n, b)| n < b).count();
            r.push("distance.normalized", mean(&dn));
            r.push("distance.bicubic", mean(&db));
            r.push("distance.frac_closer", closer as f64 / pairs.len() as f64);
        }
        Ok(())
    }

    fn probe(&self, r: &mut EvalReport) -> Result<()> {
        for m in [Model::EncH, Model::EncZ] {
            if !self.nets.has_model(self.store, m) {
                return Err(FanError::config(format!("probe needs a trained {m}")));
            }
        }
        let by_id = self.dataset.indices_by_identity(Split::Train);
        let mut poses: Vec<f64> = self.dataset.samples.iter().map(|s| s.pose).collect();
        poses.sort_by(f64::total_cmp);
        poses.dedup();
        let mut items = Vec::new();
        for idx in by_id.values() {
            for (k, &i) in idx.iter().enumerate() {
                items.push((i, k % 2 == 0));
            }
        }
        if items.iter().any(|&(i, _)| self.dataset.samples[i].split != Split::Train) {
            return Err(FanError::Protocol("probe set overlaps the evaluation identities".into()));
        }
        let samples: Vec<ProbeSample> = self.exec.try_map(&items, |&(i, fit)| {
            let s = &self.dataset.samples[i];
            let x = to_input(&s.image, self.nets.cfg.image_side)?;
            Ok(ProbeSample {
                f: self.nets.enc_h.infer(self.store, &x)?.into_data(),
                z: self.nets.enc_z.infer(self.store, &x)?.into_data(),
                identity: s.identity_id,
                pose_bucket: poses.iter().position(|&p| p == s.pose).expect("pose listed"),
                fit,
            })
        })?;
        let p = disentanglement_probe(&samples)?;
        r.push("samples", samples.len() as f64);
        r.push("accuracy.f", p.accuracy_f);
        r.push("accuracy.z", p.accuracy_z);
        r.push("accuracy.z_pose", p.accuracy_z_pose);
        r.push("chance.identity", p.chance_identity);
        r.push("chance.pose", p.chance_pose);
        Ok(())
    }

    fn psnr_baseline(&self, r: &mut EvalReport) -> Result<()> {
        let samples = self.eval_samples()?;
        let with_norm = self.nets.has_model(self.store, Model::EncL) && self.nets.has_model(self.store, Model::Dec);
        let vals: Vec<(f64, Option<f64>)> = self.exec.try_map(&samples, |&(_, s)| {
            let lr = fixed_degrade(&s.image, self.degradation.fixed_factor)?;
            let b = psnr(lr.pixels(), s.image.pixels())?;
            let n = if with_norm {
                let out = normalize_face(self.nets, self.store, &lr)?;
                Some(psnr(out.pixels(), s.image.pixels())?)
            } else {
                None
            };
            Ok((b, n))
        })?;
        r.push("images", vals.len() as f64);
        r.push("psnr.bicubic", mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>()));
        if with_norm {
            r.push("psnr.normalized", mean(&vals.iter().filter_map(|v| v.1).collect::<Vec<_>>()));
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatasetConfig;

    fn small_dataset() -> Dataset {
        let cfg = DatasetConfig {
            n_train_identities: 3,
            n_eval_identities: 3,
            side: 8,
            poses: vec![0.0, 15.0],
            illuminations: vec![1.0],
            occlusions: vec![false],
        };
        Dataset::generate(&cfg, 1, Exec::Sequential).unwrap()
    }

    #[test]
    fn pairs_are_balanced_and_eval_only() {
        let d = small_dataset();
        let p = make_pairs(&d, 21, 9).unwrap();
        assert_eq!(p.iter().filter(|p| p.same).count(), 11);
        for q in &p {
            let (a, b) = (&d.samples[q.a], &d.samples[q.b]);
            assert_eq!(a.split, Split::Eval);
            assert_eq!(b.split, Split::Eval);
            assert_eq!(a.identity_id == b.identity_id, q.same);
            assert_ne!(q.a, q.b);
        }
        assert_eq!(p, make_pairs(&d, 21, 9).unwrap());
    }

    #[test]
    fn protocol_names_roundtrip() {
        for p in Protocol::ALL {
            assert_eq!(p.name().parse::<Protocol>().unwrap(), p);
        }
        assert!("verify-16x".parse::<Protocol>().is_err());
    }

    #[test]
    fn report_csv() {
        let mut r = EvalReport::new(Protocol::Probe);
        r.push("accuracy.f", 0.5);
        assert_eq!(r.get("accuracy.f"), Some(0.5));
        assert_eq!(r.to_csv(), "protocol,metric,value\nprobe,accuracy.f,0.500000\n");
    }
}
