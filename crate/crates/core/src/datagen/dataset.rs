use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::png_io::{read_png, write_png16, ENCODING};
use super::render::IdentityBank;
use crate::error::{FanError, Result};
use crate::exec::Exec;
use crate::rng::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub identity_id: usize,
    pub pose: f64,
    pub illumination: f64,
    pub occlusion: bool,
    pub split: Split,
}

/// One manifest line. Field order is fixed:
/// `path, identity_id, pose, illumination, occlusion, split, native_resolution, encoding`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub identity_id: usize,
    pub pose: f64,
    pub illumination: f64,
    pub occlusion: bool,
    pub split: Split,
    pub native_resolution: usize,
    pub encoding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train_identities: usize,
    pub n_eval_identities: usize,
    pub side: usize,
    pub poses: Vec<f64>,
    pub illuminations: Vec<f64>,
    pub occlusions: Vec<bool>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train_identities: 20,
            n_eval_identities: 10,
            side: 32,
            poses: vec![-30.0, -15.0, 0.0, 15.0, 30.0],
            illuminations: vec![0.7, 1.0, 1.3],
            occlusions: vec![false, true],
        }
    }
}

impl DatasetConfig {
    pub fn n_identities(&self) -> usize {
        self.n_train_identities + self.n_eval_identities
    }

    pub fn per_identity(&self) -> usize {
        self.poses.len() * self.illuminations.len() * self.occlusions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train_identities < 2 {
            return Err(FanError::validation("need at least 2 training identities"));
        }
        if self.per_identity() == 0 {
            return Err(FanError::validation("empty factor grid"));
        }
        if !self.poses.iter().any(|&p| p == 0.0)
            || !self.illuminations.iter().any(|&i| i == 1.0)
            || !self.occlusions.contains(&false)
        {
            return Err(FanError::validation(
                "factor grid must contain the canonical view (pose 0, illumination 1, no occlusion)",
            ));
        }
        Ok(())
    }
}

/// In-memory dataset. Training identities are `0..n_train`, evaluation
/// identities follow and never overlap.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_train_identities: usize,
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig, seed: u64, exec: Exec) -> Result<Dataset> {
        cfg.validate()?;
        let bank = IdentityBank::new(seed, cfg.n_identities());
        let mut jobs = Vec::new();
        for id in 0..cfg.n_identities() {
            let split = if id < cfg.n_train_identities {
                Split::Train
            } else {
                Split::Eval
            };
            let mut j = 0u64;
            for &pose in &cfg.poses {
                for &illum in &cfg.illuminations {
                    for &occ in &cfg.occlusions {
                        jobs.push((id, pose, illum, occ, split, j));
                        j += 1;
                    }
                }
            }
        }
        let samples = exec.try_map(&jobs, |&(id, pose, illum, occ, split, j)| {
            let s = derive_seed(seed, "sample", &[id as u64, j]);
            bank.render_sample(id, pose, illum, occ, s, cfg.side)
                .map(|mut smp| {
                    smp.split = split;
                    smp
                })
        })?;
        let ds = Dataset {
            samples,
            n_train_identities: cfg.n_train_identities,
        };
        ds.check_split_disjoint()?;
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn check_split_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<usize, Split> = BTreeMap::new();
        for s in &self.samples {
            if let Some(prev) = seen.insert(s.identity_id, s.split) {
                if prev != s.split {
                    return Err(FanError::validation(format!(
                        "identity {} appears in both splits",
                        s.identity_id
                    )));
                }
            }
        }
        if let Some((&id, _)) = seen.iter().find(|(&id, &sp)| {
            (sp == Split::Train) != (id < self.n_train_identities)
        }) {
            return Err(FanError::validation(format!(
                "identity {id} does not match the train identity range 0..{}",
                self.n_train_identities
            )));
        }
        Ok(())
    }

    /// Sample indices grouped by identity, within one split.
    pub fn indices_by_identity(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.split == split {
                out.entry(s.identity_id).or_default().push(i);
            }
        }
        out
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Split::Train)
            .collect()
    }

    pub fn is_canonical(s: &Sample) -> bool {
        s.pose == 0.0 && s.illumination == 1.0 && !s.occlusion
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| FanError::io(&img_dir, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        let file = fs::File::create(&manifest).map_err(|e| FanError::io(&manifest, e))?;
        let mut out = BufWriter::new(file);
        for (i, s) in self.samples.iter().enumerate() {
            let rel = format!("images/{i:06}_id{:03}.png", s.identity_id);
            write_png16(&s.image, &dir.join(&rel))?;
            let rec = ManifestRecord {
                path: rel,
                identity_id: s.identity_id,
                pose: s.pose,
                illumination: s.illumination,
                occlusion: s.occlusion,
                split: s.split,
                native_resolution: s.image.native_resolution(),
                encoding: ENCODING.to_string(),
            };
            let line = serde_json::to_string(&rec)
                .map_err(|e| FanError::format(&manifest, e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| FanError::io(&manifest, e))?;
        }
        out.flush().map_err(|e| FanError::io(&manifest, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
        let manifest = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&manifest).map_err(|e| FanError::io(&manifest, e))?;
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FanError::io(&manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| FanError::format(&manifest, format!("line {}: {e}", n + 1)))?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn read_dir(dir: &Path, exec: Exec) -> Result<Dataset> {
        let records = Self::read_manifest(dir)?;
        if records.is_empty() {
            return Err(FanError::format(dir.join(MANIFEST_FILE), "empty manifest"));
        }
        if let Some(r) = records.iter().find(|r| r.encoding != ENCODING) {
            return Err(FanError::format(
                dir.join(&r.path),
                format!("unsupported encoding {}", r.encoding),
            ));
        }
        let samples = exec.try_map(&records, |r| {
            let path: PathBuf = dir.join(&r.path);
            let mut image = read_png(&path)?;
            image.set_native_resolution(r.native_resolution);
            Ok::<_, FanError>(Sample {
                image,
                identity_id: r.identity_id,
                pose: r.pose,
                illumination: r.illumination,
                occlusion: r.occlusion,
                split: r.split,
            })
        })?;
        let n_train_identities = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.identity_id + 1)
            .max()
            .unwrap_or(0);
        let ds = Dataset {
            samples,
            n_train_identities,
        };
        ds.check_split_disjoint()?;
        Ok(ds)
    }
}
