//! Procedural identity templates.
//!
//! An identity is a fixed face-like glyph (head shape, hairline, eye, mouth
//! geometry and a few low-frequency shading blobs). Pose rotates the glyph in
//! plane, illumination scales brightness and occlusion pastes a patch.

use rand::Rng;

use super::dataset::{Sample, Split};
use super::image::Image;
use crate::error::{FanError, Result};
use crate::rng::stream;

pub const POSE_RANGE: (f64, f64) = (-45.0, 45.0);
pub const ILLUMINATION_RANGE: (f64, f64) = (0.5, 1.5);

const BACKGROUND: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTemplate {
    head_ax: f64,
    head_ay: f64,
    head_cy: f64,
    skin: f64,
    hair_tone: f64,
    hairline: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    blobs: Vec<Blob>,
}

impl IdentityTemplate {
    fn generate(seed: u64, id: usize) -> Self {
        let mut rng = stream(seed, "identity", &[id as u64]);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let head_ax = u(0.48, 0.78);
        let head_ay = u(0.62, 0.92);
        let blobs = (0..3)
            .map(|_| Blob {
                cx: u(-0.4, 0.4),
                cy: u(-0.4, 0.5),
                sigma: u(0.12, 0.28),
                amp: u(-0.3, 0.3),
            })
            .collect();
        IdentityTemplate {
            head_ax,
            head_ay,
            head_cy: u(-0.06, 0.1),
            skin: u(0.45, 0.88),
            hair_tone: u(0.0, 0.35),
            hairline: u(-0.6, -0.15),
            eye_dx: u(0.17, 0.36),
            eye_y: u(-0.22, 0.02),
            eye_r: u(0.06, 0.13),
            mouth_y: u(0.28, 0.52),
            mouth_w: u(0.1, 0.3),
            mouth_h: u(0.035, 0.08),
            blobs,
        }
    }

    /// Intensity in `[0, 1]` at template coordinates `(u, v)`, `v` pointing down.
    fn intensity(&self, u: f64, v: f64) -> f64 {
        let soft = |d: f64, edge: f64| 1.0 / (1.0 + (-d / edge).exp());
        let r = ((u / self.head_ax).powi(2) + ((v - self.head_cy) / self.head_ay).powi(2)).sqrt();
        let head = soft(1.0 - r, 0.05);

        let mut face = self.skin;
        for b in &self.blobs {
            let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
            face += b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        let hair = soft(self.hairline - v, 0.04);
        face = face * (1.0 - hair) + self.hair_tone * hair;

        let eye = |ex: f64| {
            let d2 = (u - ex).powi(2) + (v - self.eye_y).powi(2);
            (-d2 / (2.0 * self.eye_r * self.eye_r)).exp()
        };
        let eyes = (eye(self.eye_dx) + eye(-self.eye_dx)).min(1.0);
        let mouth_r = ((u / self.mouth_w).powi(2) + ((v - self.mouth_y) / self.mouth_h).powi(2)).sqrt();
        let mouth = soft(1.0 - mouth_r, 0.15);
        face *= 1.0 - 0.85 * eyes;
        face *= 1.0 - 0.7 * mouth;

        BACKGROUND * (1.0 - head) + face * head
    }
}

/// Deterministic bank of identity templates.
#[derive(Debug, Clone)]
pub struct IdentityBank {
    seed: u64,
    templates: Vec<IdentityTemplate>,
}

impl IdentityBank {
    pub fn new(seed: u64, n_identities: usize) -> Self {
        IdentityBank {
            seed,
            templates: (0..n_identities)
                .map(|id| IdentityTemplate::generate(seed, id))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn template(&self, id: usize) -> Result<&IdentityTemplate> {
        self.templates
            .get(id)
            .ok_or_else(|| FanError::Lookup(format!("identity {id} not in bank of {}", self.len())))
    }

    /// Renders one sample at `side x side`. The `rng_seed` drives sensor
    /// noise and the occluder placement only.
    pub fn render_sample(
        &self,
        identity_id: usize,
        pose: f64,
        illumination: f64,
        occlusion: bool,
        rng_seed: u64,
        side: usize,
    ) -> Result<Sample> {
        let t = self.template(identity_id)?;
        if !(POSE_RANGE.0..=POSE_RANGE.1).contains(&pose) {
            return Err(FanError::validation(format!("pose {pose} outside [-45, 45]")));
        }
        if !(ILLUMINATION_RANGE.0..=ILLUMINATION_RANGE.1).contains(&illumination) {
            return Err(FanError::validation(format!(
                "illumination {illumination} outside [0.5, 1.5]"
            )));
        }
        if side == 0 {
            return Err(FanError::validation("side must be positive"));
        }
        let mut rng = stream(rng_seed, "render", &[identity_id as u64]);
        let (sin, cos) = (-pose.to_radians()).sin_cos();

        let mut px = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let u = (x as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                let v = (y as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                let (ru, rv) = (cos * u - sin * v, sin * u + cos * v);
                px.push(t.intensity(ru, rv) * illumination);
            }
        }
        if occlusion {
            let w = rng.random_range(0.3..0.45) * side as f64;
            let h = rng.random_range(0.2..0.35) * side as f64;
            let x0 = rng.random_range(0.0..(side as f64 - w));
            let y0 = rng.random_range(0.0..(side as f64 - h));
            let shade = if rng.random_bool(0.5) { 0.05 } else { 0.95 };
            for y in 0..side {
                for x in 0..side {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h {
                        px[y * side + x] = shade;
                    }
                }
            }
        }
        for p in px.iter_mut() {
            let noise: f64 = rng.random_range(-0.01..0.01);
            *p = ((*p + noise) * 2.0 - 1.0).clamp(-1.0, 1.0);
        }
        Ok(Sample {
            image: Image::new(side, side, px)?,
            identity_id,
            pose,
            illumination,
            occlusion,
            split: Split::Train,
        })
    }
}
