use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{bicubic_resize, Image};
use crate::error::{FanError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnpairedJitter {
    pub max_shift_px: usize,
    pub blur_sigma_range: [f64; 2],
    pub noise_std: f64,
}

impl Default for UnpairedJitter {
    fn default() -> Self {
        UnpairedJitter {
            max_shift_px: 2,
            blur_sigma_range: [0.3, 1.0],
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Lowest resolution drawn by random scale augmentation.
    pub n_low: usize,
    /// Network input resolution.
    pub n_high: usize,
    pub fixed_factor: usize,
    pub unpaired_jitter: UnpairedJitter,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            n_low: 8,
            n_high: 32,
            fixed_factor: 4,
            unpaired_jitter: UnpairedJitter::default(),
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.n_low && self.n_low < self.n_high) {
            return Err(FanError::validation(format!(
                "need 1 <= n_low < n_high, got n_low={} n_high={}",
                self.n_low, self.n_high
            )));
        }
        if self.fixed_factor == 0 || self.n_high % self.fixed_factor != 0 {
            return Err(FanError::validation(format!(
                "fixed_factor {} does not divide n_high {}",
                self.fixed_factor, self.n_high
            )));
        }
        let j = &self.unpaired_jitter;
        let [lo, hi] = j.blur_sigma_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(FanError::validation("blur_sigma_range must satisfy 0 <= lo <= hi"));
        }
        if !(j.noise_std.is_finite() && j.noise_std >= 0.0) {
            return Err(FanError::validation("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// How low-resolution training inputs are produced from a high-resolution image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowResMode {
    /// Uniform random resolution in `[n_low, n_high]`.
    RandomScale,
    /// Single fixed down-sampling factor.
    Fixed(usize),
}

fn check_side(img: &Image, side: usize) -> Result<()> {
    if img.height() != side || img.width() != side {
        return Err(FanError::validation(format!(
            "expected {side}x{side} input, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Down-sample to `k x k` and bicubic-upsample back to the input size.
pub fn degrade_to(img: &Image, k: usize) -> Result<Image> {
    let side = img.side();
    if k == 0 || k > side {
        return Err(FanError::validation(format!("resolution {k} outside [1, {side}]")));
    }
    let low = bicubic_resize(img, k)?;
    let mut up = bicubic_resize(&low, side)?;
    up.set_native_resolution(k);
    Ok(up)
}

/// Random scale augmentation: `k ~ U{n_low..=n_high}`.
pub fn rsa_degrade<R: Rng + ?Sized>(
    img_hr: &Image,
    cfg: &DegradationConfig,
    rng: &mut R,
) -> Result<(Image, usize)> {
    check_side(img_hr, cfg.n_high)?;
    let k = rng.random_range(cfg.n_low..=cfg.n_high);
    Ok((degrade_to(img_hr, k)?, k))
}

pub fn fixed_degrade(img: &Image, factor: usize) -> Result<Image> {
    if !img.is_square() {
        return Err(FanError::validation("fixed_degrade needs a square image"));
    }
    let side = img.side();
    if factor == 0 || side % factor != 0 {
        return Err(FanError::validation(format!(
            "factor {factor} does not divide side {side}"
        )));
    }
    degrade_to(img, side / factor)
}

/// Degradation through `mode`; returns the image and its native resolution.
pub fn low_res<R: Rng + ?Sized>(
    img_hr: &Image,
    cfg: &DegradationConfig,
    mode: LowResMode,
    rng: &mut R,
) -> Result<(Image, usize)> {
    match mode {
        LowResMode::RandomScale => rsa_degrade(img_hr, cfg, rng),
        LowResMode::Fixed(f) => {
            check_side(img_hr, cfg.n_high)?;
            let img = fixed_degrade(img_hr, f)?;
            let k = img.native_resolution();
            Ok((img, k))
        }
    }
}

/// Simulated unpaired low-resolution capture: translation, blur and sensor
/// noise followed by random scale augmentation.
pub fn unpaired_degrade<R: Rng + ?Sized>(
    img_hr: &Image,
    cfg: &DegradationConfig,
    rng: &mut R,
) -> Result<Image> {
    unpaired_degrade_with(img_hr, cfg, LowResMode::RandomScale, rng)
}

pub fn unpaired_degrade_with<R: Rng + ?Sized>(
    img_hr: &Image,
    cfg: &DegradationConfig,
    mode: LowResMode,
    rng: &mut R,
) -> Result<Image> {
    check_side(img_hr, cfg.n_high)?;
    let j = &cfg.unpaired_jitter;
    let side = cfg.n_high;
    let mut px = img_hr.pixels().to_vec();

    if j.max_shift_px > 0 {
        let s = j.max_shift_px as i64;
        let dx = rng.random_range(-s..=s) as isize;
        let dy = rng.random_range(-s..=s) as isize;
        px = shift(&px, side, dx, dy);
    }
    let [lo, hi] = j.blur_sigma_range;
    if hi > 0.0 {
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if sigma > 1e-9 {
            px = gaussian_blur(&px, side, sigma);
        }
    }
    if j.noise_std > 0.0 {
        let normal = Normal::new(0.0, j.noise_std)
            .map_err(|e| FanError::validation(format!("noise distribution: {e}")))?;
        for p in px.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    let jittered = Image::from_clamped(side, side, px)?;
    Ok(low_res(&jittered, cfg, mode, rng)?.0)
}

fn shift(px: &[f64], side: usize, dx: isize, dy: isize) -> Vec<f64> {
    let last = side as isize - 1;
    let mut out = vec![0.0; px.len()];
    for y in 0..side {
        let sy = (y as isize - dy).clamp(0, last) as usize;
        for x in 0..side {
            let sx = (x as isize - dx).clamp(0, last) as usize;
            out[y * side + x] = px[sy * side + sx];
        }
    }
    out
}

fn gaussian_blur(px: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let last = side as isize - 1;

    let mut tmp = vec![0.0; px.len()];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let sx = (x as isize + i as isize - radius).clamp(0, last) as usize;
                    k * px[y * side + sx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; px.len()];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let sy = (y as isize + i as isize - radius).clamp(0, last) as usize;
                    k * tmp[sy * side + x]
                })
                .sum();
        }
    }
    out
}
