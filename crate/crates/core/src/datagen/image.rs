use crate::error::{FanError, Result};

/// Single-channel raster with values in `[-1, 1]`, row-major.
///
/// `native_resolution` is the side length at which the content was last
/// genuinely sampled; resizing for the network does not change it.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    native_resolution: usize,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let native = height.min(width);
        Self::with_native(height, width, pixels, native)
    }

    pub fn with_native(
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        native_resolution: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FanError::validation("image dimensions must be positive"));
        }
        if pixels.len() != height * width {
            return Err(FanError::validation(format!(
                "pixel buffer has {} values, expected {}x{}",
                pixels.len(),
                height,
                width
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || p.abs() > 1.0) {
            return Err(FanError::validation(format!(
                "pixel value {bad} outside [-1, 1]"
            )));
        }
        if native_resolution == 0 || native_resolution > height.max(width) {
            return Err(FanError::validation(format!(
                "native resolution {native_resolution} invalid for {height}x{width} image"
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
            native_resolution,
        })
    }

    /// Builds an image from arbitrary finite values, clamping into `[-1, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in pixels.iter_mut() {
            if !p.is_finite() {
                return Err(FanError::validation("non-finite pixel value"));
            }
            *p = p.clamp(-1.0, 1.0);
        }
        Self::new(height, width, pixels)
    }

    pub fn constant(side: usize, value: f64) -> Result<Self> {
        Self::new(side, side, vec![value; side * side])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Side length of a square image.
    pub fn side(&self) -> usize {
        debug_assert!(self.is_square());
        self.height
    }

    pub fn native_resolution(&self) -> usize {
        self.native_resolution
    }

    pub fn set_native_resolution(&mut self, k: usize) {
        self.native_resolution = k.clamp(1, self.height.max(self.width));
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four taps (clamped source index, weight) for every output coordinate.
fn taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let t = s - base;
            let base = base as isize;
            let mut out = [(0usize, 0.0f64); 4];
            for (j, slot) in out.iter_mut().enumerate() {
                let idx = (base - 1 + j as isize).clamp(0, last) as usize;
                *slot = (idx, cubic_kernel(t - (j as f64 - 1.0)));
            }
            out
        })
        .collect()
}

/// Bicubic resampling to `target x target` with edge clamping. The output is
/// clamped to `[-1, 1]` and keeps the input's native resolution.
pub fn bicubic_resize(img: &Image, target: usize) -> Result<Image> {
    if target < 1 {
        return Err(FanError::validation("resize target must be >= 1"));
    }
    if img.height == target && img.width == target {
        return Ok(img.clone());
    }
    let col_taps = taps(img.width, target);
    let row_taps = taps(img.height, target);

    // horizontal pass: height x target
    let mut tmp = vec![0.0; img.height * target];
    for y in 0..img.height {
        let row = &img.pixels[y * img.width..(y + 1) * img.width];
        let out = &mut tmp[y * target..(y + 1) * target];
        for (o, tp) in out.iter_mut().zip(&col_taps) {
            *o = tp.iter().map(|&(i, w)| w * row[i]).sum();
        }
    }
    // vertical pass
    let mut pixels = vec![0.0; target * target];
    for (y, tp) in row_taps.iter().enumerate() {
        let out = &mut pixels[y * target..(y + 1) * target];
        for &(i, w) in tp {
            let src = &tmp[i * target..(i + 1) * target];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    for p in pixels.iter_mut() {
        *p = p.clamp(-1.0, 1.0);
    }
    let native = img.native_resolution.min(target);
    Image::with_native(target, target, pixels, native)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> Image {
        let px = (0..side * side)
            .map(|i| {
                let (y, x) = (i / side, i % side);
                (x as f64 * 0.2 - y as f64 * 0.15).clamp(-1.0, 1.0) * 0.9
            })
            .collect();
        Image::new(side, side, px).unwrap()
    }

    /// Direct 2-D Catmull-Rom convolution sum with clamped source indices.
    fn reference_resize(img: &Image, target: usize) -> Vec<f64> {
        let (h, w) = (img.height() as isize, img.width() as isize);
        let sy = img.height() as f64 / target as f64;
        let sx = img.width() as f64 / target as f64;
        let mut out = Vec::new();
        for oy in 0..target {
            for ox in 0..target {
                let cy = (oy as f64 + 0.5) * sy - 0.5;
                let cx = (ox as f64 + 0.5) * sx - 0.5;
                let mut acc = 0.0;
                for iy in (cy.floor() as isize - 1)..=(cy.floor() as isize + 2) {
                    for ix in (cx.floor() as isize - 1)..=(cx.floor() as isize + 2) {
                        let wgt = cubic_kernel(cy - iy as f64) * cubic_kernel(cx - ix as f64);
                        let v = img.at(iy.clamp(0, h - 1) as usize, ix.clamp(0, w - 1) as usize);
                        acc += wgt * v;
                    }
                }
                out.push(acc.clamp(-1.0, 1.0));
            }
        }
        out
    }

    #[test]
    fn constant_is_preserved() {
        let img = Image::constant(7, 0.3).unwrap();
        for t in [1, 3, 7, 16, 32] {
            let r = bicubic_resize(&img, t).unwrap();
            assert!(r.pixels().iter().all(|p| (p - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn same_size_is_identity() {
        let img = ramp(9);
        let r = bicubic_resize(&img, 9).unwrap();
        assert!(r.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn ramp_4_to_8_matches_direct_sum() {
        let img = ramp(4);
        let r = bicubic_resize(&img, 8).unwrap();
        let want = reference_resize(&img, 8);
        for (a, b) in r.pixels().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // and a downsampling case
        let big = ramp(12);
        let r = bicubic_resize(&big, 5).unwrap();
        for (a, b) in r.pixels().iter().zip(&reference_resize(&big, 5)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_target_rejected() {
        assert!(bicubic_resize(&ramp(4), 0).is_err());
    }

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let s: f64 = (-1..=2).map(|j| cubic_kernel(t - j as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(Image::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }
}
