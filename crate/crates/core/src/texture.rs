//! Handcrafted texture map: Gaussian high-pass residual of the luma channel,
//! standardized per image.

use crate::error::{Error, Result};
use crate::grid::{Grid, RealMap, RgbImage};

pub const DEFAULT_TEXTURE_SIGMA: f64 = 2.0;

/// Normalized 1-D Gaussian kernel truncated at `3σ`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // symmetric (half-sample) reflection, repeated for kernels wider than the image
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with symmetric border reflection.
pub fn gaussian_blur(src: &RealMap, sigma: f64) -> RealMap {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = src.shape();
    let horizontal = Grid::from_fn(h, w, |y, x| -> f64 {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * src.at(y, reflect(x as isize + j as isize - r, w)))
            .sum()
    });
    Grid::from_fn(h, w, |y, x| -> f64 {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * horizontal.at(reflect(y as isize + j as isize - r, h), x))
            .sum()
    })
}

/// Zero-mean, unit-variance rescale; a constant map becomes all zeros.
pub fn standardize(map: &RealMap) -> RealMap {
    let n = map.len() as f64;
    if n == 0.0 {
        return map.clone();
    }
    let mean = map.as_slice().iter().sum::<f64>() / n;
    let var = map.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // blur of a constant is not bit-exact, so treat round-off as zero variance
    if var <= 1e-18 {
        return RealMap::new(map.height(), map.width());
    }
    let sd = var.sqrt();
    map.map(|v| (v - mean) / sd)
}

pub fn extract_texture_features(image: &RgbImage, sigma: f64) -> Result<RealMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let gray = image.to_gray_f64();
    let blurred = gaussian_blur(&gray, sigma);
    let residual = Grid::from_fn(gray.height(), gray.width(), |y, x| gray.at(y, x) - blurred.at(y, x));
    Ok(standardize(&residual))
}
