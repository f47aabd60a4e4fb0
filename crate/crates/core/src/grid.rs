//! Dense row-major 2-D rasters used throughout the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width` raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Binary mask; `true` is foreground.
pub type Mask = Grid<bool>;
/// Instance label map; `0` is background.
pub type LabelMap = Grid<u32>;
/// Real-valued map (probabilities, confidences, similarities, weights).
pub type RealMap = Grid<f64>;
/// 8-bit RGB image.
pub type RgbImage = Grid<[u8; 3]>;
/// 8-bit single-channel image.
pub type GrayImage = Grid<u8>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T: Clone + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::default())
    }

    /// Copies the `h × w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y},{x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(h * w);
        for r in y..y + h {
            out.extend_from_slice(&self.data[r * self.width + x..r * self.width + x + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data: out,
        })
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot form {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Pastes `patch` with its top-left corner at `(y, x)`, clipping at the border.
    pub fn paste(&mut self, y: usize, x: usize, patch: &Grid<T>) {
        for r in 0..patch.height.min(self.height.saturating_sub(y)) {
            for c in 0..patch.width.min(self.width.saturating_sub(x)) {
                self.set(y + r, x + c, patch.at(r, c));
            }
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }
}

impl RgbImage {
    /// ITU-R BT.601 luma in `[0, 255]`.
    pub fn to_gray_f64(&self) -> RealMap {
        self.map(|p| luma(*p))
    }

    pub fn to_gray_u8(&self) -> GrayImage {
        self.map(|p| luma(*p).round().clamp(0.0, 255.0) as u8)
    }
}

#[inline]
pub fn luma(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Per-pixel feature vectors on an `height × width` grid, channel-last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl EmbeddingMap {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form {height}x{width}x{channels} embedding map",
                data.len()
            )));
        }
        if channels == 0 {
            return Err(Error::Shape("embedding map needs at least one channel".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds from channel-first (`C × H × W`) storage, the layout tensors use.
    pub fn from_channel_first(height: usize, width: usize, channels: usize, chw: &[f64]) -> Result<Self> {
        if chw.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot form {channels}x{height}x{width} embedding map",
                chw.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; chw.len()];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = chw[c * plane + i];
            }
        }
        Self::from_vec(height, width, channels, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Nearest-neighbour resample (pixel-centre aligned).
pub fn resize_nearest<T: Copy>(src: &Grid<T>, height: usize, width: usize) -> Grid<T> {
    if src.shape() == (height, width) {
        return src.clone();
    }
    let sy = src.height() as f64 / height as f64;
    let sx = src.width() as f64 / width as f64;
    Grid::from_fn(height, width, |y, x| {
        let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(src.height() - 1);
        let xx = (((x as f64 + 0.5) * sx).floor() as usize).min(src.width() - 1);
        src.at(yy, xx)
    })
}

/// Bilinear resample with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &RealMap, height: usize, width: usize) -> RealMap {
    if src.shape() == (height, width) {
        return src.clone();
    }
    let sy = src.height() as f64 / height as f64;
    let sx = src.width() as f64 / width as f64;
    let hmax = src.height() as f64 - 1.0;
    let wmax = src.width() as f64 - 1.0;
    Grid::from_fn(height, width, |y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, hmax);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, wmax);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(src.height() - 1), (x0 + 1).min(src.width() - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = src.at(y0, x0) * (1.0 - tx) + src.at(y0, x1) * tx;
        let bottom = src.at(y1, x0) * (1.0 - tx) + src.at(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_paste_round_trip() {
        let g = Grid::from_fn(4, 5, |y, x| (y * 5 + x) as u32);
        let c = g.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.as_slice(), &[7, 8, 9, 12, 13, 14]);
        let mut z = LabelMap::new(4, 5);
        z.paste(1, 2, &c);
        assert_eq!(z.at(2, 4), 14);
        assert!(g.crop(3, 0, 2, 1).is_err());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let g = Grid::from_fn(3, 3, |y, x| (y + x) as f64);
        assert_eq!(resize_bilinear(&g, 3, 3), g);
        let c = RealMap::filled(2, 2, 0.25);
        assert!(resize_bilinear(&c, 7, 5)
            .as_slice()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn nearest_downsample_picks_block_centres() {
        let g = Grid::from_fn(4, 4, |y, x| (y * 4 + x) as u32);
        let d = resize_nearest(&g, 2, 2);
        assert_eq!(d.as_slice(), &[5, 7, 13, 15]);
    }

    #[test]
    fn channel_first_conversion() {
        let e = EmbeddingMap::from_channel_first(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.vector(0, 0), &[1.0, 3.0]);
        assert_eq!(e.vector(0, 1), &[2.0, 4.0]);
    }
}
