//! Raster and box-file readers/writers (PNG/TIFF images, JSON Lines boxes).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::data_ingest::BoxAnnotation;
use crate::error::{Error, Result};
use crate::grid::{GrayImage, Grid, LabelMap, Mask, RgbImage};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `(height, width)` read from the file header only.
pub fn image_shape(path: &Path) -> Result<(usize, usize)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0).collect();
    Grid::from_vec(h as usize, w as usize, data)
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(h as usize, w as usize, img.into_raw())
}

/// Any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.map(|&v| v != 0))
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Grid::from_vec(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(u32::from).collect(),
    )
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u8> = img.as_slice().iter().flat_map(|p| p.iter().copied()).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| save_err(path, e))
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    ensure_parent(path)?;
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.as_slice().to_vec())
            .expect("buffer size matches");
    buf.save(path).map_err(|e| save_err(path, e))
}

/// Single-channel PNG with values {0, 255}.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_gray(path, &mask.map(|&v| if v { 255 } else { 0 }))
}

/// 16-bit single-channel PNG.
pub fn write_label_map(path: &Path, labels: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let mut raw = Vec::with_capacity(labels.len());
    for &l in labels.as_slice() {
        let v = u16::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a 16-bit PNG")))?;
        raw.push(v);
    }
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| save_err(path, e))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxAnnotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let b: BoxAnnotation = serde_json::from_str(&line).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[BoxAnnotation]) -> Result<()> {
    ensure_parent(path)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for b in boxes {
        let line = serde_json::to_string(b).expect("box serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
