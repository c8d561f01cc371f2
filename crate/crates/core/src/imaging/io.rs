//! PNG input and output.
//!
//! Intensity images are read from 8- or 16-bit greyscale PNGs and scaled to
//! `[0, 1]`; they are written back as 16-bit. Label maps are 8-bit greyscale
//! PNGs holding class indices directly.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use super::raster::{Image, LabelMap};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn encode_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let dynamic = open(path)?;
    let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
    let data = match dynamic {
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("expected single-channel 8/16-bit, got {:?}", other.color()),
            })
        }
    };
    Image::new(width, height, data)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|&v| (v * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size");
    buf.save(path).map_err(|e| encode_err(path, e))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            LabelMap::new(w, h, buf.into_raw()).map_err(|e| Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        }
        other => Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: format!(
                "label maps must be 8-bit greyscale, got {:?}",
                other.color()
            ),
        }),
    }
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = GrayImage::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.as_slice().to_vec(),
    )
    .expect("buffer size");
    buf.save(path).map_err(|e| encode_err(path, e))
}

pub(crate) fn save_rgb(width: usize, height: usize, rgb: Vec<u8>, path: &Path) -> Result<()> {
    let buf = RgbImage::from_raw(width as u32, height as u32, rgb).expect("buffer size");
    buf.save(path).map_err(|e| encode_err(path, e))
}
