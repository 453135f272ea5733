//! Image/mask ingestion and the handful of writers the CLI needs.
//!
//! Dataset layout: `root/images/*.png|pgm` with matching stems under
//! `root/masks/`. Inputs must be 8-bit grayscale. Images are resized
//! bilinearly to the target resolution and scaled to `[0, 1]`; masks are
//! resized nearest-neighbor and binarized at 128/255.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};
use crate::metrics::GroundTruthMask;
use crate::tensor::{Scalar, Tensor};

use super::Sample;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "pnm"];

#[derive(Debug)]
pub struct LoadedDataset<S: Scalar = f32> {
    pub samples: Vec<Sample<S>>,
    pub warnings: Vec<String>,
}

fn open_gray8(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: cannot decode image: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(gray) => Ok(gray),
        other => Err(Error::Data(format!(
            "{}: expected 8-bit grayscale input, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn find_mask(masks_dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| masks_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads every image/mask pair under `root`, resized to `height x width`.
pub fn load_dataset<S: Scalar>(
    root: impl AsRef<Path>,
    height: usize,
    width: usize,
) -> Result<LoadedDataset<S>> {
    let root = root.as_ref();
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Data(format!(
            "missing images directory: {}",
            images_dir.display()
        )));
    }
    if !masks_dir.is_dir() {
        return Err(Error::Data(format!(
            "missing masks directory: {}",
            masks_dir.display()
        )));
    }

    let mut image_paths: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    image_paths.sort();

    let mut warnings = Vec::new();
    if image_paths.is_empty() {
        warnings.push(format!("no images found under {}", images_dir.display()));
    }

    let mut samples = Vec::with_capacity(image_paths.len());
    for image_path in image_paths {
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable file name: {}", image_path.display())))?
            .to_string();
        let mask_path = find_mask(&masks_dir, &stem).ok_or_else(|| {
            Error::Data(format!(
                "no mask for image `{}` (looked for {}/{stem}.png|pgm|pnm)",
                image_path.display(),
                masks_dir.display()
            ))
        })?;

        let image = open_gray8(&image_path)?;
        let mask = open_gray8(&mask_path)?;

        let image = resize_if_needed(image, width, height, FilterType::Triangle);
        let mask = resize_if_needed(mask, width, height, FilterType::Nearest);

        let image_data: Vec<S> = image
            .pixels()
            .map(|p| S::from_f64(p.0[0] as f64 / 255.0))
            .collect();
        let mask_data: Vec<S> = mask
            .pixels()
            .map(|p| if p.0[0] >= 128 { S::one() } else { S::zero() })
            .collect();
        samples.push(Sample::new(
            stem,
            Tensor::new(vec![1, 1, height, width], image_data)?,
            GroundTruthMask::new(Tensor::new(vec![1, 1, height, width], mask_data)?)?,
        )?);
    }
    Ok(LoadedDataset { samples, warnings })
}

fn resize_if_needed(img: GrayImage, width: usize, height: usize, filter: FilterType) -> GrayImage {
    if (img.width() as usize, img.height() as usize) == (width, height) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, filter)
    }
}

/// Loads a single grayscale image as a `1 x 1 x H x W` tensor in `[0, 1]`,
/// resized bilinearly to the target resolution.
pub fn load_image_tensor<S: Scalar>(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
) -> Result<Tensor<S>> {
    let img = open_gray8(path.as_ref())?;
    let img = resize_if_needed(img, width, height, FilterType::Triangle);
    let data = img
        .pixels()
        .map(|p| S::from_f64(p.0[0] as f64 / 255.0))
        .collect();
    Tensor::new(vec![1, 1, height, width], data)
}

/// Scales a `1 x 1 x H x W` tensor in `[0, 1]` to 8-bit gray.
pub fn tensor_to_gray8<S: Scalar>(tensor: &Tensor<S>) -> Result<(usize, usize, Vec<u8>)> {
    let (_, _, h, w) = tensor.dims4()?;
    let bytes = tensor
        .data()
        .iter()
        .map(|&v| (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((w, h, bytes))
}

/// Raw 8-bit binary PGM (P5).
pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    out.write_all(data).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// 16-bit binary PGM (P5, maxval 65535, big-endian samples).
pub fn write_pgm16(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    data: &[u16],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{width} {height}\n65535\n").map_err(|e| Error::io(path, e))?;
    for &v in data {
        out.write_all(&v.to_be_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale PNG via the image crate.
pub fn write_png_gray8(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    data: Vec<u8>,
) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Data("pixel buffer does not match dimensions".into()))?;
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: cannot write png: {e}", path.display())))
}

/// Binary mask PNG with values {0, 255} from a {0, 1}-valued map tensor.
pub fn write_mask_png<S: Scalar>(path: impl AsRef<Path>, mask: &Tensor<S>) -> Result<()> {
    let (_, _, h, w) = mask.dims4()?;
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v.to_f64() >= 0.5 { 255 } else { 0 })
        .collect();
    write_png_gray8(path, w, h, bytes)
}
