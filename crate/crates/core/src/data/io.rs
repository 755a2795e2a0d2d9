use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 10] = [
    "png", "jpg", "jpeg", "gif", "tif", "tiff", "bmp", "ppm", "pgm", "pnm",
];
const MASK_SUFFIX: &str = "_mask";
/// 8-bit mask values at or above this are foreground.
const MASK_THRESHOLD: u8 = 128;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an 8-bit image scaled to `[0,1]`: grayscale sources give one
/// channel, everything else three.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        Tensor::new(vec![h, w, 3], rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    } else {
        let gray = img.to_luma8();
        Tensor::new(vec![h, w, 1], gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
    }
}

/// Loads a mask, binarized at 128/255, as `(h,w,1)`.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let gray = open(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![h, w, 1], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary mask as an 8-bit grayscale image with values {0, 255}.
pub fn save_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let &[h, w, 1] = mask.shape() else {
        return Err(Error::dim(format!("mask must be (h,w,1), got {:?}", mask.shape())));
    };
    let raw = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `[0,1]` image with one or three channels as 8-bit.
pub fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let &[h, w, c] = image.shape() else {
        return Err(Error::dim(format!("image must be (h,w,c), got {:?}", image.shape())));
    };
    let raw: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, raw).unwrap()),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, raw).unwrap()),
        _ => return Err(Error::dim(format!("cannot save a {c}-channel image"))),
    };
    dynamic.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Reads every `<stem>.<ext>` / `<stem>_mask.<ext>` pair in `dir`, sorted by
/// stem.
pub fn ingest(dir: &Path) -> Result<Vec<Sample>> {
    if !dir.is_dir() {
        return Err(Error::data(format!("{} is not a directory", dir.display())));
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut masks: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (table, key) = match stem.strip_suffix(MASK_SUFFIX) {
            Some(base) => (&mut masks, base.to_string()),
            None => (&mut images, stem),
        };
        if let Some(prev) = table.insert(key.clone(), path.clone()) {
            return Err(Error::data(format!(
                "{} and {} share the stem {key:?}",
                prev.display(),
                path.display()
            )));
        }
    }
    let unpaired: Vec<String> = images
        .iter()
        .filter(|(k, _)| !masks.contains_key(*k))
        .chain(masks.iter().filter(|(k, _)| !images.contains_key(*k)))
        .map(|(_, p)| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::data(format!(
            "unpaired files in {}: {}",
            dir.display(),
            unpaired.join(", ")
        )));
    }
    if images.is_empty() {
        log::warn!("no image/mask pairs found in {}", dir.display());
    }
    images
        .into_iter()
        .map(|(stem, path)| {
            let image = load_image(&path)?;
            let mask_path = &masks[&stem];
            let mask = load_mask(mask_path)?;
            if image.shape()[..2] != mask.shape()[..2] {
                return Err(Error::data(format!(
                    "{} is {}×{} but {} is {}×{}",
                    path.display(),
                    image.shape()[0],
                    image.shape()[1],
                    mask_path.display(),
                    mask.shape()[0],
                    mask.shape()[1]
                )));
            }
            Sample::new(image, mask, stem)
        })
        .collect()
}
