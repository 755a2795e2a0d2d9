//! Image/mask ingestion, preprocessing, patching, augmentation,
//! normalization and splitting.

mod augment;
mod cache;
mod io;
mod normalize;
mod patches;
mod split;
pub mod synthetic;
mod transform;

pub use augment::{augment, AugmentConfig, AugmentPlan};
pub use cache::{read_samples, write_samples};
pub use io::{ingest, load_image, load_mask, save_image, save_mask};
pub use normalize::{normalize, ChannelStats};
pub use patches::{
    crop_patch, extract_patches, grid_origins, reconstruct_from_patches, PatchRef, PatchSet,
};
pub use split::{split_dataset, SplitManifest};
pub use transform::{crop_pad_square, resize_bilinear};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image `(h,w,c)` in `[0,1]` with its binary mask `(h,w,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub source_id: String,
    /// Top-left corner in the source image when this is a patch.
    pub origin: Option<(usize, usize)>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || ms.len() != 3 || ms[2] != 1 || is[..2] != ms[..2] {
            return Err(Error::data(format!(
                "{source_id}: image {is:?} and mask {ms:?} are not aligned (h,w,c)/(h,w,1) tensors"
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!("{source_id}: mask is not binary")));
        }
        Ok(Self {
            image,
            mask,
            source_id,
            origin: None,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Re-binarizes a mask at 0.5.
pub(crate) fn rebinarize(mask: &Tensor<f32>) -> Tensor<f32> {
    mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}
