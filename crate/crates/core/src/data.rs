//! In-memory image groups.

use crate::error::{dim_err, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// `N` square RGB images (`3×S×S`, values in `[0,1]`) with their masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub id: String,
    pub names: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    pub masks: Vec<BinaryMask>,
}

impl ImageGroup {
    pub fn new(id: String, names: Vec<String>, images: Vec<Tensor<f32>>, masks: Vec<BinaryMask>) -> Result<Self> {
        if images.len() != masks.len() || images.len() != names.len() {
            return Err(dim_err!(
                "group {id}: {} images, {} masks, {} names",
                images.len(),
                masks.len(),
                names.len()
            ));
        }
        for (img, m) in images.iter().zip(&masks) {
            match *img.shape() {
                [3, h, w] if h == m.height && w == m.width => {}
                ref s => {
                    return Err(dim_err!(
                        "group {id}: image {s:?} does not match mask {}×{}",
                        m.height,
                        m.width
                    ))
                }
            }
        }
        Ok(Self {
            id,
            names,
            images,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Side length of the first image.
    pub fn size(&self) -> usize {
        self.images.first().map_or(0, |i| i.shape()[1])
    }
}
