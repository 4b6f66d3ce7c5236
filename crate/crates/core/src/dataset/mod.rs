//! MNIST ingestion, region-growing segmentation and deficient test sets.

mod deficient;
mod idx;
mod segment;

use std::io;

use thiserror::Error;

pub use deficient::{
    deficient_file_stem, gen_deficient_suite, read_deficient_set, reduce, write_deficient_set,
    DeficientSet, Provenance,
};
pub use idx::{parse_idx, read_idx_files, write_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use segment::{chebyshev, segment, SegmentMap, SegmentParams};

use crate::NUM_CLASSES;

/// Side length of the MNIST images this pipeline is validated on.
pub const MNIST_SIDE: usize = 28;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("format error: {0}")]
    Format(String),
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("unexpected EOF")]
    UnexpectedEof,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    /// A stored deficient set was generated with different parameters.
    #[error("stale deficient set: {0}")]
    Provenance(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-channel 8-bit image with its class label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    label: u8,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, label: u8) -> Result<Self, DatasetError> {
        if pixels.len() != width * height {
            return Err(DatasetError::InvalidImage(format!(
                "{} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        if label as usize >= NUM_CLASSES {
            return Err(DatasetError::InvalidImage(format!("label {label} out of range")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            label,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn nonzero_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}
