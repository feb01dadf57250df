//! Per-pixel class label rasters.

use crate::error::{Error, Result};

/// Label value for pixels excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Single-image label raster, row-major, one class id per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::invalid(format!(
                "mask wants {h}x{w} = {} labels, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Mask {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.w + c] = v;
    }
}

/// Batch of equally sized masks, laid out (N, H, W).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBatch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl MaskBatch {
    pub fn from_masks(masks: &[Mask]) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::invalid("mask batch needs at least one mask"));
        };
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for (i, m) in masks.iter().enumerate() {
            if m.h != h || m.w != w {
                return Err(Error::invalid(format!(
                    "mask {i} is {}x{}, batch is {h}x{w}",
                    m.h, m.w
                )));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(MaskBatch {
            n: masks.len(),
            h,
            w,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Pixels not labeled [`IGNORE`].
    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Verifies every non-ignore label is `< num_classes`.
    pub fn check_ids(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE && v as usize >= num_classes {
                let hw = self.h * self.w;
                let (n, rest) = (i / hw, i % hw);
                return Err(Error::invalid(format!(
                    "label {v} at sample {n}, pixel ({}, {}) exceeds class count {num_classes}",
                    rest / self.w,
                    rest % self.w
                )));
            }
        }
        Ok(())
    }
}
