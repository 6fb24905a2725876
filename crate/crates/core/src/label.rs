//! Class-index rasters.

use crate::error::{Error, Result};

/// Reserved label value marking pixels excluded from loss and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// H x W raster of class indices; 255 is the reserved ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label raster {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Marks a border band of the given width as ignore.
    pub fn ignore_border(&mut self, band: usize) {
        for y in 0..self.height {
            for x in 0..self.width {
                if y < band || x < band || y >= self.height - band || x >= self.width - band {
                    self.data[y * self.width + x] = IGNORE_INDEX;
                }
            }
        }
    }
}
