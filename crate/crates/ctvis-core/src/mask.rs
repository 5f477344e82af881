//! Binary raster masks with run-length encoding.
//!
//! The RLE form is row-major alternating run lengths, starting with a
//! background run (possibly of length 0); runs sum to `width * height`.
//! Masks serialize through that form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("raster mismatch: {0}x{1} vs {2}x{3}")]
    RasterMismatch(usize, usize, usize, usize),
    #[error("rle runs sum to {got}, expected {expected}")]
    BadRunLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length mismatch");
        Self { width, height, data }
    }

    /// Axis-aligned filled rectangle; the window is clipped to the canvas.
    pub fn rect(width: usize, height: usize, x0: i64, y0: i64, w: usize, h: usize) -> Self {
        let mut mask = Self::empty(width, height);
        for y in y0.max(0)..(y0 + h as i64).min(height as i64) {
            for x in x0.max(0)..(x0 + w as i64).min(width as i64) {
                mask.set(x as usize, y as usize, true);
            }
        }
        mask
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_raster(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_raster(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if !self.same_raster(other) {
            return Err(MaskError::RasterMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_raster(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_raster(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count())
    }

    /// Intersection over union; `0/0` is defined as 0.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.union_area(other)?;
        if union == 0 {
            return Ok(0.0);
        }
        Ok(inter as f64 / union as f64)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> Result<bool, MaskError> {
        Ok(self.intersection_area(other)? == 0)
    }

    /// Remove every pixel also set in `other`.
    pub fn subtract(&mut self, other: &BinaryMask) -> Result<(), MaskError> {
        self.check_raster(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            if *b {
                *a = false;
            }
        }
        Ok(())
    }

    /// Copy shifted by `(dx, dy)`; pixels leaving the canvas are dropped.
    pub fn translated(&self, dx: i64, dy: i64) -> BinaryMask {
        let mut out = BinaryMask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
        out
    }

    /// Tight bounding box `(x0, y0, x1, y1)` inclusive, or None when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Alternating run lengths, background first, row-major.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false; // background first
        let mut count = 0usize;
        for &px in &self.data {
            if px == current {
                count += 1;
            } else {
                runs.push(count);
                current = px;
                count = 1;
            }
        }
        runs.push(count);
        // A fully-background mask still encodes as a single run.
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[usize]) -> Result<Self, MaskError> {
        let total: usize = runs.iter().sum();
        if total != width * height {
            return Err(MaskError::BadRunLength { got: total, expected: width * height });
        }
        let mut data = Vec::with_capacity(total);
        let mut value = false;
        for &run in runs {
            data.extend(std::iter::repeat(value).take(run));
            value = !value;
        }
        Ok(Self { width, height, data })
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        RleForm { width: self.width, height: self.height, rle: self.to_rle() }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let form = RleForm::deserialize(deserializer)?;
        BinaryMask::from_rle(form.width, form.height, &form.rle)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct RleForm {
    width: usize,
    height: usize,
    rle: Vec<usize>,
}
