//! Grayscale image container and pixel-space geometry.
//!
//! Pixel `(col, row)` has its center at coordinates `x = col`, `y = row`.
//! Positions are continuous in that frame; the valid region is
//! `[0, width-1] × [0, height-1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A continuous position in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub const fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f32 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Single-channel image with intensities nominally in `[0, 1]` and a physical scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
    /// Physical scale in nanometres per pixel. Zero or negative means unknown.
    pub nm_per_px: f32,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>, nm_per_px: f32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::input("image must have non-zero extent"));
        }
        if data.len() != width * height {
            return Err(Error::input(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            nm_per_px,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32, nm_per_px: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            nm_per_px,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f32
            && p.y <= (self.height - 1) as f32
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point {
            x: p.x.clamp(0.0, (self.width - 1) as f32),
            y: p.y.clamp(0.0, (self.height - 1) as f32),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Copy with the same content and a different scale.
    pub fn with_scale(mut self, nm_per_px: f32) -> Self {
        self.nm_per_px = nm_per_px;
        self
    }
}

/// Axis-aligned box in pixel coordinates (left, top, width, height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    /// Square of side `2·radius` centred on `center`.
    pub fn around(center: Point, radius: f32) -> Self {
        Self {
            x: center.x - radius,
            y: center.y - radius,
            w: 2.0 * radius,
            h: 2.0 * radius,
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}
