//! Position-parameterised Gaussian masks and disk fills.
//!
//! The mask centred at `p` with standard deviation `σ` (pixels) is
//!
//! ```text
//! M_ij(p) = c · exp(−‖x_ij − p‖² / 2σ²),   c = 1/(σ√(2π)) or 1
//! ```
//!
//! where `x_ij` is the centre of pixel `(i, j)`. The PDF-normalised variant uses
//! the one-dimensional normaliser, so the 2-D mask does not integrate to one;
//! both variants are selectable through [`MaskConfig::pdf_normalized`].

use serde::{Deserialize, Serialize};

use crate::diffnet::Tensor;
use crate::error::{Error, Result};
use crate::image::{Image, Point};

/// Value written into removed or hidden regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    /// Training-set mean intensity.
    #[default]
    Mean,
    Zeros,
}

impl Fill {
    pub fn value(self, dataset_mean: f32) -> f32 {
        match self {
            Fill::Mean => dataset_mean,
            Fill::Zeros => 0.0,
        }
    }
}

impl std::str::FromStr for Fill {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Fill::Mean),
            "zeros" | "zero" => Ok(Fill::Zeros),
            _ => Err(format!("unknown fill '{s}' (expected mean|zeros)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Multiply the exponential by `1/(σ√(2π))`.
    pub pdf_normalized: bool,
    pub fill: Fill,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            pdf_normalized: false,
            fill: Fill::Mean,
        }
    }
}

/// Which side of the disk a [`circular_fill`] replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillMode {
    /// Fill the disk.
    Remove,
    /// Fill everything outside the disk.
    KeepOnly,
}

fn check_sigma(sigma: f32) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::config(format!("mask sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn scale(sigma: f64, pdf: bool) -> f64 {
    if pdf {
        1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    } else {
        1.0
    }
}

/// Gaussian mask of shape `(height, width)`.
pub fn gaussian_mask(p: Point, sigma: f32, dims: (usize, usize), pdf_normalized: bool) -> Result<Tensor> {
    check_sigma(sigma)?;
    let (w, h) = dims;
    let s = sigma as f64;
    let c = scale(s, pdf_normalized);
    let inv = 1.0 / (2.0 * s * s);
    let (px, py) = (p.x as f64, p.y as f64);
    // exp is separable: exp(-(dx²+dy²)k) = exp(-dx²k)·exp(-dy²k)
    let ex: Vec<f64> = (0..w).map(|i| (-(i as f64 - px).powi(2) * inv).exp()).collect();
    let mut data = Vec::with_capacity(w * h);
    for j in 0..h {
        let ey = c * (-(j as f64 - py).powi(2) * inv).exp();
        data.extend(ex.iter().map(|&e| (ey * e) as f32));
    }
    Tensor::new(vec![h, w], data)
}

/// `(∂M/∂p_x, ∂M/∂p_y)` with `∂M_ij/∂p = M_ij · (x_ij − p)/σ²`.
pub fn mask_position_gradient(
    p: Point,
    sigma: f32,
    dims: (usize, usize),
    pdf_normalized: bool,
) -> Result<(Tensor, Tensor)> {
    let mask = gaussian_mask(p, sigma, dims, pdf_normalized)?;
    let (w, h) = dims;
    let inv_var = 1.0 / (sigma as f64 * sigma as f64);
    let mut gx = Vec::with_capacity(w * h);
    let mut gy = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let m = mask.data()[j * w + i] as f64;
            gx.push((m * (i as f64 - p.x as f64) * inv_var) as f32);
            gy.push((m * (j as f64 - p.y as f64) * inv_var) as f32);
        }
    }
    Ok((Tensor::new(vec![h, w], gx)?, Tensor::new(vec![h, w], gy)?))
}

/// Elementwise `image · mask`.
pub fn apply_mask(image: &Image, mask: &Tensor) -> Result<Image> {
    if mask.shape() != [image.height(), image.width()] {
        return Err(Error::input(format!(
            "mask shape {:?} does not match image {}x{}",
            mask.shape(),
            image.width(),
            image.height()
        )));
    }
    let data = image.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
    Image::new(image.width(), image.height(), data, image.nm_per_px)
}

/// True when the centre of pixel `(col, row)` lies within `radius` of `center`.
#[inline]
pub fn in_disk(col: usize, row: usize, center: Point, radius: f32) -> bool {
    let dx = col as f32 - center.x;
    let dy = row as f32 - center.y;
    dx * dx + dy * dy <= radius * radius
}

/// Replace the disk (or its complement) with `fill_value`.
pub fn circular_fill(image: &Image, center: Point, radius: f32, fill_value: f32, mode: FillMode) -> Image {
    let mut out = image.clone();
    circular_fill_in_place(&mut out, center, radius, fill_value, mode);
    out
}

pub fn circular_fill_in_place(image: &mut Image, center: Point, radius: f32, fill_value: f32, mode: FillMode) {
    let w = image.width();
    for (idx, v) in image.data_mut().iter_mut().enumerate() {
        let inside = in_disk(idx % w, idx / w, center, radius);
        let replace = match mode {
            FillMode::Remove => inside,
            FillMode::KeepOnly => !inside,
        };
        if replace {
            *v = fill_value;
        }
    }
}
