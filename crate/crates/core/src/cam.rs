//! GradCAM heatmaps and the top-1% centre-of-mass initial position.

use rand::Rng as _;

use crate::classifier::ClassifierModel;
use crate::diffnet::Wanted;
use crate::error::{Error, Result};
use crate::image::{Image, Point};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

/// Class activation map at feature resolution plus its image-resolution copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `(width, height)` of the feature map.
    pub raw_dims: (usize, usize),
    pub raw: Vec<f32>,
    /// `(width, height)` of the image.
    pub dims: (usize, usize),
    pub values: Vec<f32>,
}

impl Heatmap {
    /// Heatmap given directly at image resolution.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::input("heatmap value count does not match its extent"));
        }
        Ok(Self {
            raw_dims: (width, height),
            raw: values.clone(),
            dims: (width, height),
            values,
        })
    }

    pub fn is_flat(&self) -> bool {
        let (lo, hi) = min_max(&self.values);
        lo == hi
    }

    pub fn argmax(&self) -> Point {
        let (idx, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        Point::new((idx % self.dims.0) as f32, (idx / self.dims.0) as f32)
    }
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// GradCAM of the logit: channel weights are the spatial means of the logit
/// gradient at the CAM feature map; the map is `ReLU(Σ_k w_k A_k)`.
pub fn grad_cam(model: &ClassifierModel, image: &Image, upsample: Upsample) -> Result<Heatmap> {
    let feature = model
        .net
        .cam_feature_index()
        .ok_or_else(|| Error::config("classifier has no convolution layer for CAM"))?;
    let (_, trace) = model.forward_image(image)?;
    let grads = model.backward(&trace, 1.0, Wanted::CAM_ONLY)?;
    let dfeat = grads.cam.expect("cam gradient present when a conv layer exists");
    let act = &trace.activations[feature];
    let (c, fh, fw) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let plane = fh * fw;
    let weights: Vec<f64> = dfeat
        .data()
        .chunks(plane)
        .map(|g| g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect();
    let mut acc = vec![0.0f64; plane];
    for k in 0..c {
        let a = &act.data()[k * plane..(k + 1) * plane];
        for (s, &v) in acc.iter_mut().zip(a) {
            *s += weights[k] * v as f64;
        }
    }
    let raw: Vec<f32> = acc.into_iter().map(|v| v.max(0.0) as f32).collect();
    let dims = image.dims();
    let values = resize(&raw, (fw, fh), dims, upsample);
    Ok(Heatmap {
        raw_dims: (fw, fh),
        raw,
        dims,
        values,
    })
}

/// Resample a map from `src` to `dst` (`(width, height)` pairs). Bilinear uses
/// half-pixel centres with edge clamping, so the output is a convex
/// combination of input values.
pub fn resize(src_values: &[f32], src: (usize, usize), dst: (usize, usize), mode: Upsample) -> Vec<f32> {
    let (sw, sh) = src;
    let (dw, dh) = dst;
    let coord = |d: usize, sn: usize, dn: usize| -> f64 {
        ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        for x in 0..dw {
            match mode {
                Upsample::Nearest => {
                    let sx = ((x * sw) / dw).min(sw - 1);
                    let sy = ((y * sh) / dh).min(sh - 1);
                    out.push(src_values[sy * sw + sx]);
                }
                Upsample::Bilinear => {
                    let fx = coord(x, sw, dw);
                    let fy = coord(y, sh, dh);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let v = |xx: usize, yy: usize| src_values[yy * sw + xx] as f64;
                    let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
                    let bot = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
                    out.push((top * (1.0 - ty) + bot * ty) as f32);
                }
            }
        }
    }
    out
}

/// Value at the 99th percentile (nearest-rank) of the heatmap.
pub fn top_percentile_threshold(values: &[f32]) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Initial position: intensity-weighted centre of mass of the pixels at or
/// above the 99th percentile. When the pixel nearest that centre is not part
/// of the set, a uniformly random member is used instead. `None` when the
/// heatmap is flat.
pub fn init_position(heat: &Heatmap, rng: &mut Rng) -> Option<Point> {
    if heat.is_flat() || heat.values.is_empty() {
        return None;
    }
    let (w, h) = heat.dims;
    let thr = top_percentile_threshold(&heat.values);
    let members: Vec<usize> = (0..heat.values.len()).filter(|&i| heat.values[i] >= thr).collect();
    let (mut sx, mut sy, mut sm) = (0.0f64, 0.0f64, 0.0f64);
    for &i in &members {
        let v = heat.values[i] as f64;
        sx += v * (i % w) as f64;
        sy += v * (i / w) as f64;
        sm += v;
    }
    if sm > 0.0 {
        let p = Point::new((sx / sm) as f32, (sy / sm) as f32);
        let col = (p.x.round() as usize).min(w - 1);
        let row = (p.y.round() as usize).min(h - 1);
        if heat.values[row * w + col] >= thr {
            return Some(p);
        }
    }
    let pick = members[rng.random_range(0..members.len())];
    Some(Point::new((pick % w) as f32, (pick / w) as f32))
}
