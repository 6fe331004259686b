//! Comparison detectors: exhaustive sliding window, uniform random starts and
//! a difference-of-Gaussians blob detector.

use rand::Rng as _;

use crate::classifier::ClassifierModel;
use crate::detector::{keep_only_prediction, nms, score_detections, DetectOutput, Detection, DetectorConfig, StopReason};
use crate::error::{Error, Result};
use crate::image::{Image, Point};
use crate::rng::Rng;

/// Uniform integer pixel position.
pub fn random_init(dims: (usize, usize), rng: &mut Rng) -> Point {
    let (w, h) = dims;
    Point::new(rng.random_range(0..w) as f32, rng.random_range(0..h) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingConfig {
    /// Grid spacing in multiples of the radius.
    pub stride_factor: f64,
}

impl Default for SlidingConfig {
    fn default() -> Self {
        Self { stride_factor: 0.125 }
    }
}

/// Grid coordinates `0, s, 2s, …`, `⌈extent/s⌉` of them, clamped to the last pixel.
pub fn grid_positions(extent: usize, stride: f64) -> Vec<f32> {
    let n = (extent as f64 / stride).ceil() as usize;
    // the last step can pass the final pixel centre; pin it there
    let last = extent.saturating_sub(1) as f64;
    (0..n).map(|k| (k as f64 * stride).min(last) as f32).collect()
}

/// Keep-only score at every grid position; local maxima of the score field
/// that reach the threshold become candidates, which then go through the
/// same rescoring and suppression as [`crate::detector::detect`].
pub fn sliding_window_detect(
    model: &ClassifierModel,
    image: &Image,
    cfg: &DetectorConfig,
    sliding: &SlidingConfig,
) -> Result<DetectOutput> {
    cfg.validate()?;
    let r = cfg.radius_px(image)?;
    let stride = sliding.stride_factor * r as f64;
    if !(stride > 0.0) {
        return Err(Error::config("sliding-window stride must be positive"));
    }
    let xs = grid_positions(image.width(), stride);
    let ys = grid_positions(image.height(), stride);
    let (gw, gh) = (xs.len(), ys.len());
    // Maxima are found on logits: strong particles push the f32 score to
    // exactly 1 over a plateau, which would hide the true peak.
    let mut field = Vec::with_capacity(gw * gh);
    let mut scores = Vec::with_capacity(gw * gh);
    for &y in &ys {
        for &x in &xs {
            let (score, logit) = keep_only_prediction(model, image, Point::new(x, y), r, cfg)?;
            field.push(logit);
            scores.push(score);
        }
    }
    let mut calls = field.len() as u64;

    let mut raw = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let v = field[gy * gw + gx];
            if scores[gy * gw + gx] < cfg.threshold {
                continue;
            }
            // plateau ties go to the first cell in raster order
            let mut is_max = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (gx as i64 + dx, gy as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= gw as i64 || ny >= gh as i64 {
                        continue;
                    }
                    let nv = field[ny as usize * gw + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if nv > v || (earlier && nv == v) {
                        is_max = false;
                    }
                }
            }
            if is_max {
                let d = Detection {
                    center: Point::new(xs[gx], ys[gy]),
                    radius: r,
                    score: scores[gy * gw + gx],
                };
                raw.push((v, d));
            }
        }
    }
    raw.sort_by(|a, b| b.0.total_cmp(&a.0));
    let raw: Vec<Detection> = raw.into_iter().take(cfg.max_detections * 4).map(|(_, d)| d).collect();
    let (scored, n) = score_detections(model, image, &raw, cfg.score_mode, cfg.fill_value(model))?;
    calls += n;
    Ok(DetectOutput {
        detections: nms(&scored, cfg.nms_iou),
        raw: raw.iter().map(|d| d.center).collect(),
        forward_calls: calls,
        stop: StopReason::ScoreBelowThreshold,
        heatmaps: Vec::new(),
        trajectories: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DogConfig {
    pub octaves: usize,
    pub intervals: usize,
    pub sigma0: f64,
    /// Blur already present in the input image.
    pub input_blur: f64,
    /// Minimum |DoG| response.
    pub contrast_threshold: f64,
    /// Accepted keypoint diameters, in multiples of `2·r`.
    pub size_range: (f64, f64),
    pub respond_score: bool,
    /// Quadratic refinement of the keypoint position and scale.
    pub refine: bool,
}

impl Default for DogConfig {
    fn default() -> Self {
        Self {
            octaves: 3,
            // 3 per octave leaves gaps as wide as the ±20% size window
            intervals: 5,
            sigma0: 1.6,
            input_blur: 0.5,
            contrast_threshold: 0.02,
            size_range: (0.8, 1.2),
            respond_score: false,
            refine: true,
        }
    }
}

impl DogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.intervals == 0 || !(self.sigma0 > 0.0) {
            return Err(Error::config("DoG pyramid needs octaves, intervals and sigma0 positive"));
        }
        if !(self.contrast_threshold > 0.0) || !(self.size_range.0 > 0.0 && self.size_range.1 >= self.size_range.0) {
            return Err(Error::config("DoG thresholds must be positive"));
        }
        Ok(())
    }
}

/// A scale-space extremum, in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub center: Point,
    /// Scale of the extremum, px.
    pub sigma: f64,
    /// Characteristic blob diameter `2√2·σ`, px.
    pub diameter: f64,
    /// Raw DoG value at the extremum.
    pub response: f64,
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge replication.
fn blur(p: &Plane, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as i64;
    let (w, h) = (p.w, p.h);
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * p.v[y * w + clampi(x as i64 + i as i64 - rad, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * tmp[clampi(y as i64 + i as i64 - rad, h) * w + x])
                .sum();
        }
    }
    Plane { w, h, v: out }
}

fn downsample(p: &Plane) -> Plane {
    let (w, h) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            v.push(p.at(2 * x, 2 * y));
        }
    }
    Plane { w, h, v }
}

/// Scale-space extrema of the difference-of-Gaussians pyramid (no size
/// filtering, no score).
pub fn dog_keypoints(image: &Image, cfg: &DogConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let s = cfg.intervals;
    let k = 2f64.powf(1.0 / s as f64);
    let mut base = Plane {
        w: image.width(),
        h: image.height(),
        v: image.data().iter().map(|&v| v as f64).collect(),
    };
    let pre = (cfg.sigma0 * cfg.sigma0 - cfg.input_blur * cfg.input_blur).max(0.0).sqrt();
    if pre > 0.0 {
        base = blur(&base, pre);
    }
    let mut keypoints = Vec::new();
    for octave in 0..cfg.octaves {
        if base.w < 3 || base.h < 3 {
            break;
        }
        // s + 3 Gaussian levels
        let mut gauss = vec![base];
        for i in 1..s + 3 {
            let prev_sigma = cfg.sigma0 * k.powi(i as i32 - 1);
            let inc = prev_sigma * (k * k - 1.0).sqrt();
            let next = blur(&gauss[i - 1], inc);
            gauss.push(next);
        }
        let dog: Vec<Plane> = gauss
            .windows(2)
            .map(|g| Plane {
                w: g[0].w,
                h: g[0].h,
                v: g[1].v.iter().zip(&g[0].v).map(|(a, b)| a - b).collect(),
            })
            .collect();
        let (w, h) = (dog[0].w, dog[0].h);
        let step = (1usize << octave) as f64;
        for level in 1..=s {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = dog[level].at(x, y);
                    if v.abs() < cfg.contrast_threshold {
                        continue;
                    }
                    let mut is_max = true;
                    let mut is_min = true;
                    for dl in level - 1..=level + 1 {
                        for yy in y - 1..=y + 1 {
                            for xx in x - 1..=x + 1 {
                                if (dl, yy, xx) == (level, y, x) {
                                    continue;
                                }
                                let n = dog[dl].at(xx, yy);
                                is_max &= v > n;
                                is_min &= v < n;
                            }
                        }
                    }
                    if !(is_max || is_min) {
                        continue;
                    }
                    let (mut fx, mut fy, mut fl) = (x as f64, y as f64, level as f64);
                    if cfg.refine {
                        let d = &dog[level];
                        let dx = (d.at(x + 1, y) - d.at(x - 1, y)) / 2.0;
                        let dy = (d.at(x, y + 1) - d.at(x, y - 1)) / 2.0;
                        let dxx = d.at(x + 1, y) - 2.0 * v + d.at(x - 1, y);
                        let dyy = d.at(x, y + 1) - 2.0 * v + d.at(x, y - 1);
                        if dxx != 0.0 {
                            fx -= (dx / dxx).clamp(-0.5, 0.5);
                        }
                        if dyy != 0.0 {
                            fy -= (dy / dyy).clamp(-0.5, 0.5);
                        }
                        let (up, down) = (dog[level + 1].at(x, y), dog[level - 1].at(x, y));
                        let dss = up - 2.0 * v + down;
                        if dss != 0.0 {
                            fl -= ((up - down) / 2.0 / dss).clamp(-0.5, 0.5);
                        }
                    }
                    let sigma = cfg.sigma0 * k.powf(fl) * step;
                    keypoints.push(Keypoint {
                        center: Point::new((fx * step) as f32, (fy * step) as f32),
                        sigma,
                        diameter: 2.0 * std::f64::consts::SQRT_2 * sigma,
                        response: v,
                    });
                }
            }
        }
        base = downsample(&gauss[s]);
    }
    Ok(keypoints)
}

/// DoG detections of particles of radius `radius_px`. Scores are 1, or the
/// raw |response| when `respond_score` is set (see [`normalize_responses`]).
pub fn dog_detect(image: &Image, radius_px: f32, cfg: &DogConfig) -> Result<Vec<Detection>> {
    let target = 2.0 * radius_px as f64;
    let (lo, hi) = (cfg.size_range.0 * target, cfg.size_range.1 * target);
    let tol = 1e-9 * hi;
    Ok(dog_keypoints(image, cfg)?
        .into_iter()
        .filter(|k| k.diameter >= lo - tol && k.diameter <= hi + tol)
        .filter(|k| image.contains(k.center))
        .map(|k| Detection {
            center: k.center,
            radius: radius_px,
            score: if cfg.respond_score { k.response.abs() as f32 } else { 1.0 },
        })
        .collect())
}

/// Divide all scores by the largest score across the whole dataset.
pub fn normalize_responses(per_image: &mut [Vec<Detection>]) {
    let max = per_image
        .iter()
        .flatten()
        .map(|d| d.score)
        .fold(0.0f32, f32::max);
    if max > 0.0 {
        for d in per_image.iter_mut().flatten() {
            d.score /= max;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn random_init_in_bounds_and_seeded() {
        let mut a = seeded(4);
        let mut b = seeded(4);
        for _ in 0..1000 {
            let p = random_init((13, 7), &mut a);
            assert!(p.x >= 0.0 && p.x <= 12.0 && p.y >= 0.0 && p.y <= 6.0);
            assert_eq!(p, random_init((13, 7), &mut b));
        }
    }

    #[test]
    fn grid_count() {
        assert_eq!(grid_positions(64, 0.75).len(), 86);
        assert_eq!(grid_positions(64, 8.0).len(), 8);
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let img = Image::filled(64, 64, 0.6, 1.0);
        assert!(dog_keypoints(&img, &DogConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn response_normalisation() {
        let d = |s| Detection {
            center: Point::new(1.0, 1.0),
            radius: 2.0,
            score: s,
        };
        let mut per = vec![vec![d(0.2), d(0.5)], vec![], vec![d(0.1)]];
        normalize_responses(&mut per);
        let all: Vec<f32> = per.iter().flatten().map(|d| d.score).collect();
        assert_eq!(all.iter().filter(|&&s| s == 1.0).count(), 1);
        assert!(all.iter().all(|&s| s > 0.0 && s <= 1.0));
    }
}
