//! Gradient ascent of the mask position under an annealed mask width.

use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::{normalize, ClassifierModel};
use crate::diffnet::Wanted;
use crate::error::{Error, Result};
use crate::gaussmask::gaussian_mask;
use crate::image::{Image, Point};
use crate::io;

/// Exponential interpolation from `sigma_max` down to `sigma_min` (both nm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub steps: usize,
}

impl SigmaSchedule {
    pub fn new(sigma_max: f64, sigma_min: f64, steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0) || !(sigma_max >= sigma_min) || !sigma_max.is_finite() {
            return Err(Error::config(format!(
                "sigma schedule needs sigma_max >= sigma_min > 0, got {sigma_max} / {sigma_min}"
            )));
        }
        if steps == 0 {
            return Err(Error::config("sigma schedule needs at least one step"));
        }
        Ok(Self {
            sigma_max,
            sigma_min,
            steps,
        })
    }

    /// `σ_t = σ_max·(σ_min/σ_max)^{t/T}`, with `t` clamped to `[0, T]`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        let t = t.min(self.steps);
        if t == 0 {
            return self.sigma_max;
        }
        if t == self.steps {
            return self.sigma_min;
        }
        self.sigma_max * (self.sigma_min / self.sigma_max).powf(t as f64 / self.steps as f64)
    }
}

pub fn sigma_at(schedule: &SigmaSchedule, t: usize) -> f64 {
    schedule.sigma_at(t)
}

/// Half of the image diagonal in nm: a centred mask of this width keeps every
/// pixel weight at or above `e^{-1/2}` of its peak.
pub fn half_diagonal_nm(image: &Image) -> f64 {
    let (w, h) = image.dims();
    let d = ((w as f64 - 1.0).powi(2) + (h as f64 - 1.0).powi(2)).sqrt();
    0.5 * d * image.nm_per_px as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    Logit,
    /// Sigmoid of the logit, evaluated in single precision.
    Score,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "logit" => Ok(Objective::Logit),
            "score" => Ok(Objective::Score),
            _ => Err(format!("unknown objective '{s}' (expected logit|score)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// Every step moves `η` along the normalised gradient.
    #[default]
    Fixed,
    /// The step halves whenever the normalised gradient reverses direction
    /// (negative dot product with the previous one), once σ is fine enough.
    Halving,
}

impl std::str::FromStr for StepRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(StepRule::Fixed),
            "halving" => Ok(StepRule::Halving),
            _ => Err(format!("unknown step rule '{s}' (expected fixed|halving)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    /// `σ_min` in multiples of the particle radius.
    pub sigma_min_factor: f64,
    /// `σ_max` in nm; `None` uses the image half-diagonal.
    pub sigma_max_nm: Option<f64>,
    pub max_iter: usize,
    /// Step length in px (initial length under halving).
    pub step: f64,
    pub step_rule: StepRule,
    pub objective: Objective,
    /// Convergence tolerance in multiples of the radius.
    pub tolerance_factor: f64,
    /// Consecutive sub-tolerance moves needed to stop.
    pub patience: usize,
    /// Halving only engages once σ is at most this many radii.
    pub halving_sigma_factor: f64,
    /// Scale the mask by the Gaussian normalising constant.
    pub pdf_normalized: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            sigma_min_factor: 0.5,
            sigma_max_nm: None,
            max_iter: 200,
            step: 0.1,
            step_rule: StepRule::Fixed,
            objective: Objective::Logit,
            tolerance_factor: 0.01,
            patience: 3,
            halving_sigma_factor: 2.0,
            pdf_normalized: false,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.sigma_min_factor > 0.0) {
            return Err(Error::config("sigma_min factor must be positive"));
        }
        if !(self.halving_sigma_factor >= 0.0) {
            return Err(Error::config("halving sigma factor must be non-negative"));
        }
        if self.tolerance_factor < 0.0 || self.patience == 0 {
            return Err(Error::config("tolerance must be non-negative and patience at least 1"));
        }
        Ok(())
    }

    /// Schedule for one image. The last optimisation step runs at `σ_min`.
    pub fn schedule(&self, image: &Image, radius_px: f32) -> Result<SigmaSchedule> {
        check_scale(image)?;
        let sigma_min = self.sigma_min_factor * radius_px as f64 * image.nm_per_px as f64;
        let sigma_max = self.sigma_max_nm.unwrap_or_else(|| half_diagonal_nm(image)).max(sigma_min);
        SigmaSchedule::new(sigma_max, sigma_min, self.max_iter.saturating_sub(1).max(1))
    }
}

pub(crate) fn check_scale(image: &Image) -> Result<()> {
    if !(image.nm_per_px > 0.0) || !image.nm_per_px.is_finite() {
        return Err(Error::config("image scale (nm per pixel) is unknown"));
    }
    Ok(())
}

/// Objective value at `p` and its gradient in `p`. `sigma` is in px.
/// Performs exactly one classifier forward and one backward pass.
pub fn objective_gradient(
    model: &ClassifierModel,
    image: &Image,
    p: Point,
    sigma: f32,
    objective: Objective,
    pdf_normalized: bool,
) -> Result<(f64, [f64; 2])> {
    let (w, h) = image.dims();
    let mask = gaussian_mask(p, sigma, (w, h), pdf_normalized)?;
    let masked: Vec<f32> = image.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
    let masked = Image::new(w, h, masked, image.nm_per_px)?;
    let (logit, trace) = model.forward(&normalize(&masked, model.norm))?;
    let (value, seed) = match objective {
        Objective::Logit => (logit as f64, 1.0f32),
        Objective::Score => {
            let s = 1.0 / (1.0 + (-logit).exp());
            (s as f64, s * (1.0 - s))
        }
    };
    if seed == 0.0 {
        return Ok((value, [0.0, 0.0]));
    }
    let grads = model.backward(&trace, seed, Wanted::INPUT)?;
    // d(normalised)/d(masked) = 1/std
    let inv_std = 1.0 / model.norm.std as f64;
    let inv_var = 1.0 / (sigma as f64 * sigma as f64);
    let (px, py) = (p.x as f64, p.y as f64);
    let (mut gx, mut gy) = (0.0f64, 0.0f64);
    for j in 0..h {
        for i in 0..w {
            let k = j * w + i;
            let common = grads.input.data()[k] as f64 * image.data()[k] as f64 * mask.data()[k] as f64;
            gx += common * (i as f64 - px);
            gy += common * (j as f64 - py);
        }
    }
    let scale = inv_std * inv_var;
    Ok((value, [gx * scale, gy * scale]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub p: Point,
    /// Mask width in nm.
    pub sigma: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Classifier forward passes spent.
    pub forward_calls: u64,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,px,py,sigma,value\n");
        for q in &self.points {
            let _ = writeln!(out, "{},{},{},{},{}", q.t, q.p.x, q.p.y, q.sigma, q.value);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub position: Point,
    pub trajectory: Trajectory,
    pub converged: bool,
}

/// Ascend the objective from `p0`. Every iterate is clamped to the image.
pub fn optimize_position(
    model: &ClassifierModel,
    image: &Image,
    p0: Point,
    radius_px: f32,
    cfg: &OptConfig,
) -> Result<Optimized> {
    cfg.validate()?;
    if !image.contains(p0) || !p0.x.is_finite() || !p0.y.is_finite() {
        return Err(Error::input(format!("start position ({}, {}) lies outside the image", p0.x, p0.y)));
    }
    let schedule = cfg.schedule(image, radius_px)?;
    let nm = image.nm_per_px as f64;
    let tolerance = cfg.tolerance_factor * radius_px as f64;
    let arm_nm = cfg.halving_sigma_factor * radius_px as f64 * nm;
    let mut traj = Trajectory::default();
    let mut p = p0;
    let mut step = cfg.step;
    let mut prev: Option<[f64; 2]> = None;
    let mut still = 0usize;
    let mut converged = false;

    for t in 0..cfg.max_iter {
        let sigma_nm = schedule.sigma_at(t);
        let (value, g) = objective_gradient(model, image, p, (sigma_nm / nm) as f32, cfg.objective, cfg.pdf_normalized)?;
        traj.forward_calls += 1;
        traj.points.push(TrajectoryPoint {
            t,
            p,
            sigma: sigma_nm,
            value,
        });
        let norm = g[0].abs().max(g[1].abs());
        let dir = if norm > 0.0 && norm.is_finite() {
            [g[0] / norm, g[1] / norm]
        } else {
            [0.0, 0.0]
        };
        if cfg.step_rule == StepRule::Halving && sigma_nm <= arm_nm {
            if let Some(q) = prev {
                if q[0] * dir[0] + q[1] * dir[1] < 0.0 {
                    step *= 0.5;
                }
            }
        }
        prev = Some(dir);
        let next = image.clamp(Point::new(
            (p.x as f64 + step * dir[0]) as f32,
            (p.y as f64 + step * dir[1]) as f32,
        ));
        let moved = next.distance(p) as f64;
        p = next;
        if moved < tolerance {
            still += 1;
            if still >= cfg.patience {
                converged = true;
                break;
            }
        } else {
            still = 0;
        }
    }
    Ok(Optimized {
        position: p,
        trajectory: traj,
        converged,
    })
}
