//! Multi-instance detection loop: initialise, optimise, verify, remove,
//! repeat; then rescore, suppress overlaps and emit fixed-size boxes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::{grad_cam, init_position, Heatmap, Upsample};
use crate::classifier::{predict, ClassifierModel};
use crate::error::{Error, Result};
use crate::evalkit::box_iou;
use crate::gaussmask::{circular_fill, circular_fill_in_place, Fill, FillMode};
use crate::image::{BBox, Image, Point};
use crate::io;
use crate::posopt::{check_scale, optimize_position, OptConfig, Trajectory};
use crate::rng;

/// A located particle: fixed radius, confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub center: Point,
    pub radius: f32,
    pub score: f32,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::around(self.center, self.radius)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Fill every other detection's disk, classify the rest of the image.
    #[default]
    MaskOther,
    /// Keep only this detection's disk.
    MaskBackground,
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mask_other" => Ok(ScoreMode::MaskOther),
            "mask_background" => Ok(ScoreMode::MaskBackground),
            _ => Err(format!("unknown score mode '{s}' (expected mask_other|mask_background)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    #[default]
    GradCam,
    Random,
}

impl std::str::FromStr for Init {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradcam" => Ok(Init::GradCam),
            "random" => Ok(Init::Random),
            _ => Err(format!("unknown init '{s}' (expected gradcam|random)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Known particle radius in nm.
    pub radius_nm: f64,
    /// Stop / acceptance threshold on the classifier score (inclusive).
    pub threshold: f32,
    pub max_detections: usize,
    /// Consecutive rejected candidates tolerated before giving up. Only
    /// random starts retry; a CAM start on an unchanged image would just
    /// reproduce the rejected candidate.
    pub max_rejections: usize,
    pub nms_iou: f64,
    pub opt: OptConfig,
    pub score_mode: ScoreMode,
    pub fill: Fill,
    pub init: Init,
    pub upsample: Upsample,
    /// Seeds the fallback pick of the initialisation and random starts.
    pub seed: u64,
    /// Keep CAMs and trajectories in the output.
    pub record: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            radius_nm: 30.0,
            threshold: 0.5,
            max_detections: 20,
            max_rejections: 5,
            nms_iou: 0.5,
            opt: OptConfig::default(),
            score_mode: ScoreMode::MaskOther,
            fill: Fill::Mean,
            init: Init::GradCam,
            upsample: Upsample::Bilinear,
            seed: 0,
            record: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.max_detections == 0 {
            return Err(Error::config("max_detections must be at least 1"));
        }
        if self.max_rejections == 0 {
            return Err(Error::config("max_rejections must be at least 1"));
        }
        if !(self.radius_nm > 0.0) {
            return Err(Error::config(format!("radius_nm must be positive, got {}", self.radius_nm)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::config("nms_iou must lie in (0, 1]"));
        }
        self.opt.validate()
    }

    pub fn radius_px(&self, image: &Image) -> Result<f32> {
        check_scale(image)?;
        Ok((self.radius_nm / image.nm_per_px as f64) as f32)
    }

    pub fn fill_value(&self, model: &ClassifierModel) -> f32 {
        self.fill.value(model.norm.mean)
    }
}

/// Why the search loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    FlatCam,
    Rejected,
    ScoreBelowThreshold,
    MaxDetections,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput {
    pub detections: Vec<Detection>,
    /// Accepted centres in discovery order, before scoring and NMS.
    pub raw: Vec<Point>,
    /// Classifier forward passes, every stage included.
    pub forward_calls: u64,
    pub stop: StopReason,
    pub heatmaps: Vec<Heatmap>,
    pub trajectories: Vec<Trajectory>,
}

/// Run the full pipeline on one image.
pub fn detect(model: &ClassifierModel, image: &Image, cfg: &DetectorConfig) -> Result<DetectOutput> {
    cfg.validate()?;
    let r = cfg.radius_px(image)?;
    let fill = cfg.fill_value(model);
    let mut rng = rng::seeded(cfg.seed);
    let mut working = image.clone();
    let mut found: Vec<Point> = Vec::new();
    let mut calls = 0u64;
    let mut heatmaps = Vec::new();
    let mut trajectories = Vec::new();

    let (score, _) = predict(model, &working)?;
    calls += 1;
    let mut rejections = 0usize;
    let stop = if score < cfg.threshold {
        StopReason::ScoreBelowThreshold
    } else {
        loop {
            let p0 = match cfg.init {
                Init::GradCam => {
                    let heat = grad_cam(model, &working, cfg.upsample)?;
                    calls += 1;
                    let p0 = init_position(&heat, &mut rng);
                    if cfg.record {
                        heatmaps.push(heat);
                    }
                    match p0 {
                        Some(p) => p,
                        None => break StopReason::FlatCam,
                    }
                }
                Init::Random => crate::baselines::random_init(working.dims(), &mut rng),
            };
            let opt = optimize_position(model, &working, p0, r, &cfg.opt)?;
            calls += opt.trajectory.forward_calls;
            let p = opt.position;
            if cfg.record {
                trajectories.push(opt.trajectory);
            }
            let (accepted, _) = verify_detection(model, &working, p, r, cfg)?;
            calls += 1;
            if !accepted {
                rejections += 1;
                if cfg.init == Init::GradCam || rejections >= cfg.max_rejections {
                    break StopReason::Rejected;
                }
                continue;
            }
            rejections = 0;
            found.push(p);
            circular_fill_in_place(&mut working, p, r, fill, FillMode::Remove);
            if found.len() >= cfg.max_detections {
                break StopReason::MaxDetections;
            }
            let (score, _) = predict(model, &working)?;
            calls += 1;
            if score < cfg.threshold {
                break StopReason::ScoreBelowThreshold;
            }
        }
    };

    let raw: Vec<Detection> = found
        .iter()
        .copied()
        .map(|center| Detection {
            center,
            radius: r,
            score: 0.0,
        })
        .collect();
    let (scored, n) = score_detections(model, image, &raw, cfg.score_mode, fill)?;
    calls += n;
    Ok(DetectOutput {
        detections: nms(&scored, cfg.nms_iou),
        raw: found,
        forward_calls: calls,
        stop,
        heatmaps,
        trajectories,
    })
}

/// Classify the image with everything but the disk at `p` filled.
/// Accepted iff the score reaches the threshold.
pub fn verify_detection(
    model: &ClassifierModel,
    image: &Image,
    p: Point,
    radius_px: f32,
    cfg: &DetectorConfig,
) -> Result<(bool, f32)> {
    let (score, _) = keep_only_prediction(model, image, p, radius_px, cfg)?;
    Ok((score >= cfg.threshold, score))
}

/// Score and logit of the image with everything but the disk at `p` filled.
pub fn keep_only_prediction(
    model: &ClassifierModel,
    image: &Image,
    p: Point,
    radius_px: f32,
    cfg: &DetectorConfig,
) -> Result<(f32, f32)> {
    if !image.contains(p) {
        return Err(Error::input(format!("position ({}, {}) lies outside the image", p.x, p.y)));
    }
    let kept = circular_fill(image, p, radius_px, cfg.fill_value(model), FillMode::KeepOnly);
    predict(model, &kept)
}

/// Assign each detection a classifier score; returns the rescored list and
/// the number of forward passes spent.
pub fn score_detections(
    model: &ClassifierModel,
    image: &Image,
    detections: &[Detection],
    mode: ScoreMode,
    fill_value: f32,
) -> Result<(Vec<Detection>, u64)> {
    let mut out = Vec::with_capacity(detections.len());
    for (i, d) in detections.iter().enumerate() {
        if !image.contains(d.center) {
            return Err(Error::input("detection centre lies outside the image"));
        }
        let view = match mode {
            ScoreMode::MaskOther => {
                let mut img = image.clone();
                for (j, o) in detections.iter().enumerate() {
                    if j != i {
                        circular_fill_in_place(&mut img, o.center, o.radius, fill_value, FillMode::Remove);
                    }
                }
                img
            }
            ScoreMode::MaskBackground => circular_fill(image, d.center, d.radius, fill_value, FillMode::KeepOnly),
        };
        let (score, _) = predict(model, &view)?;
        out.push(Detection { score, ..*d });
    }
    Ok((out, detections.len() as u64))
}

/// Greedy suppression: highest score first (ties keep input order); a box is
/// kept iff its IoU with every kept box is below `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let b = detections[i].bbox();
        if kept.iter().all(|k| box_iou(&k.bbox(), &b) < iou_threshold) {
            kept.push(detections[i]);
        }
    }
    kept
}

/// On-disk form of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub score: f32,
    pub cx: f32,
    pub cy: f32,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        let b = d.bbox();
        Self {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            score: d.score,
            cx: d.center.x,
            cy: d.center.y,
        }
    }
}

impl DetectionRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

pub fn detections_to_json(detections: &[Detection]) -> String {
    let recs: Vec<DetectionRecord> = detections.iter().map(DetectionRecord::from).collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("serialisable detections");
    s.push('\n');
    s
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    io::write_atomic(path, detections_to_json(detections).as_bytes())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    crate::synthdata::read_json(path)
}
