//! Running a detection method over a split and summarising the result.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use clap::ValueEnum;
use rayon::prelude::*;

use maskopt::baselines::{dog_detect, normalize_responses, sliding_window_detect};
use maskopt::cam::Heatmap;
use maskopt::classifier::ClassifierModel;
use maskopt::detector::{detect, Detection, Init, ScoreMode};
use maskopt::evalkit::{evaluate, Metrics, PerImage, ScoredBox};
use maskopt::gaussmask::Fill;
use maskopt::image::BBox;
use maskopt::posopt::{Objective, Trajectory};
use maskopt::synthdata::DatasetSample;

use crate::config::DetectSettings;
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Method {
    /// Gaussian-mask position optimisation.
    #[default]
    Opt,
    /// Exhaustive keep-only scoring on a grid.
    Sliding,
    /// Difference-of-Gaussians blobs.
    Dog,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Opt => "opt",
            Method::Sliding => "sliding",
            Method::Dog => "dog",
        }
    }
}

/// Method plus settings for one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSpec {
    pub method: Method,
    pub settings: DetectSettings,
    /// Relative size error applied to the radius.
    pub size_error: f64,
}

impl RunSpec {
    /// The detector configuration with the radius resolved for a dataset
    /// whose particles have radius `dataset_radius_nm`.
    pub fn resolved(&self, dataset_radius_nm: f64) -> DetectSettings {
        let mut s = self.settings.clone();
        let base = s.radius_nm.unwrap_or(dataset_radius_nm);
        s.det.radius_nm = base * (1.0 + self.size_error);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRun {
    pub id: usize,
    pub detections: Vec<Detection>,
    pub forward_calls: u64,
    /// Candidates accepted before rescoring and suppression.
    pub accepted: usize,
    pub heatmaps: Vec<Heatmap>,
    pub trajectories: Vec<Trajectory>,
}

/// Run one method over `samples`, in parallel across images. Results come
/// back in input order whatever the thread count.
pub fn run_split(
    model: &ClassifierModel,
    samples: &[DatasetSample],
    spec: &RunSpec,
    dataset_radius_nm: f64,
    record: bool,
) -> anyhow::Result<Vec<ImageRun>> {
    let s = spec.resolved(dataset_radius_nm);
    let mut det = s.det.clone();
    det.record = record;
    det.validate()?;
    let mut runs: Vec<ImageRun> = samples
        .par_iter()
        .map(|sample| -> anyhow::Result<ImageRun> {
            let image = &sample.image;
            Ok(match spec.method {
                Method::Opt => {
                    let out = detect(model, image, &det)?;
                    ImageRun {
                        id: sample.id,
                        accepted: out.raw.len(),
                        detections: out.detections,
                        forward_calls: out.forward_calls,
                        heatmaps: out.heatmaps,
                        trajectories: out.trajectories,
                    }
                }
                Method::Sliding => {
                    let out = sliding_window_detect(model, image, &det, &s.sliding)?;
                    ImageRun {
                        id: sample.id,
                        accepted: out.raw.len(),
                        detections: out.detections,
                        forward_calls: out.forward_calls,
                        heatmaps: Vec::new(),
                        trajectories: Vec::new(),
                    }
                }
                Method::Dog => {
                    let r = det.radius_px(image)?;
                    let dets = dog_detect(image, r, &s.dog)?;
                    ImageRun {
                        id: sample.id,
                        accepted: dets.len(),
                        detections: dets,
                        forward_calls: 0,
                        heatmaps: Vec::new(),
                        trajectories: Vec::new(),
                    }
                }
            })
        })
        .collect::<anyhow::Result<_>>()?;
    if spec.method == Method::Dog && s.dog.respond_score {
        let mut per: Vec<Vec<Detection>> = runs.iter_mut().map(|r| std::mem::take(&mut r.detections)).collect();
        normalize_responses(&mut per);
        for (r, d) in runs.iter_mut().zip(per) {
            r.detections = d;
        }
    }
    Ok(runs)
}

/// Detections and ground truth keyed by image id.
pub fn per_image(runs: &[ImageRun], samples: &[DatasetSample]) -> (PerImage<ScoredBox>, PerImage<BBox>) {
    let dets = runs
        .iter()
        .map(|r| {
            let boxes = r.detections.iter().map(|d| ScoredBox { bbox: d.bbox(), score: d.score }).collect();
            (r.id, boxes)
        })
        .collect();
    let gts = samples.iter().map(|s| (s.id, s.boxes())).collect();
    (dets, gts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub metrics: Metrics,
    pub forward_calls: u64,
    pub accepted: usize,
    pub images: usize,
}

impl Summary {
    pub fn map50(&self) -> f64 {
        self.metrics.map50
    }

    pub fn forward_per_image(&self) -> f64 {
        self.forward_calls as f64 / self.images.max(1) as f64
    }

    /// Forward passes spent per accepted candidate; `NaN` without any.
    pub fn forward_per_detection(&self) -> f64 {
        if self.accepted == 0 {
            f64::NAN
        } else {
            self.forward_calls as f64 / self.accepted as f64
        }
    }
}

pub fn summarize(runs: &[ImageRun], samples: &[DatasetSample]) -> anyhow::Result<Summary> {
    let (dets, gts) = per_image(runs, samples);
    let (metrics, _) = evaluate(&dets, &gts)?;
    Ok(Summary {
        metrics,
        forward_calls: runs.iter().map(|r| r.forward_calls).sum(),
        accepted: runs.iter().map(|r| r.accepted).sum(),
        images: runs.len(),
    })
}

// ---------------------------------------------------------------------------
// Ablations

pub const SUITES: &[&str] = &["init", "sigma_min", "loss", "fill", "score_mode", "pdf", "size_error"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tweak {
    Method(Method, Init),
    SigmaMin(f64),
    Objective(Objective),
    Fill(Fill),
    ScoreMode(ScoreMode),
    Pdf(bool),
    SizeError(f64),
}

impl Tweak {
    pub fn apply(self, spec: &mut RunSpec) {
        let d = &mut spec.settings.det;
        match self {
            Tweak::Method(m, init) => {
                spec.method = m;
                d.init = init;
            }
            Tweak::SigmaMin(f) => d.opt.sigma_min_factor = f,
            Tweak::Objective(o) => d.opt.objective = o,
            Tweak::Fill(f) => d.fill = f,
            Tweak::ScoreMode(m) => d.score_mode = m,
            Tweak::Pdf(on) => d.opt.pdf_normalized = on,
            Tweak::SizeError(e) => spec.size_error = e,
        }
    }
}

pub fn suite(name: &str) -> Result<Vec<(&'static str, Tweak)>, Failure> {
    use Tweak::*;
    Ok(match name {
        "init" => vec![
            ("random", Method(self::Method::Opt, Init::Random)),
            ("gradcam", Method(self::Method::Opt, Init::GradCam)),
            ("sliding", Method(self::Method::Sliding, Init::GradCam)),
        ],
        "sigma_min" => vec![
            ("2r", SigmaMin(2.0)),
            ("1r", SigmaMin(1.0)),
            ("0.5r", SigmaMin(0.5)),
            ("0.25r", SigmaMin(0.25)),
        ],
        "loss" => vec![("logit", Objective(self::Objective::Logit)), ("score", Objective(self::Objective::Score))],
        "fill" => vec![("zeros", Fill(self::Fill::Zeros)), ("mean", Fill(self::Fill::Mean))],
        "score_mode" => vec![
            ("mask_other", ScoreMode(self::ScoreMode::MaskOther)),
            ("mask_background", ScoreMode(self::ScoreMode::MaskBackground)),
        ],
        "pdf" => vec![("on", Pdf(true)), ("off", Pdf(false))],
        "size_error" => vec![
            ("0%", SizeError(0.0)),
            ("10%", SizeError(0.1)),
            ("20%", SizeError(0.2)),
            ("30%", SizeError(0.3)),
        ],
        _ => {
            return Err(Failure::Config(format!(
                "unknown ablation suite '{name}' (valid suites: {})",
                SUITES.join(", ")
            )))
        }
    })
}

/// One variant evaluated over several seeded runs.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<Summary>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationRow {
    pub fn map50(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(Summary::map50).collect::<Vec<_>>())
    }

    pub fn forward_per_image(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(Summary::forward_per_image).collect::<Vec<_>>())
    }

    pub fn forward_per_detection(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(Summary::forward_per_detection).collect::<Vec<_>>())
    }
}

/// One run of an ablation: a classifier, the images to detect in, the
/// dataset's particle radius and the run seed.
pub struct AblationRun<'a> {
    pub model: &'a ClassifierModel,
    pub samples: &'a [DatasetSample],
    pub radius_nm: f64,
    pub seed: u64,
}

pub fn run_ablation(suite_name: &str, base: &RunSpec, runs: &[AblationRun]) -> anyhow::Result<Vec<AblationRow>> {
    let variants = suite(suite_name)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (name, tweak) in variants {
        let mut spec = base.clone();
        tweak.apply(&mut spec);
        let mut summaries = Vec::with_capacity(runs.len());
        for run in runs {
            let mut s = spec.clone();
            s.settings.det.seed = run.seed;
            let results = run_split(run.model, run.samples, &s, run.radius_nm, false)?;
            summaries.push(summarize(&results, run.samples)?);
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            runs: summaries,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(suite_name: &str, rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "suite,variant,runs,map50_mean,map50_std,forward_per_image_mean,forward_per_image_std,forward_per_detection_mean,forward_per_detection_std\n",
    );
    for r in rows {
        let (m, ms) = r.map50();
        let (f, fs) = r.forward_per_image();
        let (d, ds) = r.forward_per_detection();
        let _ = writeln!(
            out,
            "{suite_name},{},{},{m:.4},{ms:.4},{f:.1},{fs:.1},{d:.1},{ds:.1}",
            r.variant,
            r.runs.len()
        );
    }
    out
}

/// Per-image forward-pass counts keyed by id, for manifests.
pub fn forward_counts(runs: &[ImageRun]) -> BTreeMap<usize, u64> {
    runs.iter().map(|r| (r.id, r.forward_calls)).collect()
}
