//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! may appear once. Every error names the file, the line and the key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use maskopt::baselines::{DogConfig, SlidingConfig};
use maskopt::cam::Upsample;
use maskopt::classifier::TrainConfig;
use maskopt::detector::DetectorConfig;
use maskopt::synthdata::SceneSpec;

use crate::Failure;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: usize,
    pub key: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}:{}: {}", self.path.display(), self.line, self.msg)
        } else {
            write!(f, "{}:{}: key '{}': {}", self.path.display(), self.line, self.key, self.msg)
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |key: &str, msg: String| ConfigError {
                path: path.to_path_buf(),
                line,
                key: key.to_string(),
                msg,
            };
            let Some((k, v)) = content.split_once('=') else {
                return Err(err("", format!("expected 'key = value', got '{content}'")));
            };
            let (key, value) = (k.trim(), v.trim());
            if key.is_empty() {
                return Err(err("", "missing key before '='".into()));
            }
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(err(key, format!("duplicate key (first set on line {})", prev.line)));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok(Self::parse(&text, path)?)
    }

    /// Optional file: `None` gives an empty configuration.
    pub fn load_opt(path: Option<&Path>) -> Result<Self, Failure> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn error(&self, e: &Entry, msg: impl Into<String>) -> ConfigError {
        ConfigError {
            path: self.path.clone(),
            line: e.line,
            key: e.key.clone(),
            msg: msg.into(),
        }
    }

    fn value<T: FromStr>(&self, e: &Entry) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        e.value
            .parse()
            .map_err(|err: T::Err| self.error(e, format!("invalid value '{}': {err}", e.value)))
    }

    fn positive<T: FromStr + PartialOrd + Default>(&self, e: &Entry) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v: T = self.value(e)?;
        if v > T::default() {
            Ok(v)
        } else {
            Err(self.error(e, format!("must be positive, got {}", e.value)))
        }
    }

    fn non_negative<T: FromStr + PartialOrd + Default>(&self, e: &Entry) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let v: T = self.value(e)?;
        if v >= T::default() {
            Ok(v)
        } else {
            Err(self.error(e, format!("must not be negative, got {}", e.value)))
        }
    }

    fn unknown(&self, e: &Entry, known: &[&str]) -> ConfigError {
        self.error(e, format!("unknown key (valid keys: {})", known.join(", ")))
    }
}

const SYNTH_KEYS: &[&str] = &[
    "patches",
    "image_side",
    "nm_per_px",
    "radius_nm",
    "max_particles",
    "empty_fraction",
    "style",
    "contrast_min",
    "contrast_max",
    "background",
    "background_jitter",
    "noise_sigma",
    "texture_amplitude",
    "texture_blotches",
    "separation",
    "seed",
];

/// Scene parameters plus the number of patches to generate.
pub fn synth_settings(cfg: &ConfigFile) -> Result<(SceneSpec, usize), ConfigError> {
    let mut spec = SceneSpec::default();
    let mut n = 600;
    for e in &cfg.entries {
        match e.key.as_str() {
            "patches" => n = cfg.positive(e)?,
            "image_side" => spec.image_side = cfg.positive(e)?,
            "nm_per_px" => spec.nm_per_px = cfg.positive(e)?,
            "radius_nm" => spec.radius_nm = cfg.positive(e)?,
            "max_particles" => spec.max_particles = cfg.value(e)?,
            "empty_fraction" => spec.empty_fraction = cfg.non_negative(e)?,
            "style" => spec.style = cfg.value(e)?,
            "contrast_min" => spec.contrast_min = cfg.value(e)?,
            "contrast_max" => spec.contrast_max = cfg.value(e)?,
            "background" => spec.background = cfg.value(e)?,
            "background_jitter" => spec.background_jitter = cfg.non_negative(e)?,
            "noise_sigma" => spec.noise_sigma = cfg.non_negative(e)?,
            "texture_amplitude" => spec.texture_amplitude = cfg.non_negative(e)?,
            "texture_blotches" => spec.texture_blotches = cfg.value(e)?,
            "separation" => spec.separation = cfg.positive(e)?,
            "seed" => spec.seed = cfg.value(e)?,
            _ => return Err(cfg.unknown(e, SYNTH_KEYS)),
        }
    }
    Ok((spec, n))
}

const TRAIN_KEYS: &[&str] = &["epochs", "learning_rate", "momentum", "batch_size", "seed"];

pub fn train_settings(cfg: &ConfigFile) -> Result<TrainConfig, ConfigError> {
    let mut t = TrainConfig::default();
    for e in &cfg.entries {
        match e.key.as_str() {
            "epochs" => t.epochs = cfg.value(e)?,
            "learning_rate" => t.learning_rate = cfg.positive(e)?,
            "momentum" => t.momentum = cfg.non_negative(e)?,
            "batch_size" => t.batch_size = cfg.positive(e)?,
            "seed" => t.seed = cfg.value(e)?,
            _ => return Err(cfg.unknown(e, TRAIN_KEYS)),
        }
    }
    Ok(t)
}

/// Everything a detection run needs besides the model and the images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectSettings {
    pub det: DetectorConfig,
    pub sliding: SlidingConfig,
    pub dog: DogConfig,
    /// `None` takes the particle size from the dataset.
    pub radius_nm: Option<f64>,
}

const DETECT_KEYS: &[&str] = &[
    "radius_nm",
    "threshold",
    "max_detections",
    "max_rejections",
    "nms_iou",
    "score_mode",
    "fill",
    "init",
    "upsample",
    "seed",
    "sigma_min_factor",
    "sigma_max_nm",
    "max_iter",
    "step",
    "step_rule",
    "objective",
    "tolerance_factor",
    "patience",
    "halving_sigma_factor",
    "pdf_normalized",
    "stride_factor",
    "dog_octaves",
    "dog_intervals",
    "dog_sigma0",
    "dog_input_blur",
    "dog_contrast_threshold",
    "dog_size_min",
    "dog_size_max",
    "dog_respond_score",
    "dog_refine",
];

pub fn detect_settings(cfg: &ConfigFile) -> Result<DetectSettings, ConfigError> {
    let mut s = DetectSettings::default();
    for e in &cfg.entries {
        let d = &mut s.det;
        match e.key.as_str() {
            "radius_nm" => s.radius_nm = Some(cfg.positive(e)?),
            "threshold" => {
                let t: f32 = cfg.value(e)?;
                if !(t > 0.0 && t < 1.0) {
                    return Err(cfg.error(e, format!("must lie in (0, 1), got {t}")));
                }
                d.threshold = t;
            }
            "max_detections" => d.max_detections = cfg.positive(e)?,
            "max_rejections" => d.max_rejections = cfg.positive(e)?,
            "nms_iou" => d.nms_iou = cfg.positive(e)?,
            "score_mode" => d.score_mode = cfg.value(e)?,
            "fill" => d.fill = cfg.value(e)?,
            "init" => d.init = cfg.value(e)?,
            "upsample" => {
                d.upsample = match e.value.as_str() {
                    "bilinear" => Upsample::Bilinear,
                    "nearest" => Upsample::Nearest,
                    v => return Err(cfg.error(e, format!("unknown upsampling '{v}' (expected bilinear|nearest)"))),
                }
            }
            "seed" => d.seed = cfg.value(e)?,
            "sigma_min_factor" => d.opt.sigma_min_factor = cfg.positive(e)?,
            "sigma_max_nm" => d.opt.sigma_max_nm = Some(cfg.positive(e)?),
            "max_iter" => d.opt.max_iter = cfg.value(e)?,
            "step" => d.opt.step = cfg.positive(e)?,
            "step_rule" => d.opt.step_rule = cfg.value(e)?,
            "objective" => d.opt.objective = cfg.value(e)?,
            "tolerance_factor" => d.opt.tolerance_factor = cfg.non_negative(e)?,
            "patience" => d.opt.patience = cfg.positive(e)?,
            "halving_sigma_factor" => d.opt.halving_sigma_factor = cfg.non_negative(e)?,
            "pdf_normalized" => d.opt.pdf_normalized = cfg.value(e)?,
            "stride_factor" => s.sliding.stride_factor = cfg.positive(e)?,
            "dog_octaves" => s.dog.octaves = cfg.positive(e)?,
            "dog_intervals" => s.dog.intervals = cfg.positive(e)?,
            "dog_sigma0" => s.dog.sigma0 = cfg.positive(e)?,
            "dog_input_blur" => s.dog.input_blur = cfg.non_negative(e)?,
            "dog_contrast_threshold" => s.dog.contrast_threshold = cfg.positive(e)?,
            "dog_size_min" => s.dog.size_range.0 = cfg.positive(e)?,
            "dog_size_max" => s.dog.size_range.1 = cfg.positive(e)?,
            "dog_respond_score" => s.dog.respond_score = cfg.value(e)?,
            "dog_refine" => s.dog.refine = cfg.value(e)?,
            _ => return Err(cfg.unknown(e, DETECT_KEYS)),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> ConfigFile {
        ConfigFile::parse(text, Path::new("c.cfg")).unwrap()
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = parse("# header\n\nseed = 3   # trailing\n  epochs=2\n");
        assert_eq!(c.entries.len(), 2);
        assert_eq!(c.entries[0], Entry { key: "seed".into(), value: "3".into(), line: 3 });
        assert_eq!(train_settings(&c).unwrap().epochs, 2);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let c = parse("seed = 1\nradius = 4\n");
        let e = synth_settings(&c).unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "radius"));
        assert!(e.to_string().starts_with("c.cfg:2: key 'radius': unknown key"));
    }

    #[test]
    fn negative_radius_is_rejected() {
        let e = synth_settings(&parse("radius_nm = -3\n")).unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (1, "radius_nm"));
    }

    #[test]
    fn malformed_lines() {
        let e = ConfigFile::parse("a = 1\nnonsense\n", Path::new("x")).unwrap_err();
        assert_eq!(e.line, 2);
        let e = ConfigFile::parse("a = 1\na = 2\n", Path::new("x")).unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "a"));
        let e = detect_settings(&parse("\n\nscore_mode = best\n")).unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (3, "score_mode"));
        let e = detect_settings(&parse("threshold = 1.5\n")).unwrap_err();
        assert_eq!(e.key, "threshold");
    }

    #[test]
    fn detect_keys_reach_every_component() {
        let c = parse("radius_nm = 80\nstride_factor = 0.25\ndog_respond_score = true\nmax_iter = 50\ninit = random\n");
        let s = detect_settings(&c).unwrap();
        assert_eq!(s.radius_nm, Some(80.0));
        assert_eq!(s.sliding.stride_factor, 0.25);
        assert!(s.dog.respond_score);
        assert_eq!(s.det.opt.max_iter, 50);
        assert_eq!(s.det.init, maskopt::detector::Init::Random);
    }
}
