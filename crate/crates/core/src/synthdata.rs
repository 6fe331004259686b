//! Synthetic EM-like particle patches with exact ground truth.
//!
//! Each patch is a flat background with faint blotches of particle scale,
//! non-overlapping round particles (filled disks or rings) brighter than
//! the background, and additive Gaussian noise, clipped to `[0, 1]`.
//!
//! On disk a dataset is a directory with `meta.json` and one folder per split:
//!
//! ```text
//! root/meta.json                 {"image_side", "nm_per_px", "radius_nm"}
//! root/{train,val,test}/NNNNN.pgm
//! root/{train,val,test}/annotations.json
//!     [{"image": "00012.pgm", "centers": [[x, y], ...], "label": 0|1}, ...]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image, Point};
use crate::io;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ParticleStyle {
    #[default]
    Disk,
    /// Bright rim with a low-contrast interior.
    Ring,
}

impl std::str::FromStr for ParticleStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "disk" => Ok(ParticleStyle::Disk),
            "ring" => Ok(ParticleStyle::Ring),
            _ => Err(format!("unknown particle style '{s}' (expected disk|ring)")),
        }
    }
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_side: usize,
    pub nm_per_px: f32,
    pub radius_nm: f32,
    /// Particle count of a non-empty patch is uniform in `1..=max_particles`.
    pub max_particles: usize,
    /// Probability that a patch has no particles at all.
    pub empty_fraction: f64,
    pub style: ParticleStyle,
    pub contrast_min: f32,
    pub contrast_max: f32,
    pub background: f32,
    /// Per-patch background offset, uniform in `±background_jitter`.
    pub background_jitter: f32,
    pub noise_sigma: f32,
    /// Peak amplitude of the background blotches.
    pub texture_amplitude: f32,
    pub texture_blotches: usize,
    /// Minimum centre distance in multiples of the radius.
    pub separation: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_side: 64,
            nm_per_px: 5.0,
            radius_nm: 30.0,
            max_particles: 8,
            empty_fraction: 0.5,
            style: ParticleStyle::Disk,
            contrast_min: 0.25,
            contrast_max: 0.5,
            background: 0.1,
            background_jitter: 0.0,
            noise_sigma: 0.08,
            texture_amplitude: 0.06,
            texture_blotches: 12,
            separation: 2.2,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn radius_px(&self) -> f32 {
        self.radius_nm / self.nm_per_px
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.radius_px();
        let bad = |m: String| Err(Error::config(m));
        if self.image_side < 16 {
            return bad(format!("image_side {} must be at least 16", self.image_side));
        }
        if !(self.nm_per_px > 0.0) {
            return bad("nm_per_px must be positive".into());
        }
        if !(self.radius_nm > 0.0) {
            return bad(format!("radius_nm must be positive, got {}", self.radius_nm));
        }
        if 2.0 * r >= self.image_side as f32 {
            return bad(format!("particle radius {r} px does not fit a {} px image", self.image_side));
        }
        if self.separation < 2.0 {
            return bad("separation must be at least 2 radii (particles may not overlap)".into());
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return bad("empty_fraction must lie in [0, 1]".into());
        }
        if self.contrast_min > self.contrast_max || self.noise_sigma < 0.0 || self.background_jitter < 0.0 {
            return bad("contrast range must be ordered and noise non-negative".into());
        }
        Ok(())
    }
}

/// One patch with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: usize,
    pub image: Image,
    pub centers: Vec<Point>,
    pub radius_px: f32,
}

impl DatasetSample {
    pub fn label(&self) -> u8 {
        u8::from(!self.centers.is_empty())
    }

    /// Ground-truth boxes: squares of side `2·radius` around each centre.
    pub fn boxes(&self) -> Vec<BBox> {
        self.centers.iter().map(|&c| BBox::around(c, self.radius_px)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split '{s}' (expected train|val|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_side: usize,
    pub nm_per_px: f32,
    pub radius_nm: f32,
    pub train: Vec<DatasetSample>,
    pub val: Vec<DatasetSample>,
    pub test: Vec<DatasetSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DatasetSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn radius_px(&self) -> f32 {
        self.radius_nm / self.nm_per_px
    }

    /// `(positives, negatives)` per split, in train/val/test order.
    pub fn class_balance(&self) -> [(usize, usize); 3] {
        Split::ALL.map(|s| {
            let p = self.split(s).iter().filter(|x| x.label() == 1).count();
            (p, self.split(s).len() - p)
        })
    }
}

/// Render one patch.
pub fn generate_patch(spec: &SceneSpec, id: usize, rng: &mut Rng) -> Result<DatasetSample> {
    spec.validate()?;
    let side = spec.image_side;
    let r = spec.radius_px();
    let count = if rng.random_bool(spec.empty_fraction) || spec.max_particles == 0 {
        0
    } else {
        rng.random_range(1..=spec.max_particles)
    };

    let lo = r;
    let hi = side as f32 - 1.0 - r;
    let min_dist = spec.separation * r;
    let mut centers: Vec<Point> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..1000 {
            let c = Point::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            if centers.iter().all(|o| o.distance(c) >= min_dist) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place particle {} of {count} after 1000 tries",
                centers.len() + 1
            )));
        }
    }

    let level = if spec.background_jitter > 0.0 {
        spec.background + rng.random_range(-spec.background_jitter..=spec.background_jitter)
    } else {
        spec.background
    };
    let mut data = vec![level; side * side];
    if spec.texture_amplitude > 0.0 {
        // blotches of either sign at roughly particle scale
        for _ in 0..spec.texture_blotches {
            let c = Point::new(rng.random_range(0.0..side as f32), rng.random_range(0.0..side as f32));
            let s = rng.random_range(0.7..2.0) * r;
            let a = rng.random_range(-spec.texture_amplitude..=spec.texture_amplitude);
            let inv = 1.0 / (2.0 * s * s);
            for (idx, v) in data.iter_mut().enumerate() {
                let (dx, dy) = ((idx % side) as f32 - c.x, (idx / side) as f32 - c.y);
                *v += a * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    for c in &centers {
        let contrast = if spec.contrast_max > spec.contrast_min {
            rng.random_range(spec.contrast_min..=spec.contrast_max)
        } else {
            spec.contrast_min
        };
        render_particle(&mut data, side, *c, r, contrast, spec.style);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("valid noise sigma");
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in data.iter_mut() {
        *v = io::snap(*v);
    }
    Ok(DatasetSample {
        id,
        image: Image::new(side, side, data, spec.nm_per_px)?,
        centers,
        radius_px: r,
    })
}

/// Add a particle with anti-aliased edge (one-pixel linear ramp).
fn render_particle(data: &mut [f32], side: usize, c: Point, r: f32, contrast: f32, style: ParticleStyle) {
    let x0 = (c.x - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((c.x + r + 1.0).ceil() as usize).min(side - 1);
    let y0 = (c.y - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((c.y + r + 1.0).ceil() as usize).min(side - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = Point::new(x as f32, y as f32).distance(c);
            let cover = (r + 0.5 - d).clamp(0.0, 1.0);
            if cover <= 0.0 {
                continue;
            }
            let level = match style {
                ParticleStyle::Disk => 1.0,
                ParticleStyle::Ring => {
                    let rim = 0.35 * r;
                    if d >= r - rim {
                        1.0
                    } else {
                        0.3
                    }
                }
            };
            data[y * side + x] += contrast * cover * level;
        }
    }
}

/// Generate `n` patches and split them 80/10/10 by a seeded shuffle.
pub fn generate_dataset(spec: &SceneSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n < 10 {
        return Err(Error::config(format!("dataset needs at least 10 samples, got {n}")));
    }
    let mut samples = (0..n)
        .map(|i| generate_patch(spec, i, &mut rng::derived(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived(spec.seed, u64::MAX));
    let (n_val, n_test) = (n / 10, n / 10);
    let n_train = n - n_val - n_test;
    let mut take = |idx: &[usize]| -> Vec<DatasetSample> {
        let mut ids = idx.to_vec();
        ids.sort_unstable();
        ids.iter().map(|&i| std::mem::replace(&mut samples[i], placeholder())).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(Dataset {
        image_side: spec.image_side,
        nm_per_px: spec.nm_per_px,
        radius_nm: spec.radius_nm,
        train,
        val,
        test,
    })
}

fn placeholder() -> DatasetSample {
    DatasetSample {
        id: usize::MAX,
        image: Image::filled(1, 1, 0.0, 0.0),
        centers: Vec::new(),
        radius_px: 0.0,
    }
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    image_side: usize,
    nm_per_px: f64,
    radius_nm: f64,
}

/// One entry of a split's `annotations.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub centers: Vec<[f64; 2]>,
    pub label: u8,
}

pub fn image_file_name(id: usize) -> String {
    format!("{id:05}.pgm")
}

/// Parse JSON text, mapping syntax errors to a byte offset in `path`.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::parse(path, offset, e.to_string())
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len()) as u64
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable value");
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

pub fn annotation_path(root: &Path, split: Split) -> PathBuf {
    root.join(split.name()).join("annotations.json")
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    write_json(
        &root.join("meta.json"),
        &Meta {
            image_side: ds.image_side,
            nm_per_px: ds.nm_per_px as f64,
            radius_nm: ds.radius_nm as f64,
        },
    )?;
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut anns = Vec::new();
        for s in ds.split(split) {
            let name = image_file_name(s.id);
            io::write_pgm(&dir.join(&name), &s.image)?;
            anns.push(Annotation {
                image: name,
                centers: s.centers.iter().map(|c| [c.x as f64, c.y as f64]).collect(),
                label: s.label(),
            });
        }
        write_json(&annotation_path(root, split), &anns)?;
    }
    Ok(())
}

/// Load a dataset written by [`save_dataset`]. Any malformed file aborts the
/// whole load.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta: Meta = read_json(&root.join("meta.json"))?;
    let radius_px = (meta.radius_nm / meta.nm_per_px) as f32;
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        splits.push(load_split_with(root, split, meta.nm_per_px as f32, radius_px)?);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Dataset {
        image_side: meta.image_side,
        nm_per_px: meta.nm_per_px as f32,
        radius_nm: meta.radius_nm as f32,
        train,
        val,
        test,
    })
}

fn load_split_with(root: &Path, split: Split, nm_per_px: f32, radius_px: f32) -> Result<Vec<DatasetSample>> {
    let ann_path = annotation_path(root, split);
    let anns: Vec<Annotation> = read_json(&ann_path)?;
    let dir = root.join(split.name());
    anns.into_iter()
        .map(|a| {
            let id = a
                .image
                .trim_end_matches(".pgm")
                .parse()
                .map_err(|_| Error::parse(&ann_path, 0, format!("image name '{}' is not NNNNN.pgm", a.image)))?;
            let centers: Vec<Point> = a.centers.iter().map(|c| Point::new(c[0] as f32, c[1] as f32)).collect();
            if a.label != u8::from(!centers.is_empty()) {
                return Err(Error::parse(
                    &ann_path,
                    0,
                    format!("label of '{}' disagrees with its centres", a.image),
                ));
            }
            Ok(DatasetSample {
                id,
                image: io::read_pgm(&dir.join(&a.image), nm_per_px)?,
                centers,
                radius_px,
            })
        })
        .collect()
}
