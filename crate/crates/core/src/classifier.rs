//! Presence/absence classifier: default architecture, training and weight files.
//!
//! # Weight file layout
//!
//! All integers are little-endian `u32`, all reals little-endian `f32`.
//!
//! ```text
//! "CPSD"                      4-byte magic
//! version                     u32 (currently 1)
//! input channels, height, width   3 × u32
//! layer count                 u32
//! per layer:
//!   tag                       u8  (0 conv, 1 relu, 2 maxpool, 3 gap, 4 dense)
//!   conv:    in, out, kernel, stride, padding (5 × u32), weights, biases
//!   maxpool: window, stride (2 × u32)
//!   dense:   in, out (2 × u32), weights, biases
//! norm mean, norm std         2 × f32
//! ```

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::diffnet::{self, Conv2d, Dense, ForwardTrace, Gradients, Layer, Network, Tensor, Wanted};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

const MAGIC: &[u8; 4] = b"CPSD";
const FORMAT_VERSION: u32 = 1;

/// Global intensity statistics of the training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Network plus the statistics used to normalise its inputs.
///
/// Every evaluation of the network made through the model bumps an internal
/// counter, so callers can audit how many forward passes an algorithm spent.
#[derive(Debug)]
pub struct ClassifierModel {
    pub net: Network,
    pub norm: NormStats,
    forward_calls: AtomicU64,
}

impl Clone for ClassifierModel {
    fn clone(&self) -> Self {
        Self::new(self.net.clone(), self.norm)
    }
}

impl PartialEq for ClassifierModel {
    fn eq(&self, other: &Self) -> bool {
        self.net == other.net && self.norm == other.norm
    }
}

impl ClassifierModel {
    pub fn new(net: Network, norm: NormStats) -> Self {
        Self {
            net,
            norm,
            forward_calls: AtomicU64::new(0),
        }
    }

    /// `(height, width)` the network accepts.
    pub fn input_dims(&self) -> (usize, usize) {
        let [_, h, w] = self.net.input_shape();
        (h, w)
    }

    /// Total number of network forward passes made through this model.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Run the network on an already-normalised tensor.
    pub fn forward(&self, input: &Tensor) -> Result<(f32, ForwardTrace)> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        diffnet::forward(&self.net, input)
    }

    /// Logit and trace for a raw image (normalisation applied here).
    pub fn forward_image(&self, image: &Image) -> Result<(f32, ForwardTrace)> {
        self.check_image(image)?;
        self.forward(&normalize(image, self.norm))
    }

    pub fn backward(&self, trace: &ForwardTrace, seed: f32, wanted: Wanted) -> Result<Gradients> {
        diffnet::backward_selective(&self.net, trace, seed, wanted)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let (h, w) = self.input_dims();
        if image.width() != w || image.height() != h {
            return Err(Error::input(format!(
                "image is {}x{}, classifier expects {}x{}",
                image.width(),
                image.height(),
                w,
                h
            )));
        }
        Ok(())
    }
}

/// Architecture of the default classifier for square inputs of side `input_side`:
/// three conv(3×3)+ReLU+maxpool(2) blocks with 8, 16 and 32 channels, global
/// average pooling and a dense layer to one logit.
pub fn build_default(input_side: usize, seed: u64) -> Result<ClassifierModel> {
    if input_side < 16 {
        return Err(Error::config(format!(
            "input side {input_side} is too small for three pooling stages (need >= 16)"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut layers = Vec::new();
    let mut in_ch = 1;
    for out_ch in [8, 16, 32] {
        let mut conv = Conv2d::zeros(in_ch, out_ch, 3, 1, 1);
        init_uniform(&mut conv.weight, &mut conv.bias, in_ch * 9, &mut rng);
        layers.push(Layer::Conv(conv));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { window: 2, stride: 2 });
        in_ch = out_ch;
    }
    layers.push(Layer::GlobalAvgPool);
    let mut head = Dense::zeros(in_ch, 1);
    init_uniform(&mut head.weight, &mut head.bias, in_ch, &mut rng);
    layers.push(Layer::Dense(head));
    let net = Network::new([1, input_side, input_side], layers)?;
    Ok(ClassifierModel::new(net, NormStats::default()))
}

/// Weights `U(±√(6/fan_in))`, biases `U(±1/√fan_in)`.
fn init_uniform(weight: &mut [f32], bias: &mut [f32], fan_in: usize, rng: &mut rng::Rng) {
    let wb = (6.0 / fan_in as f64).sqrt() as f32;
    let bb = (1.0 / fan_in as f64).sqrt() as f32;
    for w in weight.iter_mut() {
        *w = rng.random_range(-wb..wb);
    }
    for b in bias.iter_mut() {
        *b = rng.random_range(-bb..bb);
    }
}

/// `(image − mean) / std` as a `(1, height, width)` tensor.
pub fn normalize(image: &Image, stats: NormStats) -> Tensor {
    let inv = 1.0 / stats.std;
    let data = image.data().iter().map(|&v| (v - stats.mean) * inv).collect();
    Tensor::new(vec![1, image.height(), image.width()], data).expect("image extent")
}

/// Classifier score `sigmoid(logit)` and the logit for a raw image.
pub fn predict(model: &ClassifierModel, image: &Image) -> Result<(f32, f32)> {
    let (logit, _) = model.forward_image(image)?;
    Ok((diffnet::sigmoid(logit as f64) as f32, logit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "learning rate and batch size must be positive, momentum in [0, 1)",
            ));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Train the default architecture with SGD + momentum on binary cross-entropy.
pub fn train<'a, I>(dataset: I, cfg: &TrainConfig) -> Result<ClassifierModel>
where
    I: IntoIterator<Item = (&'a Image, u8)>,
{
    train_with_log(dataset, cfg).map(|(m, _)| m)
}

/// Like [`train`], also returning the per-epoch loss and accuracy.
pub fn train_with_log<'a, I>(dataset: I, cfg: &TrainConfig) -> Result<(ClassifierModel, Vec<EpochStats>)>
where
    I: IntoIterator<Item = (&'a Image, u8)>,
{
    cfg.validate()?;
    let samples: Vec<(&Image, u8)> = dataset.into_iter().collect();
    let Some((first, _)) = samples.first() else {
        return Err(Error::RejectedDataset("dataset is empty".into()));
    };
    let (w, h) = first.dims();
    if w != h {
        return Err(Error::RejectedDataset(format!("images must be square, got {w}x{h}")));
    }
    if samples.iter().any(|(img, _)| img.dims() != (w, h)) {
        return Err(Error::RejectedDataset("images do not share one shape".into()));
    }
    let positives = samples.iter().filter(|(_, l)| *l > 0).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::RejectedDataset(
            "dataset must contain both positive and negative samples".into(),
        ));
    }

    let mut model = build_default(w, cfg.seed)?;
    model.norm = dataset_stats(samples.iter().map(|(img, _)| *img));
    let inputs: Vec<Tensor> = samples.iter().map(|(img, _)| normalize(img, model.norm)).collect();

    let mut rng = rng::derived(cfg.seed, 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = model
        .net
        .layers()
        .iter()
        .map(|l| match l.params() {
            Some((w, b)) => (vec![0.0; w.len()], vec![0.0; b.len()]),
            None => (Vec::new(), Vec::new()),
        })
        .collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut sums: Vec<(Vec<f64>, Vec<f64>)> = velocity
                .iter()
                .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
                .collect();
            for &idx in batch {
                let label = samples[idx].1;
                let (logit, trace) = model.forward(&inputs[idx])?;
                let (loss, dlogit) = diffnet::sigmoid_bce(logit as f64, label);
                loss_sum += loss;
                if (logit > 0.0) == (label > 0) {
                    correct += 1;
                }
                let grads = model.backward(&trace, dlogit as f32, Wanted::PARAMS)?;
                for ((sw, sb), g) in sums.iter_mut().zip(&grads.params) {
                    for (s, &v) in sw.iter_mut().zip(&g.weight) {
                        *s += v as f64;
                    }
                    for (s, &v) in sb.iter_mut().zip(&g.bias) {
                        *s += v as f64;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((layer, (vw, vb)), (sw, sb)) in model
                .net
                .layers_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&sums)
            {
                let Some((pw, pb)) = layer.params_mut() else {
                    continue;
                };
                sgd_step(pw, vw, sw, scale, cfg);
                sgd_step(pb, vb, sb, scale, cfg);
            }
        }
        log.push(EpochStats {
            mean_loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok((model, log))
}

fn sgd_step(params: &mut [f32], velocity: &mut [f32], grad_sum: &[f64], scale: f64, cfg: &TrainConfig) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad_sum) {
        *v = cfg.momentum * *v + (g * scale) as f32;
        *p -= cfg.learning_rate * *v;
    }
}

/// Global pixel mean and standard deviation over a set of images.
pub fn dataset_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> NormStats {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for img in images {
        for &v in img.data() {
            n += 1;
            sum += v as f64;
            sq += v as f64 * v as f64;
        }
    }
    if n == 0 {
        return NormStats::default();
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
    NormStats {
        mean: mean as f32,
        std: std as f32,
    }
}

/// Mean binary-cross-entropy loss over a set of pre-normalised inputs.
pub fn mean_loss(model: &ClassifierModel, samples: &[(Tensor, u8)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, label) in samples {
        let (logit, _) = model.forward(x)?;
        total += diffnet::sigmoid_bce(logit as f64, *label).0;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Fraction of samples whose thresholded score (≥ 0.5) matches the label.
pub fn accuracy<'a, I>(model: &ClassifierModel, samples: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Image, u8)>,
{
    let (mut n, mut ok) = (0usize, 0usize);
    for (img, label) in samples {
        let (score, _) = predict(model, img)?;
        n += 1;
        if (score >= 0.5) == (label > 0) {
            ok += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { ok as f64 / n as f64 })
}

// ---------------------------------------------------------------------------
// Weight files

pub fn to_bytes(model: &ClassifierModel) -> Vec<u8> {
    let mut out = Vec::new();
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let put_f32s = |out: &mut Vec<u8>, vs: &[f32]| {
        for v in vs {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in model.net.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.net.layers().len());
    for layer in model.net.layers() {
        match layer {
            Layer::Conv(c) => {
                out.push(0);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                    put_u32(&mut out, v);
                }
                put_f32s(&mut out, &c.weight);
                put_f32s(&mut out, &c.bias);
            }
            Layer::Relu => out.push(1),
            Layer::MaxPool { window, stride } => {
                out.push(2);
                put_u32(&mut out, *window);
                put_u32(&mut out, *stride);
            }
            Layer::GlobalAvgPool => out.push(3),
            Layer::Dense(d) => {
                out.push(4);
                put_u32(&mut out, d.inputs);
                put_u32(&mut out, d.outputs);
                put_f32s(&mut out, &d.weight);
                put_f32s(&mut out, &d.bias);
            }
        }
    }
    put_f32s(&mut out, &[model.norm.mean, model.norm.std]);
    out
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file (need {n} more bytes)")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("array too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<ClassifierModel> {
    let mut r = ByteReader { path, bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic (expected \"CPSD\")"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let shape = [r.u32()?, r.u32()?, r.u32()?];
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag_pos = r.pos;
        layers.push(match r.u8()? {
            0 => {
                let (i, o, k, s, p) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let weight = r.f32s(o * i * k * k)?;
                let bias = r.f32s(o)?;
                Layer::Conv(Conv2d {
                    in_channels: i,
                    out_channels: o,
                    kernel: k,
                    stride: s,
                    padding: p,
                    weight,
                    bias,
                })
            }
            1 => Layer::Relu,
            2 => Layer::MaxPool {
                window: r.u32()?,
                stride: r.u32()?,
            },
            3 => Layer::GlobalAvgPool,
            4 => {
                let (i, o) = (r.u32()?, r.u32()?);
                let weight = r.f32s(o * i)?;
                let bias = r.f32s(o)?;
                Layer::Dense(Dense {
                    inputs: i,
                    outputs: o,
                    weight,
                    bias,
                })
            }
            t => {
                r.pos = tag_pos;
                return Err(r.err(format!("unknown layer tag {t}")));
            }
        });
    }
    let norm = r.f32s(2)?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after weight data"));
    }
    if !(norm[1] > 0.0) {
        return Err(r.err("normalisation std must be positive"));
    }
    let net = Network::new(shape, layers).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Ok(ClassifierModel::new(
        net,
        NormStats {
            mean: norm[0],
            std: norm[1],
        },
    ))
}

/// Write a weight file atomically (temporary file + rename).
pub fn save_weights(model: &ClassifierModel, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model))
}

pub fn load_weights(path: &Path) -> Result<ClassifierModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shapes() {
        let m = build_default(64, 7).unwrap();
        let cam = m.net.cam_feature_index().unwrap();
        assert_eq!(cam, 8);
        assert_eq!(m.net.shapes()[cam], vec![32, 8, 8]);
        assert_eq!(m.net.cam_layer(), Some(6));
        assert_eq!(m.net.shapes().last().unwrap(), &vec![1]);
    }

    #[test]
    fn default_build_is_deterministic() {
        assert_eq!(build_default(32, 3).unwrap(), build_default(32, 3).unwrap());
        assert_ne!(build_default(32, 3).unwrap(), build_default(32, 4).unwrap());
    }

    #[test]
    fn tiny_input_is_rejected() {
        assert!(matches!(build_default(8, 0), Err(Error::RejectedConfig(_))));
        assert!(build_default(16, 0).is_ok());
    }

    #[test]
    fn normalize_arithmetic() {
        let img = Image::new(3, 1, vec![0.0, 0.5, 1.0], 1.0).unwrap();
        let t = normalize(&img, NormStats { mean: 0.5, std: 0.25 });
        assert_eq!(t.data(), &[-2.0, 0.0, 2.0]);
        let t = normalize(&img, NormStats { mean: 0.0, std: 1.0 });
        assert_eq!(t.data(), img.data());
        let flat = Image::filled(4, 4, 0.3, 1.0);
        let t = normalize(&flat, NormStats { mean: 0.3, std: 0.7 });
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let a = Image::filled(16, 16, 0.1, 1.0);
        let b = Image::filled(16, 16, 0.2, 1.0);
        let r = train([(&a, 1), (&b, 1)], &TrainConfig::default());
        assert!(matches!(r, Err(Error::RejectedDataset(_))));
    }

    #[test]
    fn zero_epochs_only_fills_stats() {
        let a = Image::filled(16, 16, 0.0, 1.0);
        let b = Image::filled(16, 16, 1.0, 1.0);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 11,
            ..TrainConfig::default()
        };
        let m = train([(&a, 0), (&b, 1)], &cfg).unwrap();
        assert_eq!(m.net, build_default(16, 11).unwrap().net);
        assert_eq!(m.norm, NormStats { mean: 0.5, std: 0.5 });
    }

    #[test]
    fn predict_zero_logit_is_half() {
        let mut m = build_default(16, 0).unwrap();
        for layer in m.net.layers_mut() {
            if let Some((w, b)) = layer.params_mut() {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        let (score, logit) = predict(&m, &Image::filled(16, 16, 0.4, 1.0)).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(score, 0.5);
    }

    #[test]
    fn truncated_weights_report_offset() {
        let m = build_default(16, 1).unwrap();
        let bytes = to_bytes(&m);
        let err = from_bytes(&bytes[..bytes.len() - 3], Path::new("w.bin")).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset as usize, bytes.len() - 8),
            e => panic!("unexpected error {e}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, Path::new("w.bin")), Err(Error::Parse { offset: 0, .. })));
    }
}
