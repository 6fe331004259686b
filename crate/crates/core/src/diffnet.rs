//! A small differentiable convolutional network.
//!
//! Forward evaluation keeps every layer output in a [`ForwardTrace`]; the
//! reverse sweep in [`backward`] walks the layers from the scalar logit back to
//! the input and yields parameter gradients, the input gradient and the
//! gradient at the CAM feature map. Values are stored as `f32`; every dot
//! product and reduction accumulates in `f64`.

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::input(format!(
                "tensor shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(channels, height, width)` for a rank-3 tensor.
    fn chw(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

/// 2-D convolution with zero padding. Weights are laid out `(out, in, ky, kx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output columns `ox` whose input column `ox·stride + kx − padding` lies in `[0, w)`.
    #[inline]
    fn valid_range(&self, kx: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.padding > kx {
            (self.padding - kx).div_ceil(s)
        } else {
            0
        };
        let hi = if w + self.padding > kx {
            ((w - 1 + self.padding - kx) / s + 1).min(ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Fully connected layer. Weights are laid out `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Dense(Dense),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "gap",
            Layer::Dense(_) => "dense",
        }
    }

    /// Mutable `(weight, bias)` for parameterised layers.
    pub fn params_mut(&mut self) -> Option<(&mut [f32], &mut [f32])> {
        match self {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&[f32], &[f32])> {
        match self {
            Layer::Conv(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Err(Error::config(format!("{} layer: {why} (input {input:?})", self.kind())));
        match self {
            Layer::Conv(c) => {
                if input.len() != 3 || input[0] != c.in_channels {
                    return bad("expects (channels, height, width) with matching channels");
                }
                if c.weight.len() != c.out_channels * c.in_channels * c.kernel * c.kernel
                    || c.bias.len() != c.out_channels
                {
                    return bad("parameter extents do not match");
                }
                match (c.out_extent(input[1]), c.out_extent(input[2])) {
                    (Some(h), Some(w)) => Ok(vec![c.out_channels, h, w]),
                    _ => bad("kernel larger than padded input"),
                }
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } => {
                if input.len() != 3 || *window == 0 || *stride == 0 {
                    return bad("expects (channels, height, width) and positive window/stride");
                }
                if input[1] < *window || input[2] < *window {
                    return bad("window larger than input");
                }
                Ok(vec![
                    input[0],
                    (input[1] - window) / stride + 1,
                    (input[2] - window) / stride + 1,
                ])
            }
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return bad("expects (channels, height, width)");
                }
                Ok(vec![input[0]])
            }
            Layer::Dense(d) => {
                if input.iter().product::<usize>() != d.inputs {
                    return bad("input size does not match");
                }
                if d.weight.len() != d.inputs * d.outputs || d.bias.len() != d.outputs {
                    return bad("parameter extents do not match");
                }
                Ok(vec![d.outputs])
            }
        }
    }
}

/// Ordered layer stack mapping a `(channels, height, width)` input to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        if shape != [1] {
            return Err(Error::config(format!(
                "network must end in a single logit, got shape {shape:?}"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for optimisers. Parameter extents must not change.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Output shape of each layer.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Index of the last convolution, if any.
    pub fn cam_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, Layer::Conv(_)))
    }

    /// Index of the layer output used as CAM feature map: the last spatial
    /// output of the final convolution block (after its activation and
    /// pooling), i.e. the map that global average pooling summarises.
    pub fn cam_feature_index(&self) -> Option<usize> {
        let c = self.cam_layer()?;
        let mut idx = c;
        while idx + 1 < self.layers.len()
            && matches!(self.layers[idx + 1], Layer::Relu | Layer::MaxPool { .. })
        {
            idx += 1;
        }
        Some(idx)
    }
}

/// Layer outputs retained for the reverse sweep.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// Output of layer `i` at index `i`.
    pub activations: Vec<Tensor>,
    /// Last convolution layer, when the network has one.
    pub cam_layer: Option<usize>,
}

impl ForwardTrace {
    pub fn logit(&self) -> f32 {
        self.activations.last().map(|t| t.data[0]).unwrap_or(0.0)
    }
}

/// Per-layer parameter gradient; empty vectors for layers without parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<LayerGrad>,
    pub input: Tensor,
    /// Gradient with respect to the CAM feature map.
    pub cam: Option<Tensor>,
}

/// Which gradients the reverse sweep should materialise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wanted {
    pub params: bool,
    pub input: bool,
}

impl Wanted {
    pub const ALL: Wanted = Wanted {
        params: true,
        input: true,
    };
    pub const INPUT: Wanted = Wanted {
        params: false,
        input: true,
    };
    pub const PARAMS: Wanted = Wanted {
        params: true,
        input: false,
    };
    /// Only the CAM feature-map gradient; the sweep stops once it is known.
    pub const CAM_ONLY: Wanted = Wanted {
        params: false,
        input: false,
    };
}

/// Evaluate the network, returning the logit and the activation trace.
pub fn forward(net: &Network, image: &Tensor) -> Result<(f32, ForwardTrace)> {
    if image.shape() != net.input_shape {
        return Err(Error::input(format!(
            "input shape {:?} does not match network input {:?}",
            image.shape(),
            net.input_shape
        )));
    }
    let mut activations: Vec<Tensor> = Vec::with_capacity(net.layers.len());
    for (layer, shape) in net.layers.iter().zip(&net.shapes) {
        let x = activations.last().unwrap_or(image);
        let data = match layer {
            Layer::Conv(c) => conv_forward(c, x),
            Layer::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
            Layer::MaxPool { window, stride } => maxpool_forward(x, *window, *stride, shape),
            Layer::GlobalAvgPool => gap_forward(x),
            Layer::Dense(d) => dense_forward(d, &x.data),
        };
        activations.push(Tensor {
            shape: shape.clone(),
            data,
        });
    }
    let trace = ForwardTrace {
        input: image.clone(),
        activations,
        cam_layer: net.cam_layer(),
    };
    Ok((trace.logit(), trace))
}

/// Reverse sweep seeded with `seed = ∂L/∂logit`.
pub fn backward(net: &Network, trace: &ForwardTrace, seed: f32) -> Result<Gradients> {
    backward_selective(net, trace, seed, Wanted::ALL)
}

/// Reverse sweep that skips the gradients not requested. Skipped parameter
/// gradients come back empty; a skipped input gradient comes back as zeros.
pub fn backward_selective(
    net: &Network,
    trace: &ForwardTrace,
    seed: f32,
    wanted: Wanted,
) -> Result<Gradients> {
    check_trace(net, trace)?;
    let cam_index = net.cam_feature_index();
    let n = net.layers.len();
    let mut params = vec![LayerGrad::default(); n];
    let mut cam = None;
    let mut grad = Tensor {
        shape: vec![1],
        data: vec![seed],
    };
    for i in (0..n).rev() {
        if Some(i) == cam_index {
            cam = Some(grad.clone());
            if wanted == Wanted::CAM_ONLY {
                grad = Tensor::zeros(trace.input.shape.clone());
                break;
            }
        }
        let x = if i == 0 {
            &trace.input
        } else {
            &trace.activations[i - 1]
        };
        let need_dx = i > 0 || wanted.input;
        let dx = match &net.layers[i] {
            Layer::Conv(c) => {
                if wanted.params {
                    params[i] = conv_param_grad(c, x, &grad);
                }
                if need_dx {
                    conv_input_grad(c, x, &grad)
                } else {
                    Vec::new()
                }
            }
            Layer::Relu => x
                .data
                .iter()
                .zip(&grad.data)
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::MaxPool { window, stride } => maxpool_backward(x, *window, *stride, &grad),
            Layer::GlobalAvgPool => {
                let (c, h, w) = x.chw();
                let inv = 1.0 / (h * w) as f64;
                let mut out = vec![0.0f32; c * h * w];
                for (ch, plane) in out.chunks_mut(h * w).enumerate() {
                    plane.fill((grad.data[ch] as f64 * inv) as f32);
                }
                out
            }
            Layer::Dense(d) => {
                if wanted.params {
                    params[i] = dense_param_grad(d, &x.data, &grad.data);
                }
                dense_input_grad(d, &grad.data)
            }
        };
        if !need_dx {
            grad = Tensor::zeros(x.shape.clone());
            break;
        }
        grad = Tensor {
            shape: x.shape.clone(),
            data: dx,
        };
    }
    Ok(Gradients {
        params,
        input: grad,
        cam,
    })
}

/// Binary cross-entropy on a logit. Returns `(loss, ∂loss/∂logit)`.
pub fn sigmoid_bce(logit: f64, label: u8) -> (f64, f64) {
    let y = if label > 0 { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_trace(net: &Network, trace: &ForwardTrace) -> Result<()> {
    let stale = || Error::input("trace does not belong to this network (stale trace)");
    if trace.input.shape() != net.input_shape || trace.activations.len() != net.layers.len() {
        return Err(stale());
    }
    if trace
        .activations
        .iter()
        .zip(&net.shapes)
        .any(|(a, s)| &a.shape != s)
    {
        return Err(stale());
    }
    Ok(())
}

/// Unfold the input into a `(in·k·k, oh·ow)` matrix; padded taps are zero.
fn im2col(c: &Conv2d, x: &Tensor, oh: usize, ow: usize) -> Vec<f32> {
    let (ic, h, w) = x.chw();
    let (s, p, k) = (c.stride, c.padding, c.kernel);
    let n = oh * ow;
    let mut cols = vec![0.0f32; ic * k * k * n];
    for i in 0..ic {
        let plane = &x.data[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[((i * k + ky) * k + kx) * n..][..n];
                let (lo, hi) = c.valid_range(kx, w, ow);
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let start = lo + kx - p;
                        drow[lo..hi].copy_from_slice(&row[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto an input-shaped buffer.
fn col2im(c: &Conv2d, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> Vec<f32> {
    let (ic, h, w) = shape;
    let (s, p, k) = (c.stride, c.padding, c.kernel);
    let n = oh * ow;
    let mut out = vec![0.0f64; ic * h * w];
    for i in 0..ic {
        let plane = &mut out[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[((i * k + ky) * k + kx) * n..][..n];
                let (lo, hi) = c.valid_range(kx, w, ow);
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let start = lo + kx - p;
                        for (a, &g) in row[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *a += g;
                        }
                    } else {
                        for ox in lo..hi {
                            row[ox * s + kx - p] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

fn conv_dims(c: &Conv2d, x: &Tensor) -> (usize, usize) {
    let (_, h, w) = x.chw();
    (c.out_extent(h).unwrap_or(0), c.out_extent(w).unwrap_or(0))
}

fn conv_forward(c: &Conv2d, x: &Tensor) -> Vec<f32> {
    let (oh, ow) = conv_dims(c, x);
    let n = oh * ow;
    let taps = c.weight.len() / c.out_channels.max(1);
    let cols = im2col(c, x, oh, ow);
    let mut out = Vec::with_capacity(c.out_channels * n);
    let mut acc = vec![0.0f64; n];
    for o in 0..c.out_channels {
        acc.fill(c.bias[o] as f64);
        for (t, &wv) in c.weight[o * taps..(o + 1) * taps].iter().enumerate() {
            let wv = wv as f64;
            for (a, &v) in acc.iter_mut().zip(&cols[t * n..(t + 1) * n]) {
                *a += wv * v as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    out
}

fn conv_input_grad(c: &Conv2d, x: &Tensor, dy: &Tensor) -> Vec<f32> {
    let (oh, ow) = conv_dims(c, x);
    let n = oh * ow;
    let taps = c.weight.len() / c.out_channels.max(1);
    let mut dcols = vec![0.0f64; taps * n];
    for o in 0..c.out_channels {
        let g = &dy.data[o * n..(o + 1) * n];
        for (t, &wv) in c.weight[o * taps..(o + 1) * taps].iter().enumerate() {
            let wv = wv as f64;
            for (a, &gv) in dcols[t * n..(t + 1) * n].iter_mut().zip(g) {
                *a += wv * gv as f64;
            }
        }
    }
    col2im(c, &dcols, x.chw(), oh, ow)
}

fn conv_param_grad(c: &Conv2d, x: &Tensor, dy: &Tensor) -> LayerGrad {
    let (oh, ow) = conv_dims(c, x);
    let n = oh * ow;
    let taps = c.weight.len() / c.out_channels.max(1);
    let cols = im2col(c, x, oh, ow);
    let mut weight = vec![0.0f32; c.weight.len()];
    let mut bias = vec![0.0f32; c.out_channels];
    for o in 0..c.out_channels {
        let g = &dy.data[o * n..(o + 1) * n];
        bias[o] = g.iter().map(|&v| v as f64).sum::<f64>() as f32;
        for t in 0..taps {
            weight[o * taps + t] = dot(g, &cols[t * n..(t + 1) * n]) as f32;
        }
    }
    LayerGrad { weight, bias }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x as f64 * y as f64).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Row-major index of the first maximum inside one pooling window.
#[inline]
fn window_argmax(plane: &[f32], w: usize, y0: usize, x0: usize, window: usize) -> usize {
    let mut best = y0 * w + x0;
    let mut best_v = plane[best];
    for dy in 0..window {
        for dx in 0..window {
            let idx = (y0 + dy) * w + x0 + dx;
            if plane[idx] > best_v {
                best_v = plane[idx];
                best = idx;
            }
        }
    }
    best
}

fn maxpool_forward(x: &Tensor, window: usize, stride: usize, out_shape: &[usize]) -> Vec<f32> {
    let (c, h, w) = x.chw();
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[window_argmax(plane, w, oy * stride, ox * stride, window)]);
            }
        }
    }
    out
}

fn maxpool_backward(x: &Tensor, window: usize, stride: usize, dy: &Tensor) -> Vec<f32> {
    let (c, h, w) = x.chw();
    let (_, oh, ow) = dy.chw();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        let dplane = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = window_argmax(plane, w, oy * stride, ox * stride, window);
                dplane[idx] += dy.data[(ch * oh + oy) * ow + ox];
            }
        }
    }
    out
}

fn gap_forward(x: &Tensor) -> Vec<f32> {
    let (_, h, w) = x.chw();
    x.data
        .chunks(h * w)
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect()
}

fn dense_forward(d: &Dense, x: &[f32]) -> Vec<f32> {
    d.weight
        .chunks(d.inputs)
        .zip(&d.bias)
        .map(|(row, &b)| {
            let dot: f64 = row.iter().zip(x).map(|(&w, &v)| w as f64 * v as f64).sum();
            (b as f64 + dot) as f32
        })
        .collect()
}

fn dense_input_grad(d: &Dense, dy: &[f32]) -> Vec<f32> {
    (0..d.inputs)
        .map(|j| {
            (0..d.outputs)
                .map(|o| d.weight[o * d.inputs + j] as f64 * dy[o] as f64)
                .sum::<f64>() as f32
        })
        .collect()
}

fn dense_param_grad(d: &Dense, x: &[f32], dy: &[f32]) -> LayerGrad {
    let mut weight = Vec::with_capacity(d.weight.len());
    for &g in dy {
        weight.extend(x.iter().map(|&v| (g as f64 * v as f64) as f32));
    }
    LayerGrad {
        weight,
        bias: dy.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_only(weights: Vec<f32>, bias: f32) -> Network {
        let n = weights.len();
        Network::new(
            [1, 1, n],
            vec![Layer::Dense(Dense {
                inputs: n,
                outputs: 1,
                weight: weights,
                bias: vec![bias],
            })],
        )
        .unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logit() {
        let net = Network::new(
            [1, 8, 8],
            vec![
                Layer::Conv(Conv2d::zeros(1, 2, 3, 1, 1)),
                Layer::Relu,
                Layer::MaxPool { window: 2, stride: 2 },
                Layer::GlobalAvgPool,
                Layer::Dense(Dense::zeros(2, 1)),
            ],
        )
        .unwrap();
        let (logit, trace) = forward(&net, &Tensor::zeros(vec![1, 8, 8])).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(trace.activations.len(), 5);
        assert_eq!(trace.cam_layer, Some(0));
    }

    #[test]
    fn identity_dense_passes_value() {
        let net = dense_only(vec![1.0], 0.0);
        let x = Tensor::new(vec![1, 1, 1], vec![0.37]).unwrap();
        assert_eq!(forward(&net, &x).unwrap().0, 0.37);
    }

    #[test]
    fn dense_input_gradient_is_weight_vector() {
        let w = vec![0.5, -1.25, 2.0, 0.125];
        let net = dense_only(w.clone(), 0.3);
        let x = Tensor::new(vec![1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (_, trace) = forward(&net, &x).unwrap();
        let g = backward(&net, &trace, 1.0).unwrap();
        assert_eq!(g.input.data(), w.as_slice());
        assert!(g.cam.is_none());
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let net = dense_only(vec![0.5, -1.0], 0.1);
        let x = Tensor::new(vec![1, 1, 2], vec![0.3, 0.9]).unwrap();
        let (_, trace) = forward(&net, &x).unwrap();
        let g = backward(&net, &trace, 0.0).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.params[0].weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = dense_only(vec![1.0, 1.0], 0.0);
        let bad = Tensor::zeros(vec![1, 1, 3]);
        assert!(matches!(forward(&net, &bad), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let a = dense_only(vec![1.0, 1.0], 0.0);
        let b = dense_only(vec![1.0, 1.0, 1.0], 0.0);
        let (_, trace) = forward(&a, &Tensor::zeros(vec![1, 1, 2])).unwrap();
        assert!(matches!(backward(&b, &trace, 1.0), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn network_must_end_in_scalar() {
        let r = Network::new([1, 4, 4], vec![Layer::Conv(Conv2d::zeros(1, 2, 3, 1, 1))]);
        assert!(matches!(r, Err(Error::RejectedConfig(_))));
    }

    #[test]
    fn bce_reference_values() {
        let (l, g) = sigmoid_bce(0.0, 1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (l, g) = sigmoid_bce(0.0, 0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, 0.5);
        let (l, g) = sigmoid_bce(10.0, 1);
        // ln(1 + e^-10) and sigmoid(10) - 1
        assert!((l - 4.539889921686465e-5).abs() < 1e-15);
        assert!((g + 4.5397868702434395e-5).abs() < 1e-12);
    }

    #[test]
    fn maxpool_ties_route_to_first_maximum() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let dy = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(maxpool_backward(&x, 2, 2, &dy), vec![3.0, 0.0, 0.0, 0.0]);
    }
}
