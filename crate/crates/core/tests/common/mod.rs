#![allow(dead_code)]

pub mod oracles;

use std::sync::OnceLock;

use maskopt::classifier::{train, ClassifierModel, TrainConfig};
use maskopt::diffnet::{Conv2d, Dense, Layer, Network};
use maskopt::synthdata::{generate_dataset, Dataset, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type TestRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

/// Straight loops over the layer list. Every output element accumulates in
/// f64 starting from its bias, taps in (channel, ky, kx) order, then rounds to
/// f32, so on the same network the result should agree bit for bit.
pub fn mirror_forward(net: &Network, input: &[f32]) -> f32 {
    let [c, h, w] = net.input_shape();
    let mut shape = vec![c, h, w];
    let mut x: Vec<f32> = input.to_vec();
    for layer in net.layers() {
        let (y, s) = match layer {
            Layer::Conv(conv) => {
                let (oh, ow) = conv_out(conv, shape[1], shape[2]);
                let mut y = vec![0.0f32; conv.out_channels * oh * ow];
                for o in 0..conv.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = conv.bias[o] as f64;
                            for i in 0..conv.in_channels {
                                for ky in 0..conv.kernel {
                                    for kx in 0..conv.kernel {
                                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= shape[1] as isize || ix >= shape[2] as isize {
                                            continue;
                                        }
                                        let wv = conv.weight[((o * conv.in_channels + i) * conv.kernel + ky) * conv.kernel + kx];
                                        let xv = x[(i * shape[1] + iy as usize) * shape[2] + ix as usize];
                                        acc += wv as f64 * xv as f64;
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = acc as f32;
                        }
                    }
                }
                (y, vec![conv.out_channels, oh, ow])
            }
            Layer::Relu => (x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(), shape.clone()),
            Layer::MaxPool { window, stride } => {
                let (oh, ow) = ((shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1);
                let mut y = Vec::new();
                for ch in 0..shape[0] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            for dy in 0..*window {
                                for dx in 0..*window {
                                    let v = x[(ch * shape[1] + oy * stride + dy) * shape[2] + ox * stride + dx];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                            y.push(best);
                        }
                    }
                }
                (y, vec![shape[0], oh, ow])
            }
            Layer::GlobalAvgPool => {
                let n = shape[1] * shape[2];
                let y = (0..shape[0])
                    .map(|ch| {
                        let mut s = 0.0f64;
                        for &v in &x[ch * n..(ch + 1) * n] {
                            s += v as f64;
                        }
                        (s / n as f64) as f32
                    })
                    .collect();
                (y, vec![shape[0]])
            }
            Layer::Dense(d) => {
                let y = (0..d.outputs)
                    .map(|o| {
                        let mut s = 0.0f64;
                        for j in 0..d.inputs {
                            s += d.weight[o * d.inputs + j] as f64 * x[j] as f64;
                        }
                        (d.bias[o] as f64 + s) as f32
                    })
                    .collect();
                (y, vec![d.outputs])
            }
        };
        x = y;
        shape = s;
    }
    x[0]
}

fn conv_out(conv: &Conv2d, h: usize, w: usize) -> (usize, usize) {
    (
        (h + 2 * conv.padding - conv.kernel) / conv.stride + 1,
        (w + 2 * conv.padding - conv.kernel) / conv.stride + 1,
    )
}

/// Piecewise-linear region of an input: sign of every ReLU input and the
/// winning index of every pooling window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region(Vec<usize>);

/// The same network evaluated entirely in f64, for finite differences.
pub fn reference_forward(net: &Network, input: &[f64]) -> (f64, Region) {
    let [c, h, w] = net.input_shape();
    let mut shape = vec![c, h, w];
    let mut x = input.to_vec();
    let mut region = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Conv(conv) => {
                let (oh, ow) = conv_out(conv, shape[1], shape[2]);
                let mut y = vec![0.0f64; conv.out_channels * oh * ow];
                for o in 0..conv.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = conv.bias[o] as f64;
                            for i in 0..conv.in_channels {
                                for ky in 0..conv.kernel {
                                    for kx in 0..conv.kernel {
                                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= shape[1] as isize || ix >= shape[2] as isize {
                                            continue;
                                        }
                                        let wv = conv.weight[((o * conv.in_channels + i) * conv.kernel + ky) * conv.kernel + kx];
                                        acc += wv as f64 * x[(i * shape[1] + iy as usize) * shape[2] + ix as usize];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![conv.out_channels, oh, ow];
            }
            Layer::Relu => {
                region.extend(x.iter().map(|&v| (v > 0.0) as usize));
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Layer::MaxPool { window, stride } => {
                let (oh, ow) = ((shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1);
                let mut y = Vec::new();
                for ch in 0..shape[0] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for dy in 0..*window {
                                for dx in 0..*window {
                                    let v = x[(ch * shape[1] + oy * stride + dy) * shape[2] + ox * stride + dx];
                                    if v > best.0 {
                                        best = (v, dy * window + dx);
                                    }
                                }
                            }
                            region.push(best.1);
                            y.push(best.0);
                        }
                    }
                }
                x = y;
                shape = vec![shape[0], oh, ow];
            }
            Layer::GlobalAvgPool => {
                let n = shape[1] * shape[2];
                x = (0..shape[0]).map(|ch| x[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
                shape = vec![shape[0]];
            }
            Layer::Dense(d) => {
                x = (0..d.outputs)
                    .map(|o| d.bias[o] as f64 + (0..d.inputs).map(|j| d.weight[o * d.inputs + j] as f64 * x[j]).sum::<f64>())
                    .collect();
                shape = vec![d.outputs];
            }
        }
    }
    (x[0], Region(region))
}

/// Central difference of `f` along one coordinate. When either probe falls in
/// a different linear region from the base point the step shrinks eightfold;
/// across a ReLU or pooling switch the difference quotient measures the kink,
/// not the derivative.
pub fn central_difference<F>(f: F, x: &[f64], i: usize, step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Region),
{
    let base = f(x).1;
    let mut h = step;
    let mut probe = x.to_vec();
    loop {
        probe[i] = x[i] + h;
        let (up, ru) = f(&probe);
        probe[i] = x[i] - h;
        let (down, rd) = f(&probe);
        if (ru == base && rd == base) || h < 1e-9 {
            return (up - down) / (2.0 * h);
        }
        h *= 0.125;
    }
}

fn fill_uniform(v: &mut [f32], bound: f32, rng: &mut TestRng) {
    for x in v {
        *x = rng.random_range(-bound..bound);
    }
}

pub fn random_conv(rng: &mut TestRng, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Conv2d {
    let mut c = Conv2d::zeros(in_ch, out_ch, kernel, stride, padding);
    let b = (3.0 / (in_ch * kernel * kernel) as f32).sqrt();
    fill_uniform(&mut c.weight, b, rng);
    fill_uniform(&mut c.bias, 0.2, rng);
    c
}

pub fn random_dense(rng: &mut TestRng, inputs: usize) -> Dense {
    let mut d = Dense::zeros(inputs, 1);
    fill_uniform(&mut d.weight, (3.0 / inputs as f32).sqrt(), rng);
    fill_uniform(&mut d.bias, 0.2, rng);
    d
}

/// The default three-block architecture at any side, randomly initialised.
pub fn default_architecture(side: usize, rng: &mut TestRng) -> Network {
    let mut layers = Vec::new();
    let mut in_ch = 1;
    for out_ch in [8, 16, 32] {
        layers.push(Layer::Conv(random_conv(rng, in_ch, out_ch, 3, 1, 1)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool { window: 2, stride: 2 });
        in_ch = out_ch;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense(random_dense(rng, in_ch)));
    Network::new([1, side, side], layers).unwrap()
}

/// A small random network with three parameterised layers whose geometry
/// (channels, kernel, stride, padding, pooling) varies with the draw.
pub fn random_small_net(rng: &mut TestRng) -> Network {
    let in_ch = rng.random_range(1..=2);
    let side = rng.random_range(6..=11);
    let k1 = [1, 3, 5][rng.random_range(0..3)];
    let p1 = rng.random_range(0..=k1 / 2);
    let c1 = rng.random_range(1..=4);
    let c2 = rng.random_range(1..=4);
    let s2 = rng.random_range(1..=2);
    let mut layers = vec![Layer::Conv(random_conv(rng, in_ch, c1, k1, 1, p1)), Layer::Relu];
    let after1 = side + 2 * p1 - k1 + 1;
    if after1 >= 4 && rng.random_bool(0.7) {
        let window = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        layers.push(Layer::MaxPool { window, stride });
    }
    layers.push(Layer::Conv(random_conv(rng, c1, c2, 3, s2, 1)));
    layers.push(Layer::Relu);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense(random_dense(rng, c2)));
    Network::new([in_ch, side, side], layers).unwrap()
}

pub fn random_input(rng: &mut TestRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// The default synthetic benchmark and a classifier trained on its train
/// split with default settings, built once per test binary.
pub fn benchmark() -> &'static (Dataset, ClassifierModel) {
    static CELL: OnceLock<(Dataset, ClassifierModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = generate_dataset(&SceneSpec::default(), 600).unwrap();
        let model = train(data.train.iter().map(|s| (&s.image, s.label())), &TrainConfig::default()).unwrap();
        (data, model)
    })
}
