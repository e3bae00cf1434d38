//! Emotion feature network `A(I) -> eps` with input gradients.
//!
//! The network is a plain stack of valid-padding convolutions, average pools
//! and dense layers. Tensors are channel-major (`C x H x W`); images enter as
//! RGB and are bilinearly resampled when their size differs from the
//! network's input size.

mod io;
mod recognition;
mod sampling;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::exec::Exec;
use crate::renderer::Image;
use crate::rng::substream;

pub use io::{read_extractor, read_manifest, write_extractor, ManifestRow, EXTRACTOR_MAGIC};
pub use recognition::{
    recognition_loss, AffectHead, AffectLabel, EmotionPrediction, PredictionGrad, RecognitionLoss,
    N_EXPRESSIONS, VARIANCE_FLOOR,
};
pub use sampling::{BalancedSampler, N_BASIC_EXPRESSIONS};

pub const REFERENCE_FEATURE_DIM: usize = 32;
pub const REFERENCE_INPUT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Weights are `out x in x k x k`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    },
    /// Non-overlapping `size x size` average pooling; trailing rows/columns are dropped.
    AvgPool { size: usize },
    /// Weights are `outputs x inputs` over the flattened tensor.
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    },
}

/// `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

impl Layer {
    fn output_shape(&self, (c, h, w): Shape) -> Result<Shape> {
        match self {
            Layer::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                if *in_channels != c || h < *kernel || w < *kernel || *stride == 0 {
                    return Err(Error::Param(format!(
                        "conv expects {in_channels} channels and at least {kernel}x{kernel}, got {c}x{h}x{w}"
                    )));
                }
                Ok((*out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
            }
            Layer::AvgPool { size } => {
                if *size == 0 || h < *size || w < *size {
                    return Err(Error::Param(format!("pool {size} does not fit {h}x{w}")));
                }
                Ok((c, h / size, w / size))
            }
            Layer::Dense { inputs, outputs, .. } => {
                if c * h * w != *inputs {
                    return Err(Error::Param(format!("dense expects {inputs} inputs, got {}", c * h * w)));
                }
                Ok((*outputs, 1, 1))
            }
        }
    }

    fn check_params(&self) -> Result<()> {
        match self {
            Layer::Conv2d { in_channels, out_channels, kernel, weights, bias, .. } => {
                if weights.len() != out_channels * in_channels * kernel * kernel || bias.len() != *out_channels {
                    return Err(Error::Param("conv weight shape mismatch".into()));
                }
                ensure_finite("conv weights", weights)?;
                ensure_finite("conv bias", bias)
            }
            Layer::AvgPool { .. } => Ok(()),
            Layer::Dense { inputs, outputs, weights, bias, .. } => {
                if weights.len() != inputs * outputs || bias.len() != *outputs {
                    return Err(Error::Param("dense weight shape mismatch".into()));
                }
                ensure_finite("dense weights", weights)?;
                ensure_finite("dense bias", bias)
            }
        }
    }

    /// Returns `(pre_activation, output)`.
    fn forward(&self, input: &[f64], (c, h, w): Shape, out_shape: Shape) -> (Vec<f64>, Vec<f64>) {
        match self {
            Layer::Conv2d { out_channels, kernel, stride, weights, bias, activation, .. } => {
                let (_, oh, ow) = out_shape;
                let k = *kernel;
                let mut pre = vec![0.0; out_channels * oh * ow];
                for o in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[o];
                            for i in 0..c {
                                for ky in 0..k {
                                    let row = (i * h + oy * stride + ky) * w + ox * stride;
                                    let wrow = ((o * c + i) * k + ky) * k;
                                    for kx in 0..k {
                                        acc += weights[wrow + kx] * input[row + kx];
                                    }
                                }
                            }
                            pre[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                let out = pre.iter().map(|&x| activation.apply(x)).collect();
                (pre, out)
            }
            Layer::AvgPool { size } => {
                let (_, oh, ow) = out_shape;
                let inv = 1.0 / (size * size) as f64;
                let mut out = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    acc += input[(ch * h + oy * size + dy) * w + ox * size + dx];
                                }
                            }
                            out[(ch * oh + oy) * ow + ox] = acc * inv;
                        }
                    }
                }
                (out.clone(), out)
            }
            Layer::Dense { inputs, outputs, weights, bias, activation } => {
                let pre: Vec<f64> = (0..*outputs)
                    .map(|o| {
                        let row = &weights[o * inputs..(o + 1) * inputs];
                        bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let out = pre.iter().map(|&x| activation.apply(x)).collect();
                (pre, out)
            }
        }
    }

    /// Gradient on the layer input given the gradient on its output.
    fn backward(&self, pre: &[f64], out: &[f64], grad_out: &[f64], (c, h, w): Shape, out_shape: Shape) -> Vec<f64> {
        let mut grad_in = vec![0.0; c * h * w];
        match self {
            Layer::Conv2d { out_channels, kernel, stride, weights, activation, .. } => {
                let (_, oh, ow) = out_shape;
                let k = *kernel;
                for o in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = (o * oh + oy) * ow + ox;
                            let g = grad_out[idx] * activation.derivative(pre[idx], out[idx]);
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..c {
                                for ky in 0..k {
                                    let row = (i * h + oy * stride + ky) * w + ox * stride;
                                    let wrow = ((o * c + i) * k + ky) * k;
                                    for kx in 0..k {
                                        grad_in[row + kx] += g * weights[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::AvgPool { size } => {
                let (_, oh, ow) = out_shape;
                let inv = 1.0 / (size * size) as f64;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad_out[(ch * oh + oy) * ow + ox] * inv;
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    grad_in[(ch * h + oy * size + dy) * w + ox * size + dx] += g;
                                }
                            }
                        }
                    }
                }
            }
            Layer::Dense { inputs, outputs, weights, activation, .. } => {
                for o in 0..*outputs {
                    let g = grad_out[o] * activation.derivative(pre[o], out[o]);
                    if g == 0.0 {
                        continue;
                    }
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    grad_in.iter_mut().zip(row).for_each(|(gi, wi)| *gi += g * wi);
                }
            }
        }
        grad_in
    }
}

/// Sparse bilinear resampling map (half-pixel centers, edge clamped).
#[derive(Debug, Clone)]
struct Resampler {
    src: (usize, usize),
    dst: (usize, usize),
    /// For each destination pixel, four `(source pixel, weight)` taps.
    taps: Vec<[(usize, f64); 4]>,
}

impl Resampler {
    fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let (sw, sh) = src;
        let (dw, dh) = dst;
        let axis = |d: usize, s: usize, n_dst: usize| {
            let pos = ((d as f64 + 0.5) * s as f64 / n_dst as f64 - 0.5).clamp(0.0, (s - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(s - 1);
            (i0, i1, pos - i0 as f64)
        };
        let mut taps = Vec::with_capacity(dw * dh);
        for y in 0..dh {
            let (y0, y1, fy) = axis(y, sh, dh);
            for x in 0..dw {
                let (x0, x1, fx) = axis(x, sw, dw);
                taps.push([
                    (y0 * sw + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * sw + x1, fx * (1.0 - fy)),
                    (y1 * sw + x0, (1.0 - fx) * fy),
                    (y1 * sw + x1, fx * fy),
                ]);
            }
        }
        Resampler { src, dst, taps }
    }

    fn apply(&self, data: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dst.0 * self.dst.1 * 3];
        for (d, taps) in self.taps.iter().enumerate() {
            for &(s, wgt) in taps {
                for c in 0..3 {
                    out[d * 3 + c] += wgt * data[s * 3 + c];
                }
            }
        }
        out
    }

    fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.src.0 * self.src.1 * 3];
        for (d, taps) in self.taps.iter().enumerate() {
            for &(s, wgt) in taps {
                for c in 0..3 {
                    out[s * 3 + c] += wgt * grad[d * 3 + c];
                }
            }
        }
        out
    }
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    resampler: Option<Resampler>,
    shapes: Vec<Shape>,
    /// `values[0]` is the network input; `values[l + 1]` the output of layer `l`.
    values: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub input_width: usize,
    pub input_height: usize,
    pub layers: Vec<Layer>,
}

impl FeatureExtractor {
    pub fn new(input_width: usize, input_height: usize, layers: Vec<Layer>) -> Result<Self> {
        let fx = FeatureExtractor { input_width, input_height, layers };
        fx.validate()?;
        Ok(fx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 || self.layers.is_empty() {
            return Err(Error::Param("extractor needs a nonempty input and at least one layer".into()));
        }
        self.shapes().map(|_| ())?;
        self.layers.iter().try_for_each(Layer::check_params)
    }

    fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![(3, self.input_height, self.input_width)];
        for layer in &self.layers {
            let next = layer.output_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes().map(|s| {
            let (c, h, w) = *s.last().unwrap();
            c * h * w
        }).unwrap_or(0)
    }

    /// Deterministic stand-in backbone: two stride-2 tanh convolutions and a
    /// dense projection to a 32-dimensional feature.
    pub fn reference(seed: u64) -> Self {
        let mut rng = substream(seed, "reference-extractor");
        let mut gaussian = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let side1 = (REFERENCE_INPUT - 3) / 2 + 1;
        let side2 = (side1 - 3) / 2 + 1;
        let flat = 8 * side2 * side2;
        let layers = vec![
            Layer::Conv2d {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                weights: gaussian(4 * 3 * 9, 1.5 / 27f64.sqrt()),
                bias: gaussian(4, 0.2),
                activation: Activation::Tanh,
            },
            Layer::Conv2d {
                in_channels: 4,
                out_channels: 8,
                kernel: 3,
                stride: 2,
                weights: gaussian(8 * 4 * 9, 1.5 / 36f64.sqrt()),
                bias: gaussian(8, 0.2),
                activation: Activation::Tanh,
            },
            Layer::Dense {
                inputs: flat,
                outputs: REFERENCE_FEATURE_DIM,
                weights: gaussian(REFERENCE_FEATURE_DIM * flat, 2.0 / (flat as f64).sqrt()),
                bias: gaussian(REFERENCE_FEATURE_DIM, 0.1),
                activation: Activation::Identity,
            },
        ];
        FeatureExtractor::new(REFERENCE_INPUT, REFERENCE_INPUT, layers).expect("reference layers chain")
    }

    fn prepare_input(&self, image: &Image) -> Result<(Option<Resampler>, Vec<f64>)> {
        if image.data.len() != image.width * image.height * 3 || image.width == 0 || image.height == 0 {
            return Err(Error::Param("image buffer does not match its dimensions".into()));
        }
        ensure_finite("image", &image.data)?;
        let (resampler, hwc) = if (image.width, image.height) == (self.input_width, self.input_height) {
            (None, image.data.clone())
        } else {
            let r = Resampler::new((image.width, image.height), (self.input_width, self.input_height));
            let data = r.apply(&image.data);
            (Some(r), data)
        };
        let (w, h) = (self.input_width, self.input_height);
        let mut chw = vec![0.0; 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                chw[c * w * h + p] = hwc[p * 3 + c];
            }
        }
        Ok((resampler, chw))
    }

    pub fn forward(&self, image: &Image) -> Result<ForwardTrace> {
        let shapes = self.shapes()?;
        let (resampler, input) = self.prepare_input(image)?;
        let mut values = vec![input];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (p, out) = layer.forward(&values[l], shapes[l], shapes[l + 1]);
            pre.push(p);
            values.push(out);
        }
        Ok(ForwardTrace { resampler, shapes, values, pre })
    }

    pub fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(image)?.output().to_vec())
    }

    pub fn extract_batch(&self, images: &[Image], exec: Exec) -> Result<Vec<Vec<f64>>> {
        exec.map(images.len(), |i| self.extract(&images[i])).into_iter().collect()
    }

    /// Vector-Jacobian product: gradient on the input image (`h x w x 3`, in
    /// the caller's image size) of `upstream . eps`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != trace.output().len() {
            return Err(Error::Param(format!(
                "upstream has {} entries, feature has {}",
                upstream.len(),
                trace.output().len()
            )));
        }
        let mut grad = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(&trace.pre[l], &trace.values[l + 1], &grad, trace.shapes[l], trace.shapes[l + 1]);
        }
        let (w, h) = (self.input_width, self.input_height);
        let mut hwc = vec![0.0; 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                hwc[p * 3 + c] = grad[c * w * h + p];
            }
        }
        Ok(match &trace.resampler {
            Some(r) => r.adjoint(&hwc),
            None => hwc,
        })
    }

    pub fn extract_with_input_grad(&self, image: &Image, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward(image)?;
        let grad = self.backward(&trace, upstream)?;
        Ok((trace.output().to_vec(), grad))
    }
}
