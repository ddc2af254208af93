//! Small differentiable classifiers with hand-written reverse mode.
//!
//! Every image is pushed through the layer stack on its own, so batched and
//! one-at-a-time evaluation give bitwise identical results. Gradients with
//! respect to parameters are accumulated over fixed-size chunks of the batch
//! and the chunk sums are reduced in order, so the result does not depend on
//! how many threads rayon happens to use.

mod train;

pub use train::{adversarial_train, train_sgd, EpochStats, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor4;

/// Images per parameter-gradient accumulation chunk.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
    MaxPool2d {
        size: usize,
    },
}

impl Layer {
    /// (weight count, bias count) for layers with parameters.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            Layer::Dense { inputs, outputs } => (inputs * outputs, outputs),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel, out_channels),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Image { c: usize, n: usize, m: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { c, n, m } => c * n * m,
            Shape::Flat(k) => k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    /// (C, N, M)
    pub input_dims: [usize; 3],
    pub num_classes: usize,
}

/// Reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp,
    Cnn,
}

impl std::str::FromStr for Architecture {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp),
            "cnn" => Ok(Architecture::Cnn),
            other => Err(crate::Error::Contract(format!("unknown architecture {other:?}"))),
        }
    }
}

impl ModelSpec {
    pub fn new(layers: Vec<Layer>, input_dims: [usize; 3], num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            layers,
            input_dims,
            num_classes,
        };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn reference(arch: Architecture, input_dims: [usize; 3], num_classes: usize) -> Result<Self> {
        match arch {
            Architecture::Linear => Self::linear(input_dims, num_classes),
            Architecture::Mlp => Self::mlp(input_dims, num_classes),
            Architecture::Cnn => Self::cnn(input_dims, num_classes),
        }
    }

    /// Flatten followed by a single dense layer.
    pub fn linear(input_dims: [usize; 3], num_classes: usize) -> Result<Self> {
        let k = input_dims.iter().product();
        Self::new(
            vec![
                Layer::Flatten,
                Layer::Dense {
                    inputs: k,
                    outputs: num_classes,
                },
            ],
            input_dims,
            num_classes,
        )
    }

    /// Two hidden ReLU layers of width 128.
    pub fn mlp(input_dims: [usize; 3], num_classes: usize) -> Result<Self> {
        let k = input_dims.iter().product();
        Self::new(
            vec![
                Layer::Flatten,
                Layer::Dense {
                    inputs: k,
                    outputs: 128,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 128,
                    outputs: 128,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 128,
                    outputs: num_classes,
                },
            ],
            input_dims,
            num_classes,
        )
    }

    /// conv(8, 3×3) → relu → maxpool 2 → conv(16, 3×3) → relu → maxpool 2 → dense.
    pub fn cnn(input_dims: [usize; 3], num_classes: usize) -> Result<Self> {
        let [c, n, m] = input_dims;
        let (n4, m4) = (n / 4, m / 4);
        ensure!(n4 >= 1 && m4 >= 1, "cnn needs images of at least 4x4, got {n}x{m}");
        Self::new(
            vec![
                Layer::Conv2d {
                    in_channels: c,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::Conv2d {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::MaxPool2d { size: 2 },
                Layer::Flatten,
                Layer::Dense {
                    inputs: 16 * n4 * m4,
                    outputs: num_classes,
                },
            ],
            input_dims,
            num_classes,
        )
    }

    /// Activation shapes: `shapes[0]` is the input, `shapes[i + 1]` the
    /// output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let [c, n, m] = self.input_dims;
        ensure!(
            c >= 1 && n >= 1 && m >= 1,
            "input dims must be positive, got {:?}",
            self.input_dims
        );
        ensure!(
            self.num_classes >= 2,
            "need at least 2 classes, got {}",
            self.num_classes
        );
        let mut shapes = vec![Shape::Image { c, n, m }];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (*layer, cur) {
                (Layer::Dense { inputs, outputs }, Shape::Flat(k)) => {
                    ensure!(inputs == k, "layer {i}: dense expects {inputs} inputs, got {k}");
                    ensure!(outputs >= 1, "layer {i}: dense needs outputs >= 1");
                    Shape::Flat(outputs)
                }
                (Layer::Dense { .. }, Shape::Image { .. }) => {
                    return Err(crate::Error::Contract(format!(
                        "layer {i}: dense needs a flattened input"
                    )))
                }
                (
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Image { c, n, m },
                ) => {
                    ensure!(
                        in_channels == c,
                        "layer {i}: conv expects {in_channels} channels, got {c}"
                    );
                    ensure!(
                        kernel >= 1 && stride >= 1 && out_channels >= 1,
                        "layer {i}: bad conv geometry"
                    );
                    ensure!(
                        n + 2 * padding >= kernel && m + 2 * padding >= kernel,
                        "layer {i}: kernel {kernel} larger than padded input {n}x{m}"
                    );
                    Shape::Image {
                        c: out_channels,
                        n: (n + 2 * padding - kernel) / stride + 1,
                        m: (m + 2 * padding - kernel) / stride + 1,
                    }
                }
                (Layer::Conv2d { .. }, Shape::Flat(_)) => {
                    return Err(crate::Error::Contract(format!("layer {i}: conv needs an image input")))
                }
                (Layer::Relu, s) => s,
                (Layer::Flatten, s) => Shape::Flat(s.len()),
                (Layer::MaxPool2d { size }, Shape::Image { c, n, m }) => {
                    ensure!(
                        size >= 1 && n >= size && m >= size,
                        "layer {i}: pool {size} too large for {n}x{m}"
                    );
                    Shape::Image {
                        c,
                        n: n / size,
                        m: m / size,
                    }
                }
                (Layer::MaxPool2d { .. }, Shape::Flat(_)) => {
                    return Err(crate::Error::Contract(format!(
                        "layer {i}: maxpool needs an image input"
                    )))
                }
            };
            shapes.push(next);
        }
        let last = *shapes.last().unwrap();
        ensure!(
            last == Shape::Flat(self.num_classes),
            "final layer must produce {} logits, got {:?}",
            self.num_classes,
            last
        );
        Ok(shapes)
    }
}

/// Weights and biases of one layer; empty for parameter-free layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        LayerParams {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn add_assign(&mut self, other: &LayerParams) {
        self.weight.iter_mut().zip(&other.weight).for_each(|(a, b)| *a += b);
        self.bias.iter_mut().zip(&other.bias).for_each(|(a, b)| *a += b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
    /// Seed used for initialization.
    pub seed: u64,
}

impl ModelParams {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|layer| {
                let (nw, nb) = layer.param_counts();
                if nw == 0 {
                    return LayerParams::default();
                }
                let bound = 1.0 / (layer.fan_in() as f64).sqrt();
                let weight = (0..nw).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..nb).map(|_| rng.random_range(-bound..bound)).collect();
                LayerParams { weight, bias }
            })
            .collect();
        Ok(ModelParams { layers, seed })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let (nw, nb) = l.param_counts();
                LayerParams {
                    weight: vec![0.0; nw],
                    bias: vec![0.0; nb],
                }
            })
            .collect();
        ModelParams { layers, seed: 0 }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        ensure!(
            self.layers.len() == spec.layers.len(),
            "params have {} layers, spec has {}",
            self.layers.len(),
            spec.layers.len()
        );
        for (i, (p, l)) in self.layers.iter().zip(&spec.layers).enumerate() {
            let (nw, nb) = l.param_counts();
            ensure!(
                p.weight.len() == nw && p.bias.len() == nb,
                "layer {i}: expected {nw} weights and {nb} biases, got {} and {}",
                p.weight.len(),
                p.bias.len()
            );
            ensure!(
                p.weight.iter().chain(&p.bias).all(|v| v.is_finite()),
                "layer {i}: non-finite parameter"
            );
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Per-layer parameter gradients, same layout as [`ModelParams::layers`].
pub type ParamGrads = Vec<LayerParams>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ModelParams,
    shapes: Vec<Shape>,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        let shapes = spec.shapes()?;
        params.check(&spec)?;
        Ok(Model { spec, params, shapes })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&spec, seed)?;
        Self::new(spec, params)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [_, c, n, m] = x.dims();
        ensure!(
            [c, n, m] == self.spec.input_dims,
            "input images are {:?}, model expects {:?}",
            [c, n, m],
            self.spec.input_dims
        );
        Ok(())
    }

    fn check_labels(&self, x: &Tensor4, labels: &[usize]) -> Result<()> {
        ensure!(
            labels.len() == x.batch(),
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        );
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.spec.num_classes) {
            return Err(crate::Error::Contract(format!(
                "label {bad} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    /// Logits for every image, `B × D`.
    pub fn forward(&self, x: &Tensor4) -> Result<Matrix> {
        self.check_input(x)?;
        let rows: Vec<Vec<f64>> = (0..x.batch())
            .into_par_iter()
            .map(|b| {
                let acts = self.forward_image(x.image(b));
                acts.into_iter().last().unwrap()
            })
            .collect();
        Matrix::from_vec(x.batch(), self.spec.num_classes, rows.concat())
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict_class(&self, x: &Tensor4) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows()).map(|b| argmax(logits.row(b))).collect())
    }

    /// Gradient of the batch-mean cross-entropy with respect to the input.
    pub fn grad_input(&self, x: &Tensor4, labels: &[usize]) -> Result<Tensor4> {
        let (_, g) = self.input_gradients(x, labels)?;
        Ok(g.scale(1.0 / x.batch() as f64))
    }

    /// Per-image losses and the gradient of each image's own loss with
    /// respect to that image (no batch averaging).
    pub fn input_gradients(&self, x: &Tensor4, labels: &[usize]) -> Result<(Vec<f64>, Tensor4)> {
        self.check_input(x)?;
        self.check_labels(x, labels)?;
        let per: Vec<(f64, Vec<f64>)> = (0..x.batch())
            .into_par_iter()
            .map(|b| {
                let acts = self.forward_image(x.image(b));
                let (loss, dlogits) = softmax_xent_grad(acts.last().unwrap(), labels[b]);
                let g = self.backward_image(&acts, dlogits, None);
                (loss, g)
            })
            .collect();
        let mut losses = Vec::with_capacity(per.len());
        let mut data = Vec::with_capacity(x.len());
        for (l, g) in per {
            losses.push(l);
            data.extend(g);
        }
        Ok((losses, Tensor4::from_vec(x.dims(), data)?))
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn grad_params(&self, x: &Tensor4, labels: &[usize]) -> Result<(f64, ParamGrads)> {
        let (loss, grads, _) = self.grad_params_with_logits(x, labels)?;
        Ok((loss, grads))
    }

    /// As [`Model::grad_params`], also returning the logits of the forward pass.
    pub(crate) fn grad_params_with_logits(&self, x: &Tensor4, labels: &[usize]) -> Result<(f64, ParamGrads, Matrix)> {
        self.check_input(x)?;
        self.check_labels(x, labels)?;
        let bsz = x.batch();
        let chunks: Vec<(usize, usize)> = (0..bsz)
            .step_by(GRAD_CHUNK)
            .map(|s| (s, (s + GRAD_CHUNK).min(bsz)))
            .collect();
        let partial: Vec<(f64, ParamGrads, Vec<f64>)> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut grads: ParamGrads = self.params.layers.iter().map(LayerParams::zeros_like).collect();
                let mut loss = 0.0;
                let mut logits = Vec::with_capacity((e - s) * self.spec.num_classes);
                for (b, &label) in (s..e).zip(&labels[s..e]) {
                    let acts = self.forward_image(x.image(b));
                    let out = acts.last().unwrap();
                    logits.extend_from_slice(out);
                    let (l, dlogits) = softmax_xent_grad(out, label);
                    loss += l;
                    self.backward_image(&acts, dlogits, Some(&mut grads));
                }
                (loss, grads, logits)
            })
            .collect();
        let mut total: ParamGrads = self.params.layers.iter().map(LayerParams::zeros_like).collect();
        let mut loss = 0.0;
        let mut logits = Vec::with_capacity(bsz * self.spec.num_classes);
        for (l, g, lg) in &partial {
            loss += l;
            for (t, p) in total.iter_mut().zip(g) {
                t.add_assign(p);
            }
            logits.extend_from_slice(lg);
        }
        let inv = 1.0 / bsz as f64;
        for t in &mut total {
            t.weight.iter_mut().for_each(|v| *v *= inv);
            t.bias.iter_mut().for_each(|v| *v *= inv);
        }
        Ok((loss * inv, total, Matrix::from_vec(bsz, self.spec.num_classes, logits)?))
    }

    /// Plain gradient step `θ ← θ − lr·g`.
    pub(crate) fn apply_gradients(&mut self, grads: &ParamGrads, lr: f64) {
        for (p, g) in self.params.layers.iter_mut().zip(grads) {
            p.weight.iter_mut().zip(&g.weight).for_each(|(w, d)| *w -= lr * d);
            p.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= lr * d);
        }
    }

    fn forward_image(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let p = &self.params.layers[i];
            let y = match *layer {
                Layer::Dense { inputs, outputs } => dense_forward(x, p, inputs, outputs),
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Shape::Image { n, m, .. } = self.shapes[i] else {
                        unreachable!()
                    };
                    let Shape::Image { n: on, m: om, .. } = self.shapes[i + 1] else {
                        unreachable!()
                    };
                    let geo = ConvGeometry {
                        cin: in_channels,
                        cout: out_channels,
                        k: kernel,
                        stride,
                        pad: padding,
                        n,
                        m,
                        on,
                        om,
                    };
                    conv_forward(x, p, &geo)
                }
                Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                Layer::Flatten => x.clone(),
                Layer::MaxPool2d { size } => {
                    let Shape::Image { c, n, m } = self.shapes[i] else {
                        unreachable!()
                    };
                    maxpool_forward(x, c, n, m, size)
                }
            };
            acts.push(y);
        }
        acts
    }

    /// Back-propagates `dout` (gradient at the logits) and returns the input
    /// gradient, accumulating parameter gradients when `grads` is given.
    fn backward_image(&self, acts: &[Vec<f64>], dout: Vec<f64>, mut grads: Option<&mut ParamGrads>) -> Vec<f64> {
        let mut g = dout;
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &acts[i];
            let p = &self.params.layers[i];
            let gp = grads.as_deref_mut().map(|gs| &mut gs[i]);
            g = match *layer {
                Layer::Dense { inputs, outputs } => dense_backward(x, p, &g, inputs, outputs, gp),
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Shape::Image { n, m, .. } = self.shapes[i] else {
                        unreachable!()
                    };
                    let Shape::Image { n: on, m: om, .. } = self.shapes[i + 1] else {
                        unreachable!()
                    };
                    let geo = ConvGeometry {
                        cin: in_channels,
                        cout: out_channels,
                        k: kernel,
                        stride,
                        pad: padding,
                        n,
                        m,
                        on,
                        om,
                    };
                    conv_backward(x, p, &g, &geo, gp)
                }
                Layer::Relu => x.iter().zip(&g).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect(),
                Layer::Flatten => g,
                Layer::MaxPool2d { size } => {
                    let Shape::Image { c, n, m } = self.shapes[i] else {
                        unreachable!()
                    };
                    maxpool_backward(x, &g, c, n, m, size)
                }
            };
        }
        g
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn log_softmax_at(logits: &[f64], label: usize) -> (f64, f64, f64) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - mx).exp()).sum();
    (logits[label] - mx - sum.ln(), mx, sum)
}

/// Loss `−log softmax(z)[label]` and its gradient `softmax(z) − onehot`.
fn softmax_xent_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let (lp, mx, sum) = log_softmax_at(logits, label);
    let mut g: Vec<f64> = logits.iter().map(|&z| (z - mx).exp() / sum).collect();
    g[label] -= 1.0;
    (-lp, g)
}

/// Batch mean of `−log softmax(logits)[label]`, computed with max-subtraction.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    ensure!(
        labels.len() == logits.rows(),
        "{} labels for {} logit rows",
        labels.len(),
        logits.rows()
    );
    ensure!(logits.rows() >= 1, "cross_entropy needs a non-empty batch");
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        ensure!(
            label < logits.cols(),
            "label {label} out of range for {} classes",
            logits.cols()
        );
        total -= log_softmax_at(logits.row(b), label).0;
    }
    Ok(total / logits.rows() as f64)
}

fn dense_forward(x: &[f64], p: &LayerParams, inputs: usize, outputs: usize) -> Vec<f64> {
    (0..outputs)
        .map(|o| {
            let w = &p.weight[o * inputs..(o + 1) * inputs];
            p.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    x: &[f64],
    p: &LayerParams,
    g: &[f64],
    inputs: usize,
    outputs: usize,
    gp: Option<&mut LayerParams>,
) -> Vec<f64> {
    let mut gx = vec![0.0; inputs];
    for (o, &d) in g[..outputs].iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let w = &p.weight[o * inputs..(o + 1) * inputs];
        gx.iter_mut().zip(w).for_each(|(a, &wv)| *a += d * wv);
    }
    if let Some(gp) = gp {
        for (o, &d) in g[..outputs].iter().enumerate() {
            gp.bias[o] += d;
            if d == 0.0 {
                continue;
            }
            let gw = &mut gp.weight[o * inputs..(o + 1) * inputs];
            gw.iter_mut().zip(x).for_each(|(a, &xv)| *a += d * xv);
        }
    }
    gx
}

struct ConvGeometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    n: usize,
    m: usize,
    on: usize,
    om: usize,
}

impl ConvGeometry {
    /// Range of output positions whose kernel tap `t` lands inside an input
    /// axis of length `size`.
    #[inline]
    fn valid(&self, t: usize, size: usize, out_len: usize) -> (usize, usize) {
        // o*stride + t - pad in [0, size)
        let lo = if self.pad > t {
            (self.pad - t).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if size + self.pad > t {
            ((size + self.pad - t - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_forward(x: &[f64], p: &LayerParams, geo: &ConvGeometry) -> Vec<f64> {
    let (k, n, m, on, om) = (geo.k, geo.n, geo.m, geo.on, geo.om);
    let mut y = vec![0.0; geo.cout * on * om];
    for co in 0..geo.cout {
        let plane = &mut y[co * on * om..(co + 1) * on * om];
        plane.iter_mut().for_each(|v| *v = p.bias[co]);
        for ci in 0..geo.cin {
            let xin = &x[ci * n * m..(ci + 1) * n * m];
            for ki in 0..k {
                for kj in 0..k {
                    let w = p.weight[((co * geo.cin + ci) * k + ki) * k + kj];
                    let (ilo, ihi) = geo.valid(ki, n, on);
                    let (jlo, jhi) = geo.valid(kj, m, om);
                    for oi in ilo..ihi {
                        let si = oi * geo.stride + ki - geo.pad;
                        let row = &xin[si * m..(si + 1) * m];
                        let out = &mut plane[oi * om..(oi + 1) * om];
                        for oj in jlo..jhi {
                            out[oj] += w * row[oj * geo.stride + kj - geo.pad];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(
    x: &[f64],
    p: &LayerParams,
    g: &[f64],
    geo: &ConvGeometry,
    mut gp: Option<&mut LayerParams>,
) -> Vec<f64> {
    let (k, n, m, on, om) = (geo.k, geo.n, geo.m, geo.on, geo.om);
    let mut gx = vec![0.0; geo.cin * n * m];
    for co in 0..geo.cout {
        let gplane = &g[co * on * om..(co + 1) * on * om];
        if let Some(gp) = gp.as_deref_mut() {
            gp.bias[co] += gplane.iter().sum::<f64>();
        }
        for ci in 0..geo.cin {
            let xin = &x[ci * n * m..(ci + 1) * n * m];
            let gxin = &mut gx[ci * n * m..(ci + 1) * n * m];
            for ki in 0..k {
                for kj in 0..k {
                    let widx = ((co * geo.cin + ci) * k + ki) * k + kj;
                    let w = p.weight[widx];
                    let mut gw = 0.0;
                    let (ilo, ihi) = geo.valid(ki, n, on);
                    let (jlo, jhi) = geo.valid(kj, m, om);
                    for oi in ilo..ihi {
                        let si = oi * geo.stride + ki - geo.pad;
                        let gout = &gplane[oi * om..(oi + 1) * om];
                        for (oj, &d) in (jlo..jhi).zip(&gout[jlo..jhi]) {
                            let at = si * m + oj * geo.stride + kj - geo.pad;
                            gxin[at] += w * d;
                            gw += d * xin[at];
                        }
                    }
                    if let Some(gp) = gp.as_deref_mut() {
                        gp.weight[widx] += gw;
                    }
                }
            }
        }
    }
    gx
}

/// Flat index of the first maximum inside each pooling window.
fn maxpool_argmax(x: &[f64], c: usize, n: usize, m: usize, size: usize) -> Vec<usize> {
    let (on, om) = (n / size, m / size);
    let mut idx = Vec::with_capacity(c * on * om);
    for ch in 0..c {
        for oi in 0..on {
            for oj in 0..om {
                let mut best = ch * n * m + oi * size * m + oj * size;
                for di in 0..size {
                    for dj in 0..size {
                        let at = ch * n * m + (oi * size + di) * m + oj * size + dj;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

fn maxpool_forward(x: &[f64], c: usize, n: usize, m: usize, size: usize) -> Vec<f64> {
    maxpool_argmax(x, c, n, m, size).into_iter().map(|i| x[i]).collect()
}

fn maxpool_backward(x: &[f64], g: &[f64], c: usize, n: usize, m: usize, size: usize) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    for (o, i) in maxpool_argmax(x, c, n, m, size).into_iter().enumerate() {
        gx[i] += g[o];
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model(c: usize, n: usize, m: usize, d: usize, seed: u64) -> Model {
        Model::init(ModelSpec::linear([c, n, m], d).unwrap(), seed).unwrap()
    }

    #[test]
    fn zero_linear_gives_zero_logits_and_gradient() {
        let spec = ModelSpec::linear([1, 2, 2], 3).unwrap();
        let model = Model::new(spec.clone(), ModelParams::zeros(&spec)).unwrap();
        let x = Tensor4::from_fn([2, 1, 2, 2], |[b, _, i, j]| (b + i + j) as f64 * 0.1);
        let logits = model.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let g = model.grad_input(&x, &[0, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_one_by_one_conv() {
        let spec = ModelSpec::new(
            vec![
                Layer::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                Layer::Flatten,
                Layer::Dense { inputs: 9, outputs: 2 },
            ],
            [1, 3, 3],
            2,
        )
        .unwrap();
        let mut params = ModelParams::zeros(&spec);
        params.layers[0].weight[0] = 1.0;
        let model = Model::new(spec, params).unwrap();
        let x = Tensor4::from_fn([1, 1, 3, 3], |[_, _, i, j]| (i * 3 + j) as f64 / 10.0);
        let acts = model.forward_image(x.image(0));
        assert_eq!(acts[1], x.image(0).to_vec());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::zeros(1, 10);
        let l = cross_entropy(&uniform, &[3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);

        let mut sat = Matrix::zeros(1, 10);
        sat[(0, 4)] = 100.0;
        assert!(cross_entropy(&sat, &[4]).unwrap() <= 1e-8);

        assert!(cross_entropy(&uniform, &[10]).is_err());

        let mut big = Matrix::zeros(2, 3);
        big[(0, 0)] = 1e4;
        big[(1, 2)] = -1e4;
        assert!(cross_entropy(&big, &[1, 2]).unwrap().is_finite());
    }

    #[test]
    fn predict_tie_breaks_low() {
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn shape_errors() {
        assert!(ModelSpec::new(vec![Layer::Dense { inputs: 4, outputs: 2 }], [1, 2, 2], 2).is_err());
        assert!(ModelSpec::new(
            vec![Layer::Flatten, Layer::Dense { inputs: 4, outputs: 3 }],
            [1, 2, 2],
            2
        )
        .is_err());
        assert!(ModelSpec::new(
            vec![Layer::Flatten, Layer::Dense { inputs: 4, outputs: 1 }],
            [1, 2, 2],
            1
        )
        .is_err());
        let model = linear_model(1, 2, 2, 2, 0);
        assert!(model.forward(&Tensor4::zeros([1, 1, 3, 2])).is_err());
        assert!(model.grad_input(&Tensor4::zeros([1, 1, 2, 2]), &[2]).is_err());
    }

    #[test]
    fn reference_architectures_compose() {
        for arch in [Architecture::Linear, Architecture::Mlp, Architecture::Cnn] {
            let spec = ModelSpec::reference(arch, [3, 16, 16], 10).unwrap();
            let model = Model::init(spec, 1).unwrap();
            let x = Tensor4::from_fn([2, 3, 16, 16], |[b, c, i, j]| ((b + c + i * j) % 7) as f64 / 7.0);
            let out = model.forward(&x).unwrap();
            assert_eq!((out.rows(), out.cols()), (2, 10));
        }
    }
}
