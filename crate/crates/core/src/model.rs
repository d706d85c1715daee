//! ConvNet-D backbone: `depth` blocks of 3x3 conv → BN → ReLU → 2x2 avg-pool,
//! followed by one linear classifier.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, Reader, Writer};
use crate::error::{invalid, shape, Result};
use crate::tape::{Real, Tape, Var};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"LTDDCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Momentum of the exponential moving average kept during training.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvNetSpec {
    pub depth: usize,
    pub base_width: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub bn_epsilon: f32,
}

impl ConvNetSpec {
    pub fn new(depth: usize, base_width: usize, input: [usize; 3], num_classes: usize) -> Self {
        Self {
            depth,
            base_width,
            channels: input[0],
            height: input[1],
            width: input[2],
            num_classes,
            bn_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid("convnet depth must be at least 1"));
        }
        if self.base_width == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid(format!(
                "non-positive convnet dimension in {self:?}"
            )));
        }
        if self.num_classes < 2 {
            return Err(invalid("a classifier needs at least 2 classes"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(invalid("bn_epsilon must be positive"));
        }
        if self.height >> self.depth == 0 || self.width >> self.depth == 0 {
            return Err(invalid(format!(
                "{}x{} input is too small for {} pooling stages",
                self.height, self.width, self.depth
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Length of the flattened encoder output fed to the classifier.
    pub fn feature_len(&self) -> usize {
        self.base_width * (self.height >> self.depth) * (self.width >> self.depth)
    }

    pub fn name(&self) -> String {
        format!("ConvNet-D{}-W{}", self.depth, self.base_width)
    }
}

impl fmt::Display for ConvNetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} input {}x{}x{} classes {}",
            self.name(),
            self.channels,
            self.height,
            self.width,
            self.num_classes
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor },
    BatchNorm(BatchNorm),
    Relu,
    AvgPool,
    Linear { weight: Tensor, bias: Tensor },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize; parameters are differentiable.
    Train,
    /// Stored statistics normalize; per-channel statistics of every BN input
    /// are captured. Nothing on the model changes.
    FrozenCapture,
    /// Stored statistics normalize.
    Inference,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Flattened encoder output, `[n, feature_len]`.
    pub features: Var,
    /// Input activation of each BN layer, NCHW.
    pub bn_inputs: Vec<Var>,
    /// Per-channel `(mean, variance)` of each BN input over batch and space.
    pub bn_stats: Vec<(Var, Var)>,
    /// One leaf per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ConvNetSpec,
    layers: Vec<Layer>,
}

fn uniform(shape: &[usize], bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Model {
    /// Deterministic fan-in scaled initialization for `seed`.
    pub fn build(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = spec.channels;
        for _ in 0..spec.depth {
            let w = spec.base_width;
            let bound = 1.0 / ((cin * 9) as f32).sqrt();
            layers.push(Layer::Conv {
                weight: uniform(&[w, cin, 3, 3], bound, &mut rng),
                bias: Tensor::zeros(&[w]),
            });
            layers.push(Layer::BatchNorm(BatchNorm {
                gamma: Tensor::full(&[w], 1.0),
                beta: Tensor::zeros(&[w]),
                running_mean: Tensor::zeros(&[w]),
                running_var: Tensor::full(&[w], 1.0),
                eps: spec.bn_epsilon,
            }));
            layers.push(Layer::Relu);
            layers.push(Layer::AvgPool);
            cin = w;
        }
        let f = spec.feature_len();
        let bound = 1.0 / (f as f32).sqrt();
        layers.push(Layer::Linear {
            weight: uniform(&[spec.num_classes, f], bound, &mut rng),
            bias: Tensor::zeros(&[spec.num_classes]),
        });
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn_layers().count()
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Channel count of each BN layer.
    pub fn bn_channels(&self) -> Vec<usize> {
        self.bn_layers().map(|bn| bn.gamma.numel()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { weight, bias } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                Layer::Relu | Layer::AvgPool => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { weight, bias } | Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Relu | Layer::AvgPool => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn check_input<R: Real>(&self, tape: &Tape<R>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let want = self.spec.input_shape();
        if s.len() != 4 || s[1..] != want {
            return Err(shape(format!("input {s:?}, model expects [n, {want:?}]")));
        }
        if s[0] == 0 {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }

    /// Runs the network on `x` (`[n, c, h, w]`). Never mutates the model;
    /// see [`Model::forward_train`] for the running-statistics update.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Forward> {
        self.check_input(tape, x)?;
        let leaf = |tape: &mut Tape<R>, t: &Tensor| {
            if mode == Mode::Train {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        };
        let mut params = Vec::new();
        let mut bn_inputs = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = x;
        let mut features = None;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { weight, bias } => {
                    let (w, b) = (leaf(tape, weight), leaf(tape, bias));
                    params.extend([w, b]);
                    tape.conv2d(h, w, b)?
                }
                Layer::BatchNorm(bn) => {
                    let (g, b) = (leaf(tape, &bn.gamma), leaf(tape, &bn.beta));
                    params.extend([g, b]);
                    let mean = tape.channel_mean(h)?;
                    let var = tape.channel_var(h, mean)?;
                    bn_inputs.push(h);
                    bn_stats.push((mean, var));
                    let (nm, nv) = match mode {
                        Mode::Train => (mean, var),
                        Mode::FrozenCapture | Mode::Inference => (
                            tape.constant(&bn.running_mean),
                            tape.constant(&bn.running_var),
                        ),
                    };
                    tape.normalize(h, nm, nv, g, b, bn.eps as f64)?
                }
                Layer::Relu => tape.relu(h),
                Layer::AvgPool => tape.avg_pool2(h)?,
                Layer::Linear { weight, bias } => {
                    let n = tape.shape(h)[0];
                    let flat = tape.reshape(h, &[n, self.spec.feature_len()])?;
                    features = Some(flat);
                    let (w, b) = (leaf(tape, weight), leaf(tape, bias));
                    params.extend([w, b]);
                    tape.linear(flat, w, b)?
                }
            };
        }
        Ok(Forward {
            logits: h,
            features: features.expect("model ends in a linear layer"),
            bn_inputs,
            bn_stats,
            params,
        })
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running estimates (momentum [`BN_MOMENTUM`], population variance).
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<Forward> {
        let out = self.forward(tape, x, Mode::Train)?;
        let mut stats = out.bn_stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let (m, v) = stats.next().expect("one stat pair per BN layer");
                blend(&mut bn.running_mean, tape.value(*m));
                blend(&mut bn.running_var, tape.value(*v));
            }
        }
        Ok(out)
    }

    /// Gradients of every parameter after `tape.backward`, in [`Model::params`] order.
    pub fn collect_grads(&self, tape: &Tape, out: &Forward) -> Vec<Vec<f32>> {
        out.params.iter().map(|&p| tape.grad_f32(p)).collect()
    }

    /// Inference-mode logits for `images` (`[n, c, h, w]`), in chunks of `batch`.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = *images
            .shape()
            .first()
            .ok_or_else(|| shape("predict on a scalar"))?;
        let k = self.spec.num_classes;
        let mut logits = Vec::with_capacity(n * k);
        let batch = batch.max(1);
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let chunk = images.slice_rows(start, len)?;
            let mut tape: Tape = Tape::new();
            let x = tape.constant(&chunk);
            let out = self.forward(&mut tape, x, Mode::Inference)?;
            logits.extend_from_slice(tape.value(out.logits));
            start += len;
        }
        Tensor::new(vec![n, k], logits)
    }

    /// Row-wise softmax of [`Model::predict`].
    pub fn predict_proba(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let mut logits = self.predict(images, batch)?;
        let k = self.spec.num_classes;
        for row in logits.data_mut().chunks_mut(k) {
            crate::tape::softmax_in_place(row);
        }
        Ok(logits)
    }

    /// Replaces the stored BN statistics, layer by layer.
    pub fn set_running_stats(&mut self, stats: &[(Vec<f32>, Vec<f32>)]) -> Result<()> {
        if stats.len() != self.num_bn_layers() {
            return Err(shape(format!(
                "{} stat pairs for {} BN layers",
                stats.len(),
                self.num_bn_layers()
            )));
        }
        let mut it = stats.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                let (m, v) = it.next().unwrap();
                if m.len() != bn.running_mean.numel() || v.len() != bn.running_var.numel() {
                    return Err(shape("running statistics width"));
                }
                bn.running_mean.data_mut().copy_from_slice(m);
                bn.running_var.data_mut().copy_from_slice(v);
            }
        }
        Ok(())
    }

    // ---- checkpoint format ----

    /// Header (magic, version, spec fields) followed by every parameter and
    /// BN running statistic as little-endian `f32`, in layer order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC).u32(CHECKPOINT_VERSION);
        for v in [
            s.depth,
            s.base_width,
            s.channels,
            s.height,
            s.width,
            s.num_classes,
        ] {
            w.len_u32(v);
        }
        w.f32(s.bn_epsilon);
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias } | Layer::Linear { weight, bias } => {
                    w.f32s(weight.data()).f32s(bias.data());
                }
                Layer::BatchNorm(bn) => {
                    w.f32s(bn.gamma.data())
                        .f32s(bn.beta.data())
                        .f32s(bn.running_mean.data())
                        .f32s(bn.running_var.data());
                }
                Layer::Relu | Layer::AvgPool => {}
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model checkpoint");
        let model = Self::read(&mut r)?;
        r.expect_end()?;
        Ok(model)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let spec = ConvNetSpec {
            depth: dims[0],
            base_width: dims[1],
            channels: dims[2],
            height: dims[3],
            width: dims[4],
            num_classes: dims[5],
            bn_epsilon: r.f32()?,
        };
        let mut model = Self::build(spec, 0)?;
        for layer in &mut model.layers {
            match layer {
                Layer::Conv { weight, bias } | Layer::Linear { weight, bias } => {
                    fill(weight, r)?;
                    fill(bias, r)?;
                }
                Layer::BatchNorm(bn) => {
                    fill(&mut bn.gamma, r)?;
                    fill(&mut bn.beta, r)?;
                    fill(&mut bn.running_mean, r)?;
                    fill(&mut bn.running_var, r)?;
                }
                Layer::Relu | Layer::AvgPool => {}
            }
        }
        Ok(model)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn hash(&self) -> String {
        codec::sha256_hex(&self.to_bytes())
    }
}

fn blend(running: &mut Tensor, batch: &[f32]) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

fn fill(t: &mut Tensor, r: &mut Reader<'_>) -> Result<()> {
    let v = r.f32s(t.numel())?;
    t.data_mut().copy_from_slice(&v);
    Ok(())
}
