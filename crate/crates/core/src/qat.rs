//! Toy quantization-aware training with straight-through gradients and
//! teacher-to-student distillation.
//!
//! Every quantized layer keeps full-precision shadow weights `W`. The forward
//! pass computes with `W_hat = dequantize(quantize(W))`, recomputed on each
//! call. The backward pass differentiates exactly with respect to `W_hat` and
//! hands that gradient to `W` unchanged (the quantizer's Jacobian is taken to
//! be the identity). Updates are plain gradient descent on the shadow weights.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{load_matrix, save_matrix};
use crate::r2q;
use crate::rtn::{dequantize_rtn, quantize_rtn};
use crate::sampling::{rng, WeightDist};
use crate::tensor::{GroupScheme, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `a`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "none",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::InvalidArgument(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    None,
    R2Q,
    Rtn { bits: u8 },
}

impl Quantizer {
    /// Fake-quantized copy of `w`.
    pub fn fake_quantize(self, w: &Matrix, scheme: GroupScheme) -> Result<Matrix> {
        match self {
            Quantizer::None => Ok(w.clone()),
            Quantizer::R2Q => Ok(r2q::dequantize(&r2q::quantize(w, scheme)?)),
            Quantizer::Rtn { bits } => Ok(dequantize_rtn(&quantize_rtn(w, scheme, bits)?)),
        }
    }
}

impl fmt::Display for Quantizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantizer::None => write!(f, "none"),
            Quantizer::R2Q => write!(f, "r2q"),
            Quantizer::Rtn { bits } => write!(f, "rtn-k{bits}"),
        }
    }
}

impl FromStr for Quantizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "fp" => Ok(Quantizer::None),
            other => match other.parse::<crate::analysis::Method>()? {
                crate::analysis::Method::R2Q => Ok(Quantizer::R2Q),
                crate::analysis::Method::Rtn { bits } => Ok(Quantizer::Rtn { bits }),
                crate::analysis::Method::OneBit => Err(Error::InvalidArgument(
                    "1-bit quantizer is not supported for training".into(),
                )),
            },
        }
    }
}

/// Fully connected layer, `y = act(x W^T + b)` with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub quantizer: Quantizer,
    pub scheme: GroupScheme,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn effective_weight(&self) -> Result<Matrix> {
        self.quantizer.fake_quantize(&self.weight, self.scheme)
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer, `batch x in`.
    pub inputs: Vec<Matrix>,
    /// Output of each layer after its activation, `batch x out`.
    pub outputs: Vec<Matrix>,
    /// The weights each layer actually computed with.
    pub effective_weights: Vec<Matrix>,
}

/// Gradients of one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// dL/dW_hat per layer.
    pub effective_weights: Vec<Matrix>,
    /// dL/dW per layer, as handed to the shadow weights.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// l2 norm over all shadow-weight gradients concatenated.
    pub fn weight_norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|m| m.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Straight-through estimator: the gradient with respect to the quantized
/// weights passes to the shadow weights as is.
#[inline]
pub fn straight_through(grad_effective: &Matrix) -> Matrix {
    grad_effective.clone()
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for ToyModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl ToyModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: {} biases for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} outputs {} but layer {i} takes {}",
                    i - 1,
                    layers[i - 1].out_dim(),
                    l.in_dim()
                )));
            }
            l.scheme.group_len(l.in_dim())?;
        }
        Ok(Self { layers, cache: None })
    }

    /// Random MLP: tanh on hidden layers, identity on the last. Weights are
    /// drawn from `dist` rescaled to variance `gain^2 / fan_in`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        dims: &[usize],
        dist: WeightDist,
        gain: f64,
        out_gain: f64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output dims".into()));
        }
        let unit = match dist {
            WeightDist::Gaussian => 1.0,
            WeightDist::Laplace => std::f64::consts::FRAC_1_SQRT_2,
            WeightDist::Uniform => 3f64.sqrt(),
            WeightDist::StudentT { dof } if dof > 2.0 => ((dof - 2.0) / dof).sqrt(),
            WeightDist::StudentT { .. } => 1.0,
        };
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let last = i + 1 == n;
                let g = if last { out_gain } else { gain };
                let std = g * unit / (fan_in as f64).sqrt();
                Layer {
                    weight: Matrix::from_raw(fan_out, fan_in, dist.sample_vec(rng, fan_in * fan_out, std)),
                    bias: vec![0.0; fan_out],
                    activation: if last { Activation::Identity } else { Activation::Tanh },
                    quantizer: Quantizer::None,
                    scheme: GroupScheme::PerChannel,
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Set the quantizer and scheme of every layer.
    pub fn set_quantization(&mut self, quantizer: Quantizer, scheme: GroupScheme) -> Result<()> {
        for l in &self.layers {
            scheme.group_len(l.in_dim())?;
        }
        for l in &mut self.layers {
            l.quantizer = quantizer;
            l.scheme = scheme;
        }
        self.cache = None;
        Ok(())
    }

    /// Forward pass with explicitly supplied weights in place of the layers'
    /// own. No caching.
    pub fn forward_with_weights(&self, x: &Matrix, weights: &[Matrix]) -> Result<Matrix> {
        let mut h = x.clone();
        for (l, w) in self.layers.iter().zip(weights) {
            h = layer_forward(&h, w, &l.bias, l.activation)?;
        }
        Ok(h)
    }

    /// Full-precision forward, ignoring quantizers.
    pub fn forward_plain(&self, x: &Matrix) -> Result<Matrix> {
        let ws: Vec<Matrix> = self.layers.iter().map(|l| l.weight.clone()).collect();
        self.forward_with_weights(x, &ws)
    }

    /// Fake-quantized forward. Caches what [`ToyModel::backward_ste`] needs.
    pub fn forward_quantized(&mut self, x: &Matrix) -> Result<Matrix> {
        self.cache = None;
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model takes {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let w_hat = l.effective_weight()?;
            let out = layer_forward(&h, &w_hat, &l.bias, l.activation)?;
            inputs.push(h);
            effective.push(w_hat);
            h = out.clone();
            outputs.push(out);
        }
        self.cache = Some(ForwardCache {
            inputs,
            outputs,
            effective_weights: effective,
        });
        Ok(h)
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    /// Backpropagate `grad_out` (dL/d output) through the cached forward pass.
    /// Consumes the cache.
    pub fn backward_ste(&mut self, grad_out: &Matrix) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::MissingForwardCache)?;
        let last = cache.outputs.last().expect("non-empty model");
        if grad_out.shape() != last.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?} vs output {:?}",
                grad_out.shape(),
                last.shape()
            )));
        }
        let n = self.layers.len();
        let mut eff_grads = vec![Matrix::zeros(0, 0); n];
        let mut bias_grads = vec![Vec::new(); n];
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let out = &cache.outputs[i];
            let input = &cache.inputs[i];
            let w_hat = &cache.effective_weights[i];
            let (batch, od, id) = (out.rows(), l.out_dim(), l.in_dim());

            let mut dz = g;
            for (d, a) in dz.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= l.activation.derivative_from_output(*a);
            }

            // dW_hat = dz^T x, accumulated over the batch in order
            let mut dw = Matrix::zeros(od, id);
            let mut db = vec![0.0; od];
            for b in 0..batch {
                let dzr = dz.row(b);
                let xr = input.row(b);
                for o in 0..od {
                    let d = dzr[o];
                    db[o] += d;
                    for (w, x) in dw.row_mut(o).iter_mut().zip(xr) {
                        *w += d * x;
                    }
                }
            }

            if i > 0 {
                // dX = dz W_hat
                let mut dx = Matrix::zeros(batch, id);
                for b in 0..batch {
                    let dzr = dz.row(b);
                    let dxr = dx.row_mut(b);
                    for (o, &d) in dzr.iter().enumerate() {
                        for (v, w) in dxr.iter_mut().zip(w_hat.row(o)) {
                            *v += d * w;
                        }
                    }
                }
                g = dx;
            } else {
                g = Matrix::zeros(0, 0);
            }
            eff_grads[i] = dw;
            bias_grads[i] = db;
        }
        let weights = eff_grads.iter().map(straight_through).collect();
        Ok(Gradients {
            effective_weights: eff_grads,
            weights,
            biases: bias_grads,
        })
    }

    /// Plain gradient-descent step on shadow weights and biases.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.weights.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("gradient count".into()));
        }
        for ((l, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            if gw.shape() != l.weight.shape() || gb.len() != l.bias.len() {
                return Err(Error::ShapeMismatch("gradient shape".into()));
            }
            for (w, g) in l.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= lr * g;
            }
            for (b, g) in l.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Write one matrix file per weight and bias plus a `manifest.txt` of
    /// `key=value` lines.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = format!("layers={}\n", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let wf = format!("layer{i}.weight.r2qm");
            let bf = format!("layer{i}.bias.r2qm");
            save_matrix(dir.join(&wf), &l.weight)?;
            save_matrix(dir.join(&bf), &Matrix::from_raw(1, l.bias.len(), l.bias.clone()))?;
            manifest.push_str(&format!(
                "layer{i}.weight={wf}\nlayer{i}.bias={bf}\nlayer{i}.activation={}\nlayer{i}.quantizer={}\nlayer{i}.group_size={}\n",
                l.activation,
                l.quantizer,
                l.scheme.to_signed()
            ));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut kv = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "expected key=value".into(),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("manifest lacks '{k}'")))
        };
        let n: usize = get("layers")?
            .parse()
            .map_err(|_| Error::Format("bad layer count".into()))?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let weight = load_matrix(dir.join(get(&format!("layer{i}.weight"))?))?;
            let bias = load_matrix(dir.join(get(&format!("layer{i}.bias"))?))?.into_vec();
            let gs: i64 = get(&format!("layer{i}.group_size"))?
                .parse()
                .map_err(|_| Error::Format("bad group size".into()))?;
            layers.push(Layer {
                weight,
                bias,
                activation: get(&format!("layer{i}.activation"))?.parse()?,
                quantizer: get(&format!("layer{i}.quantizer"))?.parse()?,
                scheme: GroupScheme::from_signed(gs)?,
            });
        }
        Self::new(layers)
    }
}

fn layer_forward(x: &Matrix, w: &Matrix, bias: &[f64], act: Activation) -> Result<Matrix> {
    if x.cols() != w.cols() || bias.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} against weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for b in 0..x.rows() {
        let xr = x.row(b);
        for (o, slot) in out.row_mut(b).iter_mut().enumerate() {
            let mut acc = bias[o];
            for (a, c) in xr.iter().zip(w.row(o)) {
                acc += a * c;
            }
            *slot = act.apply(acc);
        }
    }
    Ok(out)
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(teacher) || softmax(student))` averaged over the batch, with
/// its gradient with respect to the student logits.
pub fn kd_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let batch = student.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for b in 0..student.rows() {
        let ls = log_softmax_row(student.row(b));
        let lt = log_softmax_row(teacher.row(b));
        let g = grad.row_mut(b);
        for c in 0..ls.len() {
            let pt = lt[c].exp();
            if pt > 0.0 {
                loss += pt * (lt[c] - ls[c]);
            }
            g[c] = (ls[c].exp() - pt) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Mean over the batch of the squared logit distance, with gradient.
pub fn squared_error_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let batch = student.rows().max(1) as f64;
    let mut loss = 0.0;
    let data = student
        .as_slice()
        .iter()
        .zip(teacher.as_slice())
        .map(|(s, t)| {
            let d = s - t;
            loss += d * d;
            2.0 * d / batch
        })
        .collect();
    Ok((loss / batch, Matrix::from_raw(student.rows(), student.cols(), data)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Kl,
    SquaredError,
}

impl LossKind {
    pub fn evaluate(self, student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
        match self {
            LossKind::Kl => kd_loss(student, teacher),
            LossKind::SquaredError => squared_error_loss(student, teacher),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(LossKind::Kl),
            "mse" | "squared" | "squared-error" => Ok(LossKind::SquaredError),
            _ => Err(Error::InvalidArgument(format!("unknown loss '{s}'"))),
        }
    }
}

/// Teacher architecture used by [`generate_toy_data`]: `dim -> 64 -> 64 -> 10`.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];
pub const DEFAULT_CLASSES: usize = 10;
/// Teacher weights are Laplace distributed (heavily centred).
pub const TEACHER_DIST: WeightDist = WeightDist::Laplace;
pub const TEACHER_GAIN: f64 = 1.5;
pub const TEACHER_OUT_GAIN: f64 = 4.0;

// Offsets separating the seed's independent random streams.
const TEACHER_STREAM: u64 = 0x7EAC_0000;
const DATA_STREAM: u64 = 0xDA7A_0000;
const STUDENT_STREAM: u64 = 0x57D0_0000;

/// Fixed random teacher over the given dimensions.
pub fn make_teacher(seed: u64, dims: &[usize]) -> Result<ToyModel> {
    let mut r = rng(seed ^ TEACHER_STREAM);
    ToyModel::random(&mut r, dims, TEACHER_DIST, TEACHER_GAIN, TEACHER_OUT_GAIN)
}

fn teacher_dims(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(classes);
    dims
}

/// Teacher-labelled synthetic data.
#[derive(Clone, Debug)]
pub struct ToyData {
    pub inputs: Matrix,
    pub teacher: ToyModel,
    pub teacher_logits: Matrix,
}

/// `n` Gaussian inputs of width `dim` and the logits a fixed random teacher
/// assigns to them.
pub fn generate_toy_data(seed: u64, n: usize, dim: usize) -> Result<ToyData> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    let teacher = make_teacher(seed, &teacher_dims(dim, &DEFAULT_HIDDEN, DEFAULT_CLASSES))?;
    let mut r = rng(seed ^ DATA_STREAM);
    let inputs = Matrix::from_raw(n, dim, WeightDist::Gaussian.sample_vec(&mut r, n * dim, 1.0));
    let teacher_logits = teacher.forward_plain(&inputs)?;
    Ok(ToyData {
        inputs,
        teacher,
        teacher_logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentInit {
    /// Start from the teacher's weights, as when quantizing a trained model.
    FromTeacher,
    /// Independent random weights.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataMode {
    /// Draw a fresh batch every step.
    Resample,
    /// Draw one batch and reuse it.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub quantizer: Quantizer,
    pub scheme: GroupScheme,
    pub loss: LossKind,
    pub input_dist: WeightDist,
    pub data: DataMode,
    pub init: StudentInit,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            learning_rate: 0.05,
            seed: 0,
            quantizer: Quantizer::R2Q,
            scheme: GroupScheme::PerChannel,
            loss: LossKind::Kl,
            input_dist: WeightDist::Gaussian,
            data: DataMode::Resample,
            init: StudentInit::FromTeacher,
            input_dim: 16,
            hidden: DEFAULT_HIDDEN.to_vec(),
            classes: DEFAULT_CLASSES,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.input_dim == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument("counts must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTrace {
    pub steps: Vec<StepMetrics>,
}

impl MetricsTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.loss)
    }

    /// Mean loss over the last 5% of steps (at least one).
    pub fn final_loss(&self) -> f64 {
        let n = self.steps.len();
        let w = (n / 20).max(1).min(n);
        self.steps[n - w..].iter().map(|s| s.loss).sum::<f64>() / w as f64
    }

    /// Population standard deviation of the gradient norm from step `from` on.
    pub fn grad_norm_std(&self, from: usize) -> f64 {
        let v: Vec<f64> = self.steps.iter().skip(from).map(|s| s.grad_norm).collect();
        if v.is_empty() {
            return 0.0;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,grad_norm")?;
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(w, "{},{:e},{:e}", i, s.loss, s.grad_norm)?;
        }
        Ok(())
    }
}

/// Run distillation and return the trace together with the trained student.
pub fn train_model(cfg: &TrainConfig) -> Result<(MetricsTrace, ToyModel)> {
    cfg.validate()?;
    let dims = teacher_dims(cfg.input_dim, &cfg.hidden, cfg.classes);
    let teacher = make_teacher(cfg.seed, &dims)?;
    let mut student = match cfg.init {
        StudentInit::FromTeacher => teacher.clone(),
        StudentInit::Random => {
            let mut r = rng(cfg.seed ^ STUDENT_STREAM);
            ToyModel::random(&mut r, &dims, WeightDist::Gaussian, 1.0, 1.0)?
        }
    };
    student.set_quantization(cfg.quantizer, cfg.scheme)?;

    let mut data_rng = rng(cfg.seed ^ DATA_STREAM);
    let mut draw = || {
        Matrix::from_raw(
            cfg.batch_size,
            cfg.input_dim,
            cfg.input_dist
                .sample_vec(&mut data_rng, cfg.batch_size * cfg.input_dim, 1.0),
        )
    };
    let mut fixed = None;
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = match cfg.data {
            DataMode::Resample => draw(),
            DataMode::Fixed => fixed.get_or_insert_with(&mut draw).clone(),
        };
        let target = teacher.forward_plain(&x)?;
        let out = student.forward_quantized(&x)?;
        let (loss, grad) = cfg.loss.evaluate(&out, &target)?;
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected { step, loss });
        }
        let grads = student.backward_ste(&grad)?;
        let grad_norm = grads.weight_norm();
        if !grad_norm.is_finite() {
            return Err(Error::DivergenceDetected { step, loss: grad_norm });
        }
        steps.push(StepMetrics { loss, grad_norm });
        student.apply_gradients(&grads, cfg.learning_rate)?;
    }
    Ok((MetricsTrace { steps }, student))
}

pub fn train(cfg: &TrainConfig) -> Result<MetricsTrace> {
    train_model(cfg).map(|(t, _)| t)
}
