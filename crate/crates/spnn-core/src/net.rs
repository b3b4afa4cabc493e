//! Minimal feedforward network engine in 64-bit floats: forward pass with
//! activation caching, exact reverse-mode layer gradients, Kaiming-normal
//! initialization (He et al. 2015), a bias-corrected Adam optimizer
//! (Kingma & Ba 2015), a multistep learning-rate schedule, per-variable
//! input normalization, and a versioned checkpoint format.
//!
//! Layers compute `x_l = sigma(W_l x_{l-1} + b_l)`. The only activations are
//! the rectifier (hidden layers) and the identity (output layer); the
//! rectifier subgradient at 0 is taken as 0.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::generic::GradientOperatorPair;
use crate::linalg::{axpy, Mat};

pub const CHECKPOINT_FORMAT: &str = "spnn-ckpt-1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"SPNNCKPT";

/// Floor applied to per-variable standard deviations so constant slots do
/// not divide by zero.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Rectifier,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat, // fan_out x fan_in
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// A multilayer perceptron. Invariants: consecutive layer dimensions chain,
/// and the last layer's activation is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self, Error> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::Dimension {
                    context: "Mlp::new: consecutive layer dimensions must chain",
                    expected: w[0].fan_out(),
                    got: w[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Dimension {
                    context: "Mlp::new: bias length",
                    expected: l.fan_out(),
                    got: l.bias.len(),
                });
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::InvalidConfig(
                "last layer activation must be the identity".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Standard architecture used throughout: `n_hidden` rectifier layers of
    /// width `hidden`, then a linear output layer, Kaiming-initialized.
    pub fn feedforward(
        n_in: usize,
        hidden: usize,
        n_hidden: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_hidden + 1);
        let mut fan_in = n_in;
        for _ in 0..n_hidden {
            let (weight, bias) = kaiming_init(fan_in, hidden, rng);
            layers.push(Layer {
                weight,
                bias,
                activation: Activation::Rectifier,
            });
            fan_in = hidden;
        }
        let (weight, bias) = kaiming_init(fan_in, n_out, rng);
        layers.push(Layer {
            weight,
            bias,
            activation: Activation::Identity,
        });
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Sum of squared weights (biases excluded); the L2 regularization term.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.data().iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), Error> {
        if x.len() != self.n_in() {
            return Err(Error::Dimension {
                context: "Mlp forward input",
                expected: self.n_in(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Plain forward pass (no cache); used by evaluation rollouts.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, Error> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.fan_out()];
            layer.weight.matvec_into(&cur, &mut pre);
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            if layer.activation == Activation::Rectifier {
                for p in pre.iter_mut() {
                    if *p < 0.0 {
                        *p = 0.0;
                    }
                }
            }
            cur = pre;
        }
        Ok(cur)
    }

    /// Forward pass recording the per-layer inputs and pre-activations
    /// needed by [`Mlp::backward`].
    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache), Error> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.fan_out()];
            layer.weight.matvec_into(&cur, &mut pre);
            for (p, b) in pre.iter_mut().zip(&layer.bias) {
                *p += b;
            }
            inputs.push(cur);
            let mut out = pre.clone();
            if layer.activation == Activation::Rectifier {
                for o in out.iter_mut() {
                    if *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
            preacts.push(pre);
            cur = out;
        }
        Ok((cur, MlpCache { inputs, preacts }))
    }

    /// Reverse-mode pass for one recorded forward call. `out_grad` is the
    /// gradient of the scalar loss with respect to the network output;
    /// parameter gradients are *accumulated* into `grads`. Returns the
    /// gradient with respect to the network input when `want_input_grad`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        out_grad: &[f64],
        grads: &mut MlpGradients,
        want_input_grad: bool,
    ) -> Result<Option<Vec<f64>>, Error> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidConfig(
                "forward cache does not match network depth".into(),
            ));
        }
        if out_grad.len() != self.n_out() {
            return Err(Error::Dimension {
                context: "Mlp backward output gradient",
                expected: self.n_out(),
                got: out_grad.len(),
            });
        }
        let mut g = out_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Rectifier {
                for (gi, pre) in g.iter_mut().zip(&cache.preacts[l]) {
                    // subgradient at exactly 0 is 0
                    if *pre <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            grads.layers[l].weight.add_outer(&g, &cache.inputs[l]);
            axpy(1.0, &g, &mut grads.layers[l].bias);
            if l > 0 || want_input_grad {
                let mut g_prev = vec![0.0; layer.fan_in()];
                layer.weight.matvec_transpose_into(&g, &mut g_prev);
                g = g_prev;
            }
        }
        Ok(if want_input_grad { Some(g) } else { None })
    }
}

/// Per-layer inputs and pre-activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl MlpCache {
    /// Input consumed by the recorded forward call.
    pub fn network_input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

/// Gradient buffers matching an [`Mlp`]'s parameter shapes.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl MlpGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGradient {
                    weight: Mat::zeros(l.fan_out(), l.fan_in()),
                    bias: vec![0.0; l.fan_out()],
                })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn add(&mut self, other: &MlpGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    /// Add the gradient of `lambda_r * sum w^2` (weights only).
    pub fn add_weight_decay(&mut self, net: &Mlp, lambda_r: f64) {
        for (g, l) in self.layers.iter_mut().zip(net.layers()) {
            for (gw, w) in g.weight.data_mut().iter_mut().zip(l.weight.data()) {
                *gw += 2.0 * lambda_r * w;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// Kaiming-normal initialization: weights ~ N(0, 2/fan_in), biases zero.
pub fn kaiming_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (Mat, Vec<f64>) {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.sample(normal)).collect();
    (
        Mat::from_row_major(fan_out, fan_in, data).expect("sized by construction"),
        vec![0.0; fan_out],
    )
}

/// Adam first/second moment state. Moments start at zero.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first_moment: MlpGradients,
    pub second_moment: MlpGradients,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(net: &Mlp) -> Self {
        Self {
            first_moment: MlpGradients::zeros_like(net),
            second_moment: MlpGradients::zeros_like(net),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Weight decay is *not* applied here; the
/// L2 penalty enters the loss explicitly and flows in through the gradients.
pub fn adam_step(net: &mut Mlp, grads: &MlpGradients, state: &mut OptimizerState, lr: f64) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);

    for (li, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[li];
        let m = &mut state.first_moment.layers[li];
        let v = &mut state.second_moment.layers[li];
        for ((w, gw), (mw, vw)) in layer
            .weight
            .data_mut()
            .iter_mut()
            .zip(g.weight.data())
            .zip(m.weight.data_mut().iter_mut().zip(v.weight.data_mut()))
        {
            *mw = b1 * *mw + (1.0 - b1) * gw;
            *vw = b2 * *vw + (1.0 - b2) * gw * gw;
            *w -= lr * (*mw / bc1) / ((*vw / bc2).sqrt() + eps);
        }
        for ((b, gb), (mb, vb)) in layer
            .bias
            .iter_mut()
            .zip(&g.bias)
            .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
        {
            *mb = b1 * *mb + (1.0 - b1) * gb;
            *vb = b2 * *vb + (1.0 - b2) * gb * gb;
            *b -= lr * (*mb / bc1) / ((*vb / bc2).sqrt() + eps);
        }
    }
}

/// Multistep schedule: `base_lr * gamma^(count of milestones <= epoch)`.
pub fn multistep_lr(epoch: usize, base_lr: f64, milestones: &[usize], gamma: f64) -> f64 {
    debug_assert!(milestones.windows(2).all(|w| w[0] < w[1]));
    let hits = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(hits as i32)
}

/// Reshape a flat network output of length `2 n^2` into the gradient
/// operator pair: the first `n^2` entries fill `A` row-major, the second
/// `n^2` fill `B` row-major.
pub fn reshape_to_operators(y: &[f64], n: usize) -> Result<GradientOperatorPair, Error> {
    if y.len() != 2 * n * n {
        return Err(Error::Dimension {
            context: "reshape_to_operators",
            expected: 2 * n * n,
            got: y.len(),
        });
    }
    let a = Mat::from_row_major(n, n, y[..n * n].to_vec())?;
    let b = Mat::from_row_major(n, n, y[n * n..].to_vec())?;
    GradientOperatorPair::new(a, b)
}

/// Inverse of [`reshape_to_operators`].
pub fn flatten_operators(grads: &GradientOperatorPair) -> Vec<f64> {
    let mut y = Vec::with_capacity(2 * grads.dim() * grads.dim());
    y.extend_from_slice(grads.a.data());
    y.extend_from_slice(grads.b.data());
    y
}

/// Per-variable mean and standard deviation of the training split, used to
/// scale network inputs. Standard deviations are floored at [`STD_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Identity scaling (mean 0, std 1); useful for tests.
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_into(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..z.len() {
            out[i] = (z[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn normalize(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.normalize_into(z, &mut out);
        out
    }

    pub fn denormalize(&self, z_tilde: &[f64]) -> Vec<f64> {
        z_tilde
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i] + self.mean[i])
            .collect()
    }
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: Mlp,
    pub stats: NormalizationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    /// System tag the model was trained on (`pendulum` / `couette`).
    pub system: String,
    /// Training mode (`spnn` / `unconstrained` / `blackbox`).
    pub mode: String,
    pub seed: u64,
    pub state_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    system: String,
    mode: String,
    seed: u64,
    state_dim: usize,
    layer_shapes: Vec<(usize, usize)>, // (fan_in, fan_out)
    activations: Vec<Activation>,
    payload_sha256: String,
}

/// Checkpoint file layout (`spnn-ckpt-1`):
///
/// ```text
/// bytes 0..8    magic "SPNNCKPT"
/// bytes 8..12   header length (u32 little-endian)
/// header        TOML: format, system, mode, seed, state_dim,
///               layer_shapes, activations, payload_sha256
/// payload       f64 little-endian: normalization mean (state_dim),
///               normalization std (state_dim), then per layer the weight
///               matrix row-major followed by the bias vector
/// ```
impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut payload = Vec::new();
        push_f64s(&mut payload, &self.stats.mean);
        push_f64s(&mut payload, &self.stats.std);
        for layer in self.net.layers() {
            push_f64s(&mut payload, layer.weight.data());
            push_f64s(&mut payload, &layer.bias);
        }
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            system: self.meta.system.clone(),
            mode: self.meta.mode.clone(),
            seed: self.meta.seed,
            state_dim: self.meta.state_dim,
            layer_shapes: self
                .net
                .layers()
                .iter()
                .map(|l| (l.fan_in(), l.fan_out()))
                .collect(),
            activations: self.net.layers().iter().map(|l| l.activation).collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header_toml =
            toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(header_toml.len() as u32).to_le_bytes())?;
        file.write_all(header_toml.as_bytes())?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = toml::from_str(
            std::str::from_utf8(&header_bytes)
                .map_err(|e| Error::Format(e.to_string()))?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_FORMAT.to_string(),
                got: header.format,
            });
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let actual = hex::encode(Sha256::digest(&payload));
        if actual != header.payload_sha256 {
            return Err(Error::ChecksumMismatch {
                name: path.display().to_string(),
                expected: header.payload_sha256,
                actual,
            });
        }
        let mut cursor = 0usize;
        let n = header.state_dim;
        let mean = read_f64s(&payload, &mut cursor, n)?;
        let std = read_f64s(&payload, &mut cursor, n)?;
        let mut layers = Vec::with_capacity(header.layer_shapes.len());
        for (shape, act) in header.layer_shapes.iter().zip(&header.activations) {
            let (fan_in, fan_out) = *shape;
            let w = read_f64s(&payload, &mut cursor, fan_in * fan_out)?;
            let b = read_f64s(&payload, &mut cursor, fan_out)?;
            layers.push(Layer {
                weight: Mat::from_row_major(fan_out, fan_in, w)?,
                bias: b,
                activation: *act,
            });
        }
        if cursor != payload.len() {
            return Err(Error::Format("checkpoint payload has trailing bytes".into()));
        }
        Ok(Self {
            meta: CheckpointMeta {
                format: header.format,
                system: header.system,
                mode: header.mode,
                seed: header.seed,
                state_dim: header.state_dim,
            },
            net: Mlp::new(layers)?,
            stats: NormalizationStats { mean, std },
        })
    }
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(buf: &[u8], cursor: &mut usize, count: usize) -> Result<Vec<f64>, Error> {
    let bytes = count * 8;
    if *cursor + bytes > buf.len() {
        return Err(Error::Format("checkpoint payload truncated".into()));
    }
    let out = buf[*cursor..*cursor + bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *cursor += bytes;
    Ok(out)
}
