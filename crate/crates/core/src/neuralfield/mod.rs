//! The neural vector field `z' = f(z)`: a dense feed-forward network whose
//! layers compute `z^i = phi_i(W_i z^{i-1} + b_i)`, with the output layer
//! always linear.

mod grad;
mod train;

pub use grad::{loss_and_gradient, window_loss, LossAndGradient};
pub use train::{dataset_loss, train, train_with_history, TrainConfig, TrainReport, TrainableMask};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matkit::DenseMatrix;
use crate::simkit::{integrate_steps, Trajectory};

/// Model file format version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Scalar activation applied elementwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `max(a v, v)` with `a > 0`.
    LeakyRelu { a: f64 },
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::LeakyRelu { a } if !(*a > 0.0) || !a.is_finite() => Err(Error::contract(
                format!("leaky ReLU slope must be positive, got {a}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu { a } => {
                if a * v > v {
                    a * v
                } else {
                    v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Activation::Identity => v,
        }
    }

    /// Derivative; at the kink of piecewise-linear activations this takes
    /// the slope of the `v > 0` branch.
    #[inline]
    pub fn derivative(&self, v: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { a } => {
                if a * v > v {
                    a
                } else {
                    1.0
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    /// Slope bounds `(alpha, beta)`: every difference quotient of the
    /// activation lies in `[alpha, beta]`.
    pub fn slope_bounds(&self) -> (f64, f64) {
        match *self {
            Activation::Relu | Activation::Tanh | Activation::Sigmoid => (0.0, 1.0),
            Activation::LeakyRelu { a } => (a.min(1.0), a.max(1.0)),
            Activation::Identity => (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Feed-forward network with `n_0 = n_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `z^0 .. z^l`.
    pub activations: Vec<Vec<f64>>,
    /// `v_1 .. v_l`.
    pub preactivations: Vec<Vec<f64>>,
}

impl Mlp {
    /// Validates dimension chaining, finiteness and the identity output layer.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            l.activation.validate()?;
            if l.bias.len() != l.weight.rows() {
                return Err(Error::contract(format!(
                    "layer {}: bias length {} vs {} rows",
                    i + 1,
                    l.bias.len(),
                    l.weight.rows()
                )));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::contract(format!(
                    "layer {} expects input {} but previous layer outputs {}",
                    i + 1,
                    l.weight.cols(),
                    layers[i - 1].weight.rows()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::data(format!("layer {} has non-finite parameters", i + 1)));
            }
        }
        let n0 = layers[0].weight.cols();
        let nl = layers.last().unwrap().weight.rows();
        if n0 != nl {
            return Err(Error::contract(format!(
                "vector field must map R^{n0} to itself, got output {nl}"
            )));
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::contract("output layer activation must be identity"));
        }
        Ok(Self { layers })
    }

    /// Random network with uniform fan-in initialization `U(-1/sqrt(n), 1/sqrt(n))`
    /// for weights and biases. The output layer is linear.
    pub fn random(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::contract(format!("invalid layer dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nl = dims.len() - 1;
        let layers = (0..nl)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = DenseMatrix::from_fn(fan_out, fan_in, |_, _| {
                    rng.random_range(-bound..bound)
                });
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let activation = if i + 1 == nl { Activation::Identity } else { hidden };
                Layer {
                    weight,
                    bias,
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `n_0 .. n_l`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.cols()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn weights(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.layers.iter().map(|l| &l.weight)
    }

    /// Replaces all weight matrices, keeping biases and activations.
    pub fn with_weights(&self, weights: Vec<DenseMatrix>) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(Error::contract("weight count does not match layer count"));
        }
        let mut layers = self.layers.clone();
        for (l, w) in layers.iter_mut().zip(weights) {
            if w.shape() != l.weight.shape() {
                return Err(Error::contract("weight shape mismatch"));
            }
            l.weight = w;
        }
        Self::from_layers(layers)
    }

    pub fn with_biases(&self, biases: Vec<Vec<f64>>) -> Result<Self> {
        if biases.len() != self.layers.len() {
            return Err(Error::contract("bias count does not match layer count"));
        }
        let mut layers = self.layers.clone();
        for (l, b) in layers.iter_mut().zip(biases) {
            l.bias = b;
        }
        Self::from_layers(layers)
    }

    /// Total number of weights and biases.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, each layer as `W` (row-major) then `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// `true` at positions of [`Mlp::params`] that hold weights.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.weight.as_slice().len()));
            out.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
    }

    /// Evaluates the network. Fails on dimension mismatch or non-finite input.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::contract(format!(
                "input has length {}, network expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite network input"));
        }
        Ok(self.eval(z))
    }

    /// Unchecked forward pass.
    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut cur = z.to_vec();
        for l in &self.layers {
            let mut v = l.weight.mat_vec(&cur);
            for (vi, bi) in v.iter_mut().zip(&l.bias) {
                *vi = l.activation.apply(*vi + bi);
            }
            cur = v;
        }
        cur
    }

    pub fn forward_cached(&self, z: &[f64]) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut preactivations = Vec::with_capacity(self.layers.len());
        activations.push(z.to_vec());
        for l in &self.layers {
            let mut v = l.weight.mat_vec(activations.last().unwrap());
            for (vi, bi) in v.iter_mut().zip(&l.bias) {
                *vi += bi;
            }
            let a = v.iter().map(|x| l.activation.apply(*x)).collect();
            preactivations.push(v);
            activations.push(a);
        }
        ForwardCache {
            activations,
            preactivations,
        }
    }

    /// Vector-Jacobian product at a cached point: accumulates
    /// `d(out_bar . f)/d theta` into `param_grad` (layout of [`Mlp::params`])
    /// and returns `d(out_bar . f)/dz`.
    pub fn vjp(&self, cache: &ForwardCache, out_bar: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        let offsets = self.param_offsets();
        let mut zbar = out_bar.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let v = &cache.preactivations[i];
            let zin = &cache.activations[i];
            let vbar: Vec<f64> = zbar
                .iter()
                .zip(v)
                .map(|(g, vi)| g * l.activation.derivative(*vi))
                .collect();
            let (rows, cols) = l.weight.shape();
            let off = offsets[i];
            for r in 0..rows {
                let g = vbar[r];
                if g == 0.0 {
                    continue;
                }
                let dst = &mut param_grad[off + r * cols..off + (r + 1) * cols];
                for (d, x) in dst.iter_mut().zip(zin) {
                    *d += g * x;
                }
            }
            let boff = off + rows * cols;
            for (d, g) in param_grad[boff..boff + rows].iter_mut().zip(&vbar) {
                *d += g;
            }
            zbar = l.weight.t_mat_vec(&vbar);
        }
        zbar
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offs.push(off);
            off += l.weight.as_slice().len() + l.bias.len();
        }
        offs
    }

    pub fn to_model_file(&self, config_digest: Option<String>) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            layer_dims: self.layer_dims(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    activation: l.activation,
                    weights: l.weight.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
            config_digest,
        }
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema {
                expected: MODEL_FORMAT_VERSION,
                found: file.format_version,
            });
        }
        let dims = &file.layer_dims;
        if dims.len() != file.layers.len() + 1 {
            return Err(Error::data("layer_dims does not match the number of layers"));
        }
        let layers = file
            .layers
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                Ok(Layer {
                    weight: DenseMatrix::from_row_major(dims[i + 1], dims[i], rec.weights.clone())?,
                    bias: rec.bias.clone(),
                    activation: rec.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// Writes the model JSON and returns its SHA-256 digest.
    pub fn save(&self, path: &Path, config_digest: Option<String>) -> Result<String> {
        let text = serde_json::to_string_pretty(&self.to_model_file(config_digest))?;
        std::fs::write(path, &text)?;
        Ok(crate::digest_bytes(text.as_bytes()))
    }

    /// Loads a model file; returns the network, the file digest and the
    /// embedded config digest.
    pub fn load(path: &Path) -> Result<(Self, String, Option<String>)> {
        let bytes = std::fs::read(path)?;
        let file: ModelFile = serde_json::from_slice(&bytes)?;
        let net = Self::from_model_file(&file)?;
        Ok((net, crate::digest_bytes(&bytes), file.config_digest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub activation: Activation,
    /// Row-major `n_i x n_{i-1}`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// On-disk model representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Integrates the network field with RK4 for `steps` steps from `z0`.
pub fn rollout(net: &Mlp, z0: &[f64], steps: usize, dt: f64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::contract("rollout needs at least one step"));
    }
    net.forward(z0)?;
    integrate_steps(|_, z| net.eval(z), z0, 0.0, steps, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(w: f64, b: f64, act: Activation) -> Layer {
        Layer {
            weight: DenseMatrix::from_row_major(1, 1, vec![w]).unwrap(),
            bias: vec![b],
            activation: act,
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = Mlp::random(&[3, 5, 3], Activation::Relu, 1).unwrap();
        let zeros = vec![0.0; net.num_params()];
        net.set_params(&zeros);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_identity_layer_is_affine() {
        let w = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap();
        let net = Mlp::from_layers(vec![Layer {
            weight: w,
            bias: vec![0.1, -0.2],
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(net.forward(&[2.0, 4.0]).unwrap(), vec![2.0 + 8.0 + 0.1, -1.0 + 1.0 - 0.2]);
    }

    #[test]
    fn tanh_hidden_example() {
        let net = Mlp::from_layers(vec![
            scalar_layer(1.0, 0.0, Activation::Tanh),
            scalar_layer(2.0, 0.5, Activation::Identity),
        ])
        .unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn invalid_networks_rejected() {
        let err = Mlp::from_layers(vec![scalar_layer(1.0, 0.0, Activation::Tanh)]);
        assert!(matches!(err, Err(Error::Contract(_))));
        let net = Mlp::random(&[2, 3, 2], Activation::Tanh, 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Contract(_))));
        assert!(Mlp::random(&[2, 3, 4], Activation::Tanh, 0).is_err());
        assert!(Mlp::random(&[2, 3, 2], Activation::LeakyRelu { a: -0.1 }, 0).is_err());
    }

    #[test]
    fn rollout_constant_and_linear() {
        let mut net = Mlp::random(&[2, 4, 2], Activation::Tanh, 3).unwrap();
        net.set_params(&vec![0.0; net.num_params()]);
        let t = rollout(&net, &[0.3, -0.4], 10, 0.1).unwrap();
        assert!(t.samples.iter().all(|s| s == &vec![0.3, -0.4]));

        let drift = Mlp::from_layers(vec![Layer {
            weight: DenseMatrix::zeros(2, 2),
            bias: vec![1.0, -2.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let t = rollout(&drift, &[0.0, 1.0], 100, 0.01).unwrap();
        assert!((t.last()[0] - 1.0).abs() < 1e-12);
        assert!((t.last()[1] + 1.0).abs() < 1e-12);

        let decay = Mlp::from_layers(vec![scalar_layer(-1.0, 0.0, Activation::Identity)]).unwrap();
        let t = rollout(&decay, &[1.0], 1000, 1e-3).unwrap();
        assert!((t.last()[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rollout_prefix_consistency() {
        let net = Mlp::random(&[3, 6, 3], Activation::LeakyRelu { a: 0.2 }, 8).unwrap();
        let long = rollout(&net, &[0.1, 0.2, -0.3], 40, 0.01).unwrap();
        let short = rollout(&net, &[0.1, 0.2, -0.3], 17, 0.01).unwrap();
        assert_eq!(&long.samples[..18], &short.samples[..]);
    }

    #[test]
    fn model_file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let net = Mlp::random(&[4, 16, 4], Activation::LeakyRelu { a: 0.2 }, 11).unwrap();
        let digest = net.save(&path, Some("abc".into())).unwrap();
        let (back, d2, cfg) = Mlp::load(&path).unwrap();
        assert_eq!(digest, d2);
        assert_eq!(cfg.as_deref(), Some("abc"));
        let a: Vec<u64> = net.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.layers()[0].activation, Activation::LeakyRelu { a: 0.2 });
    }

    #[test]
    fn model_file_version_checked() {
        let net = Mlp::random(&[2, 2], Activation::Identity, 0).unwrap();
        let mut f = net.to_model_file(None);
        f.format_version = 99;
        assert!(matches!(Mlp::from_model_file(&f), Err(Error::Schema { .. })));
    }
}
