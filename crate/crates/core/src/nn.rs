//! Small fully-connected networks with hand-written reverse-mode gradients.
//!
//! Everything here operates on row-major mini-batches: an input of shape
//! `(batch, in_dim)` produces an output of shape `(batch, out_dim)`. Hidden
//! layers use a leaky rectifier; the output layer is either linear or a
//! logistic sigmoid.
//!
//! A [`Tape`] records the activations of one forward pass and is stamped with
//! the network's revision counter, so a tape taken before a parameter update
//! cannot be replayed against the updated weights.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

impl OutputActivation {
    fn tag(self) -> u8 {
        match self {
            OutputActivation::Identity => 0,
            OutputActivation::Sigmoid => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(OutputActivation::Identity),
            1 => Some(OutputActivation::Sigmoid),
            _ => None,
        }
    }
}

/// Weights are stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    leaky_slope: f64,
    output: OutputActivation,
    seed: u64,
    revision: u64,
}

impl PartialEq for Mlp {
    /// Revision counters are bookkeeping and do not take part in equality.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.layers == other.layers
            && self.leaky_slope.to_bits() == other.leaky_slope.to_bits()
            && self.output == other.output
            && self.seed == other.seed
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    revision: u64,
    dims: Vec<usize>,
    /// Input fed into each layer; `inputs[0]` is the network input and
    /// `inputs[i + 1]` the activation of hidden layer `i`.
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

/// Parameter gradients, laid out exactly like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Layer::param_count).sum());
    for layer in layers {
        out.extend(layer.weights.iter().copied());
        out.extend(layer.bias.iter().copied());
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    /// Builds a network with parameters drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new(
        dims: &[usize],
        leaky_slope: f64,
        output: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(dims)?;
        if !(0.0..1.0).contains(&leaky_slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope {leaky_slope} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bound..=bound));
                Layer { weights, bias }
            })
            .collect();
        Ok(Mlp {
            dims: dims.to_vec(),
            layers,
            leaky_slope,
            output,
            seed,
            revision: 0,
        })
    }

    /// Builds a network from explicit layers. Consecutive layers must chain.
    pub fn from_layers(
        layers: Vec<Layer>,
        leaky_slope: f64,
        output: OutputActivation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].weights.ncols()];
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weights.dim();
            if inp != *dims.last().unwrap() || layer.bias.len() != out {
                return Err(Error::Shape(format!(
                    "layer {i} has weights {out}x{inp} and bias {} after width {}",
                    layer.bias.len(),
                    dims.last().unwrap()
                )));
            }
            dims.push(out);
        }
        validate_dims(&dims)?;
        let net = Mlp {
            dims,
            layers,
            leaky_slope,
            output,
            seed: 0,
            revision: 0,
        };
        if !net.params_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        self.revision += 1;
        Ok(())
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.dims == other.dims
            && self.output == other.output
            && self.leaky_slope.to_bits() == other.leaky_slope.to_bits()
    }

    /// Batched forward pass that also records a tape for [`Mlp::backward`].
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weights.t()) + &layer.bias;
            self.activate(i, &mut z);
            inputs.push(act);
            act = z;
        }
        let tape = Tape {
            revision: self.revision,
            dims: self.dims.clone(),
            inputs,
            output: act.clone(),
        };
        Ok((act, tape))
    }

    /// Batched forward pass without recording activations.
    pub fn infer_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut act = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weights.t()) + &layer.bias;
            self.activate(i, &mut z);
            act = z;
        }
        Ok(act)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.infer_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Back-propagates `output_gradient` (dLoss/dOutput, shaped like the
    /// output) through the recorded pass. Returns parameter gradients and the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        tape: &Tape,
        output_gradient: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let (grads, input_grad) = self.backprop(tape, output_gradient, true)?;
        Ok((Gradients { layers: grads }, input_grad))
    }

    /// Gradient with respect to the network input only; skips the parameter
    /// gradients.
    pub fn input_gradient(
        &self,
        tape: &Tape,
        output_gradient: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.backprop(tape, output_gradient, false)?.1)
    }

    fn backprop(
        &self,
        tape: &Tape,
        output_gradient: ArrayView2<f64>,
        with_params: bool,
    ) -> Result<(Vec<Layer>, Array2<f64>)> {
        if tape.revision != self.revision || tape.dims != self.dims {
            return Err(Error::StaleTape(format!(
                "tape recorded at revision {} for dims {:?}, network at revision {} with dims {:?}",
                tape.revision, tape.dims, self.revision, self.dims
            )));
        }
        if output_gradient.dim() != tape.output.dim() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                output_gradient.dim(),
                tape.output.dim()
            )));
        }
        let n = self.layers.len();
        let mut grads: Vec<Layer> = Vec::with_capacity(n);
        let mut delta = output_gradient.to_owned();
        for i in (0..n).rev() {
            // delta becomes dLoss/d(pre-activation) of layer i
            if i == n - 1 {
                if self.output == OutputActivation::Sigmoid {
                    Zip::from(&mut delta)
                        .and(&tape.output)
                        .for_each(|d, &s| *d *= s * (1.0 - s));
                }
            } else {
                // With slope >= 0 the activation has the sign of its input.
                let slope = self.leaky_slope;
                Zip::from(&mut delta).and(&tape.inputs[i + 1]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d *= slope;
                    }
                });
            }
            if with_params {
                let weights = delta.t().dot(&tape.inputs[i]);
                let bias = delta.sum_axis(Axis(0));
                grads.push(Layer { weights, bias });
            }
            delta = delta.dot(&self.layers[i].weights);
        }
        grads.reverse();
        Ok((grads, delta))
    }

    fn activate(&self, layer: usize, z: &mut Array2<f64>) {
        if layer + 1 == self.layers.len() {
            if self.output == OutputActivation::Sigmoid {
                z.mapv_inplace(sigmoid);
            }
        } else {
            let slope = self.leaky_slope;
            z.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
        }
    }

    fn check_input(&self, input: ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.dims[0] {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                input.ncols(),
                self.dims[0]
            )));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Layer>,
    second: Vec<Layer>,
    step: u64,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `net` in place.
pub fn adam_step(net: &mut Mlp, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let shapes_match = |layers: &[Layer]| {
        layers.len() == net.layers.len()
            && layers.iter().zip(&net.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.bias.dim() == b.bias.dim()
            })
    };
    if !shapes_match(&grads.layers) || !shapes_match(&state.first) {
        return Err(Error::Shape(
            "gradient or optimizer state does not match network".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, g), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        Zip::from(&mut layer.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(update);
    }
    net.revision += 1;
    Ok(())
}

/// Polyak averaging: `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    if !target.same_architecture(online) {
        return Err(Error::Shape(format!(
            "target {:?} and online {:?} differ in architecture",
            target.dims, online.dims
        )));
    }
    if tau == 0.0 {
        return Ok(());
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        if tau == 1.0 {
            t.weights.assign(&o.weights);
            t.bias.assign(&o.bias);
        } else {
            Zip::from(&mut t.weights)
                .and(&o.weights)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.bias)
                .and(&o.bias)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
    }
    target.revision += 1;
    Ok(())
}

// Checkpoint layout (all integers and reals little-endian):
//   magic "DSMLPCKP" | version u32 | seed u64 | n_dims u32 | dims u32 * n_dims
//   | hidden tag u8 (1 = leaky relu) | slope f64 | output tag u8
//   | n_params u64 | params f64 * n_params (per layer: weights row-major, then bias)
//   | sha256 of everything above (32 bytes)
const MLP_MAGIC: &[u8; 8] = b"DSMLPCKP";
const MLP_VERSION: u32 = 1;
const HIDDEN_LEAKY_RELU: u8 = 1;

impl Mlp {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + 8 * self.param_count());
        buf.extend_from_slice(MLP_MAGIC);
        buf.extend_from_slice(&MLP_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(HIDDEN_LEAKY_RELU);
        buf.extend_from_slice(&self.leaky_slope.to_le_bytes());
        buf.push(self.output.tag());
        let params = self.params_flat();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 32 {
            return Err("truncated checkpoint".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = ByteReader::new(body);
        if r.take(8)? != MLP_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != MLP_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let seed = r.u64()?;
        let n_dims = r.u32()? as usize;
        if n_dims > 64 {
            return Err(format!("implausible layer count {n_dims}"));
        }
        let dims = (0..n_dims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        validate_dims(&dims).map_err(|e| e.to_string())?;
        if r.u8()? != HIDDEN_LEAKY_RELU {
            return Err("unknown hidden activation".into());
        }
        let slope = r.f64()?;
        let output = OutputActivation::from_tag(r.u8()?).ok_or("unknown output activation")?;
        let n_params = r.u64()? as usize;
        let mut net = Mlp::new(&dims, slope, output, seed).map_err(|e| e.to_string())?;
        if n_params != net.param_count() {
            return Err(format!(
                "parameter count {n_params} does not match dims {dims:?}"
            ));
        }
        let params = (0..n_params)
            .map(|_| r.f64())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err("non-finite parameter".into());
        }
        net.set_params_flat(&params).map_err(|e| e.to_string())?;
        net.revision = 0;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Mlp::from_checkpoint_bytes(&bytes).map_err(|reason| Error::checkpoint(path, reason))
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err("unexpected end of data".into());
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub(crate) fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn finite_difference_grads(net: &Mlp, x: &Array2<f64>, seed_grad: &Array2<f64>) -> Vec<f64> {
        // loss = sum(seed_grad * output)
        let loss = |n: &Mlp| -> f64 {
            let out = n.infer_batch(x.view()).unwrap();
            (&out * seed_grad).sum()
        };
        let base = net.params_flat();
        let mut probe = net.clone();
        (0..base.len())
            .map(|i| {
                let h = 1e-5 * base[i].abs().max(1.0);
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.set_params_flat(&p).unwrap();
                let up = loss(&probe);
                p[i] = base[i] - h;
                probe.set_params_flat(&p).unwrap();
                let down = loss(&probe);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Layer {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let net = Mlp::from_layers(vec![layer], 0.01, OutputActivation::Identity).unwrap();
        let (out, _) = net.forward(&[1.5, -2.0, 3.25]).unwrap();
        assert_eq!(out, vec![1.5, -2.0, 3.25]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let layer = Layer {
            weights: Array2::zeros((2, 4)),
            bias: array![0.7, -1.1],
        };
        let net = Mlp::from_layers(vec![layer], 0.01, OutputActivation::Identity).unwrap();
        assert_eq!(net.infer(&[9.0, 8.0, 7.0, 6.0]).unwrap(), vec![0.7, -1.1]);
    }

    #[test]
    fn sigmoid_output_in_open_unit_interval() {
        let net = Mlp::new(&[3, 16, 16, 4], 0.01, OutputActivation::Sigmoid, 5).unwrap();
        for k in 0..50 {
            let x = [k as f64 - 25.0, (k as f64).sin() * 10.0, 0.3];
            for v in net.infer(&x).unwrap() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = Mlp::new(&[2, 4, 1], 0.01, OutputActivation::Identity, 1).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(
            net.forward(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn linear_scalar_gradients() {
        let layer = Layer {
            weights: array![[2.5]],
            bias: array![0.0],
        };
        let net = Mlp::from_layers(vec![layer], 0.01, OutputActivation::Identity).unwrap();
        let (_, tape) = net.forward(&[4.0]).unwrap();
        let (g, gx) = net.backward(&tape, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weights[[0, 0]], 4.0);
        assert_eq!(g.layers[0].bias[0], 1.0);
        assert_eq!(gx[[0, 0]], 2.5);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = Mlp::new(&[3, 8, 2], 0.01, OutputActivation::Sigmoid, 3).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, gx) = net.backward(&tape, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slope_outside_unit_interval_is_rejected() {
        for slope in [-0.1, 1.0, f64::NAN] {
            assert!(Mlp::new(&[2, 3, 1], slope, OutputActivation::Identity, 0).is_err());
        }
        assert!(Mlp::new(&[2, 3, 1], 0.0, OutputActivation::Identity, 0).is_ok());
    }

    #[test]
    fn input_gradient_matches_full_backward() {
        let net = Mlp::new(&[4, 6, 2], 0.01, OutputActivation::Identity, 8).unwrap();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let g = Array2::from_shape_fn((5, 2), |(i, j)| i as f64 - j as f64);
        let (_, tape) = net.forward_batch(x.view()).unwrap();
        let (_, full) = net.backward(&tape, g.view()).unwrap();
        assert_eq!(net.input_gradient(&tape, g.view()).unwrap(), full);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..5u64 {
            let output = if case % 2 == 0 {
                OutputActivation::Sigmoid
            } else {
                OutputActivation::Identity
            };
            let net = Mlp::new(&[4, 7, 5, 3], 0.01, output, case).unwrap();
            let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-2.0..2.0));
            let seed_grad = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
            let (_, tape) = net.forward_batch(x.view()).unwrap();
            let (g, _) = net.backward(&tape, seed_grad.view()).unwrap();
            let fd = finite_difference_grads(&net, &x, &seed_grad);
            for (a, b) in g.flat().iter().zip(&fd) {
                assert!(rel_err(*a, *b) <= 1e-4, "analytic {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = Mlp::new(&[2, 3, 1], 0.01, OutputActivation::Identity, 1).unwrap();
        let (_, tape) = net.forward(&[1.0, 2.0]).unwrap();
        let (g, _) = net.backward(&tape, array![[1.0]].view()).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam_step(&mut net, &g, &mut adam, 0.01).unwrap();
        assert!(matches!(
            net.backward(&tape, array![[1.0]].view()),
            Err(Error::StaleTape(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut net = Mlp::new(&[2, 3, 1], 0.01, OutputActivation::Identity, 1).unwrap();
        let before = net.params_flat();
        let g = Gradients {
            layers: net.layers().iter().map(Layer::zeros_like).collect(),
        };
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam_step(&mut net, &g, &mut adam, 0.001).unwrap();
        assert_eq!(net.params_flat(), before);
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let layer = Layer {
            weights: array![[1.0]],
            bias: array![0.0],
        };
        let mut net = Mlp::from_layers(vec![layer], 0.01, OutputActivation::Identity).unwrap();
        let g = Gradients {
            layers: vec![Layer {
                weights: array![[0.5]],
                bias: array![0.0],
            }],
        };
        let mut adam = AdamState::new(&net, AdamConfig::default());
        adam_step(&mut net, &g, &mut adam, 0.001).unwrap();
        // m_hat = 0.5, v_hat = 0.25, so the step is 0.001 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
        assert!((net.layers()[0].weights[[0, 0]] - expected).abs() < 1e-15);
        assert!((net.layers()[0].weights[[0, 0]] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut net = Mlp::new(&[1, 1], 0.01, OutputActivation::Identity, 1).unwrap();
        let g = Gradients {
            layers: vec![Layer {
                weights: array![[f64::NAN]],
                bias: array![0.0],
            }],
        };
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(matches!(
            adam_step(&mut net, &g, &mut adam, 0.001),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn soft_update_extremes_and_midpoint() {
        let online = Mlp::new(&[3, 4, 2], 0.01, OutputActivation::Identity, 1).unwrap();
        let start = Mlp::new(&[3, 4, 2], 0.01, OutputActivation::Identity, 2).unwrap();

        let mut t = start.clone();
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.params_flat(), start.params_flat());

        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.params_flat(), online.params_flat());

        let mut t = start.clone();
        soft_update(&mut t, &online, 0.5).unwrap();
        for ((m, a), b) in t
            .params_flat()
            .iter()
            .zip(online.params_flat())
            .zip(start.params_flat())
        {
            assert_eq!(*m, 0.5 * a + 0.5 * b);
        }
    }

    #[test]
    fn soft_update_rejects_mismatch() {
        let online = Mlp::new(&[3, 4, 2], 0.01, OutputActivation::Identity, 1).unwrap();
        let mut t = Mlp::new(&[3, 5, 2], 0.01, OutputActivation::Identity, 1).unwrap();
        assert!(soft_update(&mut t, &online, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Mlp::new(&[6, 16, 16, 5], 0.01, OutputActivation::Sigmoid, 42).unwrap();
        let bytes = net.to_checkpoint_bytes();
        let back = Mlp::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn corrupted_checkpoint_fails_to_load() {
        let net = Mlp::new(&[2, 4, 1], 0.01, OutputActivation::Identity, 1).unwrap();
        let mut bytes = net.to_checkpoint_bytes();
        bytes[40] ^= 0x10;
        assert!(Mlp::from_checkpoint_bytes(&bytes).is_err());
        let bytes = net.to_checkpoint_bytes();
        assert!(Mlp::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
