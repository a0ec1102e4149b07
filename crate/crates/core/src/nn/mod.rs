//! Minimal feed-forward network engine.
//!
//! Networks are plain stacks of dense layers, each a row-major affine map
//! followed by an element-wise activation. The forward pass records a
//! [`ForwardTrace`] which the backward pass replays to obtain exact
//! reverse-mode gradients with respect to both the parameters and the
//! network input. The input gradient is what the calibration head uses to
//! read off the derivative of its output with respect to the ranker score.

mod loss;
mod optim;

pub use loss::{bce_loss, BCE_EPSILON};
pub use optim::{OptimizerState, UpdateRule};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

const SIGMOID_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside (0, 1) even where `f64` would round
/// to an endpoint.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_CEIL)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One dense layer: `activation(W x + b)` with `W` stored row-major as out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::Dimension(format!(
                "weight buffer has {} entries, expected {out_dim}x{in_dim}",
                weights.len()
            )));
        }
        if bias.len() != out_dim {
            return Err(Error::Dimension(format!(
                "bias has {} entries, expected {out_dim}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(Error::input("layer parameters must be finite"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::config(format!("init range: {e}")))?;
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[inline]
    fn affine_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let mut acc = *b;
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Parameters of a feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape {
                    layer: k + 1,
                    expected: pair[0].out_dim,
                    got: pair[1].in_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Builds a Glorot-initialised network. `spec` lists `(out_dim, activation)`
    /// for each layer in order.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        spec: &[(usize, Activation)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut fan_in = input_dim;
        for &(out, act) in spec {
            layers.push(Dense::glorot(fan_in, out, act, rng)?);
            fan_in = out;
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardTrace> {
        let mut trace = ForwardTrace::default();
        self.forward_into(input, &mut trace)?;
        Ok(trace)
    }

    /// Forward pass reusing the buffers of an existing trace.
    pub fn forward_into(&self, input: &[f64], trace: &mut ForwardTrace) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape {
                layer: 0,
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        let depth = self.layers.len();
        trace.pre.resize_with(depth, Vec::new);
        trace.post.resize_with(depth, Vec::new);
        trace.input.clear();
        trace.input.extend_from_slice(input);
        for (k, layer) in self.layers.iter().enumerate() {
            let (done, rest) = trace.post.split_at_mut(k);
            let x: &[f64] = if k == 0 { &trace.input } else { &done[k - 1] };
            let pre = &mut trace.pre[k];
            layer.affine_into(x, pre);
            let post = &mut rest[0];
            post.clear();
            post.extend(pre.iter().map(|&z| layer.activation.apply(z)));
        }
        Ok(())
    }

    /// Convenience forward pass returning only the output vector.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.post.pop().unwrap_or_default())
    }

    /// Reverse-mode pass. Returns the gradients of `output · output_grad` with
    /// respect to every parameter and to the network input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
    ) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let mut scratch = BackwardScratch::default();
        self.backward_accumulate(trace, output_grad, 1.0, &mut grads, &mut scratch)?;
        Ok((grads, scratch.input_grad))
    }

    /// Accumulating backward pass: adds `scale ×` the parameter gradients into
    /// `grads` and leaves the (unscaled) input gradient in `scratch`.
    pub fn backward_accumulate(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
        scale: f64,
        grads: &mut MlpGrads,
        scratch: &mut BackwardScratch,
    ) -> Result<()> {
        self.check_trace(trace)?;
        if output_grad.len() != self.out_dim() {
            return Err(Error::Shape {
                layer: self.layers.len() - 1,
                expected: self.out_dim(),
                got: output_grad.len(),
            });
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension(
                "gradient buffer does not match network depth".into(),
            ));
        }
        let BackwardScratch { delta, next, input_grad } = scratch;
        let last = self.layers.len() - 1;
        delta.clear();
        let (pre, post) = (&trace.pre[last], &trace.post[last]);
        let act = self.layers[last].activation;
        delta.extend(
            output_grad
                .iter()
                .zip(pre.iter().zip(post))
                .map(|(g, (&z, &a))| g * act.derivative(z, a)),
        );
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x: &[f64] = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            let g = &mut grads.layers[k];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let sdj = scale * dj;
                g.bias[j] += sdj;
                let row = &mut g.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += sdj * xi;
                }
            }
            next.clear();
            next.resize(layer.in_dim, 0.0);
            for (w_row, &dj) in layer.weights.chunks_exact(layer.in_dim).zip(delta.iter()) {
                if dj == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(w_row) {
                    *n += w * dj;
                }
            }
            if k > 0 {
                let prev = &self.layers[k - 1];
                let (pre, post) = (&trace.pre[k - 1], &trace.post[k - 1]);
                for (n, (&z, &a)) in next.iter_mut().zip(pre.iter().zip(post)) {
                    *n *= prev.activation.derivative(z, a);
                }
                std::mem::swap(delta, next);
            }
        }
        std::mem::swap(input_grad, next);
        Ok(())
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.pre.len() != self.layers.len() || trace.post.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "trace has {} layers, network has {}",
                trace.pre.len(),
                self.layers.len()
            )));
        }
        if trace.input.len() != self.in_dim() {
            return Err(Error::Shape {
                layer: 0,
                expected: self.in_dim(),
                got: trace.input.len(),
            });
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if trace.pre[k].len() != layer.out_dim || trace.post[k].len() != layer.out_dim {
                return Err(Error::Shape {
                    layer: k,
                    expected: layer.out_dim,
                    got: trace.pre[k].len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-layer pre-activations and activations recorded by a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    pub fn activations(&self) -> &[Vec<f64>] {
        &self.post
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.post.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post.is_empty()
    }
}

/// Reusable buffers for [`MlpParams::backward_accumulate`].
#[derive(Debug, Clone, Default)]
pub struct BackwardScratch {
    delta: Vec<f64>,
    next: Vec<f64>,
    input_grad: Vec<f64>,
}

impl BackwardScratch {
    pub fn input_grad(&self) -> &[f64] {
        &self.input_grad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffers shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Index of the first layer holding a non-finite gradient, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.weights.iter().chain(&l.bias).any(|g| !g.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: f64, b: f64, act: Activation) -> MlpParams {
        MlpParams::new(vec![Dense::new(1, 1, vec![w], vec![b], act).unwrap()]).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let net = single(1.0, 0.0, Activation::Sigmoid);
        assert_eq!(net.predict(&[0.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn identity_layer_is_affine() {
        let net = single(2.0, 1.0, Activation::Identity);
        assert_eq!(net.predict(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn two_layer_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = MlpParams::init(
            2,
            &[(2, Activation::Relu), (1, Activation::Sigmoid)],
            &mut rng,
        )
        .unwrap();
        let x = [0.7, -1.3];
        let l0 = &net.layers()[0];
        let l1 = &net.layers()[1];
        let (w0, b0, w1, b1) = (l0.weights(), l0.bias(), l1.weights(), l1.bias());
        let h0 = (w0[0] * x[0] + w0[1] * x[1] + b0[0]).max(0.0);
        let h1 = (w0[2] * x[0] + w0[3] * x[1] + b0[1]).max(0.0);
        let u = w1[0] * h0 + w1[1] * h1 + b1[0];
        let expected = 1.0 / (1.0 + (-u).exp());
        let got = net.predict(&x).unwrap()[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn input_dimension_mismatch() {
        let net = single(1.0, 0.0, Activation::Identity);
        match net.forward(&[1.0, 2.0]) {
            Err(Error::Shape { layer: 0, expected: 1, got: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn layer_chain_is_validated() {
        let a = Dense::new(2, 3, vec![0.0; 6], vec![0.0; 3], Activation::Relu).unwrap();
        let b = Dense::new(2, 1, vec![0.0; 2], vec![0.0], Activation::Identity).unwrap();
        assert!(matches!(
            MlpParams::new(vec![a, b]),
            Err(Error::Shape { layer: 1, expected: 3, got: 2 })
        ));
    }

    #[test]
    fn sigmoid_backward_at_zero() {
        let net = single(1.0, 0.0, Activation::Sigmoid);
        let trace = net.forward(&[0.0]).unwrap();
        let (_, input_grad) = net.backward(&trace, &[1.0]).unwrap();
        assert_eq!(input_grad, vec![0.25]);
    }

    #[test]
    fn identity_backward_is_weight() {
        let net = single(-3.5, 0.2, Activation::Identity);
        for x in [-2.0, 0.0, 11.0] {
            let trace = net.forward(&[x]).unwrap();
            let (grads, input_grad) = net.backward(&trace, &[1.0]).unwrap();
            assert_eq!(input_grad, vec![-3.5]);
            assert_eq!(grads.layers[0].weights, vec![x]);
            assert_eq!(grads.layers[0].bias, vec![1.0]);
        }
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let a = single(1.0, 0.0, Activation::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = MlpParams::init(1, &[(3, Activation::Relu), (1, Activation::Identity)], &mut rng)
            .unwrap();
        let trace = a.forward(&[1.0]).unwrap();
        assert!(b.backward(&trace, &[1.0]).is_err());
    }

    #[test]
    fn sigmoid_saturation_stays_open_interval() {
        for z in [-1e4, -800.0, -40.0, 40.0, 800.0, 1e4] {
            let s = sigmoid(z);
            assert!(s > 0.0 && s < 1.0, "sigmoid({z}) = {s}");
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpParams::init(
            4,
            &[(5, Activation::Relu), (3, Activation::Relu), (1, Activation::Sigmoid)],
            &mut rng,
        )
        .unwrap();
        let x = [0.1, -0.2, 0.3, 5.0];
        let a = net.forward(&x).unwrap();
        let b = net.forward(a.input()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }
}
