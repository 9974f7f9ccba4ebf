use std::ops::Range;

use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::config::{Activation, FfnnConfig};
use crate::nnet::optim::OptState;
use crate::rng::{self, Stream};

/// One affine map `z = W a (+ b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// Feed-forward network `z_1 = W_1 x`, `z_l = W_l φ(z_{l−1})`, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub layers: Vec<Layer>,
    pub frozen: Vec<bool>,
    pub seed: u64,
    pub(crate) opt_state: Option<OptState>,
}

impl Network {
    /// He-initialized network for `config`.
    pub fn init(config: &FfnnConfig) -> Result<Self> {
        config.validate()?;
        Network::init_with_dims(
            &config.dims(),
            config.activation,
            config.use_bias,
            config.last_layer_scale,
            config.seed,
        )
    }

    /// He initialization `W ~ N(0, 2/fan_in)` for arbitrary layer sizes.
    ///
    /// The last layer's standard deviation is multiplied by `last_scale`.
    /// Biases, when enabled, are drawn from `U(±1/√fan_in)`.
    pub fn init_with_dims(
        dims: &[usize],
        activation: Activation,
        use_bias: bool,
        last_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
        }
        let mut rng = rng::stream(seed, Stream::Init);
        let depth = dims.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let mut std = (2.0 / fan_in as f64).sqrt();
            if i + 1 == depth {
                std *= last_scale;
            }
            let weight = Matrix::from_fn(fan_out, fan_in, |_, _| std * rng::normal(&mut rng));
            let bias = if use_bias {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Some((0..fan_out).map(|_| dist.sample(&mut rng)).collect())
            } else {
                None
            };
            layers.push(Layer { weight, bias });
        }
        Ok(Network {
            dims: dims.to_vec(),
            activation,
            use_bias,
            layers,
            frozen: vec![false; depth],
            seed,
            opt_state: None,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Coordinate range of layer `i` (0-based) in the flat parameter vector.
    ///
    /// Each layer contributes its weights row-major followed by its bias.
    pub fn layer_range(&self, i: usize) -> Range<usize> {
        let start: usize = self.layers[..i].iter().map(Layer::num_params).sum();
        start..start + self.layers[i].num_params()
    }

    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        (0..self.depth()).map(|i| self.layer_range(i)).collect()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            if let Some(b) = &layer.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "parameter vector of length {} for a network with {} parameters",
                theta.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        for layer in &mut self.layers {
            let w = layer.weight.data_mut();
            w.copy_from_slice(&theta[pos..pos + w.len()]);
            pos += w.len();
            if let Some(b) = &mut layer.bias {
                let len = b.len();
                b.copy_from_slice(&theta[pos..pos + len]);
                pos += len;
            }
        }
        Ok(())
    }

    /// Freeze every layer except those listed (0-based).
    pub fn freeze_all_except(&mut self, trainable: &[usize]) {
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = !trainable.contains(&i);
        }
    }

    pub fn set_frozen(&mut self, i: usize, frozen: bool) {
        self.frozen[i] = frozen;
    }

    /// Drop optimizer state (momentum, Adam moments).
    pub fn reset_optimizer(&mut self) {
        self.opt_state = None;
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let depth = self.depth();
        let mut preacts = Vec::with_capacity(depth);
        let mut acts = Vec::with_capacity(depth.saturating_sub(1));
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &acts[i - 1] };
            let mut z = input.matmul_t(&layer.weight);
            if let Some(b) = &layer.bias {
                for r in 0..z.rows() {
                    for (zv, bv) in z.row_mut(r).iter_mut().zip(b) {
                        *zv += bv;
                    }
                }
            }
            if i + 1 < depth {
                let act = self.activation;
                acts.push(z.map(|v| act.apply(v)));
            }
            preacts.push(z);
        }
        let outputs = preacts[depth - 1].transpose();
        Ok(ForwardTrace {
            input: x.clone(),
            preacts,
            acts,
            outputs,
        })
    }

    /// Outputs `F` (o × n).
    pub fn output(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.outputs)
    }

    /// Per-layer sensitivities `∂s/∂z_l` (n × width) for the scalar
    /// `s = Σ_x Σ_m top[x,m]·f^m(x)`, computed from the top layer down to
    /// layer index `lowest` (0-based). Entries below `lowest` are `None`.
    pub(crate) fn deltas(
        &self,
        trace: &ForwardTrace,
        top: Matrix,
        lowest: usize,
    ) -> Vec<Option<Matrix>> {
        let depth = self.depth();
        let mut out: Vec<Option<Matrix>> = vec![None; depth];
        let mut delta = top;
        for i in (lowest..depth).rev() {
            if i > lowest {
                let mut next = delta.matmul(&self.layers[i].weight);
                let z = &trace.preacts[i - 1];
                let act = self.activation;
                for (d, &zv) in next.data_mut().iter_mut().zip(z.data()) {
                    *d *= act.derivative(zv);
                }
                out[i] = Some(std::mem::replace(&mut delta, next));
            } else {
                out[i] = Some(std::mem::replace(&mut delta, Matrix::zeros(0, 0)));
            }
        }
        out
    }

    /// Gradient of `Σ_{m,x} out_grad[m,x]·f^m(x)` with respect to every
    /// unfrozen layer; frozen layers receive zero blocks.
    pub fn backward(&self, trace: &ForwardTrace, out_grad: &Matrix) -> Result<Grads> {
        let n = trace.input.rows();
        if out_grad.shape() != (self.output_dim(), n) {
            return Err(Error::Dimension(format!(
                "output gradient is {}x{}, expected {}x{}",
                out_grad.rows(),
                out_grad.cols(),
                self.output_dim(),
                n
            )));
        }
        let lowest = self.frozen.iter().position(|f| !f).unwrap_or(self.depth());
        let mut grads = Grads::zeros_like(self);
        if lowest == self.depth() {
            return Ok(grads);
        }
        let deltas = self.deltas(trace, out_grad.transpose(), lowest);
        for (i, delta) in deltas.iter().enumerate().skip(lowest) {
            if self.frozen[i] {
                continue;
            }
            let delta = delta.as_ref().expect("computed down to lowest");
            grads.weights[i] = delta.t_matmul(trace.layer_input(i));
            if let Some(b) = &mut grads.biases[i] {
                *b = delta.col_sums();
            }
        }
        Ok(grads)
    }

    /// `∇_θ Σ_{x,m} w[x·o + m]·f^m(x)` as a flat parameter vector, ignoring
    /// freeze flags. `w` is ordered dataset-major.
    pub fn weighted_output_grad(&self, x: &Matrix, w: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(x)?;
        self.weighted_output_grad_from(&trace, w)
    }

    pub fn weighted_output_grad_from(&self, trace: &ForwardTrace, w: &[f64]) -> Result<Vec<f64>> {
        let n = trace.input.rows();
        let o = self.output_dim();
        if w.len() != n * o {
            return Err(Error::Dimension(format!(
                "weight vector of length {} for {n} samples and {o} outputs",
                w.len()
            )));
        }
        let top = Matrix::from_vec(n, o, w.to_vec())?;
        let deltas = self.deltas(trace, top, 0);
        let mut out = Vec::with_capacity(self.num_params());
        for (i, delta) in deltas.iter().enumerate() {
            let delta = delta.as_ref().expect("all layers computed");
            out.extend_from_slice(delta.t_matmul(trace.layer_input(i)).data());
            if self.layers[i].bias.is_some() {
                out.extend(delta.col_sums());
            }
        }
        Ok(out)
    }
}

/// Everything a forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// `z_l`, n × width, for every layer.
    pub preacts: Vec<Matrix>,
    /// `φ(z_l)` for hidden layers `1..L−1`.
    pub acts: Vec<Matrix>,
    /// `F`, o × n.
    pub outputs: Matrix,
}

impl ForwardTrace {
    /// Input to layer `i` (0-based): the data for `i = 0`, else `φ(z_i)`.
    pub fn layer_input(&self, i: usize) -> &Matrix {
        if i == 0 {
            &self.input
        } else {
            &self.acts[i - 1]
        }
    }

    pub fn num_samples(&self) -> usize {
        self.input.rows()
    }
}

/// Per-layer gradient blocks shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros_like(net: &Network) -> Self {
        Grads {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| l.bias.as_ref().map(|b| vec![0.0; b.len()]))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Matrix::all_finite)
            && self
                .biases
                .iter()
                .flatten()
                .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn small_net(bias: bool) -> Network {
        Network::init(&FfnnConfig::new(3, 5, 4, 2, 17).with_bias(bias)).unwrap()
    }

    fn inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, Stream::Data);
        Matrix::from_fn(n, d, |_, _| rng::normal(&mut r))
    }

    #[test]
    fn he_variance_and_scaling() {
        let net = Network::init(&FfnnConfig::new(256, 256, 3, 256, 1).with_last_layer_scale(0.01))
            .unwrap();
        let w = &net.layers[1].weight;
        let var = w.frobenius_norm_sq() / (w.rows() * w.cols()) as f64;
        assert!((var / (2.0 / 256.0) - 1.0).abs() < 0.1);
        let last = &net.layers[2].weight;
        let std = (last.frobenius_norm_sq() / (last.rows() * last.cols()) as f64).sqrt();
        assert!((std / (0.01 * (2.0f64 / 256.0).sqrt()) - 1.0).abs() < 0.1);
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(small_net(true), small_net(true));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let out = small_net(false).output(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(out.shape(), (2, 4));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_homogeneity() {
        let net = small_net(false);
        let x = inputs(6, 3, 2);
        let f1 = net.output(&x).unwrap();
        let f2 = net.output(&x.scale(2.0)).unwrap();
        assert_eq!(f2, f1.scale(2.0));
    }

    #[test]
    fn input_shape_checked() {
        assert!(matches!(
            small_net(false).forward(&Matrix::zeros(2, 4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn params_roundtrip_and_layout() {
        let mut net = small_net(true);
        let theta = net.params();
        assert_eq!(theta.len(), net.num_params());
        assert_eq!(net.layer_range(0), 0..(3 * 5 + 5));
        let doubled: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        net.set_params(&doubled).unwrap();
        assert_eq!(net.params(), doubled);
        assert!(net.set_params(&theta[1..]).is_err());
    }

    #[test]
    fn zero_out_grad_gives_zero_grads() {
        let net = small_net(true);
        let x = inputs(4, 3, 3);
        let trace = net.forward(&x).unwrap();
        let g = net.backward(&trace, &Matrix::zeros(2, 4)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    fn fd_check(net: &Network) {
        let x = inputs(5, 3, 4);
        let w: Vec<f64> = (0..10).map(|i| ((i as f64) * 0.37).sin()).collect();
        let analytic = net.weighted_output_grad(&x, &w).unwrap();
        let theta = net.params();
        let s = |t: &[f64]| {
            let mut n2 = net.clone();
            n2.set_params(t).unwrap();
            let f = n2.output(&x).unwrap();
            let mut acc = 0.0;
            for xi in 0..5 {
                for m in 0..2 {
                    acc += w[xi * 2 + m] * f[(m, xi)];
                }
            }
            acc
        };
        let h = 1e-5;
        let mut fd = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            fd[i] = (s(&tp) - s(&tm)) / (2.0 * h);
        }
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) <= 1e-6 * norm(&fd).max(1.0), "{}", norm(&diff));
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        fd_check(&small_net(false));
        fd_check(&small_net(true));
    }

    #[test]
    fn frozen_layers_get_zero_blocks() {
        let mut net = small_net(false);
        net.freeze_all_except(&[2]);
        let x = inputs(4, 3, 5);
        let trace = net.forward(&x).unwrap();
        let g = net.backward(&trace, &Matrix::filled(2, 4, 1.0)).unwrap();
        for (i, w) in g.weights.iter().enumerate() {
            if i == 2 {
                assert!(w.max_abs() > 0.0);
            } else {
                assert_eq!(w.max_abs(), 0.0);
            }
        }
    }
}
