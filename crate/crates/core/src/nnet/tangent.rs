//! Per-layer tangent features `Ψ_l = ∇_{θ_l} F`.
//!
//! Column `x·o + m` of `Ψ_l` holds the gradient of output `m` at sample `x`
//! with respect to layer `l`'s parameters. For a weight `W_l[i,j]` that
//! entry is `φ(z_{l−1}^j(x)) · ∂f^m(x)/∂z_l^i(x)`, so every block factors
//! into a forward part (the layer inputs) and a backward part (the output
//! sensitivities). Both are collected here from `o` backward passes.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::network::Network;

/// Identifies which samples a feature block was computed on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchId {
    pub dataset_hash: String,
    pub indices: Vec<usize>,
}

/// Explicit `Ψ_l` (P_l × o·n).
#[derive(Debug, Clone)]
pub struct TangentFeatureBlock {
    /// 1-based layer index.
    pub layer: usize,
    pub psi: Matrix,
    pub batch: Option<BatchId>,
}

impl TangentFeatureBlock {
    /// `Ψ_lᵀ Ψ_l` (o·n × o·n).
    pub fn gram(&self) -> Matrix {
        self.psi.gram_cols()
    }
}

/// Forward and backward factors of all tangent-feature blocks.
#[derive(Debug, Clone)]
pub struct TangentFactors {
    pub num_samples: usize,
    pub num_outputs: usize,
    pub use_bias: bool,
    /// Input to each layer (n × fan_in), 0-based.
    pub inputs: Vec<Matrix>,
    /// `deltas[i][m][x, k] = ∂f^m(x)/∂z^k` at layer `i` (0-based), n × fan_out.
    pub deltas: Vec<Vec<Matrix>>,
}

/// Run one forward pass and `o` backward passes over `x`.
pub fn tangent_factors(net: &Network, x: &Matrix) -> Result<TangentFactors> {
    let trace = net.forward(x)?;
    let n = x.rows();
    let o = net.output_dim();
    let depth = net.depth();
    let mut deltas: Vec<Vec<Matrix>> = (0..depth).map(|_| Vec::with_capacity(o)).collect();
    for m in 0..o {
        let top = Matrix::from_fn(n, o, |_, j| if j == m { 1.0 } else { 0.0 });
        for (i, d) in net.deltas(&trace, top, 0).into_iter().enumerate() {
            deltas[i].push(d.expect("all layers computed"));
        }
    }
    let inputs = (0..depth).map(|i| trace.layer_input(i).clone()).collect();
    Ok(TangentFactors {
        num_samples: n,
        num_outputs: o,
        use_bias: net.use_bias,
        inputs,
        deltas,
    })
}

impl TangentFactors {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    fn check_layer(&self, l: usize) -> Result<usize> {
        if l == 0 || l > self.depth() {
            return Err(Error::Index(format!(
                "layer {l} outside 1..={}",
                self.depth()
            )));
        }
        Ok(l - 1)
    }

    /// Explicit `Ψ_l` for 1-based layer `l`; rows follow the flat parameter
    /// layout (weights row-major, then bias).
    pub fn layer_psi(&self, l: usize) -> Result<TangentFeatureBlock> {
        let i = self.check_layer(l)?;
        let a = &self.inputs[i];
        let ds = &self.deltas[i];
        let (n, fan_in) = a.shape();
        let fan_out = ds[0].cols();
        let o = self.num_outputs;
        let rows = fan_out * fan_in + if self.use_bias { fan_out } else { 0 };
        let mut psi = Matrix::zeros(rows, n * o);
        for k in 0..fan_out {
            for j in 0..fan_in {
                let row = psi.row_mut(k * fan_in + j);
                for x in 0..n {
                    let ax = a[(x, j)];
                    for (m, d) in ds.iter().enumerate() {
                        row[x * o + m] = ax * d[(x, k)];
                    }
                }
            }
            if self.use_bias {
                let row = psi.row_mut(fan_out * fan_in + k);
                for x in 0..n {
                    for (m, d) in ds.iter().enumerate() {
                        row[x * o + m] = d[(x, k)];
                    }
                }
            }
        }
        Ok(TangentFeatureBlock {
            layer: l,
            psi,
            batch: None,
        })
    }

    /// `Ψ_lᵀΨ_l` from the factors:
    /// `(a(x)·a(x′) [+1]) · (∂f^m(x)/∂z_l · ∂f^{m′}(x′)/∂z_l)`.
    pub fn layer_gram(&self, l: usize) -> Result<Matrix> {
        let i = self.check_layer(l)?;
        let mut ka = self.inputs[i].gram_rows();
        if self.use_bias {
            ka.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let n = self.num_samples;
        let o = self.num_outputs;
        let ds = &self.deltas[i];
        let mut gram = Matrix::zeros(n * o, n * o);
        for m in 0..o {
            for mp in m..o {
                let kd = ds[m].matmul_t(&ds[mp]);
                for x in 0..n {
                    for xp in 0..n {
                        let v = ka[(x, xp)] * kd[(x, xp)];
                        gram[(x * o + m, xp * o + mp)] = v;
                        gram[(xp * o + mp, x * o + m)] = v;
                    }
                }
            }
        }
        Ok(gram)
    }

    /// Full tangent kernel `Σ_l Ψ_lᵀΨ_l`.
    pub fn ntk(&self) -> Result<Matrix> {
        let mut total = self.layer_gram(1)?;
        for l in 2..=self.depth() {
            total.add_scaled(1.0, &self.layer_gram(l)?);
        }
        Ok(total)
    }
}

/// Explicit tangent features of 1-based layer `l` on the rows of `x`.
pub fn layer_tangent_features(net: &Network, x: &Matrix, l: usize) -> Result<TangentFeatureBlock> {
    if l == 0 || l > net.depth() {
        return Err(Error::Index(format!(
            "layer {l} outside 1..={}",
            net.depth()
        )));
    }
    tangent_factors(net, x)?.layer_psi(l)
}

/// Explicit tangent features of all parameters, stacked in parameter order.
pub fn full_tangent_features(net: &Network, x: &Matrix) -> Result<Matrix> {
    let factors = tangent_factors(net, x)?;
    let blocks: Vec<Matrix> = (1..=net.depth())
        .map(|l| factors.layer_psi(l).map(|b| b.psi))
        .collect::<Result<_>>()?;
    let cols = blocks[0].cols();
    let mut data = Vec::with_capacity(net.num_params() * cols);
    for b in &blocks {
        data.extend_from_slice(b.data());
    }
    Matrix::from_vec(net.num_params(), cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::config::FfnnConfig;
    use crate::rng::{self, Stream};

    fn setup(bias: bool) -> (Network, Matrix) {
        let net = Network::init(&FfnnConfig::new(3, 4, 3, 2, 5).with_bias(bias)).unwrap();
        let mut r = rng::stream(9, Stream::Data);
        let x = Matrix::from_fn(4, 3, |_, _| rng::normal(&mut r));
        (net, x)
    }

    #[test]
    fn single_entry_chain_rule() {
        let (net, x) = setup(false);
        let f = tangent_factors(&net, &x).unwrap();
        let block = f.layer_psi(2).unwrap();
        // weight W_2[1, 3], sample 2, output 1
        let (i, j, s, m) = (1, 3, 2, 1);
        let expect = f.inputs[1][(s, j)] * f.deltas[1][m][(s, i)];
        assert_eq!(block.psi[(i * 4 + j, s * 2 + m)], expect);
    }

    #[test]
    fn factored_gram_matches_explicit() {
        for bias in [false, true] {
            let (net, x) = setup(bias);
            let f = tangent_factors(&net, &x).unwrap();
            for l in 1..=3 {
                let explicit = f.layer_psi(l).unwrap().gram();
                let factored = f.layer_gram(l).unwrap();
                let err = explicit.sub(&factored).frobenius_norm() / explicit.frobenius_norm();
                assert!(err < 1e-12, "layer {l}: {err}");
            }
        }
    }

    #[test]
    fn full_features_stack_in_parameter_order() {
        let (net, x) = setup(true);
        let psi = full_tangent_features(&net, &x).unwrap();
        assert_eq!(psi.shape(), (net.num_params(), 8));
        // Column x·o+m is the gradient of output m at sample x.
        let mut w = vec![0.0; 8];
        w[5] = 1.0;
        let g = net.weighted_output_grad(&x, &w).unwrap();
        for (p, gp) in g.iter().enumerate() {
            assert!((psi[(p, 5)] - gp).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_index_checked() {
        let (net, x) = setup(false);
        assert!(matches!(
            layer_tangent_features(&net, &x, 0),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            layer_tangent_features(&net, &x, 4),
            Err(Error::Index(_))
        ));
    }
}
