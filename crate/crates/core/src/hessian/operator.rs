use crate::error::{Error, Result};
use crate::linalg::{norm, top_k_operator, Matrix};
use crate::nnet::{loss_and_output_grad, Loss, Network};

/// How finite differences treat activation gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatePolicy {
    /// Both gradients use the gate pattern at θ, so the difference is taken
    /// inside one linear region and never straddles a kink.
    #[default]
    Frozen,
    /// Gates follow the perturbed parameters.
    Live,
}

/// Result of one Hessian-vector product.
#[derive(Debug, Clone, PartialEq)]
pub struct Hvp {
    pub value: Vec<f64>,
    /// Some pre-activation changed sign between θ − εv and θ + εv.
    pub kink: bool,
}

/// `H_w`, the Hessian of `s(θ) = Σ w_{x,i} f_i(x; θ)` with `w` held fixed.
#[derive(Debug, Clone)]
pub struct HwOperator {
    net: Network,
    x: Matrix,
    /// n × o, entry `(x, i)` is `w_{x,i}`.
    w: Matrix,
    theta: Vec<f64>,
    theta_norm: f64,
    gates: Vec<Matrix>,
    base_grad: Vec<f64>,
    pub policy: GatePolicy,
}

impl HwOperator {
    /// `w` is dataset-major (`x·o + i`).
    pub fn new(net: &Network, x: &Matrix, w: &[f64]) -> Result<Self> {
        let n = x.rows();
        let o = net.output_dim();
        if w.len() != n * o {
            return Err(Error::Dimension(format!(
                "weight vector of length {} for {n} samples and {o} outputs",
                w.len()
            )));
        }
        if x.cols() != net.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} features, network expects {}",
                x.cols(),
                net.input_dim()
            )));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("H_w weights".into()));
        }
        let theta = net.params();
        let mut op = HwOperator {
            net: net.clone(),
            x: x.clone(),
            w: Matrix::from_vec(n, o, w.to_vec())?,
            theta_norm: norm(&theta),
            theta,
            gates: Vec::new(),
            base_grad: Vec::new(),
            policy: GatePolicy::Frozen,
        };
        let (g, gates) = op.gradient(&op.theta.clone(), None)?;
        op.base_grad = g;
        op.gates = gates;
        Ok(op)
    }

    /// `w = ∂L/∂F` at the snapshot, captured once.
    pub fn from_loss(net: &Network, x: &Matrix, y: &Matrix, loss: Loss) -> Result<Self> {
        let f = net.output(x)?;
        let eval = loss_and_output_grad(&f, y, loss)?;
        Self::new(net, x, &crate::nnet::flatten_dataset_major(&eval.grad))
    }

    pub fn with_policy(mut self, policy: GatePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `w` flattened dataset-major.
    pub fn weights(&self) -> &[f64] {
        self.w.data()
    }

    /// `∇_θ s` at the snapshot, i.e. `Ψ w`.
    pub fn gradient_at_snapshot(&self) -> &[f64] {
        &self.base_grad
    }

    /// Finite-difference step for direction `v`.
    pub fn step(&self, v: &[f64]) -> f64 {
        1e-4 * (1.0 + self.theta_norm) / norm(v).max(1e-12)
    }

    pub fn hvp(&self, v: &[f64]) -> Result<Hvp> {
        if v.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "direction of length {} for {} parameters",
                v.len(),
                self.dim()
            )));
        }
        if v.iter().all(|&a| a == 0.0) {
            return Ok(Hvp {
                value: vec![0.0; v.len()],
                kink: false,
            });
        }
        let eps = self.step(v);
        let plus: Vec<f64> = self.theta.iter().zip(v).map(|(t, a)| t + eps * a).collect();
        let minus: Vec<f64> = self.theta.iter().zip(v).map(|(t, a)| t - eps * a).collect();
        let fixed = match self.policy {
            GatePolicy::Frozen => Some(self.gates.as_slice()),
            GatePolicy::Live => None,
        };
        let (gp, pat_p) = self.gradient(&plus, fixed)?;
        let (gm, pat_m) = self.gradient(&minus, fixed)?;
        let kink = pat_p != self.gates || pat_m != self.gates;
        let value = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        Ok(Hvp { value, kink })
    }

    /// Largest |λ| of `H_w`, from a short Krylov run.
    pub fn norm_estimate(&self, seed: u64) -> Result<f64> {
        let s = top_k_operator(self.dim(), 1, 1e-4, seed, None, |v| Ok(self.hvp(v)?.value))?;
        Ok(s.eigenvalues[0].abs())
    }

    /// Dense `H_w` assembled column by column, then symmetrized.
    pub fn dense(&self) -> Result<Matrix> {
        let p = self.dim();
        let mut h = Matrix::zeros(p, p);
        let mut e = vec![0.0; p];
        for j in 0..p {
            e[j] = 1.0;
            let col = self.hvp(&e)?.value;
            h.set_col(j, &col);
            e[j] = 0.0;
        }
        h.symmetrize();
        Ok(h)
    }

    /// `∇_θ s` at `theta`, plus the gate values (activation derivatives)
    /// per hidden layer. With `fixed` the given gates replace the live ones.
    fn gradient(&self, theta: &[f64], fixed: Option<&[Matrix]>) -> Result<(Vec<f64>, Vec<Matrix>)> {
        let mut net = self.net.clone();
        net.set_params(theta)?;
        let depth = net.depth();
        let act = net.activation;
        let mut inputs = Vec::with_capacity(depth);
        let mut gates = Vec::with_capacity(depth - 1);
        let mut h = self.x.clone();
        for (i, layer) in net.layers.iter().enumerate() {
            let mut z = h.matmul_t(&layer.weight);
            if let Some(b) = &layer.bias {
                for r in 0..z.rows() {
                    z.row_mut(r).iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
                }
            }
            inputs.push(h);
            if i + 1 == depth {
                break;
            }
            let live = z.map(|v| act.derivative(v));
            let d = match fixed {
                Some(g) => g[i].clone(),
                None => live.clone(),
            };
            h = z.hadamard(&d);
            gates.push(live);
        }
        let mut delta = self.w.clone();
        let mut blocks: Vec<Vec<f64>> = vec![Vec::new(); depth];
        for i in (0..depth).rev() {
            let layer = &net.layers[i];
            let mut block = delta.t_matmul(&inputs[i]).into_vec();
            if layer.bias.is_some() {
                block.extend(delta.col_sums());
            }
            blocks[i] = block;
            if i > 0 {
                let d = match fixed {
                    Some(g) => &g[i - 1],
                    None => &gates[i - 1],
                };
                delta = delta.matmul(&layer.weight).hadamard(d);
            }
        }
        Ok((blocks.concat(), gates))
    }
}
