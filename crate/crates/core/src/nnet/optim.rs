use crate::error::{Error, Result};
use crate::nnet::network::{Grads, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball SGD with L2 weight decay folded into the gradient:
    /// `g ← g + wd·w`, `v ← μ v + g`, `w ← w − lr·v`.
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    /// Adam with bias correction; `weight_decay` is added to the gradient.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, new_lr: f64) -> Self {
        match self {
            Optimizer::Sgd {
                momentum,
                weight_decay,
                ..
            } => Optimizer::Sgd {
                lr: new_lr,
                momentum,
                weight_decay,
            },
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => Optimizer::Adam {
                lr: new_lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            },
        }
    }

    fn kind(&self) -> u8 {
        match self {
            Optimizer::Sgd { .. } => 1,
            Optimizer::Adam { .. } => 2,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Optimizer::Sgd {
                lr,
                momentum,
                weight_decay,
            } => format!("sgd(lr={lr}, momentum={momentum}, weight_decay={weight_decay})"),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => format!(
                "adam(lr={lr}, beta1={beta1}, beta2={beta2}, eps={eps}, weight_decay={weight_decay})"
            ),
        }
    }
}

/// Optimizer buffers, one flat vector per layer (weights then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub(crate) kind: u8,
    pub(crate) step: u64,
    pub(crate) first: Vec<Vec<f64>>,
    pub(crate) second: Vec<Vec<f64>>,
}

impl OptState {
    fn new(kind: u8, net: &Network) -> Self {
        let sizes: Vec<usize> = net.layers.iter().map(|l| l.num_params()).collect();
        let zeros = || sizes.iter().map(|&s| vec![0.0; s]).collect::<Vec<_>>();
        OptState {
            kind,
            step: 0,
            first: zeros(),
            second: if kind == 2 { zeros() } else { Vec::new() },
        }
    }
}

/// One update of every unfrozen layer. Frozen layers and their buffers are
/// left untouched.
pub fn optimizer_step(net: &mut Network, grads: &Grads, opt: &Optimizer) -> Result<()> {
    if grads.weights.len() != net.depth() {
        return Err(Error::Dimension(
            "gradient block count differs from depth".into(),
        ));
    }
    for (i, (g, layer)) in grads.weights.iter().zip(&net.layers).enumerate() {
        if g.shape() != layer.weight.shape()
            || grads.biases[i].as_ref().map(Vec::len) != layer.bias.as_ref().map(Vec::len)
        {
            return Err(Error::Dimension(format!(
                "gradient shape mismatch at layer {}",
                i + 1
            )));
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut state = match net.opt_state.take() {
        Some(s) if s.kind == opt.kind() => s,
        _ => OptState::new(opt.kind(), net),
    };
    state.step += 1;
    let t = state.step as i32;
    for i in 0..net.depth() {
        if net.frozen[i] {
            continue;
        }
        let layer = &mut net.layers[i];
        let nw = layer.weight.data().len();
        let mut g = grads.weights[i].data().to_vec();
        if let Some(b) = &grads.biases[i] {
            g.extend_from_slice(b);
        }
        let mut w = layer.weight.data().to_vec();
        if let Some(b) = &layer.bias {
            w.extend_from_slice(b);
        }
        match *opt {
            Optimizer::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let buf = &mut state.first[i];
                for k in 0..w.len() {
                    let gk = g[k] + weight_decay * w[k];
                    let step = if momentum != 0.0 {
                        buf[k] = momentum * buf[k] + gk;
                        buf[k]
                    } else {
                        gk
                    };
                    w[k] -= lr * step;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (m, v) = (&mut state.first[i], &mut state.second[i]);
                for k in 0..w.len() {
                    let gk = g[k] + weight_decay * w[k];
                    m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                    w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
        }
        layer.weight.data_mut().copy_from_slice(&w[..nw]);
        if let Some(b) = &mut layer.bias {
            b.copy_from_slice(&w[nw..]);
        }
    }
    net.opt_state = Some(state);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nnet::config::FfnnConfig;

    fn net() -> Network {
        Network::init(&FfnnConfig::new(2, 3, 2, 1, 4).with_bias(true)).unwrap()
    }

    fn const_grads(net: &Network, v: f64) -> Grads {
        let mut g = Grads::zeros_like(net);
        for w in &mut g.weights {
            *w = Matrix::filled(w.rows(), w.cols(), v);
        }
        for b in g.biases.iter_mut().flatten() {
            b.iter_mut().for_each(|x| *x = v);
        }
        g
    }

    #[test]
    fn zero_grads_leave_weights() {
        let mut n = net();
        let before = n.params();
        let g = Grads::zeros_like(&n);
        optimizer_step(&mut n, &g, &Optimizer::sgd(0.1)).unwrap();
        assert_eq!(n.params(), before);
    }

    #[test]
    fn plain_sgd_with_decay() {
        let mut n = net();
        let w0 = n.params();
        let opt = Optimizer::Sgd {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.01,
        };
        let g = const_grads(&n, 0.5);
        optimizer_step(&mut n, &g, &opt).unwrap();
        for (a, b) in n.params().iter().zip(&w0) {
            assert_eq!(*a, b - 0.1 * (0.5 + 0.01 * b));
        }
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        let mut n = net();
        let w0 = n.params();
        let (lr, mu, wd) = (0.05, 0.9, 0.001);
        let opt = Optimizer::Sgd {
            lr,
            momentum: mu,
            weight_decay: wd,
        };
        let g1 = const_grads(&n, 0.3);
        optimizer_step(&mut n, &g1, &opt).unwrap();
        let g2 = const_grads(&n, -0.2);
        optimizer_step(&mut n, &g2, &opt).unwrap();
        for (k, &w) in w0.iter().enumerate() {
            let v1 = 0.3 + wd * w;
            let w1 = w - lr * v1;
            let v2 = mu * v1 + (-0.2 + wd * w1);
            let w2 = w1 - lr * v2;
            assert!((n.params()[k] - w2).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let mut n = net();
        let w0 = n.params();
        let g = const_grads(&n, 2.0);
        optimizer_step(&mut n, &g, &Optimizer::adam(0.01)).unwrap();
        for (a, b) in n.params().iter().zip(&w0) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_layers_untouched() {
        let mut n = net();
        n.set_frozen(0, true);
        let before = n.layers[0].clone();
        for _ in 0..5 {
            let g = const_grads(&n, 1.0);
            optimizer_step(&mut n, &g, &Optimizer::adam(0.1)).unwrap();
        }
        assert_eq!(n.layers[0], before);
        assert_ne!(n.layers[1], net().layers[1]);
    }

    #[test]
    fn rejects_non_finite() {
        let mut n = net();
        let g = const_grads(&n, f64::NAN);
        assert!(matches!(
            optimizer_step(&mut n, &g, &Optimizer::sgd(0.1)),
            Err(Error::NonFinite(_))
        ));
    }
}
