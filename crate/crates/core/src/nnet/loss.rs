use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    CrossEntropy,
    Mse,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::CrossEntropy => "ce",
            Loss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "ce" | "cross_entropy" => Ok(Loss::CrossEntropy),
            "mse" => Ok(Loss::Mse),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// Loss value, its gradient with respect to the outputs, and the "soft
/// outputs" `Z` (softmax for cross-entropy, the raw outputs for MSE).
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    /// o × n, already carrying the 1/n of the sample mean.
    pub grad: Matrix,
    /// o × n.
    pub z: Matrix,
}

/// Column-wise softmax of `f` (o × n).
pub fn softmax_columns(f: &Matrix) -> Matrix {
    let (o, n) = f.shape();
    let mut z = Matrix::zeros(o, n);
    for c in 0..n {
        let max = (0..o).map(|m| f[(m, c)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for m in 0..o {
            let e = (f[(m, c)] - max).exp();
            z[(m, c)] = e;
            sum += e;
        }
        for m in 0..o {
            z[(m, c)] /= sum;
        }
    }
    z
}

/// Mean loss over the `n` columns of `f` (o × n) against targets `y` (n × o).
///
/// Cross-entropy: `grad = (softmax(F) − Y)/n`. MSE, `(1/n) Σ ‖f − y‖²`:
/// `grad = 2(F − Y)/n`.
pub fn loss_and_output_grad(f: &Matrix, y: &Matrix, loss: Loss) -> Result<LossEval> {
    let (o, n) = f.shape();
    if y.shape() != (n, o) {
        return Err(Error::Dimension(format!(
            "targets are {}x{}, outputs are {o}x{n}",
            y.rows(),
            y.cols()
        )));
    }
    if n == 0 {
        return Err(Error::Degenerate("no samples".into()));
    }
    f.ensure_finite("network outputs")?;
    let inv_n = 1.0 / n as f64;
    match loss {
        Loss::CrossEntropy => {
            for c in 0..n {
                let row = y.row(c);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Precondition(format!(
                        "cross-entropy target row {c} is not one-hot"
                    )));
                }
            }
            let z = softmax_columns(f);
            let mut grad = Matrix::zeros(o, n);
            let mut value = 0.0;
            for c in 0..n {
                let max = (0..o).map(|m| f[(m, c)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..o).map(|m| (f[(m, c)] - max).exp()).sum::<f64>().ln();
                for m in 0..o {
                    let t = y[(c, m)];
                    if t == 1.0 {
                        value += lse - f[(m, c)];
                    }
                    grad[(m, c)] = (z[(m, c)] - t) * inv_n;
                }
            }
            Ok(LossEval {
                value: value * inv_n,
                grad,
                z,
            })
        }
        Loss::Mse => {
            let mut grad = Matrix::zeros(o, n);
            let mut value = 0.0;
            for c in 0..n {
                for m in 0..o {
                    let d = f[(m, c)] - y[(c, m)];
                    value += d * d;
                    grad[(m, c)] = 2.0 * d * inv_n;
                }
            }
            Ok(LossEval {
                value: value * inv_n,
                grad,
                z: f.clone(),
            })
        }
    }
}

/// Fraction of columns of `f` whose argmax matches the label.
pub fn accuracy(f: &Matrix, labels: &[usize]) -> f64 {
    let (o, n) = f.shape();
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for (c, &label) in labels.iter().enumerate().take(n) {
        let mut best = 0;
        for m in 1..o {
            if f[(m, c)] > f[(best, c)] {
                best = m;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Flatten an o × n matrix dataset-major: `out[x·o + m] = a[m, x]`.
pub fn flatten_dataset_major(a: &Matrix) -> Vec<f64> {
    a.transpose().into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[usize], k: usize) -> Matrix {
        Matrix::from_fn(
            labels.len(),
            k,
            |i, j| if labels[i] == j { 1.0 } else { 0.0 },
        )
    }

    #[test]
    fn uniform_logits_gradient() {
        let y = onehot(&[0, 2], 3);
        let e = loss_and_output_grad(&Matrix::zeros(3, 2), &y, Loss::CrossEntropy).unwrap();
        for c in 0..2 {
            for m in 0..3 {
                let expect = (1.0 / 3.0 - y[(c, m)]) / 2.0;
                assert!((e.grad[(m, c)] - expect).abs() < 1e-15);
            }
        }
        assert!((e.value - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn saturated_margin() {
        let y = onehot(&[1], 2);
        let f = Matrix::from_rows(&[vec![0.0], vec![50.0]]).unwrap();
        let e = loss_and_output_grad(&f, &y, Loss::CrossEntropy).unwrap();
        assert!(e.grad.frobenius_norm() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let labels = [0, 1, 2, 1];
        let y = onehot(&labels, 3);
        let f = Matrix::from_fn(3, 4, |i, j| ((i * 5 + j) as f64 * 0.7).sin() * 2.0);
        for loss in [Loss::CrossEntropy, Loss::Mse] {
            let e = loss_and_output_grad(&f, &y, loss).unwrap();
            let h = 1e-6;
            for m in 0..3 {
                for c in 0..4 {
                    let mut fp = f.clone();
                    let mut fm = f.clone();
                    fp[(m, c)] += h;
                    fm[(m, c)] -= h;
                    let vp = loss_and_output_grad(&fp, &y, loss).unwrap().value;
                    let vm = loss_and_output_grad(&fm, &y, loss).unwrap().value;
                    let fd = (vp - vm) / (2.0 * h);
                    let g = e.grad[(m, c)];
                    assert!(
                        (fd - g).abs() <= 1e-5 * g.abs().max(1e-3),
                        "{loss:?} {fd} {g}"
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_nan_and_bad_targets() {
        let y = onehot(&[0], 2);
        let f = Matrix::from_rows(&[vec![f64::NAN], vec![0.0]]).unwrap();
        assert!(matches!(
            loss_and_output_grad(&f, &y, Loss::Mse),
            Err(Error::NonFinite(_))
        ));
        let soft = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(loss_and_output_grad(&Matrix::zeros(2, 1), &soft, Loss::CrossEntropy).is_err());
    }

    #[test]
    fn dataset_major_order() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(flatten_dataset_major(&a), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(accuracy(&a, &[1, 1]), 1.0);
    }
}
