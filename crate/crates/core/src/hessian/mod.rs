//! Second-order probes built on `H_w` Hessian-vector products.

mod operator;

pub use operator::{GatePolicy, Hvp, HwOperator};

use std::ops::Range;

use crate::alignment::CenteredLabels;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, pearson_corr, top_k_operator, Matrix};
use crate::nnet::Network;
use crate::rng::{self, Stream};

/// Relative error of `H_w θ` against `(L−1) ∇_θ s`. The identity holds
/// for bias-free piecewise-linear networks (homogeneity of degree L).
pub fn theorem_a_check(op: &HwOperator) -> Result<f64> {
    let depth = op.network().depth() as f64;
    let hv = op.hvp(op.theta())?.value;
    let target: Vec<f64> = op
        .gradient_at_snapshot()
        .iter()
        .map(|g| (depth - 1.0) * g)
        .collect();
    let denom = norm(&target);
    if denom == 0.0 {
        return Err(Error::Degenerate("∇s vanishes at the snapshot".into()));
    }
    let diff: Vec<f64> = hv.iter().zip(&target).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / denom)
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub probes: usize,
    /// Products whose finite difference crossed an activation kink.
    pub kinks: usize,
}

/// Hutchinson estimate of `tr(H_w)` with Rademacher probes.
pub fn hutchinson_trace(op: &HwOperator, probes: usize, seed: u64) -> Result<Estimate> {
    if probes < 2 {
        return Err(Error::Precondition(
            "Hutchinson needs at least two probes".into(),
        ));
    }
    let mut r = rng::stream(seed, Stream::Hutchinson);
    let mut samples = Vec::with_capacity(probes);
    let mut kinks = 0;
    for _ in 0..probes {
        let z: Vec<f64> = (0..op.dim()).map(|_| rng::rademacher(&mut r)).collect();
        let h = op.hvp(&z)?;
        kinks += usize::from(h.kink);
        samples.push(dot(&z, &h.value));
    }
    let (mean, se) = mean_se(&samples);
    Ok(Estimate {
        mean,
        std_error: se,
        probes,
        kinks,
    })
}

fn mean_se(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Relative asymmetry `|⟨u,Hv⟩ − ⟨v,Hu⟩| / (‖u‖‖v‖‖H‖)`.
pub fn symmetry_defect(op: &HwOperator, u: &[f64], v: &[f64], h_norm: f64) -> Result<f64> {
    let hu = op.hvp(u)?.value;
    let hv = op.hvp(v)?.value;
    let scale = norm(u) * norm(v) * h_norm;
    if scale == 0.0 {
        return Err(Error::Degenerate(
            "zero vectors or operator in symmetry check".into(),
        ));
    }
    Ok((dot(u, &hv) - dot(v, &hu)).abs() / scale)
}

/// Top eigenpairs of `H_w` by |λ| and their per-layer energies.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProfile {
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `energies[i][l]`: squared norm of eigenvector `i` on layer `l+1`.
    pub energies: Vec<Vec<f64>>,
}

impl SpectrumProfile {
    pub fn csv_header(depth: usize) -> String {
        let mut h = String::from("rank,eigenvalue,residual");
        for l in 1..=depth {
            h.push_str(&format!(",energy_layer_{l}"));
        }
        h
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut row = format!("{},{:.10e},{:.3e}", i + 1, l, self.residuals[i]);
                for e in &self.energies[i] {
                    row.push_str(&format!(",{e:.10e}"));
                }
                row
            })
            .collect()
    }

    /// Mean energy share of each layer over all eigenvectors.
    pub fn mean_energy(&self) -> Vec<f64> {
        let k = self.energies.len().max(1) as f64;
        let depth = self.energies.first().map_or(0, Vec::len);
        (0..depth)
            .map(|l| self.energies.iter().map(|e| e[l]).sum::<f64>() / k)
            .collect()
    }

    /// Largest relative mismatch `|λ + λ′|/|λ|` when pairing every eigenvalue
    /// with its closest opposite-sign partner.
    pub fn pairing_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for &l in &self.eigenvalues {
            let best = self
                .eigenvalues
                .iter()
                .filter(|&&m| m.signum() != l.signum())
                .map(|&m| (l + m).abs() / l.abs())
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
        worst
    }
}

pub fn layer_energies(v: &[f64], partition: &[Range<usize>]) -> Vec<f64> {
    let total = dot(v, v);
    partition
        .iter()
        .map(|r| v[r.clone()].iter().map(|a| a * a).sum::<f64>() / total)
        .collect()
}

pub fn top_spectrum(op: &HwOperator, k: usize, tol: f64, seed: u64) -> Result<SpectrumProfile> {
    if k == 0 || k > 256 {
        return Err(Error::Precondition(format!(
            "k must be in 1..=256, got {k}"
        )));
    }
    let partition = op.network().layer_ranges();
    let s = top_k_operator(op.dim(), k, tol, seed, None, |v| Ok(op.hvp(v)?.value))?;
    let vecs = s
        .eigenvectors
        .as_ref()
        .expect("operator route returns vectors");
    let energies = (0..s.len())
        .map(|i| layer_energies(&vecs.col(i), &partition))
        .collect();
    Ok(SpectrumProfile {
        eigenvalues: s.eigenvalues.clone(),
        residuals: s.residual_norms.clone(),
        energies,
    })
}

/// One-step feature evolution along the centered labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureEvolution {
    /// corr(Ψ(t+1)Ỹ − Ψ(t)Ỹ, −η H_w Ψ(t)Ỹ).
    pub correlation: f64,
    pub observed_norm: f64,
    pub predicted_norm: f64,
    /// `‖ΔΨỸ − H_Ỹ Δθ‖`, the second-order Taylor remainder.
    pub taylor_residual: f64,
}

/// `op` must hold `w = ∂L/∂F` of `net_t` (as from [`HwOperator::from_loss`]);
/// since that gradient already carries the 1/n of the mean loss, the
/// prediction is `−lr·H_w Ψ(t)Ỹ`, i.e. step `lr/n` against `n·∂L/∂F`.
pub fn feature_evolution_check(
    net_t: &Network,
    net_t1: &Network,
    op: &HwOperator,
    x: &Matrix,
    labels: &CenteredLabels,
    lr: f64,
) -> Result<FeatureEvolution> {
    if net_t.dims != net_t1.dims {
        return Err(Error::Dimension("networks have different shapes".into()));
    }
    let before = net_t.weighted_output_grad(x, &labels.ytilde)?;
    let after = net_t1.weighted_output_grad(x, &labels.ytilde)?;
    let observed: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    if norm(&observed) == 0.0 {
        return Err(Error::Degenerate("features did not move".into()));
    }
    let predicted: Vec<f64> = op.hvp(&before)?.value.iter().map(|v| -lr * v).collect();
    let correlation = pearson_corr(&observed, &predicted)?;

    let label_op = HwOperator::new(net_t, x, &labels.ytilde)?;
    let dtheta: Vec<f64> = net_t1
        .params()
        .iter()
        .zip(net_t.params())
        .map(|(a, b)| a - b)
        .collect();
    let first_order = label_op.hvp(&dtheta)?.value;
    let rem: Vec<f64> = observed
        .iter()
        .zip(&first_order)
        .map(|(a, b)| a - b)
        .collect();
    Ok(FeatureEvolution {
        correlation,
        observed_norm: norm(&observed),
        predicted_norm: norm(&predicted),
        taylor_residual: norm(&rem),
    })
}

/// Hutchinson estimate of `tr(M_l H^k)/tr(M_l H²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRatio {
    pub layer: usize,
    pub k: u32,
    pub ratio: f64,
    pub std_error: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub denominator_se: f64,
    pub probes: usize,
}

impl MomentRatio {
    pub const CSV_HEADER: &'static str =
        "layer,k,ratio,std_error,numerator,denominator,denominator_se,probes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{}",
            self.layer,
            self.k,
            self.ratio,
            self.std_error,
            self.numerator,
            self.denominator,
            self.denominator_se,
            self.probes
        )
    }
}

/// `M_l` selects the coordinates of 1-based layer `l`.
pub fn layer_moment_ratio(
    op: &HwOperator,
    l: usize,
    k: u32,
    probes: usize,
    seed: u64,
) -> Result<MomentRatio> {
    if !(2..=4).contains(&k) {
        return Err(Error::Precondition(format!(
            "moment order must be 2, 3 or 4, got {k}"
        )));
    }
    if probes < 100 {
        return Err(Error::Precondition(format!(
            "need at least 100 probes, got {probes}"
        )));
    }
    let depth = op.network().depth();
    if l == 0 || l > depth {
        return Err(Error::Index(format!("layer {l} outside 1..={depth}")));
    }
    let range = op.network().layer_range(l - 1);
    let mut r = rng::substream(seed, Stream::Hutchinson, l as u64);
    let mut num = Vec::with_capacity(probes);
    let mut den = Vec::with_capacity(probes);
    let mut z = vec![0.0; op.dim()];
    for _ in 0..probes {
        for i in range.clone() {
            z[i] = rng::rademacher(&mut r);
        }
        let a = op.hvp(&z)?.value;
        let d = dot(&a, &a);
        let nk = match k {
            2 => d,
            _ => {
                let b = op.hvp(&a)?.value;
                if k == 3 {
                    dot(&a, &b)
                } else {
                    dot(&b, &b)
                }
            }
        };
        num.push(nk);
        den.push(d);
    }
    let (dm, dse) = mean_se(&den);
    if dm.abs() <= 2.0 * dse {
        return Err(Error::Unstable(format!(
            "denominator {dm:.3e} within two standard errors ({dse:.3e}) of zero"
        )));
    }
    let (nm, _) = mean_se(&num);
    let ratio = if k == 2 { 1.0 } else { nm / dm };
    // Delta method for a ratio of means.
    let resid: Vec<f64> = num.iter().zip(&den).map(|(a, b)| a - ratio * b).collect();
    let (_, rse) = mean_se(&resid);
    Ok(MomentRatio {
        layer: l,
        k,
        ratio,
        std_error: if k == 2 { 0.0 } else { rse / dm.abs() },
        numerator: nm,
        denominator: dm,
        denominator_se: dse,
        probes,
    })
}

/// Exact `tr(M H^k)/tr(M H²)` from a dense symmetric `H`.
pub fn dense_moment_ratio(h: &Matrix, range: Range<usize>, k: u32) -> Result<f64> {
    if !(2..=4).contains(&k) {
        return Err(Error::Precondition(format!(
            "moment order must be 2, 3 or 4, got {k}"
        )));
    }
    let h2 = h.matmul(h);
    let hk = match k {
        2 => h2.clone(),
        3 => h2.matmul(h),
        _ => h2.matmul(&h2),
    };
    let tr = |m: &Matrix| range.clone().map(|i| m[(i, i)]).sum::<f64>();
    let den = tr(&h2);
    if den == 0.0 {
        return Err(Error::Degenerate("layer block of H² has zero trace".into()));
    }
    Ok(tr(&hk) / den)
}

/// `Ψ ← Ψ − η (H Ψw) wᵀ / ‖w‖²`.
pub fn gofe_step<F>(psi: &Matrix, w: &[f64], eta: f64, mut hw_apply: F) -> Result<Matrix>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if psi.cols() != w.len() {
        return Err(Error::Dimension(format!(
            "Ψ has {} columns, w has length {}",
            psi.cols(),
            w.len()
        )));
    }
    let w2 = dot(w, w);
    if w2 == 0.0 {
        return Err(Error::Degenerate("w is zero".into()));
    }
    let h = hw_apply(&psi.matvec(w))?;
    if h.len() != psi.rows() {
        return Err(Error::Dimension(
            "operator output has the wrong length".into(),
        ));
    }
    let mut out = psi.clone();
    for j in 0..psi.cols() {
        let c = eta * w[j] / w2;
        for i in 0..psi.rows() {
            out[(i, j)] -= c * h[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Activation, FfnnConfig, Loss};

    fn data(n: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
        let mut r = rng::stream(seed, Stream::Data);
        let x = Matrix::from_fn(n, d, |_, _| rng::normal(&mut r));
        let y = Matrix::from_fn(n, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 });
        (x, y)
    }

    fn op_for(cfg: FfnnConfig, n: usize) -> (Network, Matrix, Matrix, HwOperator) {
        let net = Network::init(&cfg).unwrap();
        let (x, y) = data(n, cfg.input_dim, 2);
        let op = HwOperator::from_loss(&net, &x, &y, Loss::CrossEntropy).unwrap();
        (net, x, y, op)
    }

    #[test]
    fn euler_identity() {
        let (_, _, _, op) = op_for(FfnnConfig::new(6, 16, 5, 2, 1), 32);
        assert!(theorem_a_check(&op).unwrap() < 1e-3);
        let leaky = FfnnConfig::new(6, 16, 5, 2, 1).with_activation(Activation::LeakyRelu(0.1));
        let (_, _, _, op) = op_for(leaky, 32);
        assert!(theorem_a_check(&op).unwrap() < 1e-3);
        let (_, _, _, op) = op_for(FfnnConfig::new(6, 16, 5, 2, 1).with_bias(true), 32);
        assert!(theorem_a_check(&op).unwrap() > 0.01);
    }

    #[test]
    fn moment_ratio_k2_is_one() {
        let (_, _, _, op) = op_for(FfnnConfig::new(3, 6, 3, 2, 5), 8);
        let m = layer_moment_ratio(&op, 2, 2, 100, 1).unwrap();
        assert_eq!(m.ratio, 1.0);
        assert!(layer_moment_ratio(&op, 2, 2, 99, 1).is_err());
        assert!(layer_moment_ratio(&op, 4, 2, 100, 1).is_err());
    }

    #[test]
    fn moment_ratio_against_dense() {
        let (net, _, _, op) = op_for(FfnnConfig::new(3, 6, 3, 2, 5), 8);
        let h = op.dense().unwrap();
        let exact = dense_moment_ratio(&h, net.layer_range(1), 4).unwrap();
        let est = layer_moment_ratio(&op, 2, 4, 2000, 3).unwrap();
        assert!(
            (est.ratio - exact).abs() < 0.05 * exact.abs(),
            "{} vs {exact}",
            est.ratio
        );
    }

    #[test]
    fn spectrum_energies_sum_to_one() {
        let (_, _, _, op) = op_for(FfnnConfig::new(3, 6, 3, 2, 5), 8);
        let p = top_spectrum(&op, 4, 1e-6, 0).unwrap();
        for e in &p.energies {
            assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
        let h = op.dense().unwrap();
        let dense = crate::linalg::sym_spectrum(&h, crate::linalg::Which::Top(4), 1e-10).unwrap();
        for (a, b) in p.eigenvalues.iter().zip(&dense.eigenvalues) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1e-3));
        }
        assert_eq!(p.csv_rows()[0].split(',').count(), 6);
    }

    #[test]
    fn gofe_properties() {
        let mut r = rng::stream(3, Stream::Aux);
        let psi = Matrix::from_fn(5, 4, |_, _| rng::normal(&mut r));
        let h = Matrix::from_fn(5, 5, |i, j| (i + j) as f64 * 0.1);
        let apply = |v: &[f64]| Ok(h.matvec(v));
        let w = [1.0, 0.0, -2.0, 0.0];
        let out = gofe_step(&psi, &w, 0.3, apply).unwrap();
        let u = [0.0, 1.5, 0.0, -0.5];
        assert_eq!(psi.matvec(&u), out.matvec(&u));
        assert_eq!(gofe_step(&psi, &w, 0.0, apply).unwrap(), psi);
        // w ∝ y: Ψy moves by −η H Ψy.
        let moved = out.matvec(&w);
        let expect: Vec<f64> = psi
            .matvec(&w)
            .iter()
            .zip(h.matvec(&psi.matvec(&w)))
            .map(|(a, b)| a - 0.3 * b)
            .collect();
        for (a, b) in moved.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(gofe_step(&psi, &[0.0; 4], 0.3, apply).is_err());
    }

    #[test]
    fn frozen_step_is_degenerate() {
        let (net, x, y, op) = op_for(FfnnConfig::new(3, 6, 3, 2, 5), 8);
        let labels = CenteredLabels::from_onehot(&y).unwrap();
        assert!(matches!(
            feature_evolution_check(&net, &net, &op, &x, &labels, 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn energies_of_basis_vector() {
        let e = layer_energies(&[0.0, 3.0, 4.0], &[0..1, 1..3]);
        assert_eq!(e, vec![0.0, 1.0]);
    }
}
