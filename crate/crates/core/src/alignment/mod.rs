//! Kernel alignment analytics on tangent kernels.

mod report;

pub use report::{alignment_snapshot, AlignmentReport, LayerAlignment, SnapshotOptions};

use crate::error::{Error, Result};
use crate::linalg::{
    center_kernel, dot, norm, pearson_corr, sym_spectrum, sym_spectrum_seeded, Matrix, Which,
};
use crate::nnet::{
    loss_and_output_grad, softmax_columns, Loss, Network, TangentFactors, TangentFeatureBlock,
};

/// One-hot targets flattened dataset-major together with their centered
/// versions.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredLabels {
    pub num_samples: usize,
    pub num_classes: usize,
    /// `Y ∈ R^{on}`, entry `x·k + m`.
    pub y: Vec<f64>,
    /// `(I − 11ᵀ/(on)) Y`, used by the layer alignment.
    pub ytilde: Vec<f64>,
    /// `(I − 11ᵀ/(kn)) Y`, the label centering of the training dynamics.
    pub ytilde_classwise: Vec<f64>,
    pub ytilde_norm: f64,
    pub ytilde_classwise_norm: f64,
}

impl CenteredLabels {
    /// From an n × k one-hot matrix.
    pub fn from_onehot(y: &Matrix) -> Result<Self> {
        let (n, k) = y.shape();
        let flat = y.data().to_vec();
        Self::from_flat(flat, n, k, k)
    }

    /// From integer labels.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside 0..{k}")));
        }
        let y = Matrix::from_fn(
            labels.len(),
            k,
            |i, j| if labels[i] == j { 1.0 } else { 0.0 },
        );
        Self::from_onehot(&y)
    }

    /// `o` is the number of network outputs; it equals `k` for one-hot
    /// targets, so both centerings coincide there.
    fn from_flat(y: Vec<f64>, n: usize, k: usize, o: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Degenerate("empty label set".into()));
        }
        let total: f64 = y.iter().sum();
        let on = (o * n) as f64;
        let kn = (k * n) as f64;
        let ytilde: Vec<f64> = y.iter().map(|v| v - total / on).collect();
        let ytilde_classwise: Vec<f64> = y.iter().map(|v| v - total / kn).collect();
        let ytilde_norm = norm(&ytilde);
        if ytilde_norm == 0.0 {
            return Err(Error::Degenerate(
                "labels are constant after centering".into(),
            ));
        }
        let ytilde_classwise_norm = norm(&ytilde_classwise);
        Ok(CenteredLabels {
            num_samples: n,
            num_classes: k,
            y,
            ytilde,
            ytilde_classwise,
            ytilde_norm,
            ytilde_classwise_norm,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Centered kernel alignment `Tr(K_c K′_c)/(‖K_c‖_F ‖K′_c‖_F)`.
pub fn cka(k: &Matrix, kp: &Matrix) -> Result<f64> {
    if k.shape() != kp.shape() {
        return Err(Error::Dimension(format!(
            "kernels {}x{} and {}x{}",
            k.rows(),
            k.cols(),
            kp.rows(),
            kp.cols()
        )));
    }
    let kc = center_kernel(k)?;
    let kpc = center_kernel(kp)?;
    let a = kc.frobenius_norm();
    let b = kpc.frobenius_norm();
    if a == 0.0 || b == 0.0 {
        return Err(Error::Degenerate("centered kernel has zero norm".into()));
    }
    Ok(kc.frobenius_dot(&kpc) / (a * b))
}

fn check_gram(gram: &Matrix, labels: &CenteredLabels) -> Result<()> {
    if gram.shape() != (labels.len(), labels.len()) {
        return Err(Error::Dimension(format!(
            "kernel is {}x{}, labels have length {}",
            gram.rows(),
            gram.cols(),
            labels.len()
        )));
    }
    Ok(())
}

fn quad(m: &Matrix, v: &[f64]) -> f64 {
    dot(v, &m.matvec(v))
}

/// `A_l = ỸᵀGỸ / (‖CGC‖_F ‖Ỹ‖²)` for the tangent kernel `G = ΨᵀΨ`.
pub fn layer_alignment_from_gram(gram: &Matrix, labels: &CenteredLabels) -> Result<f64> {
    check_gram(gram, labels)?;
    let kc_norm = center_kernel(gram)?.frobenius_norm();
    if kc_norm == 0.0 {
        return Err(Error::Degenerate("centered tangent kernel vanishes".into()));
    }
    Ok(quad(gram, &labels.ytilde) / (kc_norm * labels.ytilde_norm * labels.ytilde_norm))
}

/// Layer alignment from explicit tangent features. Only the `on × on` Gram
/// is formed.
pub fn layer_alignment(psi: &TangentFeatureBlock, labels: &CenteredLabels) -> Result<f64> {
    if psi.psi.cols() != labels.len() {
        return Err(Error::Dimension(format!(
            "tangent features have {} columns, labels have length {}",
            psi.psi.cols(),
            labels.len()
        )));
    }
    layer_alignment_from_gram(&psi.gram(), labels)
}

/// Alignment without any centering: `YᵀGY / (‖G‖_F ‖Y‖²)`.
pub fn uncentered_alignment(gram: &Matrix, labels: &CenteredLabels) -> Result<f64> {
    check_gram(gram, labels)?;
    let g = gram.frobenius_norm();
    let yn = norm(&labels.y);
    if g == 0.0 {
        return Err(Error::Degenerate("tangent kernel vanishes".into()));
    }
    Ok(quad(gram, &labels.y) / (g * yn * yn))
}

/// Largest |λ| of a symmetric matrix.
pub fn top_abs_eigenvalue(m: &Matrix) -> Result<f64> {
    if m.rows() <= 64 {
        let s = sym_spectrum(m, Which::All, 1e-10)?;
        Ok(s.eigenvalues[0].abs())
    } else {
        let s = sym_spectrum_seeded(m, Which::Top(1), 1e-10, 0)?;
        Ok(s.eigenvalues[0].abs())
    }
}

/// Stable rank `‖M‖_F² / ‖M‖_2²`, clamped to `[1, min(rows, cols)]`.
pub fn stable_rank(m: &Matrix) -> Result<f64> {
    m.ensure_finite("matrix")?;
    let fro_sq = m.frobenius_norm_sq();
    if fro_sq == 0.0 {
        return Err(Error::Degenerate("stable rank of a zero matrix".into()));
    }
    let spectral_sq = if m.is_square() && m.max_asymmetry() == 0.0 {
        top_abs_eigenvalue(m)?.powi(2)
    } else if m.rows() <= m.cols() {
        top_abs_eigenvalue(&m.gram_rows())?
    } else {
        top_abs_eigenvalue(&m.gram_cols())?
    };
    let cap = m.rows().min(m.cols()) as f64;
    Ok((fro_sq / spectral_sq).clamp(1.0, cap))
}

/// Stable rank of the centered kernel together with the label correlation
/// term `Σ_i (λ_i/λ_1)⟨u_i, Ỹ/‖Ỹ‖⟩²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub stable_rank: f64,
    pub correlation_term: f64,
    /// `R^{−1/2}·correlation_term`.
    pub reconstructed: f64,
}

/// Decomposition from the full eigendecomposition of `CGC`.
pub fn cka_decomposition_from_gram(
    gram: &Matrix,
    labels: &CenteredLabels,
) -> Result<Decomposition> {
    check_gram(gram, labels)?;
    let mut kc = center_kernel(gram)?;
    kc.symmetrize();
    let spec = sym_spectrum(&kc, Which::All, 1e-9)?;
    let lambda1 = spec.eigenvalues[0];
    if lambda1 == 0.0 {
        return Err(Error::Degenerate("centered tangent kernel vanishes".into()));
    }
    let vecs = spec
        .eigenvectors
        .as_ref()
        .expect("full spectrum has vectors");
    let yhat: Vec<f64> = labels
        .ytilde
        .iter()
        .map(|v| v / labels.ytilde_norm)
        .collect();
    let proj = vecs.t_matvec(&yhat);
    let correlation_term: f64 = spec
        .eigenvalues
        .iter()
        .zip(&proj)
        .map(|(l, p)| l / lambda1 * p * p)
        .sum();
    let sq: f64 = spec.eigenvalues.iter().map(|l| l * l).sum();
    let stable = (sq / (lambda1 * lambda1)).max(1.0);
    Ok(Decomposition {
        stable_rank: stable,
        correlation_term,
        reconstructed: correlation_term / stable.sqrt(),
    })
}

pub fn cka_decomposition(
    psi: &TangentFeatureBlock,
    labels: &CenteredLabels,
) -> Result<Decomposition> {
    if labels.len() > crate::linalg::MAX_FULL_DIM {
        return Err(Error::Unsupported(format!(
            "decomposition needs on <= {}, got {}",
            crate::linalg::MAX_FULL_DIM,
            labels.len()
        )));
    }
    cka_decomposition_from_gram(&psi.gram(), labels)
}

/// Same quantities from the top eigenvalue only:
/// `R = ‖K_c‖_F²/λ_1²`, correlation term `ỸᵀK_cỸ/(λ_1‖Ỹ‖²)`.
pub fn cka_decomposition_fast(gram: &Matrix, labels: &CenteredLabels) -> Result<Decomposition> {
    check_gram(gram, labels)?;
    let mut kc = center_kernel(gram)?;
    kc.symmetrize();
    let lambda1 = top_abs_eigenvalue(&kc)?;
    if lambda1 == 0.0 {
        return Err(Error::Degenerate("centered tangent kernel vanishes".into()));
    }
    let stable = (kc.frobenius_norm_sq() / (lambda1 * lambda1)).max(1.0);
    let yn2 = labels.ytilde_norm * labels.ytilde_norm;
    let correlation_term = quad(&kc, &labels.ytilde) / (lambda1 * yn2);
    Ok(Decomposition {
        stable_rank: stable,
        correlation_term,
        reconstructed: correlation_term / stable.sqrt(),
    })
}

/// Forward and backward factor kernels of an output-dimension-1 network.
#[derive(Debug, Clone)]
pub struct FactorKernels {
    /// `(1/N) φ(z_{l−1}(x))·φ(z_{l−1}(x′))` (plus `1/N` with biases).
    pub forward: Matrix,
    /// `(1/N) ∂f/∂z_l(x) · ∂f/∂z_l(x′)`.
    pub backward: Matrix,
    /// `‖K̄_l − K_fwd∘K_bwd‖_F / ‖K̄_l‖_F` with `K̄_l = gram(Ψ_l)/N²`
    /// computed from explicit tangent features.
    pub hadamard_residual: f64,
}

/// Kernel factorization at 1-based layer `l ∈ [2, L]`, `N` = fan-in of `l`.
pub fn forward_backward_kernels(
    net: &Network,
    factors: &TangentFactors,
    l: usize,
) -> Result<FactorKernels> {
    if net.output_dim() != 1 {
        return Err(Error::Unsupported(format!(
            "kernel factorization needs one output, network has {}",
            net.output_dim()
        )));
    }
    if l < 2 || l > net.depth() {
        return Err(Error::Index(format!(
            "layer {l} outside 2..={}",
            net.depth()
        )));
    }
    let i = l - 1;
    let width = net.dims[i] as f64;
    let mut forward = factors.inputs[i].gram_rows();
    if factors.use_bias {
        forward.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    forward.scale_in_place(1.0 / width);
    let mut backward = factors.deltas[i][0].gram_rows();
    backward.scale_in_place(1.0 / width);
    let explicit = factors.layer_psi(l)?.gram().scale(1.0 / (width * width));
    let denom = explicit.frobenius_norm();
    let residual = if denom == 0.0 {
        forward.hadamard(&backward).frobenius_norm()
    } else {
        explicit.sub(&forward.hadamard(&backward)).frobenius_norm() / denom
    };
    Ok(FactorKernels {
        forward,
        backward,
        hadamard_residual: residual,
    })
}

/// Per-sample output Hessian of the loss, the "middle" of the empirical
/// Fisher `Ψ H Ψᵀ`. MSE uses the identity (the Fisher then shares its
/// nonzero eigenvalues with the tangent kernel); cross-entropy uses
/// `diag(p) − ppᵀ` per sample. Returns the block-diagonal PSD square root.
pub fn output_hessian_sqrt(f: &Matrix, loss: Loss) -> Result<Vec<Matrix>> {
    let (o, n) = f.shape();
    match loss {
        Loss::Mse => Ok((0..n).map(|_| Matrix::identity(o)).collect()),
        Loss::CrossEntropy => {
            let p = softmax_columns(f);
            let mut out = Vec::with_capacity(n);
            for c in 0..n {
                let pc = p.col(c);
                let block = softmax_hessian_block(&pc);
                out.push(psd_sqrt(&block)?);
            }
            Ok(out)
        }
    }
}

/// `diag(p) − ppᵀ`.
pub fn softmax_hessian_block(p: &[f64]) -> Matrix {
    Matrix::from_fn(p.len(), p.len(), |i, j| {
        if i == j {
            p[i] - p[i] * p[j]
        } else {
            -p[i] * p[j]
        }
    })
}

fn psd_sqrt(block: &Matrix) -> Result<Matrix> {
    let spec = sym_spectrum(block, Which::All, 1e-9)?;
    let vecs = spec.eigenvectors.expect("full spectrum has vectors");
    let mut roots = Vec::with_capacity(spec.eigenvalues.len());
    for &l in &spec.eigenvalues {
        if l < -1e-10 {
            return Err(Error::Precondition(format!(
                "output Hessian block has eigenvalue {l}"
            )));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let scaled = Matrix::from_fn(vecs.rows(), vecs.cols(), |i, j| vecs[(i, j)] * roots[j]);
    Ok(scaled.matmul_t(&vecs))
}

/// `S G S` with `S` the block-diagonal Hessian square root; its nonzero
/// spectrum equals that of the empirical Fisher `Ψ S² Ψᵀ`.
pub fn fisher_gram(gram: &Matrix, sqrt_blocks: &[Matrix]) -> Result<Matrix> {
    let n = sqrt_blocks.len();
    let o = sqrt_blocks.first().map_or(0, Matrix::rows);
    if gram.shape() != (n * o, n * o) {
        return Err(Error::Dimension(
            "Fisher blocks do not match the kernel".into(),
        ));
    }
    let mut s = Matrix::zeros(n * o, n * o);
    for (x, b) in sqrt_blocks.iter().enumerate() {
        for i in 0..o {
            for j in 0..o {
                s[(x * o + i, x * o + j)] = b[(i, j)];
            }
        }
    }
    let mut out = s.matmul(gram).matmul(&s);
    out.symmetrize();
    Ok(out)
}

/// Stable rank and label correlation of the Fisher (informational).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherSummary {
    pub stable_rank: f64,
    pub correlation: f64,
}

pub fn fisher_summary(
    gram: &Matrix,
    sqrt_blocks: &[Matrix],
    labels: &CenteredLabels,
) -> Result<FisherSummary> {
    let fg = fisher_gram(gram, sqrt_blocks)?;
    let lambda1 = top_abs_eigenvalue(&fg)?;
    if lambda1 == 0.0 {
        return Err(Error::Degenerate("Fisher matrix vanishes".into()));
    }
    let stable = (fg.frobenius_norm_sq() / (lambda1 * lambda1)).max(1.0);
    let yn2 = labels.ytilde_norm * labels.ytilde_norm;
    Ok(FisherSummary {
        stable_rank: stable,
        correlation: quad(&fg, &labels.ytilde) / (lambda1 * yn2),
    })
}

/// Fisher stable rank per layer and Fisher correlation of the full Fisher.
pub fn fisher_report(
    factors: &TangentFactors,
    f: &Matrix,
    loss: Loss,
    labels: &CenteredLabels,
) -> Result<(Vec<f64>, f64)> {
    let blocks = output_hessian_sqrt(f, loss)?;
    let mut ranks = Vec::with_capacity(factors.depth());
    let mut total: Option<Matrix> = None;
    for l in 1..=factors.depth() {
        let g = factors.layer_gram(l)?;
        ranks.push(fisher_summary(&g, &blocks, labels)?.stable_rank);
        match &mut total {
            Some(t) => t.add_scaled(1.0, &g),
            None => total = Some(g),
        }
    }
    let total = total.ok_or_else(|| Error::Degenerate("network has no layers".into()))?;
    let corr = fisher_summary(&total, &blocks, labels)?.correlation;
    Ok((ranks, corr))
}

/// Pearson correlation between the loss-gradient vector `w` (dataset-major)
/// and the centered labels.
pub fn label_gradient_correlation(w: &[f64], labels: &CenteredLabels) -> Result<f64> {
    if w.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "gradient vector of length {}, labels of length {}",
            w.len(),
            labels.len()
        )));
    }
    if norm(w) < 1e-300 {
        return Err(Error::Degenerate("loss gradient vanishes".into()));
    }
    pearson_corr(w, &labels.ytilde)
}

/// `w = ∂L/∂F` flattened dataset-major.
pub fn loss_gradient_vector(f: &Matrix, y: &Matrix, loss: Loss) -> Result<Vec<f64>> {
    let eval = loss_and_output_grad(f, y, loss)?;
    Ok(crate::nnet::flatten_dataset_major(&eval.grad))
}
