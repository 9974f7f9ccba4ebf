use super::{
    cka_decomposition_fast, cka_decomposition_from_gram, fisher_summary, forward_backward_kernels,
    label_gradient_correlation, layer_alignment_from_gram, output_hessian_sqrt,
    uncentered_alignment, CenteredLabels,
};
use crate::error::Result;
use crate::linalg::{Matrix, MAX_FULL_DIM};
use crate::nnet::{flatten_dataset_major, loss_and_output_grad, tangent_factors, Loss, Network};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SnapshotOptions {
    /// Full eigendecomposition for the decomposition instead of the top
    /// eigenvalue only.
    pub full_spectrum: bool,
    pub fisher: bool,
}

/// Per-layer alignment metrics. Fields that do not apply are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerAlignment {
    /// 1-based.
    pub layer: usize,
    pub alignment: f64,
    pub uncentered: f64,
    pub stable_rank: f64,
    pub correlation_term: f64,
    pub hadamard_residual: f64,
    pub fisher_stable_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub epoch: usize,
    pub layers: Vec<LayerAlignment>,
    /// Correlation between the loss gradient and the centered labels.
    pub label_gradient_corr: f64,
    pub fisher_corr: f64,
}

impl AlignmentReport {
    pub const CSV_HEADER: &'static str =
        "epoch,layer,A_l,stable_rank,corr_term,hadamard_residual,fisher_srank,fisher_corr";

    pub fn alignments(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.alignment).collect()
    }

    /// 1-based layer with the largest alignment (first on ties).
    pub fn peak_layer(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.alignment > self.layers[best].alignment {
                best = i;
            }
        }
        self.layers[best].layer
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    self.epoch,
                    l.layer,
                    fmt(l.alignment),
                    fmt(l.stable_rank),
                    fmt(l.correlation_term),
                    fmt(l.hadamard_residual),
                    fmt(l.fisher_stable_rank),
                    fmt(self.fisher_corr)
                )
            })
            .collect()
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.10e}")
    }
}

/// All layer metrics on the probe set `x` (rows are samples) with one-hot
/// targets `y`.
pub fn alignment_snapshot(
    net: &Network,
    x: &Matrix,
    y: &Matrix,
    loss: Loss,
    epoch: usize,
    opts: SnapshotOptions,
) -> Result<AlignmentReport> {
    let labels = CenteredLabels::from_onehot(y)?;
    let factors = tangent_factors(net, x)?;
    let f = net.output(x)?;
    let eval = loss_and_output_grad(&f, y, loss)?;
    let w = flatten_dataset_major(&eval.grad);
    let label_gradient_corr = label_gradient_correlation(&w, &labels).unwrap_or(f64::NAN);
    let blocks = if opts.fisher {
        Some(output_hessian_sqrt(&f, loss)?)
    } else {
        None
    };
    let full = opts.full_spectrum && labels.len() <= MAX_FULL_DIM;

    let mut layers = Vec::with_capacity(net.depth());
    let mut total: Option<Matrix> = None;
    for l in 1..=net.depth() {
        let gram = factors.layer_gram(l)?;
        let alignment = layer_alignment_from_gram(&gram, &labels)?;
        let uncentered = uncentered_alignment(&gram, &labels)?;
        let d = if full {
            cka_decomposition_from_gram(&gram, &labels)?
        } else {
            cka_decomposition_fast(&gram, &labels)?
        };
        let hadamard_residual = if net.output_dim() == 1 && l >= 2 {
            forward_backward_kernels(net, &factors, l)?.hadamard_residual
        } else {
            f64::NAN
        };
        let fisher_stable_rank = match &blocks {
            Some(b) => fisher_summary(&gram, b, &labels)?.stable_rank,
            None => f64::NAN,
        };
        if blocks.is_some() {
            match &mut total {
                Some(t) => t.add_scaled(1.0, &gram),
                None => total = Some(gram),
            }
        }
        layers.push(LayerAlignment {
            layer: l,
            alignment,
            uncentered,
            stable_rank: d.stable_rank,
            correlation_term: d.correlation_term,
            hadamard_residual,
            fisher_stable_rank,
        });
    }
    let fisher_corr = match (&blocks, &total) {
        (Some(b), Some(t)) => fisher_summary(t, b, &labels)?.correlation,
        _ => f64::NAN,
    };
    Ok(AlignmentReport {
        epoch,
        layers,
        label_gradient_corr,
        fisher_corr,
    })
}
