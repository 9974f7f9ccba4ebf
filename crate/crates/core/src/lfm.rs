//! Greedy layer-by-layer training of forward features towards the label
//! kernel `½δ_{y_i,y_j}`, followed by a cross-entropy read-out layer.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::{
    accuracy, optimizer_step, run_training, Activation, Grads, Loss, Network, Optimizer, Schedule,
    DEFAULT_LEAKY_SLOPE,
};
use crate::rng::{self, Stream};

/// Tolerance on unit row norms of layer inputs.
pub const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LfmConfig {
    /// Hidden widths, one per greedily trained layer.
    pub widths: Vec<usize>,
    pub slope: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    /// Epochs without a new best validation loss before a layer stops.
    pub patience: usize,
    pub max_epochs: usize,
    /// Samples held out for early stopping; the rest are trained on.
    pub val_size: usize,
    pub classifier_optimizer: Optimizer,
    pub classifier_epochs: usize,
    pub seed: u64,
}

impl LfmConfig {
    pub fn new(widths: Vec<usize>, seed: u64) -> Self {
        LfmConfig {
            widths,
            slope: DEFAULT_LEAKY_SLOPE,
            optimizer: Optimizer::adam(1e-3),
            batch_size: 64,
            patience: 3,
            max_epochs: 30,
            val_size: 200,
            classifier_optimizer: Optimizer::adam(1e-2),
            classifier_epochs: 30,
            seed,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid widths {:?}", self.widths)));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.val_size == 0 || self.val_size >= n {
            return Err(Error::Config(format!(
                "validation size {} must be in 1..{n}",
                self.val_size
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Activation::LeakyRelu(self.slope).validate()
    }
}

/// Scale every row to unit Euclidean norm.
pub fn normalize_rows(a: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let nrm = crate::linalg::norm(row);
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::Degenerate(format!("row {r} has norm {nrm}")));
        }
        row.iter_mut().for_each(|v| *v /= nrm);
    }
    Ok(out)
}

fn check_unit_rows(a: &Matrix) -> Result<()> {
    for r in 0..a.rows() {
        let nrm = crate::linalg::norm(a.row(r));
        if (nrm - 1.0).abs() > NORM_TOL {
            return Err(Error::Precondition(format!(
                "row {r} has norm {nrm}, expected 1"
            )));
        }
    }
    Ok(())
}

/// `½δ_{y_i,y_j}` for the given labels.
pub fn target_kernel(labels: &[usize]) -> Matrix {
    let n = labels.len();
    Matrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { 0.5 } else { 0.0 })
}

/// `Σ_{i,j} (h_i·h_j − ½δ_{y_i,y_j})²` over all ordered pairs, diagonal
/// included.
pub fn kernel_pair_loss(h: &Matrix, labels: &[usize]) -> Result<f64> {
    if h.rows() != labels.len() {
        return Err(Error::Dimension(
            "features and labels disagree on batch size".into(),
        ));
    }
    let diff = h.gram_rows().sub(&target_kernel(labels));
    Ok(diff.frobenius_norm_sq())
}

/// Mean `|h_i·h_j − ½δ|` over ordered pairs.
pub fn kernel_mean_abs_deviation(h: &Matrix, labels: &[usize]) -> Result<f64> {
    if h.rows() != labels.len() {
        return Err(Error::Dimension(
            "features and labels disagree on batch size".into(),
        ));
    }
    let diff = h.gram_rows().sub(&target_kernel(labels));
    let n = labels.len() as f64;
    Ok(diff.data().iter().map(|v| v.abs()).sum::<f64>() / (n * n))
}

/// Kernel loss of one layer on a batch of unit-norm inputs and its gradient
/// with respect to the layer's weight and bias.
///
/// `layer` is a single-layer network `inputs → width`; the activation is
/// applied here with negative slope `slope`.
pub fn lfm_layer_loss(
    layer: &Network,
    slope: f64,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<(f64, Grads)> {
    if layer.depth() != 1 {
        return Err(Error::Config(
            "kernel layer must be a single linear map".into(),
        ));
    }
    check_unit_rows(inputs)?;
    let act = Activation::LeakyRelu(slope);
    let trace = layer.forward(inputs)?;
    let z = &trace.outputs; // width × B
    let h = z.map(|v| act.apply(v)); // width × B
    let k = h.t_matmul(&h);
    let diff = k.sub(&target_kernel(labels));
    let loss = diff.frobenius_norm_sq();
    // dL/dh = 4 (K − T) h, in width × B layout: 4 h (K − T).
    let dh = h.matmul(&diff).scale(4.0);
    let dz = dh.zip_map(z, |g, zz| g * act.derivative(zz));
    let grads = layer.backward(&trace, &dz)?;
    Ok((loss, grads))
}

/// Features of `inputs` after one kernel layer (unnormalized).
fn layer_features(layer: &Network, slope: f64, inputs: &Matrix) -> Result<Matrix> {
    let act = Activation::LeakyRelu(slope);
    Ok(layer.output(inputs)?.transpose().map(|v| act.apply(v)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-pair mean of the kernel loss.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerHistory {
    /// 1-based.
    pub layer: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    /// Last epoch run before early stopping (or the epoch limit).
    pub stopped_epoch: usize,
    pub val_mad_init: f64,
    pub val_mad_final: f64,
}

impl LayerHistory {
    pub const CSV_HEADER: &'static str = "layer,epoch,train_kernel_loss,val_kernel_loss,stopped";

    pub fn csv_rows(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "{},{},{:.10e},{:.10e},{}",
                    self.layer,
                    e.epoch,
                    e.train_loss,
                    e.val_loss,
                    u8::from(e.epoch == self.stopped_epoch)
                )
            })
            .collect()
    }

    /// Relative drop of the held-out mean absolute kernel deviation.
    pub fn mad_reduction(&self) -> f64 {
        1.0 - self.val_mad_final / self.val_mad_init
    }
}

/// Trained kernel layers plus the read-out.
#[derive(Debug, Clone)]
pub struct LfmModel {
    pub layers: Vec<Network>,
    pub classifier: Option<Network>,
    pub slope: f64,
}

impl LfmModel {
    /// Normalized features after every trained layer (index 0 is the
    /// normalized input).
    pub fn features(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut out = vec![normalize_rows(x)?];
        for layer in &self.layers {
            let h = layer_features(layer, self.slope, out.last().expect("nonempty"))?;
            out.push(normalize_rows(&h)?);
        }
        Ok(out)
    }

    /// Logits, o × n.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Precondition("model has no classifier".into()))?;
        let feats = self.features(x)?;
        c.output(feats.last().expect("nonempty"))
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.logits(x)?, labels))
    }
}

#[derive(Debug, Clone)]
pub struct LfmResult {
    pub model: LfmModel,
    pub histories: Vec<LayerHistory>,
    pub classifier_train_acc: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Set when a validation loss turned non-finite; histories are partial.
    pub aborted: Option<String>,
}

/// Greedy training. Rows of `x` must have unit norm.
pub fn lfm_train(
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
    cfg: &LfmConfig,
) -> Result<LfmResult> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::Dimension(
            "inputs and labels disagree on sample count".into(),
        ));
    }
    cfg.validate(n)?;
    check_unit_rows(x)?;
    let mut split = rng::stream(cfg.seed, Stream::Split);
    let perm = rng::permutation(&mut split, n);
    let (val_idx, train_idx) = perm.split_at(cfg.val_size);
    let mut val_indices = val_idx.to_vec();
    let mut train_indices = train_idx.to_vec();
    val_indices.sort_unstable();
    train_indices.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (ytr, yval) = (pick(&train_indices), pick(&val_indices));
    let mut a_tr = x.select_rows(&train_indices);
    let mut a_val = x.select_rows(&val_indices);

    let mut model = LfmModel {
        layers: Vec::new(),
        classifier: None,
        slope: cfg.slope,
    };
    let mut histories = Vec::new();
    let act = Activation::LeakyRelu(cfg.slope);
    let mean_loss = |h: &Matrix, y: &[usize]| -> Result<f64> {
        Ok(kernel_pair_loss(h, y)? / (y.len() * y.len()) as f64)
    };

    for (i, &width) in cfg.widths.iter().enumerate() {
        let seed_i = cfg.seed.wrapping_add(i as u64);
        let mut layer = Network::init_with_dims(&[a_tr.cols(), width], act, true, 1.0, seed_i)?;
        let mut shuffle = rng::substream(cfg.seed, Stream::Shuffle, i as u64);
        let eval = |net: &Network| -> Result<(f64, f64, Matrix, Matrix)> {
            let htr = layer_features(net, cfg.slope, &a_tr)?;
            let hval = layer_features(net, cfg.slope, &a_val)?;
            Ok((mean_loss(&htr, &ytr)?, mean_loss(&hval, &yval)?, htr, hval))
        };
        let (tr0, val0, _, hval0) = eval(&layer)?;
        let val_mad_init = kernel_mean_abs_deviation(&hval0, &yval)?;
        let mut epochs = vec![EpochRecord {
            epoch: 0,
            train_loss: tr0,
            val_loss: val0,
        }];
        let mut best = (val0, 0, layer.clone());
        let mut stopped_epoch = 0;
        let mut aborted = None;
        for epoch in 1..=cfg.max_epochs {
            let order = rng::permutation(&mut shuffle, a_tr.rows());
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let bx = a_tr.select_rows(chunk);
                let by: Vec<usize> = chunk.iter().map(|&j| ytr[j]).collect();
                let (_, grads) = lfm_layer_loss(&layer, cfg.slope, &bx, &by)?;
                optimizer_step(&mut layer, &grads, &cfg.optimizer)?;
            }
            let (tr, val, _, _) = eval(&layer)?;
            epochs.push(EpochRecord {
                epoch,
                train_loss: tr,
                val_loss: val,
            });
            stopped_epoch = epoch;
            if !val.is_finite() {
                aborted = Some(format!(
                    "validation kernel loss of layer {} is {val} at epoch {epoch}",
                    i + 1
                ));
                break;
            }
            if val < best.0 {
                best = (val, epoch, layer.clone());
            } else if epoch - best.1 >= cfg.patience {
                break;
            }
        }
        let (_, best_epoch, mut kept) = best;
        kept.reset_optimizer();
        let (_, _, htr, hval) = eval(&kept)?;
        let val_mad_final = kernel_mean_abs_deviation(&hval, &yval)?;
        histories.push(LayerHistory {
            layer: i + 1,
            epochs,
            best_epoch,
            stopped_epoch,
            val_mad_init,
            val_mad_final,
        });
        if let Some(reason) = aborted {
            model.layers.push(kept);
            return Ok(LfmResult {
                model,
                histories,
                classifier_train_acc: f64::NAN,
                train_indices,
                val_indices,
                aborted: Some(reason),
            });
        }
        model.layers.push(kept);
        a_tr = normalize_rows(&htr)?;
        a_val = normalize_rows(&hval)?;
    }

    let mut classifier = Network::init_with_dims(
        &[a_tr.cols(), num_classes],
        act,
        true,
        1.0,
        cfg.seed.wrapping_add(cfg.widths.len() as u64),
    )?;
    let y_onehot = Matrix::from_fn(
        ytr.len(),
        num_classes,
        |r, c| if ytr[r] == c { 1.0 } else { 0.0 },
    );
    let schedule = Schedule {
        epochs: cfg.classifier_epochs,
        batch_size: cfg.batch_size.min(ytr.len()),
        optimizer: cfg.classifier_optimizer,
        loss: Loss::CrossEntropy,
        stop_loss: None,
        seed: cfg.seed.wrapping_add(cfg.widths.len() as u64),
    };
    let log = run_training(
        &mut classifier,
        &a_tr,
        &y_onehot,
        &ytr,
        &schedule,
        |_, _| Ok(None),
    )?;
    let classifier_train_acc = log.rows.last().map_or(f64::NAN, |r| r.train_acc);
    model.classifier = Some(classifier);
    Ok(LfmResult {
        model,
        histories,
        classifier_train_acc,
        train_indices,
        val_indices,
        aborted: None,
    })
}
