use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::loss::{accuracy, loss_and_output_grad, Loss, LossEval};
use crate::nnet::network::Network;
use crate::nnet::optim::{optimizer_step, Optimizer};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: Loss,
    /// Stop after the first epoch whose full-set training loss is below this.
    pub stop_loss: Option<f64>,
    /// Seed of the minibatch shuffling stream.
    pub seed: u64,
}

/// State handed to the probe callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochInfo {
    /// 0 before any update, then the number of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// True for the last epoch of the run (budget or stop loss reached).
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Whatever the probe callback returned for this epoch.
    pub probe: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Epoch at which the stop loss was reached, if it was.
    pub stopped_at: Option<usize>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.train_loss)
    }
}

/// Loss and accuracy of `net` on the full set.
pub fn evaluate(
    net: &Network,
    x: &Matrix,
    y: &Matrix,
    labels: &[usize],
    loss: Loss,
) -> Result<(LossEval, f64)> {
    let f = net.output(x)?;
    let acc = accuracy(&f, labels);
    Ok((loss_and_output_grad(&f, y, loss)?, acc))
}

/// One gradient step on the given rows, returning the batch loss.
pub fn train_step(
    net: &mut Network,
    x: &Matrix,
    y: &Matrix,
    loss: Loss,
    opt: &Optimizer,
) -> Result<f64> {
    let trace = net.forward(x)?;
    let eval = loss_and_output_grad(&trace.outputs, y, loss)?;
    let grads = net.backward(&trace, &eval.grad)?;
    optimizer_step(net, &grads, opt)?;
    Ok(eval.value)
}

/// Minibatch training with seeded shuffling.
///
/// `probe` is called before training (epoch 0) and after every epoch; it
/// decides for itself whether to do any work. On divergence the network is
/// restored to its state at the start of the failing epoch.
pub fn run_training<P>(
    net: &mut Network,
    x: &Matrix,
    y: &Matrix,
    labels: &[usize],
    schedule: &Schedule,
    mut probe: P,
) -> Result<TrainingLog>
where
    P: FnMut(&EpochInfo, &Network) -> Result<Option<String>>,
{
    let n = x.rows();
    if n == 0 {
        return Err(Error::Degenerate("empty training set".into()));
    }
    if y.rows() != n || labels.len() != n {
        return Err(Error::Dimension(
            "inputs, targets and labels disagree on sample count".into(),
        ));
    }
    if schedule.batch_size == 0 || schedule.batch_size > n {
        return Err(Error::Config(format!(
            "batch size {} must be in 1..={n}",
            schedule.batch_size
        )));
    }
    let mut shuffle = rng::stream(schedule.seed, Stream::Shuffle);
    let mut rows = Vec::with_capacity(schedule.epochs + 1);
    let (eval, acc) = evaluate(net, x, y, labels, schedule.loss)?;
    let reached = |v: f64| schedule.stop_loss.is_some_and(|s| v < s);
    let info = EpochInfo {
        epoch: 0,
        train_loss: eval.value,
        train_acc: acc,
        is_final: schedule.epochs == 0 || reached(eval.value),
    };
    rows.push(LogRow {
        epoch: 0,
        train_loss: eval.value,
        train_acc: acc,
        probe: probe(&info, net)?,
    });
    let mut stopped_at = if reached(eval.value) { Some(0) } else { None };
    if stopped_at.is_none() {
        for epoch in 1..=schedule.epochs {
            let snapshot = net.clone();
            let order = rng::permutation(&mut shuffle, n);
            let outcome = (|| -> Result<()> {
                for chunk in order.chunks(schedule.batch_size) {
                    let bx = x.select_rows(chunk);
                    let by = y.select_rows(chunk);
                    let batch_loss = train_step(net, &bx, &by, schedule.loss, &schedule.optimizer)?;
                    if !batch_loss.is_finite() {
                        return Err(Error::NonFinite("batch loss".into()));
                    }
                }
                Ok(())
            })();
            let evaluated = outcome.and_then(|_| evaluate(net, x, y, labels, schedule.loss));
            let (eval, acc) = match evaluated {
                Ok(v) if v.0.value.is_finite() => v,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    *net = snapshot;
                    return Err(Error::Diverged {
                        epoch,
                        reason: "loss became non-finite".into(),
                    });
                }
                Err(e) => {
                    *net = snapshot;
                    return Err(e);
                }
            };
            let done = reached(eval.value);
            let info = EpochInfo {
                epoch,
                train_loss: eval.value,
                train_acc: acc,
                is_final: done || epoch == schedule.epochs,
            };
            rows.push(LogRow {
                epoch,
                train_loss: eval.value,
                train_acc: acc,
                probe: probe(&info, net)?,
            });
            if done {
                stopped_at = Some(epoch);
                break;
            }
        }
    }
    Ok(TrainingLog { rows, stopped_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::config::FfnnConfig;

    fn toy() -> (Matrix, Matrix, Vec<usize>) {
        let mut r = rng::stream(3, Stream::Data);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Matrix::from_fn(n, 4, |i, j| {
            let sign = if labels[i] == 0 { 1.0 } else { -1.0 };
            (if j == 0 { 2.0 * sign } else { 0.0 }) + 0.3 * rng::normal(&mut r)
        });
        let y = Matrix::from_fn(n, 2, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
        (x, y, labels)
    }

    fn schedule() -> Schedule {
        Schedule {
            epochs: 30,
            batch_size: 8,
            optimizer: Optimizer::Sgd {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            loss: Loss::CrossEntropy,
            stop_loss: None,
            seed: 11,
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (x, y, labels) = toy();
        let cfg = FfnnConfig::new(4, 16, 3, 2, 8);
        let mut a = Network::init(&cfg).unwrap();
        let mut b = Network::init(&cfg).unwrap();
        let la = run_training(&mut a, &x, &y, &labels, &schedule(), |_, _| Ok(None)).unwrap();
        let lb = run_training(&mut b, &x, &y, &labels, &schedule(), |_, _| Ok(None)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(la, lb);
        assert!(la.final_loss() < 0.5 * la.rows[0].train_loss);
    }

    #[test]
    fn stop_loss_and_probes() {
        let (x, y, labels) = toy();
        let mut net = Network::init(&FfnnConfig::new(4, 16, 3, 2, 8)).unwrap();
        let mut s = schedule();
        s.stop_loss = Some(0.2);
        let mut seen = Vec::new();
        let log = run_training(&mut net, &x, &y, &labels, &s, |info, _| {
            seen.push(info.epoch);
            Ok(Some(format!("e{}", info.epoch)))
        })
        .unwrap();
        let stop = log.stopped_at.expect("separable toy reaches the stop loss");
        assert!(log.final_loss() < 0.2);
        assert_eq!(seen, (0..=stop).collect::<Vec<_>>());
        assert_eq!(log.rows[1].probe.as_deref(), Some("e1"));
    }

    #[test]
    fn fully_frozen_training_is_identity() {
        let (x, y, labels) = toy();
        let mut net = Network::init(&FfnnConfig::new(4, 16, 3, 2, 8)).unwrap();
        net.freeze_all_except(&[]);
        let before = net.params();
        run_training(&mut net, &x, &y, &labels, &schedule(), |_, _| Ok(None)).unwrap();
        assert_eq!(net.params(), before);
    }

    #[test]
    fn divergence_restores_state() {
        let (x, y, labels) = toy();
        let mut net = Network::init(&FfnnConfig::new(4, 16, 3, 2, 8)).unwrap();
        let mut s = schedule();
        s.optimizer = Optimizer::sgd(1e300);
        s.loss = Loss::Mse;
        let before = net.params();
        let err = run_training(&mut net, &x, &y, &labels, &s, |_, _| Ok(None)).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
        assert_eq!(net.params(), before);
    }

    #[test]
    fn bad_batch_size() {
        let (x, y, labels) = toy();
        let mut net = Network::init(&FfnnConfig::new(4, 16, 3, 2, 8)).unwrap();
        let mut s = schedule();
        s.batch_size = 41;
        assert!(run_training(&mut net, &x, &y, &labels, &s, |_, _| Ok(None)).is_err());
    }
}
