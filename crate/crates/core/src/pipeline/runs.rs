use std::path::Path;
use std::time::Instant;

use crate::alignment::{alignment_snapshot, AlignmentReport, SnapshotOptions};
use crate::error::{Error, Result};
use crate::hessian::{
    hutchinson_trace, layer_moment_ratio, symmetry_defect, theorem_a_check, top_spectrum, Estimate,
    HwOperator, MomentRatio, SpectrumProfile,
};
use crate::lfm::{lfm_train, LayerHistory, LfmResult};
use crate::linalg::Matrix;
use crate::nnet::checkpoint::{self, CheckpointMeta};
use crate::nnet::{evaluate, run_training, Network, TrainingLog};
use crate::rng::{self, Stream};
use crate::theory::{
    equilibrium_layer, fit_peak_line, info_loss_curves, propagate, EquilibriumMode, SweepFit,
};

use super::config::{DataSource, ExperimentConfig, ExperimentKind, PeakMode};
use super::data::{load_mnist_idx, synth_sphere, Dataset, Normalization};
use super::{write_csv, Manifest};

const TRAINING_HEADER: &str = "epoch,train_loss,train_acc,probe";

/// Train and test sets described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data.source {
        DataSource::Sphere {
            n_train,
            n_test,
            d,
            k,
            margin,
        } => {
            let all = synth_sphere(n_train + n_test, *d, *k, *margin, cfg.seed)?;
            if n_train % k != 0 || n_test % k != 0 {
                return Err(Error::Config(
                    "sphere train and test sizes must be multiples of k".into(),
                ));
            }
            all.stratified_split(n_train / k, n_test / k, cfg.seed)?
        }
        DataSource::Mnist {
            images,
            labels,
            train_per_class,
            test_per_class,
            binary,
            normalization,
        } => {
            let ds = load_mnist_idx(images, labels)?;
            let (tr, te) = ds.stratified_split(*train_per_class, *test_per_class, cfg.seed)?;
            let (tr, te) = if *binary {
                (
                    tr.relabel(2, |l| usize::from(l >= 5))?,
                    te.relabel(2, |l| usize::from(l >= 5))?,
                )
            } else {
                (tr, te)
            };
            (
                tr.normalized(*normalization)?,
                te.normalized(*normalization)?,
            )
        }
    };
    let train = if cfg.data.random_labels {
        train.shuffled_labels(cfg.seed)
    } else {
        train
    };
    Ok((train, test))
}

/// Stratified subset of at most `samples` rows used by alignment probes.
fn probe_subset(train: &Dataset, samples: usize, seed: u64) -> Result<Dataset> {
    let k = train.num_classes;
    let smallest = train.class_counts().into_iter().min().unwrap_or(0);
    let per_class = (samples / k).clamp(1, smallest.max(1));
    let idx = train.stratified_indices(per_class, seed, Stream::Probe)?;
    Ok(train.subset(&idx))
}

fn log_rows(log: &TrainingLog) -> Vec<String> {
    log.rows
        .iter()
        .map(|r| {
            format!(
                "{},{:.10e},{:.10e},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                r.probe.clone().unwrap_or_default()
            )
        })
        .collect()
}

fn report_rows(reports: &[AlignmentReport]) -> Vec<String> {
    reports.iter().flat_map(AlignmentReport::csv_rows).collect()
}

fn should_probe(epoch: usize, every: usize, is_final: bool) -> bool {
    epoch.is_multiple_of(every) || is_final
}

/// Training with alignment snapshots on the probe subset.
fn train_with_probes(
    net: &mut Network,
    cfg: &ExperimentConfig,
    train: &Dataset,
    lr_override: Option<f64>,
    probe_every: usize,
) -> Result<(TrainingLog, Vec<AlignmentReport>)> {
    let probe = probe_subset(train, cfg.probe.samples, cfg.seed)?;
    let (px, py) = (probe.x.clone(), probe.onehot());
    let opts = SnapshotOptions {
        full_spectrum: cfg.probe.full_spectrum,
        fisher: cfg.probe.fisher,
    };
    let mut schedule = cfg.train.schedule(cfg.seed);
    if let Some(lr) = lr_override {
        schedule.optimizer = schedule.optimizer.with_lr(lr);
    }
    let loss = schedule.loss;
    let mut reports = Vec::new();
    let log = run_training(
        net,
        &train.x,
        &train.onehot(),
        &train.labels,
        &schedule,
        |info, n| {
            if !should_probe(info.epoch, probe_every, info.is_final) {
                return Ok(None);
            }
            reports.push(alignment_snapshot(n, &px, &py, loss, info.epoch, opts)?);
            Ok(Some(format!("alignment@{}", info.epoch)))
        },
    )?;
    Ok((log, reports))
}

#[derive(Debug, Clone)]
pub struct AlignRun {
    pub log: TrainingLog,
    pub reports: Vec<AlignmentReport>,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Peak layer after every probed epoch.
    pub peaks: Vec<(usize, usize)>,
    pub net: Network,
}

impl AlignRun {
    pub fn final_report(&self) -> &AlignmentReport {
        self.reports
            .last()
            .expect("the last epoch is always probed")
    }
}

/// First probed epoch at which the largest layer alignment has covered 90%
/// of its total change.
fn increase_window(reports: &[AlignmentReport]) -> Option<usize> {
    let maxes: Vec<(usize, f64)> = reports
        .iter()
        .map(|r| {
            (
                r.epoch,
                r.alignments().into_iter().fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();
    let (first, last) = (maxes.first()?.1, maxes.last()?.1);
    let total = last - first;
    if total.abs() < 1e-12 {
        return None;
    }
    maxes
        .iter()
        .find(|(_, m)| (m - first) / total >= 0.9)
        .map(|(e, _)| *e)
}

pub fn run_align_train(cfg: &ExperimentConfig, out: &Path) -> Result<AlignRun> {
    let start = Instant::now();
    let (train, test) = load_datasets(cfg)?;
    let ffnn = cfg.model.ffnn(train.dim(), train.num_classes, cfg.seed);
    let mut net = Network::init(&ffnn)?;
    let (log, reports) = train_with_probes(&mut net, cfg, &train, None, cfg.probe.every)?;
    let (test_eval, test_acc) =
        evaluate(&net, &test.x, &test.onehot(), &test.labels, cfg.train.loss)?;
    let peaks: Vec<(usize, usize)> = reports.iter().map(|r| (r.epoch, r.peak_layer())).collect();

    write_csv(&out.join("training.csv"), TRAINING_HEADER, &log_rows(&log))?;
    write_csv(
        &out.join("alignment.csv"),
        AlignmentReport::CSV_HEADER,
        &report_rows(&reports),
    )?;
    let epoch = log.rows.last().map_or(0, |r| r.epoch);
    checkpoint::save(
        &net,
        &out.join("final.ckpt"),
        &CheckpointMeta {
            seed: cfg.seed,
            dataset_hash: train.content_hash(),
            epoch,
        },
    )?;
    let run = AlignRun {
        log,
        reports,
        test_loss: test_eval.value,
        test_acc,
        peaks,
        net,
    };
    let mut m = base_manifest(cfg, &train);
    let last = run.log.rows.last().expect("epoch 0 is always logged");
    m.push(
        "summary.final_train_loss",
        format!("{:.6}", last.train_loss),
    );
    m.push("summary.final_train_acc", format!("{:.4}", last.train_acc));
    m.push("summary.test_loss", format!("{:.6}", run.test_loss));
    m.push("summary.test_acc", format!("{:.4}", run.test_acc));
    m.push(
        "summary.label_gradient_corr_init",
        format!("{:.6}", run.reports[0].label_gradient_corr),
    );
    m.push("summary.peak_layer_final", run.final_report().peak_layer());
    let peaks: Vec<String> = run.peaks.iter().map(|(e, l)| format!("{e}:{l}")).collect();
    m.push("summary.peak_layer_by_epoch", peaks.join(" "));
    m.push(
        "summary.alignment_increase_window_epoch",
        increase_window(&run.reports).map_or("none".to_string(), |e| e.to_string()),
    );
    m.finish(out, Some(cfg), start.elapsed().as_secs_f64())?;
    Ok(run)
}

fn base_manifest(cfg: &ExperimentConfig, train: &Dataset) -> Manifest {
    let mut m = Manifest::new();
    m.push("kind", cfg.kind.name());
    m.push("seed", cfg.seed);
    m.push("input_hash", train.content_hash());
    m.push("dataset", &train.name);
    m
}

/// Outcome of one depth in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthOutcome {
    pub depth: usize,
    pub lr: f64,
    /// `None` when the depth produced no usable alignment profile.
    pub peak_layer: Option<usize>,
    /// Layers sharing the maximal alignment.
    pub tied: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub outcomes: Vec<DepthOutcome>,
    pub fit: Option<SweepFit>,
}

/// Smallest 1-based index attaining the maximum, and how many layers tie.
fn argmax_layer(values: &[f64]) -> (usize, usize) {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = values.iter().position(|&v| v == best).unwrap_or(0);
    (first + 1, values.iter().filter(|&&v| v == best).count())
}

fn sweep_peak(reports: &[AlignmentReport], mode: PeakMode) -> Option<(usize, usize)> {
    let usable = |r: &AlignmentReport| r.layers.iter().all(|l| l.alignment.is_finite());
    match mode {
        PeakMode::Final => {
            let r = reports.last().filter(|r| usable(r))?;
            Some(argmax_layer(&r.alignments()))
        }
        PeakMode::MaxOverTraining => {
            let depth = reports.first()?.layers.len();
            let mut best = vec![f64::NEG_INFINITY; depth];
            for r in reports.iter().filter(|r| usable(r)) {
                for (b, a) in best.iter_mut().zip(r.alignments()) {
                    *b = b.max(a);
                }
            }
            if best.iter().any(|v| !v.is_finite()) {
                return None;
            }
            Some(argmax_layer(&best))
        }
    }
}

pub fn run_depth_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepRun> {
    let start = Instant::now();
    if cfg.sweep.depths.len() < 3 {
        return Err(Error::Config(
            "a depth sweep needs at least three depths".into(),
        ));
    }
    let (train, _) = load_datasets(cfg)?;
    let every = match cfg.sweep.peak {
        PeakMode::Final => usize::MAX,
        PeakMode::MaxOverTraining => cfg.probe.every,
    };
    let mut outcomes = Vec::new();
    for (&depth, &lr) in cfg.sweep.depths.iter().zip(&cfg.sweep.lrs) {
        let mut model = cfg.model;
        model.depth = depth;
        let seed = cfg.seed;
        let mut net = Network::init(&model.ffnn(train.dim(), train.num_classes, seed))?;
        let outcome = match train_with_probes(&mut net, cfg, &train, Some(lr), every) {
            Ok((log, reports)) => {
                write_csv(
                    &out.join(format!("alignment_L{depth}.csv")),
                    AlignmentReport::CSV_HEADER,
                    &report_rows(&reports),
                )?;
                write_csv(
                    &out.join(format!("training_L{depth}.csv")),
                    TRAINING_HEADER,
                    &log_rows(&log),
                )?;
                let peak = sweep_peak(&reports, cfg.sweep.peak);
                let reached = cfg.train.stop_loss.is_none_or(|s| log.final_loss() < s);
                let status = match (peak, reached) {
                    (None, _) => "no_profile".to_string(),
                    (Some(_), true) => "ok".to_string(),
                    (Some(_), false) => "stop_loss_not_reached".to_string(),
                };
                DepthOutcome {
                    depth,
                    lr,
                    peak_layer: peak.map(|p| p.0),
                    tied: peak.map_or(0, |p| p.1),
                    epochs_run: log.rows.last().map_or(0, |r| r.epoch),
                    final_loss: log.final_loss(),
                    status,
                }
            }
            Err(e @ (Error::Diverged { .. } | Error::Degenerate(_) | Error::NonFinite(_))) => {
                DepthOutcome {
                    depth,
                    lr,
                    peak_layer: None,
                    tied: 0,
                    epochs_run: 0,
                    final_loss: f64::NAN,
                    status: format!("failed: {e}").replace(',', ";"),
                }
            }
            Err(e) => return Err(e),
        };
        outcomes.push(outcome);
    }
    let used: Vec<&DepthOutcome> = outcomes.iter().filter(|o| o.peak_layer.is_some()).collect();
    let fit = if used.len() >= 2 {
        let d: Vec<f64> = used.iter().map(|o| o.depth as f64).collect();
        let p: Vec<f64> = used
            .iter()
            .map(|o| o.peak_layer.expect("filtered") as f64)
            .collect();
        Some(fit_peak_line(&d, &p)?)
    } else {
        None
    };
    let rows: Vec<String> = outcomes
        .iter()
        .map(|o| {
            format!(
                "{},{},{},{},{},{:.10e},{}",
                o.depth,
                o.lr,
                o.peak_layer.map_or(String::new(), |p| p.to_string()),
                o.tied,
                o.epochs_run,
                o.final_loss,
                o.status
            )
        })
        .collect();
    write_csv(
        &out.join("sweep.csv"),
        "depth,lr,peak_layer,tied_layers,epochs_run,final_loss,status",
        &rows,
    )?;
    let mut m = base_manifest(cfg, &train);
    m.push("summary.peak_mode", cfg.sweep.peak.name());
    m.push("summary.depths_used", used.len());
    if let Some(f) = &fit {
        m.push("summary.free_slope", format!("{:.6}", f.free_slope));
        m.push("summary.free_intercept", format!("{:.6}", f.free_intercept));
        m.push(
            "summary.fixed_slope_intercept",
            format!("{:.6}", f.fixed_slope_intercept),
        );
        m.push("summary.r2", format!("{:.6}", f.r2));
    }
    m.finish(out, Some(cfg), start.elapsed().as_secs_f64())?;
    Ok(SweepRun { outcomes, fit })
}

/// Harness check: fit of the synthetic peaks `L^0.6`, floored to whole
/// layers when `floor` is set.
pub fn injected_peak_fit(depths: &[usize], floor: bool) -> Result<SweepFit> {
    let d: Vec<f64> = depths.iter().map(|&l| l as f64).collect();
    let p: Vec<f64> = d
        .iter()
        .map(|l| {
            let v = l.powf(0.6);
            if floor {
                v.floor()
            } else {
                v
            }
        })
        .collect();
    fit_peak_line(&d, &p)
}

#[derive(Debug, Clone)]
pub struct FrozenRun {
    pub log: TrainingLog,
    pub reports: Vec<AlignmentReport>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub frozen_unchanged: bool,
    pub net: Network,
}

/// Every layer but the last is frozen at initialization; the last layer is
/// trained on cached penultimate features.
pub fn run_frozen(cfg: &ExperimentConfig, out: &Path) -> Result<FrozenRun> {
    let start = Instant::now();
    let (train, test) = load_datasets(cfg)?;
    let ffnn = cfg.model.ffnn(train.dim(), train.num_classes, cfg.seed);
    let mut net = Network::init(&ffnn)?;
    let depth = net.depth();
    if depth < 2 {
        return Err(Error::Config("frozen runs need depth >= 2".into()));
    }
    net.freeze_all_except(&[depth - 1]);
    let before: Vec<f64> = net.layers[..depth - 1]
        .iter()
        .flat_map(|l| {
            l.weight
                .data()
                .iter()
                .chain(l.bias.iter().flatten())
                .copied()
        })
        .collect();
    let penultimate = |x: &Matrix| -> Result<Matrix> {
        let trace = net.forward(x)?;
        Ok(trace.acts.last().expect("depth >= 2").clone())
    };
    let (ftr, fte) = (penultimate(&train.x)?, penultimate(&test.x)?);
    let mut head = Network::init_with_dims(
        &[ftr.cols(), train.num_classes],
        net.activation,
        net.use_bias,
        1.0,
        cfg.seed,
    )?;
    head.layers[0] = net.layers[depth - 1].clone();

    let probe = probe_subset(&train, cfg.probe.samples, cfg.seed)?;
    let (px, py) = (probe.x.clone(), probe.onehot());
    let opts = SnapshotOptions {
        full_spectrum: cfg.probe.full_spectrum,
        fisher: cfg.probe.fisher,
    };
    let schedule = cfg.train.schedule(cfg.seed);
    let loss = schedule.loss;
    let mut reports = Vec::new();
    let mut full = net.clone();
    let log = run_training(
        &mut head,
        &ftr,
        &train.onehot(),
        &train.labels,
        &schedule,
        |info, h| {
            if !should_probe(info.epoch, cfg.probe.every, info.is_final) {
                return Ok(None);
            }
            full.layers[depth - 1] = h.layers[0].clone();
            reports.push(alignment_snapshot(&full, &px, &py, loss, info.epoch, opts)?);
            Ok(Some(format!("alignment@{}", info.epoch)))
        },
    )?;
    net.layers[depth - 1] = head.layers[0].clone();
    let after: Vec<f64> = net.layers[..depth - 1]
        .iter()
        .flat_map(|l| {
            l.weight
                .data()
                .iter()
                .chain(l.bias.iter().flatten())
                .copied()
        })
        .collect();
    let frozen_unchanged = before.len() == after.len()
        && before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let train_acc = crate::nnet::accuracy(&head.output(&ftr)?, &train.labels);
    let test_acc = crate::nnet::accuracy(&head.output(&fte)?, &test.labels);

    write_csv(&out.join("training.csv"), TRAINING_HEADER, &log_rows(&log))?;
    write_csv(
        &out.join("alignment.csv"),
        AlignmentReport::CSV_HEADER,
        &report_rows(&reports),
    )?;
    let mut m = base_manifest(cfg, &train);
    m.push("summary.train_acc", format!("{train_acc:.4}"));
    m.push("summary.test_acc", format!("{test_acc:.4}"));
    m.push("summary.frozen_unchanged", frozen_unchanged);
    if let Some(r) = reports.last() {
        m.push("summary.peak_layer_final", r.peak_layer());
    }
    m.finish(out, Some(cfg), start.elapsed().as_secs_f64())?;
    Ok(FrozenRun {
        log,
        reports,
        train_acc,
        test_acc,
        frozen_unchanged,
        net,
    })
}

#[derive(Debug, Clone)]
pub struct LfmRun {
    pub result: LfmResult,
    pub test_acc: f64,
}

pub fn run_lfm(cfg: &ExperimentConfig, out: &Path) -> Result<LfmRun> {
    let start = Instant::now();
    let (train, test) = load_datasets(cfg)?;
    let (train, test) = (
        train.normalized(Normalization::UnitL2)?,
        test.normalized(Normalization::UnitL2)?,
    );
    let mut lcfg = cfg.lfm.clone();
    lcfg.seed = cfg.seed;
    let result = lfm_train(&train.x, &train.labels, train.num_classes, &lcfg)?;
    let test_acc = if result.aborted.is_none() {
        result.model.accuracy(&test.x, &test.labels)?
    } else {
        f64::NAN
    };
    let rows: Vec<String> = result
        .histories
        .iter()
        .flat_map(LayerHistory::csv_rows)
        .collect();
    write_csv(
        &out.join("lfm_history.csv"),
        LayerHistory::CSV_HEADER,
        &rows,
    )?;
    let mad: Vec<String> = result
        .histories
        .iter()
        .map(|h| {
            format!(
                "{},{},{},{:.10e},{:.10e},{:.6}",
                h.layer,
                h.best_epoch,
                h.stopped_epoch,
                h.val_mad_init,
                h.val_mad_final,
                h.mad_reduction()
            )
        })
        .collect();
    write_csv(
        &out.join("lfm_layers.csv"),
        "layer,best_epoch,stopped_epoch,val_mad_init,val_mad_final,reduction",
        &mad,
    )?;
    let mut m = base_manifest(cfg, &train);
    m.push("summary.test_acc", format!("{test_acc:.4}"));
    m.push(
        "summary.classifier_train_acc",
        format!("{:.4}", result.classifier_train_acc),
    );
    if let Some(reason) = &result.aborted {
        m.push("summary.aborted", reason);
    }
    m.finish(out, Some(cfg), start.elapsed().as_secs_f64())?;
    Ok(LfmRun { result, test_acc })
}

#[derive(Debug, Clone)]
pub struct HessianRun {
    pub theorem_a_error: f64,
    pub trace: Estimate,
    pub symmetry: f64,
    pub spectrum: SpectrumProfile,
    pub moments: Vec<MomentRatio>,
}

pub fn run_hessian(cfg: &ExperimentConfig, out: &Path) -> Result<HessianRun> {
    let start = Instant::now();
    let (train, _) = load_datasets(cfg)?;
    let ffnn = cfg.model.ffnn(train.dim(), train.num_classes, cfg.seed);
    let mut net = Network::init(&ffnn)?;
    if cfg.hessian.warmup_epochs > 0 {
        let mut schedule = cfg.train.schedule(cfg.seed);
        schedule.epochs = cfg.hessian.warmup_epochs;
        run_training(
            &mut net,
            &train.x,
            &train.onehot(),
            &train.labels,
            &schedule,
            |_, _| Ok(None),
        )?;
    }
    let sub = probe_subset(&train, cfg.hessian.samples, cfg.seed)?;
    let op = HwOperator::from_loss(&net, &sub.x, &sub.onehot(), cfg.train.loss)?;
    let theorem_a_error = theorem_a_check(&op)?;
    let trace = hutchinson_trace(&op, cfg.hessian.trace_probes, cfg.seed)?;
    let h_norm = op.norm_estimate(cfg.seed)?;
    let mut r = rng::stream(cfg.seed, Stream::Aux);
    let u = rng::normal_vec(&mut r, op.dim());
    let v = rng::normal_vec(&mut r, op.dim());
    let symmetry = symmetry_defect(&op, &u, &v, h_norm)?;
    let spectrum = top_spectrum(&op, cfg.hessian.top_k, 1e-6, cfg.seed)?;
    let mut moments = Vec::new();
    for l in 1..=net.depth() {
        for &k in &cfg.hessian.moment_orders {
            match layer_moment_ratio(&op, l, k, cfg.hessian.moment_probes, cfg.seed) {
                Ok(mr) => moments.push(mr),
                Err(Error::Unstable(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    write_csv(
        &out.join("spectrum.csv"),
        &SpectrumProfile::csv_header(net.depth()),
        &spectrum.csv_rows(),
    )?;
    let rows: Vec<String> = moments.iter().map(MomentRatio::csv_row).collect();
    write_csv(&out.join("moments.csv"), MomentRatio::CSV_HEADER, &rows)?;
    let mut m = base_manifest(cfg, &train);
    m.push(
        "summary.theorem_a_rel_error",
        format!("{theorem_a_error:.3e}"),
    );
    m.push("summary.trace_mean", format!("{:.6e}", trace.mean));
    m.push(
        "summary.trace_std_error",
        format!("{:.6e}", trace.std_error),
    );
    m.push("summary.trace_kinks", trace.kinks);
    m.push("summary.hvp_symmetry", format!("{symmetry:.3e}"));
    m.push(
        "summary.spectrum_pairing_defect",
        format!("{:.4}", spectrum.pairing_defect()),
    );
    m.finish(out, Some(cfg), start.elapsed().as_secs_f64())?;
    Ok(HessianRun {
        theorem_a_error,
        trace,
        symmetry,
        spectrum,
        moments,
    })
}

#[derive(Debug, Clone)]
pub struct TheoryRun {
    /// `(depth, closed form, numeric)`.
    pub equilibria: Vec<(usize, f64, f64)>,
}

pub fn run_theory(cfg: &ExperimentConfig, out: &Path) -> Result<TheoryRun> {
    let start = Instant::now();
    let t = &cfg.theory;
    let mut rows = Vec::new();
    for &c0 in &t.c0 {
        let p = propagate(c0, t.depth)?;
        for l in 1..=t.depth {
            let gp = p
                .gprime
                .get(l - 1)
                .map_or(String::new(), |g| format!("{g:.15e}"));
            rows.push(format!(
                "{c0},{l},{:.15e},{gp},{:.15e}",
                p.c(l),
                p.zeta_at(l)
            ));
        }
    }
    write_csv(
        &out.join("propagate.csv"),
        "c0,layer,corr,gprime,zeta",
        &rows,
    )?;
    let curves = info_loss_curves(t.epsilon, t.grid, t.depth)?;
    let rows: Vec<String> = (1..=t.depth)
        .map(|l| {
            format!(
                "{l},{:.15e},{:.15e}",
                curves.forward_at(l),
                curves.backward_at(l)
            )
        })
        .collect();
    write_csv(&out.join("curves.csv"), "layer,forward,backward", &rows)?;
    let mut equilibria = Vec::new();
    for &d in &t.equilibrium_depths {
        let closed = equilibrium_layer(d, EquilibriumMode::Closed, None)?;
        let c = info_loss_curves(t.epsilon, t.grid, d)?;
        let numeric = equilibrium_layer(d, EquilibriumMode::Numeric, Some(&c))?;
        equilibria.push((d, closed, numeric));
    }
    let rows: Vec<String> = equilibria
        .iter()
        .map(|(d, c, n)| format!("{d},{c:.15e},{n}"))
        .collect();
    write_csv(&out.join("equilibrium.csv"), "depth,closed,numeric", &rows)?;
    let mut m = Manifest::new();
    m.push("kind", ExperimentKind::Theory.name());
    m.push("seed", cfg.seed);
    m.push("input_hash", "none");
    let closed = equilibrium_layer(t.depth, EquilibriumMode::Closed, None)?;
    m.push(
        format!("summary.equilibrium_closed_L{}", t.depth),
        format!("{closed:.10}"),
    );
    let numeric = equilibrium_layer(t.depth, EquilibriumMode::Numeric, Some(&curves))?;
    m.push(format!("summary.equilibrium_numeric_L{}", t.depth), numeric);
    m.finish(out, Some(cfg), start.elapsed().as_secs_f64())?;
    Ok(TheoryRun { equilibria })
}

/// Dispatch on the configured kind; returns the manifest summary lines.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    match cfg.kind {
        ExperimentKind::AlignTrain => {
            run_align_train(cfg, out)?;
        }
        ExperimentKind::DepthSweep => {
            run_depth_sweep(cfg, out)?;
        }
        ExperimentKind::Frozen => {
            run_frozen(cfg, out)?;
        }
        ExperimentKind::Lfm => {
            run_lfm(cfg, out)?;
        }
        ExperimentKind::Hessian => {
            run_hessian(cfg, out)?;
        }
        ExperimentKind::Theory => {
            run_theory(cfg, out)?;
        }
    }
    let text = std::fs::read_to_string(out.join(super::MANIFEST)).map_err(|e| Error::io(out, e))?;
    Ok(text
        .lines()
        .filter(|l| l.starts_with("summary."))
        .map(str::to_string)
        .collect())
}
