use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lfm::LfmConfig;
use crate::nnet::{Activation, FfnnConfig, Loss, Optimizer, Schedule};

use super::data::Normalization;

/// Flat `section.key = value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if k.is_empty() || !k.contains('.') {
                return Err(Error::Config(format!(
                    "line {}: key {k:?} must look like section.key",
                    no + 1
                )));
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
            }
        }
        Ok(ConfigMap {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|e| Error::Config(format!("{key}: {s:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Keys that were never read.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }

    /// Sorted `key = value` lines.
    pub fn echo(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    AlignTrain,
    DepthSweep,
    Frozen,
    Lfm,
    Hessian,
    Theory,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "align_train" | "train" => ExperimentKind::AlignTrain,
            "depth_sweep" | "sweep" => ExperimentKind::DepthSweep,
            "frozen" => ExperimentKind::Frozen,
            "lfm" => ExperimentKind::Lfm,
            "hessian" => ExperimentKind::Hessian,
            "theory" => ExperimentKind::Theory,
            other => return Err(Error::Config(format!("unknown experiment kind {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::AlignTrain => "align_train",
            ExperimentKind::DepthSweep => "depth_sweep",
            ExperimentKind::Frozen => "frozen",
            ExperimentKind::Lfm => "lfm",
            ExperimentKind::Hessian => "hessian",
            ExperimentKind::Theory => "theory",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Sphere {
        n_train: usize,
        n_test: usize,
        d: usize,
        k: usize,
        margin: f64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        train_per_class: usize,
        test_per_class: usize,
        /// Digits below 5 versus the rest.
        binary: bool,
        normalization: Normalization,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    /// Train on uniformly permuted labels.
    pub random_labels: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub use_bias: bool,
    pub last_layer_scale: f64,
}

impl ModelSpec {
    pub fn ffnn(&self, input_dim: usize, output_dim: usize, seed: u64) -> FfnnConfig {
        FfnnConfig::new(input_dim, self.width, self.depth, output_dim, seed)
            .with_activation(self.activation)
            .with_bias(self.use_bias)
            .with_last_layer_scale(self.last_layer_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub loss: Loss,
    pub stop_loss: Option<f64>,
}

impl TrainSpec {
    pub fn schedule(&self, seed: u64) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            loss: self.loss,
            stop_loss: self.stop_loss,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSpec {
    /// Alignment snapshot every this many epochs (plus start and end).
    pub every: usize,
    /// Stratified probe subset size.
    pub samples: usize,
    pub fisher: bool,
    pub full_spectrum: bool,
}

/// Which alignment profile defines a run's peak layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeakMode {
    /// Profile after the last epoch.
    Final,
    /// Largest alignment seen at any probed epoch.
    MaxOverTraining,
}

impl PeakMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "final" => Ok(PeakMode::Final),
            "max" | "max_over_training" => Ok(PeakMode::MaxOverTraining),
            other => Err(Error::Config(format!("unknown peak mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PeakMode::Final => "final",
            PeakMode::MaxOverTraining => "max_over_training",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub depths: Vec<usize>,
    /// One learning rate per depth.
    pub lrs: Vec<f64>,
    pub peak: PeakMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianSpec {
    /// Epochs of training before the snapshot.
    pub warmup_epochs: usize,
    /// Samples entering `H_w`.
    pub samples: usize,
    pub top_k: usize,
    pub trace_probes: usize,
    pub moment_probes: usize,
    pub moment_orders: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheorySpec {
    pub depth: usize,
    pub c0: Vec<f64>,
    pub epsilon: f64,
    pub grid: usize,
    pub equilibrium_depths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub probe: ProbeSpec,
    pub sweep: SweepSpec,
    pub hessian: HessianSpec,
    pub lfm: LfmConfig,
    pub theory: TheorySpec,
    /// Every key/value of the source, sorted.
    pub echo: Vec<String>,
}

fn optimizer(
    map: &ConfigMap,
    prefix: &str,
    default_kind: &str,
    default_lr: f64,
) -> Result<Optimizer> {
    let kind: String = map.get_or(&format!("{prefix}.optimizer"), default_kind.to_string())?;
    let lr = map.get_or(&format!("{prefix}.lr"), default_lr)?;
    let wd = map.get_or(&format!("{prefix}.weight_decay"), 0.0)?;
    match kind.as_str() {
        "sgd" => Ok(Optimizer::Sgd {
            lr,
            momentum: map.get_or(&format!("{prefix}.momentum"), 0.0)?,
            weight_decay: wd,
        }),
        "adam" => {
            let mut o = Optimizer::adam(lr);
            if let Optimizer::Adam { weight_decay, .. } = &mut o {
                *weight_decay = wd;
            }
            Ok(o)
        }
        other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
    }
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path,
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map = ConfigMap::parse(&text)?;
        Self::from_map(&map, path.parent())
    }

    /// Relative data paths are resolved against `base`.
    pub fn from_map(map: &ConfigMap, base: Option<&Path>) -> Result<Self> {
        let kind = ExperimentKind::parse(
            map.raw("experiment.kind")
                .ok_or_else(|| Error::Config("experiment.kind is required".into()))?,
        )?;
        let seed: u64 = map
            .get("experiment.seed")?
            .ok_or_else(|| Error::Config("experiment.seed is required".into()))?;
        let output_dir = map.raw("experiment.output_dir").map(PathBuf::from);

        let source_kind: String = map.get_or("data.source", "sphere".to_string())?;
        let source = match source_kind.as_str() {
            "sphere" => DataSource::Sphere {
                n_train: map.get_or("data.n_train", 1024)?,
                n_test: map.get_or("data.n_test", 512)?,
                d: map.get_or("data.d", 32)?,
                k: map.get_or("data.k", 2)?,
                margin: map.get_or("data.margin", 3.0)?,
            },
            "mnist" => DataSource::Mnist {
                images: resolve(
                    base,
                    map.raw("data.images")
                        .ok_or_else(|| Error::Config("data.images is required".into()))?,
                ),
                labels: resolve(
                    base,
                    map.raw("data.labels")
                        .ok_or_else(|| Error::Config("data.labels is required".into()))?,
                ),
                train_per_class: map.get_or("data.train_per_class", 300)?,
                test_per_class: map.get_or("data.test_per_class", 100)?,
                binary: map.get_or("data.binary", false)?,
                normalization: Normalization::parse(
                    &map.get_or("data.normalize", "raw".to_string())?,
                )?,
            },
            other => return Err(Error::Config(format!("unknown data.source {other:?}"))),
        };
        let data = DataSpec {
            source,
            random_labels: map.get_or("data.random_labels", false)?,
        };

        let activation = Activation::parse(&map.get_or("model.activation", "relu".to_string())?)?;
        let model = ModelSpec {
            width: map.get_or("model.width", 64)?,
            depth: map.get_or("model.depth", 10)?,
            activation,
            use_bias: map.get_or("model.bias", false)?,
            last_layer_scale: map.get_or("model.last_layer_scale", 1.0)?,
        };

        let train = TrainSpec {
            epochs: map.get_or("train.epochs", 20)?,
            batch_size: map.get_or("train.batch_size", 64)?,
            optimizer: optimizer(map, "train", "sgd", 0.01)?,
            loss: Loss::parse(&map.get_or("train.loss", "ce".to_string())?)?,
            stop_loss: map.get("train.stop_loss")?,
        };

        let probe = ProbeSpec {
            every: map.get_or("probe.every", 1)?,
            samples: map.get_or("probe.samples", 256)?,
            fisher: map.get_or("probe.fisher", false)?,
            full_spectrum: map.get_or("probe.full_spectrum", false)?,
        };
        if probe.every == 0 || probe.samples == 0 || probe.samples > 512 {
            return Err(Error::Config(
                "probe.every must be >= 1 and probe.samples in 1..=512".into(),
            ));
        }

        let depths = map
            .list::<usize>("sweep.depths")?
            .unwrap_or_else(|| vec![10, 20, 30, 40]);
        let lrs = match map.list::<f64>("sweep.lrs")? {
            Some(v) => v,
            None => vec![train.optimizer.lr(); depths.len()],
        };
        if lrs.len() != depths.len() {
            return Err(Error::Config(format!(
                "sweep.lrs has {} entries for {} depths",
                lrs.len(),
                depths.len()
            )));
        }
        let sweep = SweepSpec {
            depths,
            lrs,
            peak: PeakMode::parse(&map.get_or("sweep.peak", "final".to_string())?)?,
        };

        let hessian = HessianSpec {
            warmup_epochs: map.get_or("hessian.warmup_epochs", 0)?,
            samples: map.get_or("hessian.samples", 64)?,
            top_k: map.get_or("hessian.top_k", 20)?,
            trace_probes: map.get_or("hessian.trace_probes", 1000)?,
            moment_probes: map.get_or("hessian.moment_probes", 500)?,
            moment_orders: map
                .list("hessian.moment_orders")?
                .unwrap_or_else(|| vec![3, 4]),
        };

        let mut lfm = LfmConfig::new(
            map.list("lfm.widths")?.unwrap_or_else(|| vec![128, 128]),
            seed,
        );
        lfm.slope = map.get_or("lfm.slope", lfm.slope)?;
        lfm.optimizer = optimizer(map, "lfm", "adam", 1e-3)?;
        lfm.batch_size = map.get_or("lfm.batch_size", lfm.batch_size)?;
        lfm.patience = map.get_or("lfm.patience", lfm.patience)?;
        lfm.max_epochs = map.get_or("lfm.max_epochs", lfm.max_epochs)?;
        lfm.val_size = map.get_or("lfm.val_size", lfm.val_size)?;
        lfm.classifier_optimizer = optimizer(map, "lfm.classifier", "adam", 1e-2)?;
        lfm.classifier_epochs = map.get_or("lfm.classifier_epochs", lfm.classifier_epochs)?;

        let theory = TheorySpec {
            depth: map.get_or("theory.depth", 100)?,
            c0: map
                .list("theory.c0")?
                .unwrap_or_else(|| vec![-0.5, 0.0, 0.5, 0.9]),
            epsilon: map.get_or("theory.epsilon", crate::theory::DEFAULT_EPSILON)?,
            grid: map.get_or("theory.grid", 64)?,
            equilibrium_depths: map
                .list("theory.equilibrium_depths")?
                .unwrap_or_else(|| vec![10, 20, 50, 100, 200]),
        };

        let unused = map.unused();
        if !unused.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unused.join(", ")
            )));
        }
        Ok(ExperimentConfig {
            kind,
            seed,
            output_dir,
            data,
            model,
            train,
            probe,
            sweep,
            hessian,
            lfm,
            theory,
            echo: map.echo(),
        })
    }
}
