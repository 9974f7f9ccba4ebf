//! Data ingestion, experiment runners and report files.

pub mod config;
pub mod data;
mod runs;

pub use config::{
    ConfigMap, DataSource, DataSpec, ExperimentConfig, ExperimentKind, HessianSpec, ModelSpec,
    PeakMode, ProbeSpec, SweepSpec, TheorySpec, TrainSpec,
};
pub use data::{load_mnist_idx, synth_sphere, verify_mnist_idx, Dataset, Normalization};
pub use runs::{
    injected_peak_fit, load_datasets, run_align_train, run_depth_sweep, run_experiment, run_frozen,
    run_hessian, run_lfm, run_theory, AlignRun, DepthOutcome, FrozenRun, HessianRun, LfmRun,
    SweepRun, TheoryRun,
};

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable that overrides the output directory.
pub const OUTPUT_DIR_ENV: &str = "LAYERSCOPE_OUTPUT_DIR";
pub const MANIFEST: &str = "manifest";
pub const REPORT: &str = "report.txt";

/// Explicit directory, then the environment override, then the config,
/// then `runs/<kind>-seed<seed>`.
pub fn resolve_output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.kind.name(), cfg.seed)))
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut s =
        String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(data::hex(&Sha256::digest(&bytes)))
}

/// `key = value` lines describing one run.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Self {
        let lines = text
            .lines()
            .filter_map(|l| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
            })
            .collect();
        Manifest { lines }
    }

    /// Adds the config echo, the hash of every output file present in `dir`
    /// and the wall time, then writes `dir/manifest`.
    pub fn finish(
        mut self,
        dir: &Path,
        cfg: Option<&ExperimentConfig>,
        wall_seconds: f64,
    ) -> Result<Manifest> {
        if let Some(cfg) = cfg {
            for line in &cfg.echo {
                if let Some((k, v)) = line.split_once(" = ") {
                    self.push(format!("config.{k}"), v);
                }
            }
        }
        for name in output_files(dir)? {
            self.push(format!("output.{name}"), file_sha256(&dir.join(&name))?);
        }
        self.push("wall_time_s", format!("{wall_seconds:.3}"));
        write_text(&dir.join(MANIFEST), &self.render())?;
        Ok(self)
    }
}

/// Output files of a run directory, sorted, excluding the manifest and the
/// derived report.
fn output_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_type().map_err(|e| Error::io(dir, e))?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != MANIFEST && name != REPORT {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Summarize every CSV of a finished run into `report.txt`. Re-running on
/// the same directory rewrites identical bytes.
pub fn emit_reports(dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "run directory does not exist",
            ),
        });
    }
    let manifest_path = dir.join(MANIFEST);
    let manifest = Manifest::parse(
        &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    );
    let mut out = String::new();
    for key in ["kind", "seed", "input_hash"] {
        if let Some(v) = manifest.get(key) {
            out.push_str(&format!("{key}: {v}\n"));
        }
    }
    for (k, v) in &manifest.lines {
        if let Some(name) = k.strip_prefix("summary.") {
            out.push_str(&format!("{name}: {v}\n"));
        }
    }
    for name in output_files(dir)? {
        if !name.ends_with(".csv") {
            continue;
        }
        let path = dir.join(&name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let rows: Vec<&str> = lines.collect();
        out.push_str(&format!(
            "\n[{name}]\ncolumns: {header}\nrows: {}\nsha256: {}\n",
            rows.len(),
            file_sha256(&path)?
        ));
        if header.starts_with("epoch,layer,A_l") {
            out.push_str(&alignment_digest(&rows));
        }
    }
    let path = dir.join(REPORT);
    write_text(&path, &out)?;
    Ok(path)
}

/// Peak layer and alignment profile of the last probed epoch.
fn alignment_digest(rows: &[&str]) -> String {
    let parsed: Vec<(usize, usize, f64)> = rows
        .iter()
        .filter_map(|r| {
            let mut f = r.split(',');
            let e = f.next()?.parse().ok()?;
            let l = f.next()?.parse().ok()?;
            let a = f.next()?.parse().ok()?;
            Some((e, l, a))
        })
        .collect();
    let Some(last) = parsed.iter().map(|p| p.0).max() else {
        return String::new();
    };
    let profile: Vec<(usize, f64)> = parsed
        .iter()
        .filter(|p| p.0 == last)
        .map(|p| (p.1, p.2))
        .collect();
    let mut best = profile[0];
    for &p in &profile {
        if p.1 > best.1 {
            best = p;
        }
    }
    let values: Vec<String> = profile.iter().map(|p| format!("{:.4}", p.1)).collect();
    format!(
        "last_epoch: {last}\npeak_layer: {}\nprofile: {}\n",
        best.0,
        values.join(" ")
    )
}
