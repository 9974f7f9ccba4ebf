use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Stream};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Row normalization applied to the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    Raw,
    /// Rows rescaled to norm `√d`.
    UnitSphere,
    /// Rows rescaled to norm 1.
    UnitL2,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Normalization::Raw),
            "unit_sphere" | "sphere" => Ok(Normalization::UnitSphere),
            "unit_l2" | "l2" => Ok(Normalization::UnitL2),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::UnitSphere => "unit_sphere",
            Normalization::UnitL2 => "unit_l2",
        }
    }

    pub fn apply(self, x: &mut Matrix) -> Result<()> {
        let target = match self {
            Normalization::Raw => return Ok(()),
            Normalization::UnitSphere => (x.cols() as f64).sqrt(),
            Normalization::UnitL2 => 1.0,
        };
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            let nrm = crate::linalg::norm(row);
            if nrm == 0.0 {
                return Err(Error::Degenerate(format!("sample {r} is all zeros")));
            }
            row.iter_mut().for_each(|v| *v *= target / nrm);
        }
        Ok(())
    }
}

/// Labelled samples; rows of `x` are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        x: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            x,
            labels,
            num_classes,
            normalization: Normalization::Raw,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// n × k one-hot targets.
    pub fn onehot(&self) -> Matrix {
        Matrix::from_fn(self.len(), self.num_classes, |i, j| {
            if self.labels[i] == j {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn is_balanced(&self) -> bool {
        let c = self.class_counts();
        let (lo, hi) = (
            c.iter().min().copied().unwrap_or(0),
            c.iter().max().copied().unwrap_or(0),
        );
        hi - lo <= 1
    }

    pub fn normalized(mut self, norm: Normalization) -> Result<Self> {
        norm.apply(&mut self.x)?;
        self.normalization = norm;
        Ok(self)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization,
        }
    }

    /// Map labels through `f` into `k` classes.
    pub fn relabel(&self, k: usize, f: impl Fn(usize) -> usize) -> Result<Dataset> {
        let mut d = Dataset::new(
            self.name.clone(),
            self.x.clone(),
            self.labels.iter().map(|&l| f(l)).collect(),
            k,
        )?;
        d.normalization = self.normalization;
        Ok(d)
    }

    /// Labels permuted uniformly at random (class counts are kept).
    pub fn shuffled_labels(&self, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, Stream::Aux);
        let perm = rng::permutation(&mut r, self.len());
        let mut d = self.clone();
        d.labels = perm.iter().map(|&i| self.labels[i]).collect();
        d
    }

    /// Indices grouped by class, each group in ascending order.
    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// `per_class` random samples of every class, sorted by index.
    pub fn stratified_indices(
        &self,
        per_class: usize,
        seed: u64,
        purpose: Stream,
    ) -> Result<Vec<usize>> {
        let mut r = rng::stream(seed, purpose);
        let mut out = Vec::with_capacity(per_class * self.num_classes);
        for (c, group) in self.by_class().into_iter().enumerate() {
            if group.len() < per_class {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, {per_class} requested",
                    group.len()
                )));
            }
            let perm = rng::permutation(&mut r, group.len());
            out.extend(perm[..per_class].iter().map(|&p| group[p]));
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Disjoint stratified train and test subsets.
    pub fn stratified_split(
        &self,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<(Dataset, Dataset)> {
        let mut r = rng::stream(seed, Stream::Split);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (c, group) in self.by_class().into_iter().enumerate() {
            if group.len() < train_per_class + test_per_class {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, {} requested",
                    group.len(),
                    train_per_class + test_per_class
                )));
            }
            let perm = rng::permutation(&mut r, group.len());
            train.extend(perm[..train_per_class].iter().map(|&p| group[p]));
            test.extend(
                perm[train_per_class..train_per_class + test_per_class]
                    .iter()
                    .map(|&p| group[p]),
            );
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// SHA-256 over shape, inputs and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in [self.len(), self.dim(), self.num_classes] {
            h.update((v as u64).to_le_bytes());
        }
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// `label,x1,…,xd` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 1..=self.dim() {
            s.push_str(&format!(",x{j}"));
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&self.labels[i].to_string());
            for v in self.x.row(i) {
                s.push_str(&format!(",{v:.17e}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Parse {
            offset: bytes.len() as u64,
            reason: format!("file ends before the 4-byte field at offset {offset}"),
        }),
    }
}

/// Parsed IDX labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            reason: format!("{n} labels declared, file ends after {}", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Parsed IDX images: count, rows, cols and the raw pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            reason: format!(
                "{need} pixel bytes declared, file ends after {}",
                body.len()
            ),
        });
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

/// MNIST-style IDX pair (optionally gzip-compressed). Pixels are scaled to
/// `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let lab = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if lab.len() != n {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("{n} images but {} labels", lab.len()),
        });
    }
    let d = rows * cols;
    let x = Matrix::from_vec(n, d, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let k = lab
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(10);
    Dataset::new("mnist", x, lab.iter().map(|&l| l as usize).collect(), k)
}

/// Check magics and counts without keeping the pixels.
pub fn verify_mnist_idx(images: &Path, labels: &Path) -> Result<(usize, usize, usize)> {
    let (n, rows, cols, _) = parse_idx_images(&read_maybe_gz(images)?)?;
    let lab = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if lab.len() != n {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("{n} images but {} labels", lab.len()),
        });
    }
    Ok((n, rows, cols))
}

/// Balanced classes around near-orthogonal directions, rows on the sphere
/// of radius `√d`. Sample `i` has label `i mod k`.
pub fn synth_sphere(n: usize, d: usize, k: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "n = {n} is not divisible by k = {k}"
        )));
    }
    if k > d {
        return Err(Error::Config(format!(
            "cannot place {k} orthogonal directions in dimension {d}"
        )));
    }
    let mut r = rng::stream(seed, Stream::Data);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while dirs.len() < k {
        let mut v = rng::normal_vec(&mut r, d);
        for u in &dirs {
            let c = crate::linalg::dot(&v, u);
            crate::linalg::axpy(-c, u, &mut v);
        }
        let nv = crate::linalg::norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nv);
            dirs.push(v);
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = margin * dirs[labels[i]][j] + rng::normal(&mut r);
        }
    }
    let ds = Dataset::new(format!("sphere-n{n}-d{d}-k{k}-m{margin}"), x, labels, k)?;
    ds.normalized(Normalization::UnitSphere)
}
