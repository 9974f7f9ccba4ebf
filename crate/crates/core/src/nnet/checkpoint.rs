//! Binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "TGSC"  u32 version
//! u32 depth, (depth+1) × u32 layer sizes
//! u8 activation (0 relu, 1 leaky), f64 negative slope
//! u8 flags (bit 0: biases), u64 seed, depth × u8 frozen
//! per layer: weights row-major f64, then bias f64 when enabled
//! u8 optimizer-state marker; if 1: u8 kind, u64 step, per-layer buffers
//! ```
//!
//! A sidecar `<file>.meta` holds `key = value` lines (seed, dataset hash,
//! epoch).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nnet::config::Activation;
use crate::nnet::network::{Layer, Network};
use crate::nnet::optim::OptState;

pub const MAGIC: &[u8; 4] = b"TGSC";
pub const VERSION: u32 = 1;

/// Values written to the sidecar metadata file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub dataset_hash: String,
    pub epoch: usize,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.depth() as u32).to_le_bytes());
    for &d in &net.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let (code, slope) = match net.activation {
        Activation::Relu => (0u8, 0.0),
        Activation::LeakyRelu(a) => (1u8, a),
    };
    out.push(code);
    out.extend_from_slice(&slope.to_le_bytes());
    out.push(u8::from(net.use_bias));
    out.extend_from_slice(&net.seed.to_le_bytes());
    out.extend(net.frozen.iter().map(|&f| u8::from(f)));
    for layer in &net.layers {
        put_f64s(&mut out, layer.weight.data());
        if let Some(b) = &layer.bias {
            put_f64s(&mut out, b);
        }
    }
    match &net.opt_state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.push(s.kind);
            out.extend_from_slice(&s.step.to_le_bytes());
            for buf in s.first.iter().chain(&s.second) {
                put_f64s(&mut out, buf);
            }
        }
    }
    out
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn fail(&self, at: usize, reason: String) -> Error {
        Error::Parse {
            offset: at as u64,
            reason,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected TGSC".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let depth = r.u32("depth")? as usize;
    if depth == 0 || depth > 1 << 16 {
        return Err(r.fail(8, format!("implausible depth {depth}")));
    }
    let mut dims = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        let at = r.pos;
        let d = r.u32("layer size")? as usize;
        if d == 0 {
            return Err(r.fail(at, "zero layer size".into()));
        }
        dims.push(d);
    }
    let at = r.pos;
    let code = r.u8("activation")?;
    let slope = f64::from_le_bytes(r.take(8, "slope")?.try_into().expect("8 bytes"));
    let activation = match code {
        0 => Activation::Relu,
        1 => Activation::LeakyRelu(slope),
        c => return Err(r.fail(at, format!("unknown activation code {c}"))),
    };
    let at = r.pos;
    let flags = r.u8("flags")?;
    if flags > 1 {
        return Err(r.fail(at, format!("unknown flags {flags:#x}")));
    }
    let use_bias = flags & 1 == 1;
    let seed = r.u64("seed")?;
    let frozen: Vec<bool> = r
        .take(depth, "frozen mask")?
        .iter()
        .map(|&b| b != 0)
        .collect();
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let w = r.f64s(fan_in * fan_out, "weights")?;
        let weight = Matrix::from_vec(fan_out, fan_in, w)?;
        let bias = if use_bias {
            Some(r.f64s(fan_out, "bias")?)
        } else {
            None
        };
        layers.push(Layer { weight, bias });
    }
    let at = r.pos;
    let opt_state = match r.u8("optimizer marker")? {
        0 => None,
        1 => {
            let kind = r.u8("optimizer kind")?;
            if kind != 1 && kind != 2 {
                return Err(r.fail(at + 1, format!("unknown optimizer kind {kind}")));
            }
            let step = r.u64("optimizer step")?;
            let sizes: Vec<usize> = layers.iter().map(Layer::num_params).collect();
            let mut first = Vec::with_capacity(depth);
            for &s in &sizes {
                first.push(r.f64s(s, "optimizer buffer")?);
            }
            let mut second = Vec::new();
            if kind == 2 {
                for &s in &sizes {
                    second.push(r.f64s(s, "optimizer buffer")?);
                }
            }
            Some(OptState {
                kind,
                step,
                first,
                second,
            })
        }
        m => return Err(r.fail(at, format!("bad optimizer marker {m}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes".into()));
    }
    Ok(Network {
        dims,
        activation,
        use_bias,
        layers,
        frozen,
        seed,
        opt_state,
    })
}

pub fn save(net: &Network, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(net)).map_err(|e| Error::io(path, e))?;
    let text = format!(
        "seed = {}\ndataset_hash = {}\nepoch = {}\n",
        meta.seed, meta.dataset_hash, meta.epoch
    );
    let mp = meta_path(path);
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn load(path: &Path) -> Result<(Network, Option<CheckpointMeta>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = decode(&bytes)?;
    let mp = meta_path(path);
    let meta = match fs::read_to_string(&mp) {
        Ok(text) => Some(parse_meta(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&mp, e)),
    };
    Ok((net, meta))
}

fn parse_meta(text: &str) -> Result<CheckpointMeta> {
    let mut seed = None;
    let mut hash = None;
    let mut epoch = None;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad metadata line '{line}'")))?;
        let v = v.trim();
        match k.trim() {
            "seed" => seed = v.parse().ok(),
            "dataset_hash" => hash = Some(v.to_string()),
            "epoch" => epoch = v.parse().ok(),
            _ => {}
        }
    }
    match (seed, hash, epoch) {
        (Some(seed), Some(dataset_hash), Some(epoch)) => Ok(CheckpointMeta {
            seed,
            dataset_hash,
            epoch,
        }),
        _ => Err(Error::Config(
            "checkpoint metadata is missing a field".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::config::FfnnConfig;
    use crate::nnet::network::Grads;
    use crate::nnet::optim::{optimizer_step, Optimizer};

    fn trained_net() -> Network {
        let cfg = FfnnConfig::new(3, 4, 3, 2, 21)
            .with_bias(true)
            .with_activation(Activation::LeakyRelu(0.2));
        let mut net = Network::init(&cfg).unwrap();
        net.set_frozen(0, true);
        let mut g = Grads::zeros_like(&net);
        g.weights[2] = Matrix::filled(2, 4, 0.1);
        optimizer_step(&mut net, &g, &Optimizer::adam(0.01)).unwrap();
        net
    }

    #[test]
    fn roundtrip_in_memory() {
        let net = trained_net();
        let bytes = encode(&net);
        assert_eq!(&bytes[..4], b"TGSC");
        assert_eq!(decode(&bytes).unwrap(), net);
    }

    #[test]
    fn roundtrip_on_disk_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tgsc");
        let meta = CheckpointMeta {
            seed: 21,
            dataset_hash: "abc".into(),
            epoch: 3,
        };
        let net = trained_net();
        save(&net, &path, &meta).unwrap();
        let (back, m) = load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(m, Some(meta));
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode(&trained_net());
        let cut = &bytes[..bytes.len() - 1];
        match decode(cut) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
