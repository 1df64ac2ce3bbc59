//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "PLCN"  u32 version
//! u32 preset length, preset bytes (UTF-8)
//! u64 iteration
//! u32 record count, then per record:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank x u32 dims
//!     f32 values, product(dims) of them
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::graph::{Network, NetworkConfig, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLCN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub preset: String,
    pub iteration: u64,
    pub params: Parameters<f32>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>, iteration: u64) -> Self {
        let params = net
            .parameters()
            .iter()
            .map(|(name, t)| (name.to_string(), t.cast::<f32>()))
            .collect();
        Checkpoint {
            preset: net.config().preset.clone(),
            iteration,
            params,
        }
    }

    /// Number of classes, read from the head weight.
    pub fn num_classes(&self) -> Result<usize> {
        self.params
            .get("head.weight")
            .map(|w| w.dims()[0])
            .ok_or_else(|| Error::Checkpoint("no head.weight record".into()))
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        NetworkConfig::preset(&self.preset, self.num_classes()?)
    }

    pub fn network(&self) -> Result<Network<f32>> {
        Network::from_parameters(&self.network_config()?, &self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.preset);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("unknown magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let preset = r.string()?;
        let iteration = r.u64()?;
        let count = r.u32()?;
        let mut params = Parameters::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Checkpoint(format!("record {name} has rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().take(rank) {
                *d = r.u32()? as usize;
            }
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len
                .filter(|l| l.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("record {name} is truncated")))?;
            let data = r
                .take(4 * len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params
                .insert(name.clone(), Tensor::from_vec(dims, data)?)
                .map_err(|_| Error::Checkpoint(format!("record {name} appears twice")))?;
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            preset,
            iteration,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Class names stored beside a checkpoint, one per line.
pub fn classes_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_file_name("classes.txt")
}

pub fn save_class_names(checkpoint: &Path, names: &[String]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    atomic_write(&classes_path(checkpoint), text.as_bytes())
}

/// Names from `classes.txt` if present, otherwise the class indices.
pub fn load_class_names(checkpoint: &Path, classes: usize) -> Result<Vec<String>> {
    let path = classes_path(checkpoint);
    if !path.exists() {
        return Ok((0..classes).map(|i| i.to_string()).collect());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text.lines().map(str::to_string).filter(|l| !l.is_empty()).collect();
    if names.len() != classes {
        return Err(Error::Checkpoint(format!(
            "{} lists {} classes, the checkpoint has {classes}",
            path.display(),
            names.len()
        )));
    }
    Ok(names)
}

/// Replaces parameters of `target` by tensors from `source` according to
/// `mapping` pairs `(source name, target name)`. Returns the target names
/// that were left untouched.
pub fn import_weights(
    target: &mut Parameters<f32>,
    source: &Parameters<f32>,
    mapping: &[(String, String)],
) -> Result<Vec<String>> {
    let mut mapped = std::collections::BTreeSet::new();
    for (src, dst) in mapping {
        let s = source
            .get(src)
            .ok_or_else(|| Error::config(format!("source has no tensor `{src}`")))?;
        let d = target
            .get_mut(dst)
            .ok_or_else(|| Error::config(format!("network has no parameter `{dst}`")))?;
        if s.dims() != d.dims() {
            return Err(Error::config(format!(
                "cannot map `{src}` {:?} onto `{dst}` {:?}",
                s.dims(),
                d.dims()
            )));
        }
        *d = s.clone();
        mapped.insert(dst.clone());
    }
    Ok(target
        .names()
        .filter(|n| !mapped.contains(*n))
        .map(str::to_string)
        .collect())
}

/// Parses mapping lines `<source name> <target name>`; `#` starts a comment.
pub fn parse_mapping(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::config(format!(
                    "mapping line {}: expected `<source> <target>`",
                    lineno + 1
                )))
            }
        }
    }
    Ok(pairs)
}
