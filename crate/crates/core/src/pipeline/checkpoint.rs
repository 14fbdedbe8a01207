//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EQSN" | version u32 | stage (u32 len, bytes) | digest [32] | seed u64
//! meta count u32   | (key, value) as length-prefixed strings
//! tensor count u32 | (name, rank u32, dims u32 * rank)
//! payload          | f32 values of every tensor in table order
//! sha256 [32] of everything above
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::Stage;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const MAGIC: &[u8; 4] = b"EQSN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub digest: [u8; 32],
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(stage: Stage, digest: [u8; 32], seed: u64) -> Self {
        Checkpoint { stage, digest, seed, meta: BTreeMap::new(), tensors: vec![] }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    /// Adds every tensor of `params` under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (n, t) in params.names().iter().zip(params.tensors()) {
            self.push(format!("{prefix}{n}"), t);
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::data(format!("checkpoint has no tensor {name}")))
    }

    /// Tensors under `prefix` with the prefix stripped, in file order.
    pub fn params(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                p.push(rest, t.clone());
            }
        }
        p
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::data(format!("checkpoint has no meta entry {key}")))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, self.stage.name());
        b.extend_from_slice(&self.digest);
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut b, k);
            put_str(&mut b, v);
        }
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (n, t) in &self.tensors {
            put_str(&mut b, n);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: origin.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing EQSN header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { b: body, pos: 8 };
        let stage = Stage::parse(&r.string().ok_or_else(|| corrupt("truncated stage"))?)
            .map_err(|_| corrupt("unknown stage tag"))?;
        let digest: [u8; 32] = r.take(32).ok_or_else(|| corrupt("truncated digest"))?.try_into().expect("32");
        let seed = r.u64().ok_or_else(|| corrupt("truncated seed"))?;
        let n_meta = r.u32().ok_or_else(|| corrupt("truncated meta"))?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string().ok_or_else(|| corrupt("truncated meta key"))?;
            let v = r.string().ok_or_else(|| corrupt("truncated meta value"))?;
            meta.insert(k, v);
        }
        let n_t = r.u32().ok_or_else(|| corrupt("truncated tensor table"))?;
        let mut table = vec![];
        for _ in 0..n_t {
            let name = r.string().ok_or_else(|| corrupt("truncated tensor name"))?;
            let rank = r.u32().ok_or_else(|| corrupt("truncated rank"))? as usize;
            if rank > 8 {
                return Err(corrupt("implausible tensor rank"));
            }
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("truncated dims"))?;
            table.push((name, dims));
        }
        let mut tensors = vec![];
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| corrupt("truncated payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect();
            let t = Tensor::new(dims, data).map_err(|_| corrupt("bad tensor shape"))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { stage, digest, seed, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Loads `path`, insisting on a stage and digest.
    pub fn load_expecting(path: &Path, stage: Stage, digest: &[u8; 32]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency(format!("missing {} checkpoint {}", stage.name(), path.display())));
        }
        let ck = Checkpoint::load(path)?;
        if ck.stage != stage {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected a {} checkpoint, found {}", stage.name(), ck.stage.name()),
            });
        }
        if &ck.digest != digest {
            return Err(Error::DigestMismatch {
                checkpoint: path.to_path_buf(),
                expected: hex::encode(ck.digest),
                actual: hex::encode(digest),
            });
        }
        Ok(ck)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.b.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Standard file names inside an output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}.ckpt", stage.name()))
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("{}_log.csv", stage.name()))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("population.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn attention(&self) -> PathBuf {
        self.root.join("attention.csv")
    }

    pub fn raster(&self) -> PathBuf {
        self.root.join("spikes.csv")
    }
}
