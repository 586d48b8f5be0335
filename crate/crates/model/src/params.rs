//! Named parameter storage with seeded initialisation and a stable binary
//! archive format.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Tensor, Var};
use odgen_core::seed::{hash_str, rng_for};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{from_f64, to_f64_vec, DEVICE};

const ARCHIVE_MAGIC: &[u8; 8] = b"ODGARC01";

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArchiveData {
    fn len(&self) -> usize {
        match self {
            ArchiveData::F32(v) => v.len(),
            ArchiveData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub shape: Vec<usize>,
    pub data: ArchiveData,
}

/// Ordered map of named arrays. Serialises deterministically, so equal
/// archives always produce equal bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.get(name)
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F32 => ArchiveData::F32(flat.to_vec1::<f32>()?),
            DType::F64 => ArchiveData::F64(flat.to_vec1::<f64>()?),
            other => return Err(Error::State(format!("cannot archive {other:?} tensor {name}"))),
        };
        self.entries.insert(name.to_string(), ArchiveEntry { shape, data });
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) {
        self.entries.insert(
            name.to_string(),
            ArchiveEntry { shape: vec![], data: ArchiveData::F64(vec![v]) },
        );
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        match &self.entries.get(name)?.data {
            ArchiveData::F64(v) if v.len() == 1 => Some(v[0]),
            ArchiveData::F32(v) if v.len() == 1 => Some(v[0] as f64),
            _ => None,
        }
    }

    pub fn tensor(&self, name: &str, dtype: DType) -> Result<Tensor> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::State(format!("archive has no entry {name}")))?;
        let t = match &e.data {
            ArchiveData::F32(v) => Tensor::from_vec(v.clone(), e.shape.as_slice(), &DEVICE)?,
            ArchiveData::F64(v) => Tensor::from_vec(v.clone(), e.shape.as_slice(), &DEVICE)?,
        };
        Ok(t.to_dtype(dtype)?)
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Archive {
        let p = format!("{prefix}/");
        Archive {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn merge(&mut self, prefix: &str, other: &Archive) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let tag: u8 = match e.data {
                ArchiveData::F32(_) => 0,
                ArchiveData::F64(_) => 1,
            };
            out.push(tag);
            out.extend_from_slice(&(e.shape.len() as u64).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &e.data {
                ArchiveData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArchiveData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Archive, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err("not a parameter archive (bad magic)".into());
        }
        let count = r.u64()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "entry name is not UTF-8".to_string())?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => ArchiveData::F32(
                    r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                1 => ArchiveData::F64(
                    r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                t => return Err(format!("entry {name} has unknown dtype tag {t}")),
            };
            entries.insert(name, ArchiveEntry { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Archive { entries })
    }

    /// Hex SHA-256 of the serialised form.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated archive at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Parameters keyed by dotted path. New entries are initialised from a
/// stream derived from the store seed and the parameter name, so adding a
/// layer never shifts the values of another.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    seed: u64,
    frozen: bool,
    allow_new: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: Mutex::new(BTreeMap::new()), dtype, seed, frozen: false, allow_new: true }
    }

    /// Store pre-populated from an archive. Requests for names that are not
    /// in the archive fail.
    pub fn from_archive(archive: &Archive, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for name in archive.names() {
            vars.insert(name.to_string(), Var::from_tensor(&archive.tensor(name, dtype)?)?);
        }
        Ok(Self { vars: Mutex::new(vars), dtype, seed: 0, frozen: false, allow_new: false })
    }

    /// Frozen stores hand out detached tensors, so no gradient reaches them.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(self.view(v));
        }
        if !self.allow_new {
            return Err(Error::State(format!("parameter {name} missing from stored weights")));
        }
        let n: usize = shape.iter().product();
        let mut rng = rng_for(self.seed, &[hash_str(name)]);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
        };
        let var = Var::from_tensor(&from_f64(data, shape, self.dtype)?)?;
        let t = self.view(&var);
        vars.insert(name.to_string(), var);
        Ok(t)
    }

    fn view(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (name, v) in self.vars.lock().unwrap().iter() {
            a.insert_tensor(name, v.as_tensor())?;
        }
        Ok(a)
    }

    /// Overwrites every stored value from `archive`; names must match exactly.
    pub fn load_values(&self, archive: &Archive) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        if vars.len() != archive.len() || vars.keys().any(|k| archive.get(k).is_none()) {
            return Err(Error::State("archive does not match the parameter set".into()));
        }
        for (name, v) in vars.iter() {
            v.set(&archive.tensor(name, self.dtype)?)?;
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(self.to_archive()?.digest())
    }

    pub fn num_values(&self) -> usize {
        self.vars.lock().unwrap().values().map(|v| v.elem_count()).sum()
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.lock().unwrap().values() {
            if to_f64_vec(v.as_tensor())?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .field("frozen", &self.frozen)
            .finish()
    }
}

#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope { store: self.store, prefix }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.pp(name).prefix, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

impl ArchiveEntry {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_byte_identical() {
        let store = ParamStore::new(DType::F32, 3);
        store.root().pp("a").get("w", &[3, 2], Init::Normal(1.0)).unwrap();
        store.root().get("b", &[4], Init::Uniform(0.5)).unwrap();
        let mut a = store.to_archive().unwrap();
        a.insert_scalar("scale", 0.25);
        let bytes = a.to_bytes();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.scalar("scale"), Some(0.25));
    }

    #[test]
    fn init_depends_on_name_and_seed_only() {
        let s1 = ParamStore::new(DType::F64, 9);
        let s2 = ParamStore::new(DType::F64, 9);
        s2.root().get("other", &[5], Init::Normal(1.0)).unwrap();
        let a = s1.root().get("w", &[5], Init::Normal(1.0)).unwrap();
        let b = s2.root().get("w", &[5], Init::Normal(1.0)).unwrap();
        assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
        let s3 = ParamStore::new(DType::F64, 10);
        let c = s3.root().get("w", &[5], Init::Normal(1.0)).unwrap();
        assert_ne!(to_f64_vec(&a).unwrap(), to_f64_vec(&c).unwrap());
    }

    #[test]
    fn truncated_or_foreign_bytes_are_rejected() {
        let store = ParamStore::new(DType::F32, 1);
        store.root().get("w", &[2, 2], Init::Ones).unwrap();
        let bytes = store.to_archive().unwrap().to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"hello world").is_err());
    }

    #[test]
    fn shape_mismatch_and_missing_names_fail() {
        let store = ParamStore::new(DType::F32, 1);
        store.root().get("w", &[2, 2], Init::Ones).unwrap();
        assert_eq!(store.root().get("w", &[4], Init::Ones).unwrap_err().category(), "config");
        let loaded = ParamStore::from_archive(&store.to_archive().unwrap(), DType::F32).unwrap();
        assert!(loaded.root().get("w", &[2, 2], Init::Zeros).is_ok());
        assert_eq!(loaded.root().get("v", &[1], Init::Zeros).unwrap_err().category(), "state");
    }
}
