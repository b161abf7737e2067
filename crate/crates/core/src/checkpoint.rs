//! Binary checkpoints of named tensors.
//!
//! Layout (little-endian): the magic `MFMCKPT1`, format version `u32`, the
//! parameter section and the optimizer section. Each section is a `u32`
//! record count followed by records `[name_len u32][name][ndim u32][dims
//! u32×ndim][data f32×prod]`. Scalars such as the epoch are stored as
//! one-element records in the optimizer section.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"MFMCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), data }
    }

    pub fn scalar(name: impl Into<String>, v: f32) -> Self {
        Self::new(name, &[1], vec![v])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<Record>,
    pub optimizer: Vec<Record>,
}

impl Checkpoint {
    /// Every tensor of the store (learnable and buffers), in store order.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                Record::new(
                    p.name.clone(),
                    p.tensor.dims(),
                    p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect();
        Self { params, optimizer: Vec::new() }
    }

    pub fn param(&self, name: &str) -> Option<&Record> {
        self.params.iter().find(|r| r.name == name)
    }

    pub fn optimizer_record(&self, name: &str) -> Option<&Record> {
        self.optimizer.iter().find(|r| r.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f32> {
        self.optimizer_record(name).and_then(|r| r.data.first().copied())
    }

    /// Copy every parameter into `store`. Names and dims must match exactly.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let diff = diff_report(store, &self.params, |_| true);
        if !diff.is_empty() {
            return Err(Error::Architecture(diff.join("\n")));
        }
        for r in &self.params {
            let id = store.find(&r.name).expect("checked above");
            let t = store.get_mut(id);
            for (d, &s) in t.data_mut().iter_mut().zip(&r.data) {
                *d = T::lit(s as f64);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for section in [&self.params, &self.optimizer] {
            out.extend_from_slice(&(section.len() as u32).to_le_bytes());
            for r in section {
                out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
                out.extend_from_slice(r.name.as_bytes());
                out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
                for &d in &r.dims {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in &r.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let params = r.section()?;
        let optimizer = r.section()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Human-readable differences between the store entries selected by
/// `filter` and the records selected by the same filter.
pub fn diff_report<T: Real>(store: &ParamStore<T>, records: &[Record], filter: impl Fn(&str) -> bool) -> Vec<String> {
    let mut out = Vec::new();
    for (_, p) in store.iter().filter(|(_, p)| filter(&p.name)) {
        match records.iter().find(|r| r.name == p.name) {
            None => out.push(format!("missing in checkpoint: {} {:?}", p.name, p.tensor.dims())),
            Some(r) if r.dims != p.tensor.dims() => out.push(format!(
                "shape mismatch: {} model {:?} vs checkpoint {:?}",
                p.name,
                p.tensor.dims(),
                r.dims
            )),
            Some(_) => {}
        }
    }
    for r in records.iter().filter(|r| filter(&r.name)) {
        if store.find(&r.name).is_none() {
            out.push(format!("missing in model: {} {:?}", r.name, r.dims));
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self) -> Result<Vec<Record>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let ndim = self.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(self.u32()? as usize);
            }
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.ok_or_else(|| Error::Checkpoint(format!("dims overflow in {name}")))?;
            let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push(Record { name, dims, data });
        }
        Ok(out)
    }
}

/// Copy every SSP-branch tensor (weights and batch-norm statistics) from a
/// standalone SSP checkpoint into an MFM. Other tensors are untouched.
pub fn transfer_init<T: Real>(mfm: &mut Model<T>, ssp: &Checkpoint) -> Result<()> {
    let is_ssp = |n: &str| n.starts_with("ssp.");
    let diff = diff_report(mfm.store(), &ssp.params, is_ssp);
    if !diff.is_empty() {
        return Err(Error::Architecture(format!("SSP checkpoint does not fit the MFM:\n{}", diff.join("\n"))));
    }
    let store = mfm.store_mut();
    for r in ssp.params.iter().filter(|r| is_ssp(&r.name)) {
        let id = store.find(&r.name).expect("checked above");
        let t: &mut Tensor<T> = store.get_mut(id);
        for (d, &s) in t.data_mut().iter_mut().zip(&r.data) {
            *d = T::lit(s as f64);
        }
    }
    Ok(())
}
