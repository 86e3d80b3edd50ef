//! Versioned little-endian binary container:
//!
//! ```text
//! "DFCK" u32:version
//! u64:len  metadata JSON
//! u32:count then per entry: str:name u8:owner u8:kind u32:ndim u64×ndim f64×numel
//! u64:adam_step u32:count then per moment: str:name u64:len f64×len f64×len
//! ```
//! where `str` is a `u32` length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamState, Moments};
use crate::params::{Owner, ParamKind, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub adam_step: u64,
    /// Optimizer moments keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

impl Checkpoint {
    /// Copies parameters into `store` (which must have the same layout) and
    /// optimizer state into `adam`.
    pub fn restore(&self, store: &mut ParamStore, adam: Option<&mut AdamState>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} entries, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (_, e) in self.params.entries() {
            let id = store
                .find(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {}", e.name)))?;
            if store.owner(id) != e.owner {
                return Err(Error::Checkpoint(format!("owner mismatch for {}", e.name)));
            }
        }
        store.copy_values_from(&self.params)?;
        if let Some(adam) = adam {
            let mut moments = BTreeMap::new();
            for (name, m) in &self.moments {
                let id = store
                    .find(name)
                    .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter {name}")))?;
                if m.first.len() != store.value(id).numel() {
                    return Err(Error::Checkpoint(format!("moment size mismatch for {name}")));
                }
                moments.insert(id, m.clone());
            }
            adam.restore(self.adam_step, moments);
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(store: &ParamStore, adam: Option<&AdamState>, meta: &serde_json::Value) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(meta).expect("JSON values always serialize");
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, e) in store.entries() {
        put_str(&mut out, &e.name);
        out.push(e.owner.code());
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        out.extend_from_slice(&(e.value.ndim() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, e.value.data());
    }
    let (step, moments) = match adam {
        Some(a) => (a.step_count(), a.moments().iter().collect::<Vec<_>>()),
        None => (0, Vec::new()),
    };
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(moments.len() as u32).to_le_bytes());
    for (id, m) in moments {
        put_str(&mut out, &store.entry(*id).name);
        out.extend_from_slice(&(m.first.len() as u64).to_le_bytes());
        put_f64s(&mut out, &m.first);
        put_f64s(&mut out, &m.second);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.len()?;
    let meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let owner = Owner::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("bad owner for {name}")))?;
        let kind = match r.u8()? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("bad kind {k} for {name}"))),
        };
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let value = Tensor::new(&shape, r.f64s(numel)?).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if params.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        params.add(name, owner, kind, value);
    }
    let adam_step = r.u64()?;
    let mut moments = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let n = r.len()?;
        let first = r.f64s(n)?;
        let second = r.f64s(n)?;
        moments.insert(name, Moments { first, second });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        meta,
        params,
        adam_step,
        moments,
    })
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, adam: Option<&AdamState>, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, adam, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
