//! Binary checkpoint files.
//!
//! Layout: the magic string `CDL1`, then zero or more records, each encoded
//! as `name length (u64 LE) | name bytes | rank (u64 LE) | dims (u64 LE each)
//! | payload (f64 LE each)`. Records are written in name order, so a
//! checkpoint's bytes are a pure function of its contents. EMA shadows live
//! under `<name>.ema`, Adam moments under `<name>.m` / `<name>.v`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CdlError, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"CDL1";
const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;
const MAX_NUMEL: u64 = 1 << 30;

/// In-memory checkpoint: a sorted map from record names to tensors.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    records: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.records.contains_key(name) {
            return Err(CdlError::Format(format!("duplicate record '{name}'")));
        }
        self.records.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.records
            .get(name)
            .ok_or_else(|| CdlError::Format(format!("missing record '{name}'")))
    }

    pub fn get_opt(&self, name: &str) -> Option<&Tensor> {
        self.records.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn insert_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert(name, Tensor::scalar(value))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)?.item()
    }

    /// Stores an arbitrary byte string as a tensor: element 0 is the byte
    /// count, the rest are 8-byte words bit-cast to `f64`.
    pub fn insert_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let words = bytes.len().div_ceil(8);
        let mut data = Vec::with_capacity(1 + words);
        data.push(bytes.len() as f64);
        for chunk in bytes.chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            data.push(f64::from_bits(u64::from_le_bytes(word)));
        }
        self.insert(name, Tensor::from_vec(vec![1 + words], data)?)
    }

    /// Reverses [`Checkpoint::insert_bytes`].
    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        let t = self.get(name)?;
        let data = t.data();
        if data.is_empty() {
            return Err(CdlError::Format(format!("record '{name}' is not a byte string")));
        }
        let len = data[0] as usize;
        if len.div_ceil(8) != data.len() - 1 {
            return Err(CdlError::Format(format!(
                "record '{name}' byte length {len} inconsistent with {} words",
                data.len() - 1
            )));
        }
        let mut out = Vec::with_capacity(len);
        for &word in &data[1..] {
            out.extend_from_slice(&word.to_bits().to_le_bytes());
        }
        out.truncate(len);
        Ok(out)
    }

    /// Adds every parameter (value, Adam moments, EMA shadow), buffer, and
    /// the step counter of a store under `prefix.`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, p) in store.params() {
            self.insert(&format!("{prefix}.{name}"), p.value.clone())?;
            self.insert(&format!("{prefix}.{name}.m"), p.m.clone())?;
            self.insert(&format!("{prefix}.{name}.v"), p.v.clone())?;
            self.insert(&format!("{prefix}.{name}.ema"), p.ema.clone())?;
        }
        for (name, b) in store.buffers() {
            self.insert(&format!("{prefix}.{name}"), b.clone())?;
        }
        self.insert_scalar(&format!("{prefix}.__step"), store.step() as f64)?;
        self.insert_scalar(&format!("{prefix}.__ema_rate"), store.ema_rate())?;
        Ok(())
    }

    /// Rebuilds a store previously written with [`Checkpoint::add_store`].
    pub fn load_store(&self, prefix: &str) -> Result<ParamStore> {
        use crate::tensor::Param;
        let dot = format!("{prefix}.");
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let step = self.scalar(&format!("{prefix}.__step"))? as u64;
        let ema_rate = self.scalar(&format!("{prefix}.__ema_rate"))?;
        for (full, tensor) in &self.records {
            let Some(rest) = full.strip_prefix(&dot) else { continue };
            if rest.starts_with("__") {
                continue;
            }
            if let Some(base) = rest.strip_suffix(".m") {
                let value = self.get(&format!("{prefix}.{base}"))?;
                let v = self.get(&format!("{prefix}.{base}.v"))?;
                let ema = self.get(&format!("{prefix}.{base}.ema"))?;
                for t in [tensor, v, ema] {
                    if t.shape() != value.shape() {
                        return Err(CdlError::Format(format!(
                            "checkpoint record '{base}' has inconsistent shapes"
                        )));
                    }
                }
                params.insert(
                    base.to_string(),
                    Param {
                        value: value.clone(),
                        m: tensor.clone(),
                        v: v.clone(),
                        ema: ema.clone(),
                    },
                );
            }
        }
        for (full, tensor) in &self.records {
            let Some(rest) = full.strip_prefix(&dot) else { continue };
            if rest.starts_with("__")
                || rest.ends_with(".m")
                || rest.ends_with(".v")
                || rest.ends_with(".ema")
                || params.contains_key(rest)
            {
                continue;
            }
            buffers.insert(rest.to_string(), tensor.clone());
        }
        if params.is_empty() && buffers.is_empty() {
            return Err(CdlError::Format(format!("no records under prefix '{prefix}'")));
        }
        Ok(ParamStore::from_parts(params, buffers, step, ema_rate))
    }

    /// Serialises all records to `path`; bytes depend only on the records.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for (name, tensor) in &self.records {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint, validating the magic string and record layout.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| {
            CdlError::Format(format!("{}: file too short for magic", path.display()))
        })?;
        if &magic != MAGIC {
            return Err(CdlError::Format(format!(
                "{}: unsupported checkpoint version (magic {:?})",
                path.display(),
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut records = BTreeMap::new();
        loop {
            let mut len_buf = [0u8; 8];
            match r.read(&mut len_buf)? {
                0 => break,
                8 => {}
                n => {
                    r.read_exact(&mut len_buf[n..]).map_err(|_| {
                        CdlError::Format("truncated record header".into())
                    })?;
                }
            }
            let name_len = u64::from_le_bytes(len_buf);
            if name_len == 0 || name_len > MAX_NAME {
                return Err(CdlError::Format(format!("bad record name length {name_len}")));
            }
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name)
                .map_err(|_| CdlError::Format("truncated record name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| CdlError::Format("record name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)?;
            if rank > MAX_RANK {
                return Err(CdlError::Format(format!("record '{name}': rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = read_u64(&mut r)?;
                numel = numel.saturating_mul(d.max(1));
                shape.push(d as usize);
            }
            if numel > MAX_NUMEL {
                return Err(CdlError::Format(format!(
                    "record '{name}': {numel} elements exceeds limit"
                )));
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| CdlError::Format(format!("record '{name}': truncated payload")))?;
                data.push(f64::from_le_bytes(buf));
            }
            if records.contains_key(&name) {
                return Err(CdlError::Format(format!("duplicate record '{name}'")));
            }
            records.insert(name.clone(), Tensor::from_vec(shape, data)?);
        }
        Ok(Self { records })
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| CdlError::Format("truncated record field".into()))?;
    Ok(u64::from_le_bytes(buf))
}
