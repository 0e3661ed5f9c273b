//! Named, shaped, flat parameter arrays with matching gradient slots, plus
//! the "EEGD" binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EEGD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grads: Vec<f64>,
}

/// Ordered map of trainable arrays. Iteration order is insertion order, so
/// checkpoints, SGD sweeps and gradient checks are all deterministic.
#[derive(Debug, Default)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::net(format!("duplicate parameter '{name}'")));
        }
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::net(format!(
                "parameter '{name}': {} values for shape {shape:?}",
                values.len()
            )));
        }
        let grads = vec![0.0; count];
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            shape,
            values,
            grads,
        });
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::net(format!("unknown parameter '{name}'")))
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut Entry> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::net(format!("unknown parameter '{name}'")))?;
        Ok(&mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self.entry(name)?;
        Ok((&e.shape, &e.values))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        Ok(&mut self.entry_mut(name)?.values)
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.entry(name)?.grads)
    }

    pub fn add_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let e = self.entry_mut(name)?;
        if g.len() != e.grads.len() {
            return Err(Error::net(format!(
                "gradient length {} for parameter '{name}' of size {}",
                g.len(),
                e.grads.len()
            )));
        }
        for (slot, v) in e.grads.iter_mut().zip(g) {
            *slot += v;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grads.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Plain gradient descent: `theta -= lr * grad` over every entry.
    pub fn sgd_step(&mut self, lr: f64) {
        for e in &mut self.entries {
            for (v, g) in e.values.iter_mut().zip(&e.grads) {
                *v -= lr * g;
            }
        }
    }

    /// Gradient ascent: `theta += lr * grad`.
    pub fn ascend_step(&mut self, lr: f64) {
        for e in &mut self.entries {
            for (v, g) in e.values.iter_mut().zip(&e.grads) {
                *v += lr * g;
            }
        }
    }

    /// Folds tracked batch statistics into running-average entries:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_norm_updates(
        &mut self,
        updates: &[crate::autodiff::NormUpdate],
        momentum: f64,
    ) -> Result<()> {
        for u in updates {
            let rm = self.values_mut(&u.mean_name)?;
            for (r, b) in rm.iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let rv = self.values_mut(&u.var_name)?;
            for (r, b) in rv.iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    /// Serializes all entries in the EEGD binary layout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads an EEGD block, validating magic and version.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::checkpoint(format!("cannot read magic: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = read_u32(r)? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::checkpoint("non-UTF-8 parameter name"))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            store.add(&name, shape, values)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut slice = bytes.as_slice();
        Self::read_from(&mut slice)
    }

    /// Hex SHA-256 over the serialized values.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        let mut hasher = Sha256::new();
        hasher.update(&buf);
        hex_string(&hasher.finalize())
    }

    /// Copies every entry into `other` under `prefix.name`.
    pub fn merge_into(&self, other: &mut ParameterStore, prefix: &str) -> Result<()> {
        for e in &self.entries {
            other.add(
                &format!("{prefix}.{}", e.name),
                e.shape.clone(),
                e.values.clone(),
            )?;
        }
        Ok(())
    }

    /// Extracts the entries under `prefix.` into a fresh store, stripping the
    /// prefix.
    pub fn extract_prefix(&self, prefix: &str) -> Result<ParameterStore> {
        let mut out = ParameterStore::new();
        let full = format!("{prefix}.");
        for e in &self.entries {
            if let Some(rest) = e.name.strip_prefix(&full) {
                out.add(rest, e.shape.clone(), e.values.clone())?;
            }
        }
        if out.num_entries() == 0 {
            return Err(Error::checkpoint(format!("no entries under prefix '{prefix}'")));
        }
        Ok(out)
    }

    /// Deep copy of all entries (grads reset to zero).
    pub fn deep_clone(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for e in &self.entries {
            out.add(&e.name, e.shape.clone(), e.values.clone())
                .expect("clone of valid store");
        }
        out
    }

    /// Bitwise equality of shapes and values (grads excluded).
    pub fn values_equal(&self, other: &ParameterStore) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(&other.entries).all(|(a, b)| {
            a.name == b.name
                && a.shape == b.shape
                && a.values.len() == b.values.len()
                && a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
