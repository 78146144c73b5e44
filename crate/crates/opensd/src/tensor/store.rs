//! Named parameter storage and the binary checkpoint format.
//!
//! A `ParamStore` is a flat name -> array map. Model code registers entries
//! once (`init`), then binds fresh leaf tensors from it every forward pass;
//! the optimizer writes updated values back. Keys iterate in sorted order, so
//! saving is deterministic and two identical runs produce byte-identical
//! checkpoint files.
//!
//! Checkpoint layout: magic `OSD1`, then per entry
//! `u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 data`,
//! all little-endian, entries sorted by name, read until EOF.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"OSD1";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    /// Register an entry if absent. The init closure runs only on first
    /// registration, so loading a checkpoint before `init` keeps its values.
    pub fn register(&mut self, name: &str, shape: &[usize], init: impl FnOnce() -> Vec<f64>) {
        if !self.entries.contains_key(name) {
            let data = init();
            assert_eq!(
                data.len(),
                shape.iter().product::<usize>(),
                "init for {name} produced wrong length"
            );
            self.entries.insert(
                name.to_string(),
                ParamEntry {
                    shape: shape.to_vec(),
                    data,
                },
            );
        }
    }

    /// Bind a leaf tensor from an existing entry.
    pub fn bind(&self, name: &str, trainable: bool) -> Result<Tensor> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if trainable {
            Tensor::param(entry.data.clone(), &entry.shape)
        } else {
            Tensor::from_vec(entry.data.clone(), &entry.shape)
        }
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if data.len() != entry.data.len() {
            return Err(Error::Shape(format!(
                "set `{name}`: {} vs {}",
                data.len(),
                entry.data.len()
            )));
        }
        entry.data = data;
        Ok(())
    }

    pub fn data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name).map(|e| &mut e.data)
    }

    /// True if any stored value is NaN or infinite.
    pub fn any_non_finite(&self) -> bool {
        self.entries
            .values()
            .any(|e| e.data.iter().any(|v| !v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(MAGIC);
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut entries = BTreeMap::new();
        while !cur.is_empty() {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut cur, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            let rank = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut cur)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut cur, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            if entries.insert(name.clone(), ParamEntry { shape, data }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
        }
        Ok(ParamStore { entries })
    }
}

/// Binds leaf tensors out of a store and remembers the trainable ones so
/// their gradients can be collected by name after `backward`. Names under
/// the `frozen.` prefix always bind non-trainable.
pub struct Binding<'a> {
    store: &'a ParamStore,
    trainable: bool,
    bound: std::cell::RefCell<std::collections::BTreeMap<String, Tensor>>,
}

impl<'a> Binding<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binding {
            store,
            trainable,
            bound: Default::default(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bind(&self, name: &str) -> Result<Tensor> {
        let trainable = self.trainable && !name.starts_with("frozen.");
        let t = self.store.bind(name, trainable)?;
        if trainable {
            self.bound.borrow_mut().insert(name.to_string(), t.clone());
        }
        Ok(t)
    }

    /// Accumulated gradients of every trainable tensor bound through this
    /// binding. Tensors that never received a gradient are skipped.
    pub fn grads(&self) -> std::collections::BTreeMap<String, Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if cur.len() < buf.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    buf.copy_from_slice(&cur[..buf.len()]);
    *cur = &cur[buf.len()..];
    Ok(())
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(cur, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
