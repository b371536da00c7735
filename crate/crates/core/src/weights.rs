//! Flat binary container for externally trained parameters.
//!
//! Layout, little-endian throughout: magic `MVFW`, version u16, entry count
//! u32, then per entry: name length u16, UTF-8 name, rank u8, one u32 extent
//! per rank dimension, and the row-major f32 values.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const WEIGHT_MAGIC: &[u8; 4] = b"MVFW";
pub const WEIGHT_VERSION: u16 = 1;

/// Named tensors loaded from (or destined for) a weight container.
/// Read-only after load; lookups are by full dotted name.
#[derive(Debug, Clone, Default)]
pub struct WeightMap {
    entries: BTreeMap<String, Tensor>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Lookup that reports the missing entry by name.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io_err = |e| Error::WeightContainer(format!("write failed: {e}"));
        w.write_all(WEIGHT_MAGIC).map_err(io_err)?;
        w.write_all(&WEIGHT_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::WeightContainer(format!("name too long: {name}")));
            }
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(name_bytes).map_err(io_err)?;
            if tensor.rank() > u8::MAX as usize {
                return Err(Error::WeightContainer(format!("rank too large for {name}")));
            }
            w.write_all(&[tensor.rank() as u8]).map_err(io_err)?;
            for &extent in tensor.shape() {
                w.write_all(&(extent as u32).to_le_bytes())
                    .map_err(io_err)?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::WeightContainer(format!(
                "bad magic {magic:?}, expected {WEIGHT_MAGIC:?}"
            )));
        }
        let version = read_u16(&mut r, "version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::WeightContainer(format!(
                "unsupported version {version}"
            )));
        }
        let count = read_u32(&mut r, "entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r, "name length")? as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf, "name")?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::WeightContainer("entry name is not UTF-8".into()))?;
            let mut rank_buf = [0u8; 1];
            read_exact(&mut r, &mut rank_buf, "rank")?;
            let rank = rank_buf[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, "extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f32; n];
            for v in data.iter_mut() {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b, "values")?;
                *v = f32::from_le_bytes(b);
            }
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::WeightContainer(format!("entry `{name}`: {e}")))?;
            entries.insert(name, tensor);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::WeightContainer(format!("truncated while reading {what}")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
