//! Bit-exact weight container (LEYW), binary PPM image reading and
//! deterministic random weight initialization.
//!
//! LEYW layout, all integers little-endian:
//!
//! ```text
//! magic "LEYW" (4 bytes) | version u32 = 1 | entry count u32
//! per entry: name length u16 | UTF-8 name | dtype u8 (0 = f32) | rank u8
//!            | dims as u32 each | raw little-endian payload
//! ```
//!
//! The reader rejects any file whose payload length disagrees with its
//! header, including trailing bytes.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchitectureSpec;
use crate::engine::expected_params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LEYW";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One named tensor in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl StoreEntry {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|d| *d as usize).product()
    }
}

/// Ordered name -> tensor map with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, StoreEntry)>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateEntry(name));
        }
        let entry = StoreEntry { dims, data };
        if entry.element_count() != entry.data.len() {
            return Err(Error::CorruptStore(format!(
                "entry {name:?}: {} elements declared, {} provided",
                entry.element_count(),
                entry.data.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, entry));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoreEntry> {
        self.index.get(name).map(|i| &self.entries[*i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoreEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(entry.dims.len() as u8);
            for d in &entry.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::CorruptStore("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::CorruptStore(format!("entry {name:?}: unsupported dtype {dtype}")));
            }
            let rank = cur.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
            }
            let elems: usize = dims.iter().map(|d| *d as usize).product();
            let raw = cur.take(elems * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.index.contains_key(&name) {
                return Err(Error::DuplicateEntry(name));
            }
            store.index.insert(name.clone(), store.entries.len());
            store.entries.push((name, StoreEntry { dims, data }));
        }
        if cur.pos != bytes.len() {
            return Err(Error::CorruptStore(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - cur.pos
            )));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptStore(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn write_store(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<WeightStore> {
    let bytes = std::fs::read(path)?;
    WeightStore::from_bytes(&bytes)
}

/// Read a binary PPM (P6, maxval 255) into a (1,3,H,W) tensor of RGB floats
/// in [0,1].
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    ppm_from_bytes(&bytes)
}

pub fn ppm_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let magic = bytes.get(..2).map(|m| String::from_utf8_lossy(m).into_owned());
        return Err(Error::ImageFormat(format!(
            "expected binary PPM magic \"P6\", got {:?}",
            magic.unwrap_or_default()
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and '#' comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_digit() => break,
                _ => return Err(Error::ImageFormat("malformed PPM header".into())),
            }
        }
        let mut v = 0usize;
        while let Some(b) = bytes.get(pos) {
            if !b.is_ascii_digit() {
                break;
            }
            v = v * 10 + (b - b'0') as usize;
            pos += 1;
        }
        *field = v;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported PPM maxval {maxval}, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat("zero-sized image".into()));
    }
    // single whitespace byte separates header from payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::ImageFormat("malformed PPM header".into())),
    }
    let need = width * height * 3;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::ImageFormat("truncated PPM payload".into()))?;
    let mut data = vec![0.0f32; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[(c * height + y) * width + x] = payload[(y * width + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(1, 3, height, width, data)
}

/// Deterministic pseudo-random weights for a spec: kernels are uniform in
/// (-b, b) with b = 1/sqrt(fan_in) drawn from ChaCha8 seeded with `seed`
/// in layer-parameter order; batch-norm statistics are the identity
/// (gamma 1, beta 0, mean 0, var 1) and biases are zero.
pub fn init_random(spec: &ArchitectureSpec, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for layer in &spec.layers {
        for p in expected_params(layer) {
            let elems: usize = p.dims.iter().map(|d| *d as usize).product();
            let data = match p.role {
                crate::engine::ParamRole::Kernel { fan_in } => {
                    let b = 1.0 / (fan_in as f32).sqrt();
                    (0..elems).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * b).collect()
                }
                crate::engine::ParamRole::Gamma => vec![1.0; elems],
                crate::engine::ParamRole::Beta | crate::engine::ParamRole::Bias => vec![0.0; elems],
                crate::engine::ParamRole::Mean => vec![0.0; elems],
                crate::engine::ParamRole::Var => vec![1.0; elems],
            };
            store
                .insert(p.name, p.dims, data)
                .expect("builder specs have unique parameter names");
        }
    }
    store
}
