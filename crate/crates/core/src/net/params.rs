//! Named parameters and the flat binary weight container.
//!
//! Container layout, all integers little-endian `u32`:
//!
//! ```text
//! magic "TRIWGT01" | count | count x (name_len | name utf-8 | rank | dims[rank] | f32 payload)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NetError;

pub const WEIGHT_MAGIC: &[u8; 8] = b"TRIWGT01";

/// A learnable tensor with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Anything owning named parameters.
pub trait Module {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn parameter_count(m: &mut dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}

pub fn zero_parameters(m: &mut dyn Module) {
    m.visit("", &mut |_, p| p.data.iter_mut().for_each(|v| *v = 0.0));
}

/// He-normal weights (`std = sqrt(2 / fan_in)`, scaled by `gain`), zero
/// biases. Parameters are filled in visiting order from one seeded stream.
pub fn init_parameters(m: &mut dyn Module, seed: u64, gain: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit("", &mut |name, p| {
        if name.ends_with("bias") || p.shape.len() < 2 {
            p.data.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let fan_in: usize = p.shape[1..].iter().product();
        let std = gain * (2.0 / fan_in as f32).sqrt();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        p.data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
    });
}

/// In-memory weight container, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub entries: BTreeMap<String, Param>,
}

impl WeightFile {
    pub fn from_module(m: &mut dyn Module) -> Self {
        let mut entries = BTreeMap::new();
        m.visit("", &mut |name, p| {
            entries.insert(name.to_string(), p.clone());
        });
        WeightFile { entries }
    }

    /// Copies every parameter of `m` from the container. Missing names,
    /// shape disagreements and unused entries are all errors.
    pub fn load_into(&self, m: &mut dyn Module) -> Result<(), NetError> {
        let mut error = None;
        let mut used = 0usize;
        m.visit("", &mut |name, p| {
            if error.is_some() {
                return;
            }
            match self.entries.get(name) {
                None => error = Some(NetError::WeightMismatch(format!("missing `{name}`"))),
                Some(src) if src.shape != p.shape => {
                    error = Some(NetError::WeightMismatch(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        src.shape, p.shape
                    )))
                }
                Some(src) => {
                    p.data.copy_from_slice(&src.data);
                    used += 1;
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if used != self.entries.len() {
            return Err(NetError::WeightMismatch(format!(
                "container holds {} tensors, model uses {used}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = WEIGHT_MAGIC.to_vec();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != WEIGHT_MAGIC {
            return Err(NetError::WeightFormat("bad magic".into()));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| NetError::WeightFormat("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| NetError::WeightFormat("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if entries.insert(name.clone(), Param { shape, data }).is_some() {
                return Err(NetError::WeightFormat(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(NetError::WeightFormat("trailing bytes".into()));
        }
        Ok(WeightFile { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        fs::write(path.as_ref(), self.to_bytes()).map_err(|e| NetError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        let bytes = fs::read(path.as_ref()).map_err(|e| NetError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NetError::WeightFormat("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
