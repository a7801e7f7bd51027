//! Binary checkpoint format.
//!
//! ```text
//! "DPIRCKPT"  u32 version
//! u64 len, config TOML (UTF-8)
//! u64 global step
//! u32 count, then per tensor: u32 len, name, u8 dtype (0 = f32),
//!     u32 ndim, u64 dims…, little-endian payload
//! u8 has_optimizer; if 1: u64 adam step, u32 count, then per entry:
//!     u32 len, name, u64 n, m[n], v[n]
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DPIRCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    pub global_step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl OptimizerState {
    pub fn from_adam(a: &AdamState) -> Self {
        let moments =
            a.m.iter()
                .map(|(k, m)| {
                    (
                        k.clone(),
                        (m.clone(), a.v.get(k).cloned().unwrap_or_default()),
                    )
                })
                .collect();
        Self {
            step: a.step,
            moments,
        }
    }

    pub fn apply_to(&self, a: &mut AdamState) {
        a.step = self.step;
        a.m = self
            .moments
            .iter()
            .map(|(k, (m, _))| (k.clone(), m.clone()))
            .collect();
        a.v = self
            .moments
            .iter()
            .map(|(k, (_, v))| (k.clone(), v.clone()))
            .collect();
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore,
        config_toml: String,
        global_step: u64,
        optimizer: Option<&AdamState>,
    ) -> Self {
        Self {
            config_toml,
            global_step,
            tensors: store
                .named()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: optimizer.map(OptimizerState::from_adam),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config_toml.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_toml.as_bytes());
        b.extend_from_slice(&self.global_step.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut b, name);
            b.push(DTYPE_F32);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for d in t.shape() {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f32s(&mut b, t.data());
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                b.extend_from_slice(&o.step.to_le_bytes());
                b.extend_from_slice(&(o.moments.len() as u32).to_le_bytes());
                for (name, (m, v)) in &o.moments {
                    put_str(&mut b, name);
                    b.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    put_f32s(&mut b, m);
                    put_f32s(&mut b, v);
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic bytes (not a checkpoint)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let n = r.u64()? as usize;
        let config_toml =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("config is not UTF-8"))?;
        let global_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(corrupt(format!(
                    "tensor `{name}` has unknown dtype {dtype}"
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflow"))?;
            let data = r.f32s(len)?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let count = r.u32()? as usize;
                let mut moments = BTreeMap::new();
                for _ in 0..count {
                    let name = r.string()?;
                    let n = r.u64()? as usize;
                    let m = r.f32s(n)?;
                    let v = r.f32s(n)?;
                    moments.insert(name, (m, v));
                }
                Some(OptimizerState { step, moments })
            }
            f => return Err(corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after checkpoint"));
        }
        Ok(Self {
            config_toml,
            global_step,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copy tensors whose names start with any of `prefixes` (all tensors
    /// when empty) into `store`. Nothing is written unless every selected
    /// tensor matches the store by name and shape.
    pub fn restore_into(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize> {
        let selected = self
            .tensors
            .iter()
            .filter(|(n, _)| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| (n.as_str(), t));
        store.load_named(selected)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    b.reserve(v.len() * 4);
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| {
                corrupt(format!(
                    "truncated checkpoint: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore, Checkpoint) {
        let mut store = ParamStore::new();
        store.add(
            "a",
            "a.w",
            Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        store.add("b", "b.w", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let mut adam = AdamState::default();
        adam.step = 3;
        adam.m.insert("a.w".into(), vec![0.5; 4]);
        adam.v.insert("a.w".into(), vec![0.25; 4]);
        let ck = Checkpoint::from_store(&store, "seed = 1\n".into(), 42, Some(&adam));
        (store, ck)
    }

    #[test]
    fn bitwise_round_trip() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in ck.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.global_step, 42);
        assert_eq!(back.optimizer.unwrap().step, 3);
    }

    #[test]
    fn truncated_or_corrupt_input_is_rejected_cleanly() {
        let (mut store, ck) = sample();
        let bytes = ck.to_bytes();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let before = store.checksum("a");
        let mut wrong = ck.clone();
        wrong.tensors[1].1 = Tensor::zeros(&[4]);
        wrong.tensors[0].1 = Tensor::zeros(&[2, 2]);
        assert!(wrong.restore_into(&mut store, &[]).is_err());
        assert_eq!(store.checksum("a"), before);
    }

    #[test]
    fn partial_load_by_prefix() {
        let (mut store, mut ck) = sample();
        ck.tensors[0].1 = Tensor::zeros(&[2, 2]);
        ck.tensors[1].1 = Tensor::zeros(&[3]);
        assert_eq!(ck.restore_into(&mut store, &["b."]).unwrap(), 1);
        assert_eq!(store.tensor(store.id("a.w").unwrap()).data()[3], 3.5);
        assert_eq!(store.tensor(store.id("b.w").unwrap()).data()[0], 0.0);
    }
}
