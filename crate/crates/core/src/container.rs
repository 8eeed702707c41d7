//! The named-array container: the one persistent format for datasets,
//! intermediate volumes and checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"NAV1"
//! version u32 (= 1)
//! count   u32
//! count × { name_len u32, name utf-8, kind u8, rank u32, extents u64 × rank, payload }
//! ```
//!
//! Element kinds: 1 = f32, 2 = f64, 3 = complex f64 (re, im pairs).

use std::path::Path;

use num_complex::Complex64;

use crate::array::{CArray, NdArray, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"NAV1";
pub const VERSION: u32 = 1;

/// Name prefix of the zero-length entry that carries provenance text.
pub const PROVENANCE_PREFIX: &str = "provenance:";

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(NdArray<f32>),
    F64(Tensor),
    C64(CArray),
}

impl Array {
    fn kind(&self) -> u8 {
        match self {
            Array::F32(_) => 1,
            Array::F64(_) => 2,
            Array::C64(_) => 3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F32(a) => a.shape(),
            Array::F64(a) => a.shape(),
            Array::C64(a) => a.shape(),
        }
    }
}

impl From<Tensor> for Array {
    fn from(t: Tensor) -> Self {
        Array::F64(t)
    }
}

impl From<CArray> for Array {
    fn from(t: CArray) -> Self {
        Array::C64(t)
    }
}

/// An ordered list of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Array)>,
}

fn corrupt(msg: impl Into<String>, offset: usize) -> Error {
    Error::Container {
        msg: msg.into(),
        offset,
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, a: impl Into<Array>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(corrupt(format!("duplicate name {name:?}"), 0));
        }
        self.entries.push((name, a.into()));
        Ok(())
    }

    /// Records free-form provenance as an empty entry whose name holds it.
    pub fn set_provenance(&mut self, text: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(PROVENANCE_PREFIX));
        let name = format!("{PROVENANCE_PREFIX}{}", text.replace('\n', " "));
        self.entries.insert(0, (name, Array::F64(Tensor::zeros(&[0]))));
    }

    pub fn provenance(&self) -> Option<&str> {
        self.entries.iter().find_map(|(n, _)| n.strip_prefix(PROVENANCE_PREFIX))
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Array::F64(t)) => Ok(t),
            Some(_) => Err(corrupt(format!("entry {name:?} is not f64"), 0)),
            None => Err(corrupt(format!("missing entry {name:?}"), 0)),
        }
    }

    pub fn complex(&self, name: &str) -> Result<&CArray> {
        match self.get(name) {
            Some(Array::C64(t)) => Ok(t),
            Some(_) => Err(corrupt(format!("entry {name:?} is not complex"), 0)),
            None => Err(corrupt(format!("missing entry {name:?}"), 0)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, a) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.kind());
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &e in a.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match a {
                Array::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::C64(t) => t.data().iter().for_each(|v| {
                    out.extend_from_slice(&v.re.to_le_bytes());
                    out.extend_from_slice(&v.im.to_le_bytes());
                }),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic", 0));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}"), 4));
        }
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("name is not utf-8", start + 4))?
                .to_string();
            let kind_at = r.pos;
            let kind = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("extent overflows", r.pos))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| corrupt("element count overflows", r.pos))?;
            let a = match kind {
                1 => Array::F32(NdArray::from_vec(&shape, r.values(n, 4, |b| f32::from_le_bytes(b.try_into().unwrap()))?)?),
                2 => Array::F64(Tensor::from_vec(&shape, r.values(n, 8, |b| f64::from_le_bytes(b.try_into().unwrap()))?)?),
                3 => Array::C64(CArray::from_vec(
                    &shape,
                    r.values(n, 16, |b| {
                        Complex64::new(
                            f64::from_le_bytes(b[..8].try_into().unwrap()),
                            f64::from_le_bytes(b[8..].try_into().unwrap()),
                        )
                    })?,
                )?),
                k => return Err(corrupt(format!("unknown element kind {k}"), kind_at)),
            };
            if c.get(&name).is_some() {
                return Err(corrupt(format!("duplicate name {name:?}"), start));
            }
            c.entries.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes", r.pos));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Name prefix of checkpoint entries.
pub const PARAM_PREFIX: &str = "param:";

/// Every parameter of `store` as an f64 entry named `param:<name>`.
pub fn checkpoint(store: &ParamStore, provenance: &str) -> Result<Container> {
    let mut c = Container::new();
    c.set_provenance(provenance);
    for (name, v) in store.named_values() {
        c.push(format!("{PARAM_PREFIX}{name}"), v.clone())?;
    }
    Ok(c)
}

/// Loads a [`checkpoint`] into a store built with the same architecture.
pub fn restore(store: &mut ParamStore, c: &Container) -> Result<()> {
    let entries = c.entries.iter().filter_map(|(n, a)| match (n.strip_prefix(PARAM_PREFIX), a) {
        (Some(name), Array::F64(t)) => Some((name, t)),
        _ => None,
    });
    store.load_named(entries)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated: need {n} more bytes"), self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values<T>(&mut self, n: usize, width: usize, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>> {
        let total = n.checked_mul(width).ok_or_else(|| corrupt("payload size overflows", self.pos))?;
        Ok(self.take(total)?.chunks_exact(width).map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set_provenance("gen-data --seed 7");
        c.push("a", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.0, -0.0, 1e300]).unwrap())
            .unwrap();
        c.push(
            "k",
            CArray::from_vec(&[2], vec![Complex64::new(1.0, -1.0), Complex64::new(0.5, 3.0)]).unwrap(),
        )
        .unwrap();
        c.push("f", Array::F32(NdArray::from_vec(&[1], vec![1.5f32]).unwrap())).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.provenance(), Some("gen-data --seed 7"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nav");
        c.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Container::load(&p).unwrap(), back);
    }

    #[test]
    fn checkpoint_restores_every_parameter() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::from_vec(&[2], vec![0.25, -1.0]).unwrap());
        a.add("b", Tensor::scalar(3.0));
        let c = Container::from_bytes(&checkpoint(&a, "test").unwrap().to_bytes()).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[2]));
        b.add("b", Tensor::zeros(&[1]));
        restore(&mut b, &c).unwrap();
        assert!(a.named_values().eq(b.named_values()));
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3]));
        assert!(restore(&mut other, &c).is_err());
        let mut missing = ParamStore::new();
        missing.add("z", Tensor::zeros(&[1]));
        assert!(restore(&mut missing, &c).is_err());
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let e = Container::from_bytes(&[]).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");
    }

    #[test]
    fn unknown_kind_and_truncation_are_rejected() {
        let mut bytes = sample().to_bytes();
        // the first entry's kind byte follows magic, version, count, name
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let at = 16 + name_len;
        bytes[at] = 9;
        let e = Container::from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains("unknown element kind 9") && e.contains(&format!("offset {at}")), "{e}");
        let good = sample().to_bytes();
        let e = Container::from_bytes(&good[..good.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(Container::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut c = sample();
        assert!(c.push("a", Tensor::zeros(&[1])).is_err());
    }

    proptest! {
        #[test]
        fn random_arrays_round_trip(vals in proptest::collection::vec(proptest::num::f64::ANY, 0..40)) {
            let mut c = Container::new();
            let n = vals.len();
            c.push("v", Tensor::from_vec(&[n], vals.clone()).unwrap()).unwrap();
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            let Some(Array::F64(t)) = back.get("v") else { panic!("kind") };
            let same = t.data().iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
