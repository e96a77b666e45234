//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "W4MU" | version u32 | count u32 |
//!   count × ( name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | f64[prod(dims)] )
//! ```
//!
//! A parameter set `p` is stored as arrays `p.<entry>` plus `p.__meta`
//! holding `[kind code, strength]`; a message is stored as `message`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::ModelKind;
use crate::{ParamSet, Tensor, WatermarkMessage};

pub const MAGIC: &[u8; 4] = b"W4MU";
pub const VERSION: u32 = 1;
const META: &str = "__meta";
const MESSAGE: &str = "message";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_arrays(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let name = a.name.as_bytes();
        let n: usize = a.dims.iter().product();
        if name.len() > u16::MAX as usize || a.dims.len() > u8::MAX as usize || n != a.data.len() {
            return Err(Error::Validation(format!("array {:?} cannot be stored", a.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(a.dims.len() as u8);
        for &d in &a.dims {
            let d = u32::try_from(d).map_err(|_| Error::Validation("dimension too large".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Length {
                offset: self.pos,
                expected: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_arrays(buf: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a W4MU checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("array {name:?} is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(NamedArray { name, dims, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(arrays)
}

/// Parameter sets and an optional message.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sets: Vec<ParamSet>,
    pub message: Option<WatermarkMessage>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&ParamSet> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn to_arrays(&self) -> Result<Vec<NamedArray>> {
        let mut out = Vec::new();
        for set in &self.sets {
            if set.name.contains('.') || set.name == MESSAGE {
                return Err(Error::Validation(format!("invalid set name {:?}", set.name)));
            }
            out.push(NamedArray {
                name: format!("{}.{META}", set.name),
                dims: vec![2],
                data: vec![f64::from(set.kind.code()), set.strength],
            });
            for (entry, t) in set.entries() {
                out.push(NamedArray {
                    name: format!("{}.{entry}", set.name),
                    dims: t.shape().to_vec(),
                    data: t.data().to_vec(),
                });
            }
        }
        if let Some(m) = &self.message {
            out.push(NamedArray {
                name: MESSAGE.into(),
                dims: vec![m.len()],
                data: m.as_reals(),
            });
        }
        Ok(out)
    }

    pub fn from_arrays(arrays: Vec<NamedArray>) -> Result<Self> {
        let mut ck = Checkpoint::default();
        // (name, kind, strength, entries) in file order
        let mut pending: Vec<(String, Option<(ModelKind, f64)>, Vec<(String, Tensor)>)> = Vec::new();
        for a in arrays {
            if a.name == MESSAGE {
                let bits = a.data.iter().map(|&v| v as u8).collect::<Vec<_>>();
                if a.data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Format("message array is not binary".into()));
                }
                ck.message = Some(WatermarkMessage::new(bits)?);
                continue;
            }
            let (set, entry) = a
                .name
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("array name {:?} has no set prefix", a.name)))?;
            let idx = match pending.iter().position(|p| p.0 == set) {
                Some(i) => i,
                None => {
                    pending.push((set.to_string(), None, Vec::new()));
                    pending.len() - 1
                }
            };
            if entry == META {
                let kind = a
                    .data
                    .first()
                    .and_then(|&c| ModelKind::from_code(c as u8))
                    .ok_or_else(|| Error::Format(format!("bad model kind for {set:?}")))?;
                let strength = *a
                    .data
                    .get(1)
                    .ok_or_else(|| Error::Format(format!("short meta for {set:?}")))?;
                pending[idx].1 = Some((kind, strength));
            } else {
                let t = Tensor::new(a.dims, a.data)?;
                pending[idx].2.push((entry.to_string(), t));
            }
        }
        for (name, meta, entries) in pending {
            let (kind, strength) = meta.ok_or_else(|| Error::Format(format!("set {name:?} has no meta")))?;
            ck.sets.push(
                ParamSet::from_entries(name, kind, strength, entries)
                    .map_err(|e| Error::Format(format!("invalid parameter set: {e}")))?,
            );
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_arrays(&ck.to_arrays()?)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_arrays(decode_arrays(&bytes)?)
}
