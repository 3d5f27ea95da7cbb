//! Binary checkpoints.
//!
//! Native layout (little-endian): magic `MIFAGCKP`, `u32` version, `u64`
//! length plus UTF-8 config text, `u64` step, `u64` epoch, `u64` Adam step,
//! then three array sections (parameters, first moments, second moments).
//! A section is a `u64` count followed by, per array, a `u32` name length,
//! the name, `u64` rows, `u64` cols and row-major `f64` values.
//!
//! Flat export: magic `MIFAGF32`, `u32` version, `u64` count, then per
//! array a `u32` name length, the name, `u32` rank, one `u64` per dimension
//! and row-major `f32` values.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIFAGCKP";
pub const FLAT_MAGIC: &[u8; 8] = b"MIFAGF32";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub params: ParamStore,
    pub adam: Adam,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64) > remaining {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let mut buf = vec![0; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.bytes(8)? != magic {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.cur.position() as usize != self.cur.get_ref().len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(())
    }
}

fn put_section(out: &mut Vec<u8>, names: &[&str], arrays: &[Tensor]) {
    put_u64(out, arrays.len() as u64);
    for (name, t) in names.iter().zip(arrays) {
        put_name(out, name);
        put_u64(out, t.rows() as u64);
        put_u64(out, t.cols() as u64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_section(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    let count = r.len()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.name()?;
        let (rows, cols) = (r.len()?, r.len()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("array {name}: shape overflow")))?;
        let raw = r.bytes(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let text = self.config.to_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.adam.t);
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n).collect();
        put_section(&mut out, &names, self.params.tensors());
        put_section(&mut out, &names, &self.adam.m);
        put_section(&mut out, &names, &self.adam.v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { cur: Cursor::new(bytes) };
        r.header(MAGIC)?;
        let n = r.len()?;
        let text = String::from_utf8(r.bytes(n)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = TrainConfig::from_text(&text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let t = r.u64()?;
        let params_raw = read_section(&mut r)?;
        let m_raw = read_section(&mut r)?;
        let v_raw = read_section(&mut r)?;
        r.finish()?;
        let mut params = ParamStore::new();
        for (name, t) in &params_raw {
            if params.id(name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array {name}")));
            }
            params.add(name.clone(), t.clone());
        }
        let moments = |raw: Vec<(String, Tensor)>, which: &str| -> Result<Vec<Tensor>> {
            if raw.len() != params_raw.len() {
                return Err(Error::Checkpoint(format!("{which} section has {} arrays", raw.len())));
            }
            raw.into_iter()
                .zip(&params_raw)
                .map(|((n, t), (pn, pt))| {
                    if &n != pn || t.shape() != pt.shape() {
                        Err(Error::Checkpoint(format!("{which} array {n} does not match parameter {pn}")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let adam = Adam {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t,
            m: moments(m_raw, "first-moment")?,
            v: moments(v_raw, "second-moment")?,
        };
        Ok(Self {
            config,
            step,
            epoch,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn flat_export_bytes(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FLAT_MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, params.len() as u64);
    for (name, t) in params.iter() {
        put_name(&mut out, name);
        put_u32(&mut out, 2);
        put_u64(&mut out, t.rows() as u64);
        put_u64(&mut out, t.cols() as u64);
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn flat_import_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    r.header(FLAT_MAGIC)?;
    let count = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r0, c] => (*r0, *c),
            _ => return Err(Error::Checkpoint(format!("array {name}: rank {rank} unsupported"))),
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("array {name}: size overflow")))?;
        let data = r
            .bytes(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
        store.add(name, Tensor::from_vec(rows, cols, data));
    }
    r.finish()?;
    Ok(store)
}

pub fn save_flat(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, flat_export_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_flat(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    flat_import_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("a.weight", Tensor::from_vec(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        params.add("b", Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]));
        let mut adam = Adam::new(params.tensors(), 0.9, 0.999, 1e-8);
        adam.t = 7;
        adam.m[1] = Tensor::from_vec(1, 3, vec![1e-9, 2.0, -3.5]);
        Checkpoint {
            config: TrainConfig::tiny(),
            step: 42,
            epoch: 3,
            params,
            adam,
        }
    }

    #[test]
    fn native_round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 42);
        assert_eq!(back.adam.t, 7);
        assert_eq!(back.params.get(back.params.id("a.weight").unwrap()).data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn version_and_truncation_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn flat_round_trip() {
        let c = sample();
        let bytes = flat_export_bytes(&c.params);
        let store = flat_import_bytes(&bytes).unwrap();
        assert_eq!(flat_export_bytes(&store), bytes);
        assert_eq!(store.get(store.id("b").unwrap()).get(0, 1), 0.2f32 as f64);
    }
}
