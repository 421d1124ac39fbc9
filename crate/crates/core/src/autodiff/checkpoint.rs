//! `BRN1` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "BRN1"
//! u32    metadata length, then UTF-8 metadata (model configuration JSON)
//! u64    step counter
//! u32    tensor count, then per tensor:
//!          u32 name length, name bytes, u8 trainable,
//!          u32 rank, u64 extents[rank], f64 values[product]
//! u8     optimizer present; if 1:
//!          f64 base lr, u64 total steps, u64 optimizer step,
//!          per trainable tensor (store order): f64 m[len], f64 v[len]
//! ```

use std::path::Path;

use super::optim::OptimizerState;
use super::params::ParamEntry;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BRN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.metadata.len() as u32);
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.trainable as u8);
            put_u32(&mut out, p.shape.len() as u32);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.base_lr.to_le_bytes());
                out.extend_from_slice(&opt.total_steps.to_le_bytes());
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (i, p) in self.params.iter().enumerate() {
                    if !p.trainable {
                        continue;
                    }
                    for v in opt.m[i].iter().chain(&opt.v[i]) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let meta_len = r.u32()? as usize;
        let at = r.pos;
        let metadata =
            String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| Error::Format {
                offset: at as u64,
                message: "metadata is not UTF-8".into(),
            })?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                    offset: at as u64,
                    message: "tensor name is not UTF-8".into(),
                })?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let values = r.f64s(n)?;
            params.push(ParamEntry {
                name,
                shape,
                values,
                trainable,
            });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let base_lr = r.f64()?;
                let total_steps = r.u64()?;
                let ostep = r.u64()?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for p in &params {
                    if p.trainable {
                        m.push(r.f64s(p.values.len())?);
                        v.push(r.f64s(p.values.len())?);
                    } else {
                        m.push(Vec::new());
                        v.push(Vec::new());
                    }
                }
                Some(OptimizerState {
                    base_lr,
                    total_steps,
                    step: ostep,
                    m,
                    v,
                })
            }
            flag => {
                return Err(Error::Format {
                    offset: (r.pos - 1) as u64,
                    message: format!("bad optimizer flag {flag}"),
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            metadata,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: "tensor too large".into(),
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add(
            "a.weight",
            &[2, 3],
            (0..6).map(|i| i as f64 * 0.5).collect(),
        );
        store.add_buffer("a.bn.running_var", &[3], vec![1.0, 2.0, 3.0]);
        let mut opt = OptimizerState::new(&store, 1e-3, 100);
        opt.step = 7;
        opt.m[0][1] = 0.25;
        opt.v[0][4] = 9.0;
        Checkpoint {
            metadata: "{\"k\":1}".into(),
            step: 7,
            params: store.entries().to_vec(),
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        match Checkpoint::from_bytes(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let b = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&b[..b.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
