//! Binary checkpoint: `"CKPT"`, u32 version, u8 value width (4 or 8 bytes),
//! u32 group count, then per group `u32 name_len, name (UTF-8), u32 rank,
//! u32 dims[rank], values`, all little-endian. A trailing u8 flags an Adam
//! section: `f64 lr, beta1, beta2, epsilon, u64 step, u32 count`, then per
//! group `u32 name_len, name, u32 len, m[len], v[len]`.

use std::io::{Read, Write};

use super::adam::{AdamConfig, AdamMoments, AdamState};
use super::params::ParamSet;
use super::Real;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Bytes per stored value: 4 for f32 models, 8 for f64.
    pub width: u8,
    pub groups: Vec<NamedTensor>,
    pub adam: Option<AdamSnapshot>,
}

fn widen<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn narrow<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

impl Checkpoint {
    /// Learnable groups followed by buffers, plus the optimizer if given.
    pub fn capture<T: Real, P: ParamSet<T>>(params: &P, adam: Option<&AdamState<T>>) -> Self {
        let mut groups = Vec::new();
        let mut push = |name: &str, shape: &[usize], v: &[T]| {
            groups.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                values: widen(v),
            })
        };
        params.visit_params(&mut push);
        params.visit_buffers(&mut push);
        let adam = adam.map(|st| AdamSnapshot {
            config: st.config,
            step: st.step,
            moments: st
                .moments
                .iter()
                .map(|m| (m.name.clone(), widen(&m.m), widen(&m.v)))
                .collect(),
        });
        Checkpoint {
            width: std::mem::size_of::<T>() as u8,
            groups,
            adam,
        }
    }

    /// Overwrites every group of `params`; names, order and shapes must match.
    pub fn restore<T: Real, P: ParamSet<T>>(&self, params: &mut P) -> Result<()> {
        // check everything before writing so a mismatch leaves the model untouched
        let mut idx = 0;
        let mut err = None;
        let groups = &self.groups;
        let mut check = |name: &str, shape: &[usize], v: &[T]| {
            if err.is_none() {
                match groups.get(idx) {
                    Some(g) if g.name == name && g.shape == shape && g.values.len() == v.len() => {}
                    Some(g) => {
                        err = Some(Error::Format(format!(
                            "checkpoint group {} {:?} does not match model group {name} {shape:?}",
                            g.name, g.shape
                        )))
                    }
                    None => err = Some(Error::Format(format!("checkpoint lacks group {name}"))),
                }
            }
            idx += 1;
        };
        params.visit_params(&mut check);
        params.visit_buffers(&mut check);
        if let Some(e) = err {
            return Err(e);
        }
        if idx != self.groups.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} groups, model has {idx}",
                self.groups.len()
            )));
        }
        let mut idx = 0;
        let mut load = |_: &str, _: &[usize], v: &mut [T]| {
            v.copy_from_slice(&narrow::<T>(&groups[idx].values));
            idx += 1;
        };
        params.visit_params_mut(&mut load);
        params.visit_buffers_mut(&mut load);
        Ok(())
    }

    pub fn adam_state<T: Real>(&self) -> Option<AdamState<T>> {
        self.adam.as_ref().map(|a| AdamState {
            config: a.config,
            step: a.step,
            moments: a
                .moments
                .iter()
                .map(|(name, m, v)| AdamMoments {
                    name: name.clone(),
                    m: narrow(m),
                    v: narrow(v),
                })
                .collect(),
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_name(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_values(buf: &mut Vec<u8>, width: u8, v: &[f64]) {
    for &x in v {
        if width == 4 {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.width != 4 && ckpt.width != 8 {
        return Err(Error::Format(format!("unsupported value width {}", ckpt.width)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    buf.push(ckpt.width);
    put_u32(&mut buf, ckpt.groups.len() as u32);
    for g in &ckpt.groups {
        put_name(&mut buf, &g.name);
        put_u32(&mut buf, g.shape.len() as u32);
        for &d in &g.shape {
            put_u32(&mut buf, d as u32);
        }
        put_values(&mut buf, ckpt.width, &g.values);
    }
    match &ckpt.adam {
        None => buf.push(0),
        Some(a) => {
            buf.push(1);
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.epsilon] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&a.step.to_le_bytes());
            put_u32(&mut buf, a.moments.len() as u32);
            for (name, m, v) in &a.moments {
                put_name(&mut buf, name);
                put_u32(&mut buf, m.len() as u32);
                put_values(&mut buf, ckpt.width, m);
                put_values(&mut buf, ckpt.width, v);
            }
        }
    }
    w.write_all(&buf).map_err(|e| Error::io("writing checkpoint", e))?;
    w.flush().map_err(|e| Error::io("writing checkpoint", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("group name is not UTF-8".into()))
    }

    fn values(&mut self, width: u8, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(width as usize)
            .ok_or_else(|| Error::Format("group too large".into()))?;
        let raw = self.take(bytes)?;
        Ok(if width == 4 {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let width = c.take(1)?[0];
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported value width {width}")));
    }
    let count = c.u32()?;
    let mut groups = Vec::new();
    for _ in 0..count {
        let name = c.name()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let values = c.values(width, shape.iter().product())?;
        groups.push(NamedTensor { name, shape, values });
    }
    let adam = match c.take(1)?[0] {
        0 => None,
        1 => {
            let config = AdamConfig {
                lr: c.f64()?,
                beta1: c.f64()?,
                beta2: c.f64()?,
                epsilon: c.f64()?,
            };
            let step = c.u64()?;
            let n = c.u32()?;
            let mut moments = Vec::new();
            for _ in 0..n {
                let name = c.name()?;
                let len = c.u32()? as usize;
                let m = c.values(width, len)?;
                let v = c.values(width, len)?;
                moments.push((name, m, v));
            }
            Some(AdamSnapshot { config, step, moments })
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - c.pos
        )));
    }
    Ok(Checkpoint { width, groups, adam })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            width: 4,
            groups: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    shape: vec![2, 1, 3, 3],
                    values: (0..18).map(|v| (v as f32 * 0.37 - 2.0) as f64).collect(),
                },
                NamedTensor {
                    name: "a.bias".into(),
                    shape: vec![2],
                    values: vec![f32::MIN_POSITIVE as f64, -0.0],
                },
            ],
            adam: Some(AdamSnapshot {
                config: AdamConfig::default(),
                step: 42,
                moments: vec![("a.weight".into(), vec![0.5; 18], vec![0.25; 18])],
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.groups[1].values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn wide_values_survive() {
        let mut ck = sample();
        ck.width = 8;
        ck.groups[0].values[0] = std::f64::consts::PI;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ck);
        ck.width = 3;
        assert!(write_checkpoint(&mut Vec::new(), &ck).is_err());
    }

    #[test]
    fn truncation_and_bad_headers_fail() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample()).unwrap();
        for cut in [0, 3, 10, buf.len() / 2, buf.len() - 1] {
            assert!(read_checkpoint(&buf[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_checkpoint(bad.as_slice())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_groups_round_trip(
            groups in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 0..20), 0..5),
            wide in proptest::bool::ANY,
        ) {
            let width = if wide { 8 } else { 4 };
            let ck = Checkpoint {
                width,
                groups: groups
                    .into_iter()
                    .enumerate()
                    .map(|(k, v)| NamedTensor {
                        name: format!("g{k}"),
                        shape: vec![v.len()],
                        // narrow values must already be representable in f32
                        values: if wide { v } else { v.iter().map(|&x| x as f32 as f64).collect() },
                    })
                    .collect(),
                adam: None,
            };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &ck).unwrap();
            proptest::prop_assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ck);
        }
    }
}
