//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSSLCKPT" | version u32 | flags u32 (bit 0: encoder-only)
//! n_params u32 | n_params × tensor_entry
//! n_optimizers u32 | n × { name | step u64 | beta1 f64 | beta2 f64 | eps f64
//!                          | n u32 | n × { first tensor_entry | second tensor_entry } }
//! has_ema u8 | [decay f64 | n u32 | n × tensor_entry]
//!
//! tensor_entry = name | ndim u32 | ndim × dim u32 | f32 payload
//! name         = len u32 | utf-8 bytes
//! ```

use std::path::Path;

use super::optim::{EmaState, OptimizerState};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"DSSLCKPT";
pub const VERSION: u32 = 1;
const FLAG_ENCODER_ONLY: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedOptimizer {
    pub name: String,
    pub param_names: Vec<String>,
    pub state: OptimizerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedEma {
    pub decay: f64,
    pub shadow: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub encoder_only: bool,
    pub params: Vec<(String, Tensor)>,
    pub optimizers: Vec<NamedOptimizer>,
    pub ema: Option<NamedEma>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            params: store.named_values(),
            ..Self::default()
        }
    }

    /// Keeps only parameters under `prefix` and marks the checkpoint encoder-only.
    pub fn encoder_only(store: &ParamStore, prefix: &str) -> Self {
        Self {
            encoder_only: true,
            params: store
                .named_values()
                .into_iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .collect(),
            ..Self::default()
        }
    }

    pub fn with_ema(mut self, ema: &EmaState, store: &ParamStore) -> Self {
        self.ema = Some(NamedEma {
            decay: ema.decay,
            shadow: store
                .iter()
                .zip(&ema.shadow)
                .map(|((_, p), s)| (p.name.clone(), s.clone()))
                .collect(),
        });
        self
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u32(&mut w, if self.encoder_only { FLAG_ENCODER_ONLY } else { 0 });
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in &self.params {
            put_entry(&mut w, name, t);
        }
        put_u32(&mut w, self.optimizers.len() as u32);
        for opt in &self.optimizers {
            put_name(&mut w, &opt.name);
            w.extend_from_slice(&opt.state.step.to_le_bytes());
            for v in [opt.state.beta1, opt.state.beta2, opt.state.epsilon] {
                w.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut w, opt.param_names.len() as u32);
            for (i, name) in opt.param_names.iter().enumerate() {
                put_entry(&mut w, name, &opt.state.first_moment[i]);
                put_entry(&mut w, name, &opt.state.second_moment[i]);
            }
        }
        match &self.ema {
            None => w.push(0),
            Some(ema) => {
                w.push(1);
                w.extend_from_slice(&ema.decay.to_le_bytes());
                put_u32(&mut w, ema.shadow.len() as u32);
                for (name, t) in &ema.shadow {
                    put_entry(&mut w, name, t);
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        let n = r.u32()?;
        let mut params = Vec::with_capacity(n as usize);
        for _ in 0..n {
            params.push(r.entry()?);
        }
        let n_opt = r.u32()?;
        let mut optimizers = Vec::with_capacity(n_opt as usize);
        for _ in 0..n_opt {
            let name = r.name()?;
            let step = r.u64()?;
            let (beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?);
            let k = r.u32()?;
            let mut param_names = Vec::new();
            let mut first = Vec::new();
            let mut second = Vec::new();
            for _ in 0..k {
                let (pn, m) = r.entry()?;
                let (_, v) = r.entry()?;
                param_names.push(pn);
                first.push(m);
                second.push(v);
            }
            optimizers.push(NamedOptimizer {
                name,
                param_names,
                state: OptimizerState {
                    step,
                    first_moment: first,
                    second_moment: second,
                    beta1,
                    beta2,
                    epsilon,
                },
            });
        }
        let ema = match r.take(1)?[0] {
            0 => None,
            _ => {
                let decay = r.f64()?;
                let k = r.u32()?;
                let mut shadow = Vec::new();
                for _ in 0..k {
                    shadow.push(r.entry()?);
                }
                Some(NamedEma { decay, shadow })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            encoder_only: flags & FLAG_ENCODER_ONLY != 0,
            params,
            optimizers,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    put_u32(w, name.len() as u32);
    w.extend_from_slice(name.as_bytes());
}

fn put_entry(w: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_name(w, name);
    put_u32(w, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(w, d as u32);
    }
    for &v in t.data() {
        w.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
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
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let name = self.name()?;
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}
