//! The `G2CK` checkpoint format.

use std::path::Path;

use g2d_tensor::Tensor;
use thiserror::Error;

use crate::model::{Model, ParamStore};
use crate::train::{RunConfig, TrainState};

const MAGIC: &[u8; 4] = b"G2CK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a G2CK file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("G2CK version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("G2CK payload truncated while reading {what}")]
    Truncated { what: String },
    #[error("parameter name mismatch at position {index}: expected {expected:?}, found {found:?}")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("parameter {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter count mismatch: model has {expected}, checkpoint has {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("malformed G2CK content: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub rng_seed: [u64; 4],
}

pub fn encode(state: &TrainState, config: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = &state.model.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (i, (name, t)) in params.iter().enumerate() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        t.shape()
            .iter()
            .for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        for src in [t, &state.m[i], &state.v[i]] {
            src.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    state
        .rng_seed
        .iter()
        .for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated { what: what.to_string() })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { buf, at: 0 };
    let magic = c.array::<4>("magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let len = u32::from_le_bytes(c.array("config length")?) as usize;
    let config_text = String::from_utf8(c.take(len, "config")?.to_vec())
        .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
    let count = u32::from_le_bytes(c.array("parameter count")?) as usize;
    let mut ck = Checkpoint {
        config_text,
        names: Vec::with_capacity(count.min(4096)),
        params: Vec::new(),
        m: Vec::new(),
        v: Vec::new(),
        step: 0,
        rng_seed: [0; 4],
    };
    for i in 0..count {
        let what = format!("parameter {i}");
        let nlen = u16::from_le_bytes(c.array(&what)?) as usize;
        let name = String::from_utf8(c.take(nlen, &what)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("parameter {i} name is not UTF-8")))?;
        let rank = c.take(1, &what)?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| c.array::<4>(&what).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<_, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: bad shape {shape:?}")))?;
        let mut three = Vec::with_capacity(3);
        for _ in 0..3 {
            let data = c.f64s(n, &what)?;
            three.push(Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?);
        }
        let v = three.pop().expect("three arrays");
        let m = three.pop().expect("three arrays");
        let p = three.pop().expect("three arrays");
        if ck.names.contains(&name) {
            return Err(CheckpointError::Malformed(format!("duplicate parameter {name:?}")));
        }
        ck.names.push(name);
        ck.params.push(p);
        ck.m.push(m);
        ck.v.push(v);
    }
    ck.step = u64::from_le_bytes(c.array("step")?);
    for w in ck.rng_seed.iter_mut() {
        *w = u64::from_le_bytes(c.array("rng state")?);
    }
    if c.at != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - c.at
        )));
    }
    Ok(ck)
}

impl Checkpoint {
    /// Copies parameters and optimizer state into a freshly built model,
    /// checking names and shapes entry by entry.
    pub fn restore(&self, model: Model) -> Result<TrainState, CheckpointError> {
        let expected = &model.params;
        if expected.len() != self.names.len() {
            // Report the first diverging name when there is one.
            for (i, (want, got)) in expected.names().iter().zip(&self.names).enumerate() {
                if want != got {
                    return Err(CheckpointError::NameMismatch {
                        index: i,
                        expected: want.clone(),
                        found: got.clone(),
                    });
                }
            }
            return Err(CheckpointError::CountMismatch {
                expected: expected.len(),
                found: self.names.len(),
            });
        }
        let mut params = ParamStore::new();
        for (i, ((want, cur), got)) in expected.iter().zip(&self.names).enumerate() {
            if want != got {
                return Err(CheckpointError::NameMismatch {
                    index: i,
                    expected: want.to_string(),
                    found: got.clone(),
                });
            }
            if cur.shape() != self.params[i].shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: got.clone(),
                    expected: cur.shape().to_vec(),
                    found: self.params[i].shape().to_vec(),
                });
            }
            params
                .insert(got.clone(), self.params[i].clone())
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        Ok(TrainState {
            model: Model {
                config: model.config,
                params,
            },
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
        })
    }

    /// Parses the embedded config, builds the model it describes and loads
    /// the parameters into it.
    pub fn into_state(&self) -> crate::Result<(RunConfig, TrainState)> {
        let cfg = RunConfig::from_text(&self.config_text)?;
        let model = Model::new(cfg.model.clone())?;
        Ok((cfg, self.restore(model)?))
    }
}

pub fn save(path: &Path, state: &TrainState, config: &RunConfig) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(state, config))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}
