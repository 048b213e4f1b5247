//! Versioned little-endian checkpoint format.
//!
//! Layout: magic, version, model config (JSON), training state (JSON), the
//! named tensors in registration order, then optional optimizer moments.
//! Encoding is canonical, so save → load → save reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{AdamW, ParamStore};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"LATIQA\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    /// `"init"`, `"sft"` or `"grpo"`.
    pub stage: String,
    /// Optimizer steps completed in the current stage.
    pub step: u64,
    /// Seed that produced the frozen encoder and projector.
    pub frozen_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Option<Matrix>>,
    pub second: Vec<Option<Matrix>>,
}

impl OptimizerState {
    pub fn capture(opt: &AdamW, num_params: usize) -> Self {
        let (m, v) = opt.moments();
        let pad = |xs: &[Option<Matrix>]| {
            let mut out = xs.to_vec();
            out.resize(num_params, None);
            out
        };
        Self {
            step: opt.steps_taken(),
            first: pad(m),
            second: pad(v),
        }
    }

    pub fn apply(&self, opt: &mut AdamW) {
        opt.restore(self.step, self.first.clone(), self.second.clone());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub training: TrainingState,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, training: TrainingState, optimizer: Option<OptimizerState>) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            training,
            optimizer,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&serde_json::to_vec(&self.config).map_err(json_err)?);
        w.bytes(&serde_json::to_vec(&self.training).map_err(json_err)?);
        w.u64(self.params.len() as u64);
        for (_, p) in self.params.iter() {
            w.bytes(p.name.as_bytes());
            w.0.push(u8::from(p.trainable));
            w.matrix(&p.value);
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some(o) => {
                w.0.push(1);
                w.u64(o.step);
                w.u64(o.first.len() as u64);
                for m in o.first.iter().chain(&o.second) {
                    match m {
                        None => w.0.push(0),
                        Some(m) => {
                            w.0.push(1);
                            w.matrix(m);
                        }
                    }
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config: ModelConfig = serde_json::from_slice(r.bytes()?).map_err(json_err)?;
        let training: TrainingState = serde_json::from_slice(r.bytes()?).map_err(json_err)?;
        let n = r.u64()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad trainable flag {b}"))),
            };
            let value = r.matrix()?;
            if params.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.add(name, value, trainable);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let len = r.u64()? as usize;
                let mut all = Vec::with_capacity(2 * len);
                for _ in 0..2 * len {
                    all.push(match r.u8()? {
                        0 => None,
                        _ => Some(r.matrix()?),
                    });
                }
                let second = all.split_off(len);
                Some(OptimizerState {
                    step,
                    first: all,
                    second,
                })
            }
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            params,
            training,
            optimizer,
        })
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for v in m.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{AdamWConfig, Gradients};

    fn tiny() -> Model {
        Model::new(ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            mlp_dim: 8,
            visual_dim: 4,
            max_seq_len: 24,
            seed: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut model = tiny();
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut g = Gradients::new(model.params.len());
        for id in model.params.trainable_ids() {
            let v = model.params.value(id).map(|x| x.sin());
            g.accumulate(id, &v);
        }
        opt.step(&mut model.params, &g);
        let training = TrainingState {
            stage: "sft".into(),
            step: 1,
            frozen_seed: 11,
        };
        let opt_state = OptimizerState::capture(&opt, model.params.len());
        let a = Checkpoint::from_model(&model, training, Some(opt_state)).to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&a).unwrap();
        let b = loaded.to_bytes().unwrap();
        assert_eq!(a, b);
        let restored = loaded.into_model().unwrap();
        assert_eq!(restored.params, model.params);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = tiny();
        let bytes = Checkpoint::from_model(&model, TrainingState::default(), None)
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }
}
