//! `DLDC` checkpoint container.
//!
//! ```text
//! "DLDC" | version u32
//! metadata: num_blocks u32 | model_dim u32 | ffn_dim u32 | vocab_size u32
//!           | input_dim u32 | max_len u32 | mode u8 | step u64 | epoch u32
//!           | blank u32 | seed u64 | gate_word_pos u128 (lo u64, hi u64)
//! tensors:  count u32, then per tensor
//!           name_len u16 | name utf-8 | rank u8 | dims u32[rank] | f64[prod(dims)]
//! ```
//!
//! Model tensors come first in [`ModelParams::named`] order, then optimizer
//! state under the reserved `adam.` prefix: `adam.m.<name>`, `adam.v.<name>`,
//! and the rank-0 update count `adam.t.<name>`. All values little-endian.

use std::collections::HashMap;
use std::path::Path;

use super::adam::{AdamState, Moments};
use super::TrainMode;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::encoder::{BlockParams, EncoderConfig, ModelParams};
use crate::error::{DldError, Result};
use crate::losses::BLANK;
use crate::rng::{SeedStream, Stream};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DLDC";
pub const VERSION: u32 = 1;
const OPT_PREFIX: &str = "adam.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: TrainMode,
    pub step: u64,
    pub epoch: u32,
    pub blank: u32,
    pub seed: u64,
    /// Position of the gate stream after `step` steps.
    pub gate_word_pos: u128,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(mode: TrainMode, params: ModelParams, seed: u64) -> Self {
        Self {
            mode,
            step: 0,
            epoch: 0,
            blank: BLANK as u32,
            seed,
            gate_word_pos: SeedStream::new(seed, Stream::Gates).word_pos(),
            params,
            optimizer: None,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    /// Gate stream positioned where training left off.
    pub fn gate_stream(&self) -> SeedStream {
        SeedStream::restore(self.seed, Stream::Gates, self.gate_word_pos)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in [c.num_blocks, c.model_dim, c.ffn_dim, c.vocab_size, c.input_dim, c.max_len] {
            w.u32(v as u32);
        }
        w.u8(self.mode.code());
        w.u64(self.step);
        w.u32(self.epoch);
        w.u32(self.blank);
        w.u64(self.seed);
        w.u64(self.gate_word_pos as u64);
        w.u64((self.gate_word_pos >> 64) as u64);

        let mut entries: Vec<(String, Vec<usize>, &[f64])> = self
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data()))
            .collect();
        let counts: Vec<[f64; 1]>;
        if let Some(opt) = &self.optimizer {
            counts = opt.slots.iter().map(|(_, m)| [m.t as f64]).collect();
            for ((name, m), shape) in opt.slots.iter().zip(self.params.named().iter().map(|(_, t)| t.shape().to_vec())) {
                entries.push((format!("{OPT_PREFIX}m.{name}"), shape.clone(), &m.m));
                entries.push((format!("{OPT_PREFIX}v.{name}"), shape, &m.v));
            }
            for ((name, _), t) in opt.slots.iter().zip(&counts) {
                entries.push((format!("{OPT_PREFIX}t.{name}"), Vec::new(), t));
            }
        }
        w.u32(entries.len() as u32);
        for (name, shape, data) in entries {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(shape.len() as u8);
            for d in shape {
                w.u32(d as u32);
            }
            w.f64s(data);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = EncoderConfig {
            num_blocks: dims[0],
            model_dim: dims[1],
            ffn_dim: dims[2],
            vocab_size: dims[3],
            input_dim: dims[4],
            max_len: dims[5],
        };
        config.validate().map_err(|e| r.err(e.to_string()))?;
        let mode = TrainMode::from_code(r.u8()?).ok_or_else(|| r.err("unknown mode"))?;
        let step = r.u64()?;
        let epoch = r.u32()?;
        let blank = r.u32()?;
        let seed = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;

        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("tensor name is not utf-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            let t = Tensor::from_vec(shape, data).map_err(|e| r.err(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.err(format!("duplicate tensor {name}")));
            }
            order.push(name);
        }
        if !r.is_empty() {
            return Err(r.err("trailing bytes"));
        }

        let mut params = ModelParams {
            config,
            input_weight: Tensor::scalar(0.0),
            input_bias: Tensor::scalar(0.0),
            pos_embedding: Tensor::scalar(0.0),
            blocks: (0..config.num_blocks).map(|_| BlockParams::zeros(&config)).collect(),
            output_weight: Tensor::scalar(0.0),
            output_bias: Tensor::scalar(0.0),
        };
        let expected_shapes = expected_shapes(&config);
        let mut names = Vec::new();
        for ((name, slot), shape) in params.named_mut().into_iter().zip(&expected_shapes) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| DldError::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(DldError::format(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            *slot = t;
            names.push(name);
        }

        let optimizer = if tensors.is_empty() {
            None
        } else {
            let mut slots = Vec::with_capacity(names.len());
            for name in &names {
                let mut take = |kind: &str| {
                    tensors
                        .remove(&format!("{OPT_PREFIX}{kind}.{name}"))
                        .ok_or_else(|| DldError::format("checkpoint", format!("missing optimizer {kind} for {name}")))
                };
                let m = take("m")?.into_data();
                let v = take("v")?.into_data();
                let t = take("t")?.data()[0] as u64;
                slots.push((name.clone(), Moments { t, m, v }));
            }
            if let Some(extra) = order.iter().find(|n| tensors.contains_key(*n)) {
                return Err(DldError::format("checkpoint", format!("unexpected tensor {extra}")));
            }
            Some(AdamState { slots })
        };

        Ok(Self {
            mode,
            step,
            epoch,
            blank,
            seed,
            gate_word_pos: lo | (hi << 64),
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn expected_shapes(c: &EncoderConfig) -> Vec<Vec<usize>> {
    let (i, d, f, v) = (c.input_dim, c.model_dim, c.ffn_dim, c.vocab_size);
    let mut out = vec![vec![i, d], vec![d], vec![c.max_len, d]];
    for _ in 0..c.num_blocks {
        out.extend([
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]);
    }
    out.push(vec![d, v]);
    out.push(vec![v]);
    out
}
