//! Synthetic speech-like corpus.
//!
//! Each token owns a unit-norm feature template. A token held for `d` frames
//! emits its template on every frame, plus a shared onset marker on the first
//! frame so that repeated tokens stay separable, plus isotropic Gaussian noise.
//!
//! # File layout (`DLDS`, all little-endian)
//!
//! ```text
//! "DLDS" | version u32
//! config: vocab u32 | feature_dim u32 | min_frames u32 | max_frames u32
//!         | min_tokens u32 | max_tokens u32 | noise_sigma f64
//!         | num_train u32 | num_test u32 | seed u64
//! records (train then test):
//!         sample_id u64 | T u32 | L u32 | tokens u32[L] | features f64[T * feature_dim]
//! trailer: rows u32 | dim u32 | templates f64[rows * dim]
//!         (rows = vocab + 1: token templates for ids 1..=vocab, then the onset marker)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::encoder::SeqLayout;
use crate::error::{DldError, Result};
use crate::losses::CtcTarget;
use crate::rng::{SeedStream, Stream};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DLDS";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Real tokens, excluding the blank.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise_sigma: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            feature_dim: 16,
            min_frames: 2,
            max_frames: 4,
            min_tokens: 3,
            max_tokens: 8,
            noise_sigma: 0.3,
            num_train: 2000,
            num_test: 400,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DldError::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return bad(format!(
                "frames per token must satisfy 2 <= min <= max, got [{}, {}]",
                self.min_frames, self.max_frames
            ));
        }
        if self.min_tokens < 1 || self.max_tokens < self.min_tokens {
            return bad(format!(
                "tokens per sample must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_tokens, self.max_tokens
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Longest sequence this config can produce.
    pub fn max_len(&self) -> usize {
        self.max_tokens * self.max_frames
    }

    /// Model output classes: real tokens plus blank.
    pub fn model_vocab(&self) -> usize {
        self.vocab_size + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: u64,
    /// `[T, feature_dim]`
    pub features: Tensor,
    pub target: CtcTarget,
    /// Emitting token of every frame, kept so tests can inspect alignments.
    pub frame_tokens: Vec<u32>,
}

impl SyntheticSample {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// `[vocab + 1, feature_dim]`: row `k - 1` is token `k`, the last row is the onset marker.
    pub templates: Tensor,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Random orthonormal rows by Gram-Schmidt; rows beyond the dimension are just normalized.
fn orthonormal_rows(rows: usize, dim: usize, rng: &mut SeedStream) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    out
}

fn generate_split(
    config: &DatasetConfig,
    templates: &[Vec<f64>],
    count: usize,
    first_id: u64,
    rng: &mut SeedStream,
) -> Vec<SyntheticSample> {
    let dim = config.feature_dim;
    let onset = &templates[config.vocab_size];
    (0..count)
        .map(|j| {
            let len = rng.uniform_int(config.min_tokens, config.max_tokens);
            let tokens: Vec<u32> = (0..len).map(|_| rng.uniform_int(1, config.vocab_size) as u32).collect();
            let durations: Vec<usize> = (0..len)
                .map(|_| rng.uniform_int(config.min_frames, config.max_frames))
                .collect();
            let frames: usize = durations.iter().sum();
            let mut data = Vec::with_capacity(frames * dim);
            let mut frame_tokens = Vec::with_capacity(frames);
            for (&tok, &dur) in tokens.iter().zip(&durations) {
                let tpl = &templates[tok as usize - 1];
                for k in 0..dur {
                    for c in 0..dim {
                        let marker = if k == 0 { onset[c] } else { 0.0 };
                        data.push(tpl[c] + marker + config.noise_sigma * rng.standard_normal());
                    }
                    frame_tokens.push(tok);
                }
            }
            SyntheticSample {
                sample_id: first_id + j as u64,
                features: Tensor::from_vec(vec![frames, dim], data).expect("frame count"),
                target: CtcTarget::new(tokens).expect("tokens are non-blank and non-empty"),
                frame_tokens,
            }
        })
        .collect()
}

/// Builds the train and test splits from disjoint seeded streams.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut tpl_rng = SeedStream::new(config.seed, Stream::Templates);
    let rows = orthonormal_rows(config.vocab_size + 1, config.feature_dim, &mut tpl_rng);
    let mut train_rng = SeedStream::new(config.seed, Stream::TrainSamples);
    let mut test_rng = SeedStream::new(config.seed, Stream::TestSamples);
    let train = generate_split(config, &rows, config.num_train, 0, &mut train_rng);
    let test = generate_split(config, &rows, config.num_test, config.num_train as u64, &mut test_rng);
    let templates = Tensor::from_vec(
        vec![rows.len(), config.feature_dim],
        rows.into_iter().flatten().collect(),
    )?;
    Ok(Dataset {
        config: *config,
        templates,
        train,
        test,
    })
}

/// Indices of one equal-length batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub seq_len: usize,
    pub indices: Vec<usize>,
}

/// Groups samples by length and shuffles deterministically in `epoch_seed`.
pub fn batch_iter(samples: &[SyntheticSample], batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DldError::Config("batch_size must be >= 1".into()));
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        buckets.entry(s.frames()).or_default().push(i);
    }
    let mut rng = SeedStream::new(epoch_seed, Stream::Shuffle);
    let mut batches = Vec::new();
    for (seq_len, mut idx) in buckets {
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(batch_size) {
            batches.push(Batch {
                seq_len,
                indices: chunk.to_vec(),
            });
        }
    }
    rng.shuffle(&mut batches);
    Ok(batches)
}

/// Stacks the batch's features as `[batch * T, feature_dim]`.
pub fn stack_batch(samples: &[SyntheticSample], batch: &Batch) -> Result<(Tensor, Vec<CtcTarget>, SeqLayout)> {
    let dim = samples[batch.indices[0]].features.cols();
    let mut data = Vec::with_capacity(batch.indices.len() * batch.seq_len * dim);
    let mut targets = Vec::with_capacity(batch.indices.len());
    for &i in &batch.indices {
        let s = &samples[i];
        if s.frames() != batch.seq_len {
            return Err(DldError::contract(format!(
                "sample {} has {} frames in a batch of length {}",
                s.sample_id,
                s.frames(),
                batch.seq_len
            )));
        }
        data.extend_from_slice(s.features.data());
        targets.push(s.target.clone());
    }
    let layout = SeqLayout {
        batch: batch.indices.len(),
        seq_len: batch.seq_len,
    };
    Ok((Tensor::from_vec(vec![layout.frames(), dim], data)?, targets, layout))
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        for v in [c.vocab_size, c.feature_dim, c.min_frames, c.max_frames, c.min_tokens, c.max_tokens] {
            w.u32(v as u32);
        }
        w.f64(c.noise_sigma);
        w.u32(c.num_train as u32);
        w.u32(c.num_test as u32);
        w.u64(c.seed);
        for s in self.train.iter().chain(&self.test) {
            w.u64(s.sample_id);
            w.u32(s.frames() as u32);
            w.u32(s.target.len() as u32);
            for &t in s.target.tokens() {
                w.u32(t);
            }
            w.f64s(s.features.data());
        }
        w.u32(self.templates.rows() as u32);
        w.u32(self.templates.cols() as u32);
        w.f64s(self.templates.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let mut u = || -> Result<usize> { Ok(r.u32()? as usize) };
        let (vocab_size, feature_dim, min_frames, max_frames, min_tokens, max_tokens) =
            (u()?, u()?, u()?, u()?, u()?, u()?);
        let noise_sigma = r.f64()?;
        let num_train = r.u32()? as usize;
        let num_test = r.u32()? as usize;
        let seed = r.u64()?;
        let config = DatasetConfig {
            vocab_size,
            feature_dim,
            min_frames,
            max_frames,
            min_tokens,
            max_tokens,
            noise_sigma,
            num_train,
            num_test,
            seed,
        };
        config.validate().map_err(|e| r.err(e.to_string()))?;

        let mut samples = Vec::with_capacity(num_train + num_test);
        for _ in 0..num_train + num_test {
            let sample_id = r.u64()?;
            let frames = r.u32()? as usize;
            let len = r.u32()? as usize;
            let tokens = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(frames * feature_dim)?;
            let target = CtcTarget::new(tokens).map_err(|e| r.err(e.to_string()))?;
            let features = Tensor::from_vec(vec![frames, feature_dim], data).map_err(|e| r.err(e.to_string()))?;
            samples.push(SyntheticSample {
                sample_id,
                features,
                target,
                frame_tokens: Vec::new(),
            });
        }
        let rows = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let templates = Tensor::from_vec(vec![rows, dim], r.f64s(rows * dim)?).map_err(|e| r.err(e.to_string()))?;
        if !r.is_empty() {
            return Err(r.err("trailing bytes"));
        }
        let test = samples.split_off(num_train);
        let mut ds = Dataset {
            config,
            templates,
            train: samples,
            test,
        };
        ds.restore_frame_tokens();
        Ok(ds)
    }

    /// Frame alignments are not stored; they follow from nearest templates only
    /// when noise is absent, so loaded samples carry them only in that case.
    fn restore_frame_tokens(&mut self) {
        if self.config.noise_sigma != 0.0 {
            return;
        }
        let tokens = self.config.vocab_size;
        let tpl = &self.templates;
        for s in self.train.iter_mut().chain(self.test.iter_mut()) {
            s.frame_tokens = (0..s.frames())
                .map(|f| nearest_template(tpl, tokens, s.features.row(f)) as u32)
                .collect();
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn mean_frames(&self) -> f64 {
        let all: Vec<_> = self.train.iter().chain(&self.test).collect();
        all.iter().map(|s| s.frames() as f64).sum::<f64>() / all.len().max(1) as f64
    }
}

/// Token id (1-based) whose template is closest to `frame`.
pub fn nearest_template(templates: &Tensor, num_tokens: usize, frame: &[f64]) -> usize {
    (0..num_tokens)
        .map(|k| {
            let d: f64 = templates.row(k).iter().zip(frame).map(|(a, b)| (a - b) * (a - b)).sum();
            (k + 1, d)
        })
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0
}
