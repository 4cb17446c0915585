//! The gated encoder.
//!
//! An input projection with learned positions, `N` pre-norm attention/FFN
//! blocks applied as `y <- y + g * delta(y)`, and a linear projector to
//! per-frame token distributions. A block with `g = 0` is not evaluated at
//! all, so its parameters never enter the tape.

use std::fmt;
use std::str::FromStr;

use crate::error::{DldError, Result};
use crate::rng::{normal_tensor, SeedStream};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Output classes including the blank at index 0.
    pub vocab_size: usize,
    pub input_dim: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("input_dim", self.input_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DldError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(DldError::Config(format!(
                "vocab_size must be >= 2 (blank plus one token), got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Parameters outside the block stack: input projection, positions, projector.
    pub fn base_params(&self) -> u64 {
        let (i, d, v, t) = (
            self.input_dim as u64,
            self.model_dim as u64,
            self.vocab_size as u64,
            self.max_len as u64,
        );
        i * d + d + t * d + d * v + v
    }

    pub fn block_params(&self) -> u64 {
        let (d, f) = (self.model_dim as u64, self.ffn_dim as u64);
        4 * d * d + 4 * d + d * f + f + f * d + d
    }

    pub fn param_budget(&self) -> ParamBudget {
        ParamBudget {
            base: self.base_params() as f64,
            per_block: self.block_params() as f64,
            num_blocks: self.num_blocks,
        }
    }
}

/// Executed-parameter accounting as an affine function of depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamBudget {
    pub base: f64,
    pub per_block: f64,
    pub num_blocks: usize,
}

impl ParamBudget {
    pub fn executed(&self, depth: usize) -> f64 {
        self.base + depth as f64 * self.per_block
    }

    /// Full-depth executed parameters over those at `depth`.
    pub fn speedup(&self, depth: usize) -> f64 {
        self.executed(self.num_blocks) / self.executed(depth)
    }
}

/// Exact executed-parameter count when `depth` blocks run.
pub fn count_executed_params(config: &EncoderConfig, depth: usize) -> Result<u64> {
    if depth > config.num_blocks {
        return Err(DldError::contract(format!(
            "depth {depth} exceeds {} blocks",
            config.num_blocks
        )));
    }
    Ok(config.base_params() + depth as u64 * config.block_params())
}

/// Per-block execution gates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GateVector {
    gates: Vec<bool>,
}

impl GateVector {
    pub fn new(gates: Vec<bool>) -> Self {
        Self { gates }
    }

    pub fn all_on(n: usize) -> Self {
        Self::new(vec![true; n])
    }

    pub fn all_off(n: usize) -> Self {
        Self::new(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.gates[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.gates
    }

    /// Number of executed blocks.
    pub fn depth(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }

    pub fn as_bits(&self) -> Vec<u8> {
        self.gates.iter().map(|&g| g as u8).collect()
    }
}

impl fmt::Display for GateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &g in &self.gates {
            f.write_str(if g { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Draws one gate vector; each block is dropped independently with `p_drop`.
pub fn sample_gates(num_blocks: usize, p_drop: f64, rng: &mut SeedStream) -> Result<GateVector> {
    let mut gates = Vec::with_capacity(num_blocks);
    for _ in 0..num_blocks {
        gates.push(!rng.bernoulli(p_drop)?);
    }
    Ok(GateVector::new(gates))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum GatePolicy {
    #[default]
    EvenlySpaced,
    FirstN,
    LastN,
}

impl GatePolicy {
    pub const ALL: [GatePolicy; 3] = [GatePolicy::EvenlySpaced, GatePolicy::FirstN, GatePolicy::LastN];

    pub fn name(self) -> &'static str {
        match self {
            GatePolicy::EvenlySpaced => "evenly-spaced",
            GatePolicy::FirstN => "first-n",
            GatePolicy::LastN => "last-n",
        }
    }
}

impl fmt::Display for GatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GatePolicy {
    type Err = DldError;

    fn from_str(s: &str) -> Result<Self> {
        GatePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = GatePolicy::ALL.iter().map(|p| p.name()).collect();
                DldError::Config(format!("unknown gate policy `{s}`; valid: {}", valid.join(", ")))
            })
    }
}

/// Deterministic inference gates with exactly `depth` active blocks.
pub fn select_gates(depth: usize, num_blocks: usize, policy: GatePolicy) -> Result<GateVector> {
    if depth > num_blocks {
        return Err(DldError::contract(format!(
            "depth {depth} exceeds {num_blocks} blocks"
        )));
    }
    let mut gates = vec![false; num_blocks];
    match policy {
        GatePolicy::FirstN => gates[..depth].iter_mut().for_each(|g| *g = true),
        GatePolicy::LastN => gates[num_blocks - depth..].iter_mut().for_each(|g| *g = true),
        GatePolicy::EvenlySpaced => {
            for k in 1..=depth {
                let target = ((k * num_blocks) as f64 / depth as f64).round() as usize;
                let mut idx = target.clamp(1, num_blocks) - 1;
                // Shift a collision left to the nearest free slot.
                while gates[idx] {
                    idx = idx.checked_sub(1).unwrap_or(num_blocks - 1);
                }
                gates[idx] = true;
            }
        }
    }
    Ok(GateVector::new(gates))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2",
    "ffn.b2",
];

impl BlockParams {
    fn init(config: &EncoderConfig, rng: &mut SeedStream) -> Self {
        let (d, f) = (config.model_dim, config.ffn_dim);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        Self {
            wq: normal_tensor(rng, &[d, d], sd),
            wk: normal_tensor(rng, &[d, d], sd),
            wv: normal_tensor(rng, &[d, d], sd),
            wo: normal_tensor(rng, &[d, d], sd),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: normal_tensor(rng, &[d, f], sd),
            b1: Tensor::zeros(&[f]),
            w2: normal_tensor(rng, &[f, d], sf),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let (d, f) = (config.model_dim, config.ffn_dim);
        Self {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Tensors in checkpoint field order.
    pub fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBlock {
        let t = self.tensors();
        BoundBlock::from_vars(t.map(|x| if trainable { tape.param(x) } else { tape.constant(x) }))
    }
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundBlock {
    /// Handles already on a tape, in checkpoint field order.
    pub fn from_vars(v: [Var; 12]) -> Self {
        let [wq, wk, wv, wo, ln1_gain, ln1_bias, ln2_gain, ln2_bias, w1, b1, w2, b2] = v;
        Self {
            wq,
            wk,
            wv,
            wo,
            ln1_gain,
            ln1_bias,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn vars(&self) -> [Var; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub input_weight: Tensor,
    pub input_bias: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub output_weight: Tensor,
    pub output_bias: Tensor,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, rng: &mut SeedStream) -> Result<Self> {
        config.validate()?;
        let (i, d, v) = (config.input_dim, config.model_dim, config.vocab_size);
        let input_weight = normal_tensor(rng, &[i, d], 1.0 / (i as f64).sqrt());
        let pos_embedding = normal_tensor(rng, &[config.max_len, d], 0.1);
        let blocks = (0..config.num_blocks).map(|_| BlockParams::init(config, rng)).collect();
        let output_weight = normal_tensor(rng, &[d, v], 1.0 / (d as f64).sqrt());
        Ok(Self {
            config: *config,
            input_weight,
            input_bias: Tensor::zeros(&[d]),
            pos_embedding,
            blocks,
            output_weight,
            output_bias: Tensor::zeros(&[v]),
        })
    }

    /// Every tensor under its stable checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input_weight),
            ("input.bias".to_string(), &self.input_bias),
            ("input.pos".to_string(), &self.pos_embedding),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(block.tensors()) {
                out.push((format!("blocks.{b}.{field}"), t));
            }
        }
        out.push(("output.weight".to_string(), &self.output_weight));
        out.push(("output.bias".to_string(), &self.output_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("input.weight".to_string(), &mut self.input_weight),
            ("input.bias".to_string(), &mut self.input_bias),
            ("input.pos".to_string(), &mut self.pos_embedding),
        ];
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(block.tensors_mut()) {
                out.push((format!("blocks.{b}.{field}"), t));
            }
        }
        out.push(("output.weight".to_string(), &mut self.output_weight));
        out.push(("output.bias".to_string(), &mut self.output_bias));
        out
    }

    pub fn num_params(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let input_weight = leaf(&self.input_weight);
        let input_bias = leaf(&self.input_bias);
        let pos_embedding = leaf(&self.pos_embedding);
        let output_weight = leaf(&self.output_weight);
        let output_bias = leaf(&self.output_bias);
        let blocks = self.blocks.iter().map(|b| b.bind(tape, trainable)).collect();
        BoundModel {
            config: self.config,
            input_weight,
            input_bias,
            pos_embedding,
            blocks,
            output_weight,
            output_bias,
        }
    }
}

/// Tape handles for a whole model, in the same layout as [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: EncoderConfig,
    pub input_weight: Var,
    pub input_bias: Var,
    pub pos_embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub output_weight: Var,
    pub output_bias: Var,
}

impl BoundModel {
    /// Rebuilds the handles from vars in [`ModelParams::named`] order.
    pub fn from_vars(config: &EncoderConfig, vars: &[Var]) -> Result<Self> {
        let n = config.num_blocks;
        if vars.len() != 5 + 12 * n {
            return Err(DldError::contract(format!(
                "{} vars for a {n}-block model, expected {}",
                vars.len(),
                5 + 12 * n
            )));
        }
        let blocks = vars[3..3 + 12 * n]
            .chunks(12)
            .map(|c| BoundBlock::from_vars(c.try_into().expect("chunk of 12")))
            .collect();
        Ok(Self {
            config: *config,
            input_weight: vars[0],
            input_bias: vars[1],
            pos_embedding: vars[2],
            blocks,
            output_weight: vars[3 + 12 * n],
            output_bias: vars[4 + 12 * n],
        })
    }

    /// Vars in the order of [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.input_weight, self.input_bias, self.pos_embedding];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out.push(self.output_weight);
        out.push(self.output_bias);
        out
    }
}

/// Layout of a batch of equal-length sequences stacked as `[batch * seq_len, dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
}

impl SeqLayout {
    pub fn single(seq_len: usize) -> Self {
        Self { batch: 1, seq_len }
    }

    pub fn frames(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// The block's residual contribution `delta(y)`, so the block output is `y + delta(y)`.
///
/// `delta(y) = SelfAttn(LN1(y)) + FFN(LN2(y + SelfAttn(LN1(y))))` with
/// single-head scaled dot-product attention inside each sequence.
pub fn block_forward(tape: &mut Tape, y: Var, layout: SeqLayout, p: &BoundBlock) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let d = tape.shape(p.wq)[0];
    if shape != [layout.frames(), d] {
        return Err(DldError::Shape {
            op: "block_forward",
            lhs: shape,
            rhs: vec![layout.frames(), d],
        });
    }
    let (b, t) = (layout.batch, layout.seq_len);

    let h = tape.layer_norm(y, p.ln1_gain, p.ln1_bias, LAYER_NORM_EPS)?;
    let q = tape.matmul(h, p.wq)?;
    let k = tape.matmul(h, p.wk)?;
    let v = tape.matmul(h, p.wv)?;
    let q3 = tape.reshape(q, &[b, t, d])?;
    let k3 = tape.reshape(k, &[b, t, d])?;
    let v3 = tape.reshape(v, &[b, t, d])?;
    let kt = tape.transpose(k3)?;
    let scores = tape.bmm(q3, kt)?;
    let scores = tape.mul_scalar(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.bmm(attn, v3)?;
    let ctx = tape.reshape(ctx, &[b * t, d])?;
    let attn_out = tape.matmul(ctx, p.wo)?;

    let z = tape.add(y, attn_out)?;
    let u = tape.layer_norm(z, p.ln2_gain, p.ln2_bias, LAYER_NORM_EPS)?;
    let hid = tape.matmul(u, p.w1)?;
    let hid = tape.add_row(hid, p.b1)?;
    let hid = tape.gelu(hid)?;
    let ffn = tape.matmul(hid, p.w2)?;
    let ffn = tape.add_row(ffn, p.b2)?;

    tape.add(attn_out, ffn)
}

/// `[frames, input_dim] -> [frames, model_dim]` with positions added per sequence.
pub fn input_projection(tape: &mut Tape, m: &BoundModel, input: Var, layout: SeqLayout) -> Result<Var> {
    if layout.seq_len > m.config.max_len {
        return Err(DldError::contract(format!(
            "sequence length {} exceeds positional table of {}",
            layout.seq_len, m.config.max_len
        )));
    }
    let x = tape.matmul(input, m.input_weight)?;
    let x = tape.add_row(x, m.input_bias)?;
    let idx: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.seq_len).collect();
    let pos = tape.gather_rows(m.pos_embedding, &idx)?;
    tape.add(x, pos)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub hidden: Var,
    pub logits: Var,
    pub log_probs: Var,
}

/// Runs the gated stack on a stacked batch. Blocks with a closed gate are skipped.
pub fn encoder_forward_vars(
    tape: &mut Tape,
    m: &BoundModel,
    input: Var,
    layout: SeqLayout,
    gates: &GateVector,
) -> Result<EncoderVars> {
    if gates.len() != m.blocks.len() {
        return Err(DldError::contract(format!(
            "gate vector has {} entries for {} blocks",
            gates.len(),
            m.blocks.len()
        )));
    }
    let mut y = input_projection(tape, m, input, layout)?;
    for (i, block) in m.blocks.iter().enumerate() {
        if gates.get(i) {
            let delta = block_forward(tape, y, layout, block)?;
            y = tape.add(y, delta)?;
        }
    }
    let logits = tape.matmul(y, m.output_weight)?;
    let logits = tape.add_row(logits, m.output_bias)?;
    let log_probs = tape.log_softmax(logits, 1)?;
    Ok(EncoderVars {
        hidden: y,
        logits,
        log_probs,
    })
}

/// Gradient-free forward outputs for one or more stacked sequences.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub log_probs: Tensor,
    pub probs: Tensor,
}

/// Evaluates the model on stacked `[frames, input_dim]` features.
pub fn encoder_forward(
    params: &ModelParams,
    features: &Tensor,
    layout: SeqLayout,
    gates: &GateVector,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let m = params.bind(&mut tape, false);
    let x = tape.constant(features);
    let out = encoder_forward_vars(&mut tape, &m, x, layout, gates)?;
    let probs = tape.softmax(out.logits, 1)?;
    Ok(ForwardOutput {
        hidden: tape.tensor(out.hidden),
        log_probs: tape.tensor(out.log_probs),
        probs: tape.tensor(probs),
    })
}
