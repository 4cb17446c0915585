//! Training objectives and the greedy CTC decoder.
//!
//! CTC and the distillation KL are recorded as fused scalar nodes: the
//! forward pass computes their gradient w.r.t. the student log-probabilities
//! directly, so the tape never sees the alpha/beta lattice.

use crate::encoder::SeqLayout;
use crate::error::{DldError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// Ground-truth token sequence; tokens are in `1..vocab`, never blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CtcTarget {
    tokens: Vec<u32>,
}

impl CtcTarget {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DldError::contract("CTC target must have at least one token"));
        }
        if tokens.iter().any(|&t| t as usize == BLANK) {
            return Err(DldError::contract("CTC target contains the blank index"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn adjacent_repeats(&self) -> usize {
        self.tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames that can emit this target.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_kld: f64,
    pub l_ctc: f64,
    pub total: f64,
}

/// Unweighted sum of the two objectives.
pub fn total_loss(l_kld: f64, l_ctc: f64) -> LossReport {
    LossReport {
        l_kld,
        l_ctc,
        total: l_kld + l_ctc,
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of `target` under per-frame `log_probs` (`frames × vocab`),
/// together with its gradient w.r.t. every entry of `log_probs`.
///
/// The gradient is minus the posterior occupancy of each (frame, label),
/// obtained from the log-space forward and backward lattices.
pub fn ctc_nll_and_grad(log_probs: &[f64], frames: usize, vocab: usize, target: &CtcTarget) -> Result<(f64, Vec<f64>)> {
    if frames == 0 || log_probs.len() != frames * vocab {
        return Err(DldError::Shape {
            op: "ctc_loss",
            lhs: vec![frames, vocab],
            rhs: vec![log_probs.len()],
        });
    }
    if let Some(&t) = target.tokens().iter().find(|&&t| t as usize >= vocab) {
        return Err(DldError::contract(format!("target token {t} outside vocabulary of {vocab}")));
    }
    if frames < target.min_frames() {
        return Err(DldError::InfeasibleTarget {
            frames,
            labels: target.len(),
            repeats: target.adjacent_repeats(),
        });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &t in target.tokens() {
        ext.push(t as usize);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs[t * vocab + ext[s]];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_p.is_finite() {
        return Err(DldError::NonFinite { op: "ctc_loss" });
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            grad[t * vocab + ext[s]] -= (ab - lp(t, s) - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of one `[frames, vocab]` sequence.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &CtcTarget) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(DldError::Shape {
            op: "ctc_loss",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (nll, grad) = ctc_nll_and_grad(tape.value(log_probs), shape[0], shape[1], target)?;
    tape.fused_scalar("ctc_loss", log_probs, nll, grad)
}

/// Mean CTC loss over the sequences of a stacked batch.
pub fn ctc_loss_mean(tape: &mut Tape, log_probs: Var, layout: SeqLayout, targets: &[CtcTarget]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 || shape[0] != layout.frames() || targets.len() != layout.batch {
        return Err(DldError::Shape {
            op: "ctc_loss_mean",
            lhs: shape,
            rhs: vec![layout.batch, layout.seq_len, targets.len()],
        });
    }
    let vocab = shape[1];
    let per = layout.seq_len * vocab;
    let scale = 1.0 / layout.batch as f64;
    let values = tape.value(log_probs);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(values.len());
    for (b, target) in targets.iter().enumerate() {
        let (nll, g) = ctc_nll_and_grad(&values[b * per..(b + 1) * per], layout.seq_len, vocab, target)?;
        total += nll;
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    tape.fused_scalar("ctc_loss", log_probs, total * scale, grad)
}

/// Frozen reference distribution over `[frames, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDist {
    shape: Vec<usize>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

const NORMALIZATION_TOL: f64 = 1e-6;

impl TeacherDist {
    /// From reference log-probabilities; probabilities are their exponentials.
    pub fn from_log_probs(log_probs: &Tensor) -> Result<Self> {
        let probs = log_probs.data().iter().map(|v| v.exp()).collect();
        Self::checked(log_probs.shape().to_vec(), probs, log_probs.data().to_vec())
    }

    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let logs = probs.data().iter().map(|&p| p.ln()).collect();
        Self::checked(probs.shape().to_vec(), probs.data().to_vec(), logs)
    }

    fn checked(shape: Vec<usize>, probs: Vec<f64>, log_probs: Vec<f64>) -> Result<Self> {
        if shape.len() != 2 {
            return Err(DldError::contract(format!("teacher distribution must be 2-D, got {shape:?}")));
        }
        for (r, row) in probs.chunks(shape[1]).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(DldError::contract(format!(
                    "teacher row {r} is not a probability vector (sum {s})"
                )));
            }
        }
        Ok(Self {
            shape,
            probs,
            log_probs,
        })
    }

    /// Stacks per-sequence distributions in order.
    pub fn concat(parts: &[&TeacherDist]) -> Result<Self> {
        let vocab = parts.first().map(|p| p.shape[1]).unwrap_or(1);
        let mut rows = 0;
        let mut probs = Vec::new();
        let mut log_probs = Vec::new();
        for p in parts {
            if p.shape[1] != vocab {
                return Err(DldError::Shape {
                    op: "teacher concat",
                    lhs: vec![rows, vocab],
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            probs.extend_from_slice(&p.probs);
            log_probs.extend_from_slice(&p.log_probs);
        }
        Ok(Self {
            shape: vec![rows, vocab],
            probs,
            log_probs,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `KL(reference || student)` summed over classes and averaged over frames.
///
/// Entries where the reference probability is zero contribute nothing.
/// The gradient flows only into `student_log_probs`.
pub fn kld_loss(tape: &mut Tape, teacher: &TeacherDist, student_log_probs: Var) -> Result<Var> {
    let shape = tape.shape(student_log_probs).to_vec();
    if shape != teacher.shape {
        return Err(DldError::Shape {
            op: "kld_loss",
            lhs: teacher.shape.clone(),
            rhs: shape,
        });
    }
    let frames = shape[0] as f64;
    let ls = tape.value(student_log_probs);
    let mut value = 0.0;
    let mut grad = vec![0.0; ls.len()];
    for i in 0..ls.len() {
        let p = teacher.probs[i];
        if p > 0.0 {
            value += p * (teacher.log_probs[i] - ls[i]);
            grad[i] = -p / frames;
        }
    }
    tape.fused_scalar("kld_loss", student_log_probs, value / frames, grad)
}

/// Best-path decode: per-frame argmax (ties to the lowest index), collapse repeats, drop blanks.
pub fn greedy_ctc_decode(log_probs: &[f64], vocab: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in log_probs.chunks(vocab) {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        if prev != Some(best) && best != BLANK {
            out.push(best as u32);
        }
        prev = Some(best);
    }
    out
}
