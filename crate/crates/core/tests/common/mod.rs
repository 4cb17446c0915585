//! Independent oracles and helpers shared by the integration suites.
#![allow(dead_code)]

pub mod grad_cases;

use dld::data::{generate_dataset, Dataset, DatasetConfig};
use dld::encoder::{EncoderConfig, ModelParams};
use dld::rng::{SeedStream, Stream};
use dld::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut SeedStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.standard_normal()).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den < 1e-300 {
        0.0
    } else {
        diff / den
    }
}

/// Worst relative error between tape gradients and central differences over every input.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t)).collect();
        let loss = f(&mut tape, &vars).unwrap();
        tape.scalar(loss)
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[j] += FD_STEP;
            let up = eval(&ins);
            ins[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&ins);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// `-log` of the summed probability of every length-`T` path that collapses to `target`.
pub fn brute_force_ctc(log_probs: &[f64], frames: usize, vocab: usize, target: &[u32]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &k in &path {
            if k != prev && k != 0 {
                collapsed.push(k as u32);
            }
            prev = k;
        }
        if collapsed == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t * vocab + k]).sum();
            total += lp.exp();
        }
        let mut pos = 0;
        loop {
            if pos == frames {
                return -total.ln();
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Normalized random `[frames, vocab]` log-probabilities.
pub fn random_log_probs(rng: &mut SeedStream, frames: usize, vocab: usize, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let row: Vec<f64> = (0..vocab).map(|_| scale * rng.standard_normal()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}

/// Plain double loop `sum_t sum_k p (log p - log q) / T`.
pub fn kl_oracle(p: &[f64], log_q: &[f64], frames: usize, vocab: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..frames {
        for k in 0..vocab {
            let pi = p[t * vocab + k];
            if pi > 0.0 {
                total += pi * (pi.ln() - log_q[t * vocab + k]);
            }
        }
    }
    total / frames as f64
}

/// Memo-free recursion over every edit script.
pub fn edit_distance_exhaustive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_distance_exhaustive(ra, rb) + usize::from(x != y);
            let del = edit_distance_exhaustive(ra, b) + 1;
            let ins = edit_distance_exhaustive(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

pub fn tiny_encoder(rng: &mut SeedStream, num_blocks: usize) -> EncoderConfig {
    EncoderConfig {
        num_blocks,
        model_dim: 2 + rng.uniform_int(1, 4),
        ffn_dim: 2 + rng.uniform_int(1, 5),
        vocab_size: 2 + rng.uniform_int(1, 3),
        input_dim: 1 + rng.uniform_int(1, 4),
        max_len: 8,
    }
}

pub fn random_model(config: &EncoderConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(config, &mut SeedStream::new(seed, Stream::Init)).unwrap();
    // move LayerNorm gains and biases off their 1/0 init
    let mut rng = SeedStream::new(seed, Stream::Gates);
    for (_, t) in p.named_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.standard_normal());
    }
    p
}

/// Small zero-noise corpus used by the trainer suites.
pub fn small_dataset(seed: u64, num_train: usize, vocab: usize, sigma: f64) -> Dataset {
    generate_dataset(&DatasetConfig {
        vocab_size: vocab,
        feature_dim: 8,
        min_frames: 2,
        max_frames: 3,
        min_tokens: 1,
        max_tokens: 4,
        noise_sigma: sigma,
        num_train,
        num_test: 40,
        seed,
    })
    .unwrap()
}
