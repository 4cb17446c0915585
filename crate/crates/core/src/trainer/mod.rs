//! Training recipes: the static reference, the distilled dynamic student,
//! and the random-dropping baseline.

pub mod adam;
pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;

use crate::data::{batch_iter, stack_batch, Dataset, SyntheticSample};
use crate::encoder::{encoder_forward, encoder_forward_vars, sample_gates, EncoderConfig, GateVector, ModelParams, SeqLayout};
use crate::error::{DldError, Result};
use crate::eval::token_error_rate;
use crate::losses::{ctc_loss_mean, kld_loss, total_loss, LossReport, TeacherDist};
use crate::rng::{SeedStream, Stream};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Reference,
    DldStudent,
    RdStudent,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Reference => "reference",
            TrainMode::DldStudent => "dld-student",
            TrainMode::RdStudent => "rd-student",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            TrainMode::Reference => 0,
            TrainMode::DldStudent => 1,
            TrainMode::RdStudent => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TrainMode::Reference),
            1 => Some(TrainMode::DldStudent),
            2 => Some(TrainMode::RdStudent),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = DldError;

    fn from_str(s: &str) -> Result<Self> {
        [TrainMode::Reference, TrainMode::DldStudent, TrainMode::RdStudent]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DldError::Config(format!("unknown mode `{s}`")))
    }
}

/// Where the random-dropping baseline starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RdInit {
    #[default]
    Scratch,
    Reference,
}

impl RdInit {
    pub fn name(self) -> &'static str {
        match self {
            RdInit::Scratch => "scratch",
            RdInit::Reference => "reference",
        }
    }
}

impl FromStr for RdInit {
    type Err = DldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(RdInit::Scratch),
            "reference" => Ok(RdInit::Reference),
            other => Err(DldError::Config(format!("unknown rd init `{other}`; valid: scratch, reference"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Per-step decay after warmup; `None` picks the rate that ends the run at `peak_lr / 10`.
    pub decay_rate: Option<f64>,
    pub p_drop: f64,
    pub weight_decay: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `0` disables.
    pub max_grad_norm: f64,
    /// Multiplier on the KL term. `1` is the unweighted objective.
    pub kld_weight: f64,
    pub rd_init: RdInit,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Reference,
            epochs: 40,
            batch_size: 16,
            peak_lr: 2e-3,
            warmup_steps: 200,
            decay_rate: None,
            p_drop: 0.5,
            weight_decay: 5e-4,
            adam: AdamConfig::default(),
            max_grad_norm: 0.0,
            kld_weight: 1.0,
            rd_init: RdInit::Scratch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DldError::Config(m));
        if !(0.0..=1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1], got {}", self.p_drop));
        }
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be >= 1".into());
        }
        if let Some(g) = self.decay_rate {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("decay_rate must lie in (0, 1], got {g}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) || !(self.kld_weight >= 0.0) {
            return bad("weight_decay, max_grad_norm and kld_weight must be >= 0".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    /// Decay rate actually used for a run of `total_steps`.
    pub fn resolved_decay(&self, total_steps: u64) -> f64 {
        self.decay_rate.unwrap_or_else(|| {
            let decay_steps = total_steps.saturating_sub(self.warmup_steps).max(1);
            0.1f64.powf(1.0 / decay_steps as f64)
        })
    }
}

/// Linear warmup to `peak_lr`, then exponential decay by `decay` per step.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup_steps: u64, decay: f64) -> f64 {
    if step < warmup_steps {
        peak_lr * step as f64 / warmup_steps as f64
    } else {
        peak_lr * decay.powf((step - warmup_steps) as f64)
    }
}

/// One row of the per-epoch CSV log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub l_kld: f64,
    pub l_ctc: f64,
    pub total: f64,
    pub test_ter_full_depth: f64,
}

pub const LOG_HEADER: &str = "step,epoch,lr,l_kld,l_ctc,total,test_ter_full_depth";

impl EpochLog {
    /// Shortest round-trip decimal, so parsed values reproduce the logged bits.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?},{:?}",
            self.step, self.epoch, self.lr, self.l_kld, self.l_ctc, self.total, self.test_ter_full_depth
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = || DldError::format("epoch log", format!("bad line `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: num(2)?,
            l_kld: num(3)?,
            l_ctc: num(4)?,
            total: num(5)?,
            test_ter_full_depth: num(6)?,
        })
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(LOG_HEADER) {
        return Err(DldError::format("epoch log", "missing header"));
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochLog::parse_line).collect()
}

/// What the step hook sees after backward, before the optimizer update.
pub struct StepInfo<'a> {
    pub step: u64,
    pub gates: &'a GateVector,
    pub loss: LossReport,
    /// L2 norm of each block's gradient this step.
    pub block_grad_norms: &'a [f64],
}

/// Callbacks invoked during training.
pub type StepHook<'a> = Box<dyn FnMut(&StepInfo) + 'a>;
pub type EpochHook<'a> = Box<dyn FnMut(&Checkpoint, &EpochLog) -> Result<()> + 'a>;

#[derive(Default)]
pub struct Hooks<'a> {
    pub on_step: Option<StepHook<'a>>,
    /// Called after each epoch with the updated checkpoint and its log row.
    pub on_epoch: Option<EpochHook<'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn epoch_seed(run_seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = run_seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoder shape matching a dataset.
pub fn encoder_config_for(dataset: &Dataset, num_blocks: usize, model_dim: usize, ffn_dim: usize) -> EncoderConfig {
    EncoderConfig {
        num_blocks,
        model_dim,
        ffn_dim,
        vocab_size: dataset.config.model_vocab(),
        input_dim: dataset.config.feature_dim,
        max_len: dataset.config.max_len(),
    }
}

fn check_compatible(config: &EncoderConfig, dataset: &Dataset) -> Result<()> {
    let want_vocab = dataset.config.model_vocab();
    if config.vocab_size != want_vocab || config.input_dim != dataset.config.feature_dim {
        return Err(DldError::contract(format!(
            "model expects vocab {} / input {} but dataset has vocab {} / input {}",
            config.vocab_size, config.input_dim, want_vocab, dataset.config.feature_dim
        )));
    }
    if config.max_len < dataset.config.max_len() {
        return Err(DldError::contract(format!(
            "positional table of {} is shorter than the dataset's {} frames",
            config.max_len,
            dataset.config.max_len()
        )));
    }
    Ok(())
}

/// Full-depth CTC training from a fresh initialization.
pub fn train_reference(dataset: &Dataset, encoder: &EncoderConfig, config: &TrainConfig, hooks: Hooks) -> Result<TrainOutput> {
    if config.mode != TrainMode::Reference {
        return Err(DldError::contract("train_reference needs mode = reference"));
    }
    let params = ModelParams::init(encoder, &mut SeedStream::new(config.seed, Stream::Init))?;
    run(dataset, params, None, config, hooks)
}

/// Gated finetuning from the reference under CTC + KL to the frozen reference.
pub fn train_student_dld(dataset: &Dataset, reference: &Checkpoint, config: &TrainConfig, hooks: Hooks) -> Result<TrainOutput> {
    if config.mode != TrainMode::DldStudent {
        return Err(DldError::contract("train_student_dld needs mode = dld-student"));
    }
    check_compatible(reference.config(), dataset)?;
    let teacher = teacher_cache(&reference.params, &dataset.train)?;
    run(dataset, reference.params.clone(), Some(&teacher), config, hooks)
}

/// Gated CTC-only training, from scratch or from the reference weights.
pub fn train_student_rd(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    reference: Option<&Checkpoint>,
    config: &TrainConfig,
    hooks: Hooks,
) -> Result<TrainOutput> {
    if config.mode != TrainMode::RdStudent {
        return Err(DldError::contract("train_student_rd needs mode = rd-student"));
    }
    let params = match (config.rd_init, reference) {
        (RdInit::Scratch, _) => ModelParams::init(encoder, &mut SeedStream::new(config.seed, Stream::Init))?,
        (RdInit::Reference, Some(r)) => {
            if r.config() != encoder {
                return Err(DldError::contract("reference checkpoint does not match the student encoder config"));
            }
            r.params.clone()
        }
        (RdInit::Reference, None) => {
            return Err(DldError::Config("rd init = reference requires a reference checkpoint".into()))
        }
    };
    run(dataset, params, None, config, hooks)
}

/// Frozen reference distributions for every training sample, at full depth.
///
/// The reference never changes, and every kernel is row-independent, so
/// these match a per-batch reference forward bit for bit.
pub fn teacher_cache(reference: &ModelParams, samples: &[SyntheticSample]) -> Result<Vec<TeacherDist>> {
    let gates = GateVector::all_on(reference.config.num_blocks);
    samples
        .iter()
        .map(|s| {
            let out = encoder_forward(reference, &s.features, SeqLayout::single(s.frames()), &gates)?;
            TeacherDist::from_log_probs(&out.log_probs)
        })
        .collect()
}

fn run(
    dataset: &Dataset,
    mut params: ModelParams,
    teacher: Option<&[TeacherDist]>,
    config: &TrainConfig,
    mut hooks: Hooks,
) -> Result<TrainOutput> {
    config.validate()?;
    check_compatible(&params.config, dataset)?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(DldError::contract("training needs nonempty train and test splits"));
    }
    let n = params.config.num_blocks;
    let mut gate_rng = SeedStream::new(config.seed, Stream::Gates);
    let mut opt = AdamState::new(&params);
    let mut ckpt = Checkpoint::new(config.mode, params.clone(), config.seed);

    let steps_per_epoch = batch_iter(&dataset.train, config.batch_size, epoch_seed(config.seed, 0))?.len() as u64;
    let decay = config.resolved_decay(steps_per_epoch * config.epochs as u64);
    let full = GateVector::all_on(n);

    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let batches = batch_iter(&dataset.train, config.batch_size, epoch_seed(config.seed, epoch as u64))?;
        let (mut sum_kld, mut sum_ctc) = (0.0, 0.0);
        let mut lr = 0.0;
        for batch in &batches {
            step += 1;
            let gates = match config.mode {
                TrainMode::Reference => full.clone(),
                _ => sample_gates(n, config.p_drop, &mut gate_rng)?,
            };
            let (features, targets, layout) = stack_batch(&dataset.train, batch)?;

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(&features);
            let diverged = |e: DldError| match e {
                DldError::NonFinite { op } => DldError::Diverged {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let out = encoder_forward_vars(&mut tape, &bound, x, layout, &gates).map_err(diverged)?;
            let ctc = ctc_loss_mean(&mut tape, out.log_probs, layout, &targets).map_err(diverged)?;
            let (loss, l_kld) = match teacher {
                Some(cache) => {
                    let parts: Vec<&TeacherDist> = batch.indices.iter().map(|&i| &cache[i]).collect();
                    let t = TeacherDist::concat(&parts)?;
                    let kld = kld_loss(&mut tape, &t, out.log_probs)?;
                    let l_kld = tape.scalar(kld);
                    let weighted = if config.kld_weight == 1.0 {
                        kld
                    } else {
                        tape.mul_scalar(kld, config.kld_weight)?
                    };
                    (tape.add(ctc, weighted)?, l_kld)
                }
                None => (ctc, 0.0),
            };
            let report = total_loss(l_kld, tape.scalar(ctc));
            if !tape.scalar(loss).is_finite() {
                return Err(DldError::Diverged {
                    step,
                    detail: format!("loss is {}", tape.scalar(loss)),
                });
            }
            tape.backward(loss)?;

            let vars = bound.vars();
            let mut grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
            clip_grads(&mut grads, config.max_grad_norm);
            if let Some(hook) = hooks.on_step.as_mut() {
                let norms = block_grad_norms(&bound.blocks.iter().map(|b| b.vars()).collect::<Vec<_>>(), &tape);
                hook(&StepInfo {
                    step,
                    gates: &gates,
                    loss: report,
                    block_grad_norms: &norms,
                });
            }
            lr = lr_schedule(step, config.peak_lr, config.warmup_steps, decay);
            adam_step(&mut params, &grads, &mut opt, lr, config.weight_decay, &config.adam)?;
            sum_kld += report.l_kld;
            sum_ctc += report.l_ctc;
        }
        let count = batches.len() as f64;
        let epoch_loss = total_loss(sum_kld / count, sum_ctc / count);
        let row = EpochLog {
            step,
            epoch: epoch as u32 + 1,
            lr,
            l_kld: epoch_loss.l_kld,
            l_ctc: epoch_loss.l_ctc,
            total: epoch_loss.total,
            test_ter_full_depth: token_error_rate(&params, &dataset.test, &full)?,
        };
        ckpt = Checkpoint {
            mode: config.mode,
            step,
            epoch: epoch as u32 + 1,
            blank: crate::losses::BLANK as u32,
            seed: config.seed,
            gate_word_pos: gate_rng.word_pos(),
            params: params.clone(),
            optimizer: Some(opt.clone()),
        };
        if let Some(hook) = hooks.on_epoch.as_mut() {
            hook(&ckpt, &row)?;
        }
        log.push(row);
    }
    Ok(TrainOutput { checkpoint: ckpt, log })
}

fn block_grad_norms(blocks: &[[Var; 12]], tape: &Tape) -> Vec<f64> {
    blocks
        .iter()
        .map(|vars| {
            vars.iter()
                .filter_map(|&v| tape.grad(v))
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn clip_grads(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
}
