//! The `dld` command line.
//!
//! Exit codes: 0 success, 2 config or usage, 3 I/O or malformed file,
//! 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, SEED_ENV};
use crate::data::{generate_dataset, Dataset};
use crate::encoder::ModelParams;
use crate::error::{DldError, Result};
use crate::eval::{compare_markdown, depth_sweep, emit_report, epoch_sweep, ReportFormat, SweepReport};
use crate::trainer::{
    log_csv, train_reference, train_student_dld, train_student_rd, Checkpoint, EpochLog, Hooks, RdInit, TrainMode,
};

#[derive(Parser, Debug)]
#[command(name = "dld", about = "Distillation-guided layer dropping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full-depth reference.
    TrainRef(TrainArgs),
    /// Finetune a gated student from the reference with CTC + KL.
    TrainDld(TrainArgs),
    /// Train a gated student with CTC only.
    TrainRd(TrainArgs),
    /// Evaluate a checkpoint at several depths.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint for the reference row; defaults to `--ckpt` at full depth.
        #[arg(long)]
        ref_ckpt: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side markdown of several runs' `sweep.csv`.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// TER per depth for every snapshot of a training run.
    EpochSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ref_ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Inline overrides for config keys. Values are validated by the config parser.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<String>,
    #[arg(long)]
    feature_dim: Option<String>,
    #[arg(long)]
    min_frames: Option<String>,
    #[arg(long)]
    max_frames: Option<String>,
    #[arg(long)]
    min_tokens: Option<String>,
    #[arg(long)]
    max_tokens: Option<String>,
    #[arg(long)]
    noise_sigma: Option<String>,
    #[arg(long)]
    num_train: Option<String>,
    #[arg(long)]
    num_test: Option<String>,
    #[arg(long)]
    num_blocks: Option<String>,
    #[arg(long)]
    model_dim: Option<String>,
    #[arg(long)]
    ffn_dim: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    peak_lr: Option<String>,
    #[arg(long)]
    warmup_steps: Option<String>,
    #[arg(long)]
    decay_rate: Option<String>,
    #[arg(long)]
    p_drop: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    max_grad_norm: Option<String>,
    #[arg(long)]
    kld_weight: Option<String>,
    #[arg(long)]
    rd_init: Option<String>,
    #[arg(long)]
    ckpt_every: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    policy: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let fields = [
            ("vocab_size", &self.vocab_size),
            ("feature_dim", &self.feature_dim),
            ("min_frames", &self.min_frames),
            ("max_frames", &self.max_frames),
            ("min_tokens", &self.min_tokens),
            ("max_tokens", &self.max_tokens),
            ("noise_sigma", &self.noise_sigma),
            ("num_train", &self.num_train),
            ("num_test", &self.num_test),
            ("num_blocks", &self.num_blocks),
            ("model_dim", &self.model_dim),
            ("ffn_dim", &self.ffn_dim),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("peak_lr", &self.peak_lr),
            ("warmup_steps", &self.warmup_steps),
            ("decay_rate", &self.decay_rate),
            ("p_drop", &self.p_drop),
            ("weight_decay", &self.weight_decay),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("eps", &self.eps),
            ("max_grad_norm", &self.max_grad_norm),
            ("kld_weight", &self.kld_weight),
            ("rd_init", &self.rd_init),
            ("ckpt_every", &self.ckpt_every),
            ("seed", &self.seed),
            ("depths", &self.depths),
            ("policy", &self.policy),
        ];
        fields.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect()
    }

    /// Resolves, records `out`, validates and prints the config.
    fn resolve(&self, out: &Path) -> Result<ExperimentConfig> {
        let env = std::env::var(SEED_ENV).ok();
        let mut c = ExperimentConfig::resolve(self.config.as_deref(), env.as_deref(), &self.overrides())?;
        c.out = Some(out.to_path_buf());
        c.validate()?;
        print!("{}", c.render());
        Ok(c)
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::TrainRef(a) => train(TrainMode::Reference, &a),
        Command::TrainDld(a) => train(TrainMode::DldStudent, &a),
        Command::TrainRd(a) => train(TrainMode::RdStudent, &a),
        Command::Sweep {
            cfg,
            ckpt,
            data,
            ref_ckpt,
            format,
            out,
        } => sweep(&cfg, &ckpt, &data, ref_ckpt.as_deref(), &format, &out),
        Command::Report { runs, out } => report(&runs, &out),
        Command::EpochSweep { cfg, run_dir, data, out } => run_epoch_sweep(&cfg, &run_dir, &data, &out),
    }
}

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let c = args.resolve(out)?;
    let ds = generate_dataset(&c.data)?;
    ds.save(out)?;
    println!(
        "wrote {}: train={} test={} mean_T={:.3} vocab={}",
        out.display(),
        ds.train.len(),
        ds.test.len(),
        ds.mean_frames(),
        ds.config.vocab_size
    );
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| DldError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DldError::io(path, e))
}

pub fn snapshot_name(epoch: u32) -> String {
    format!("epoch_{epoch:04}.dldc")
}

fn train(mode: TrainMode, args: &TrainArgs) -> Result<()> {
    let mut c = args.cfg.resolve(&args.out)?;
    c.train.mode = mode;
    let needs_ref = match mode {
        TrainMode::Reference => false,
        TrainMode::DldStudent => true,
        TrainMode::RdStudent => c.train.rd_init == RdInit::Reference,
    };
    if needs_ref && args.ref_ckpt.is_none() {
        return Err(DldError::Config(format!("{} requires --ref-ckpt", mode.name())));
    }
    let dataset = Dataset::load(&args.data)?;
    let reference = match (&args.ref_ckpt, needs_ref) {
        (Some(p), true) => Some(Checkpoint::load(p)?),
        _ => None,
    };
    let encoder = match &reference {
        Some(r) => *r.config(),
        None => crate::trainer::encoder_config_for(&dataset, c.num_blocks, c.model_dim, c.ffn_dim),
    };

    create_dir(&args.out)?;
    write_text(&args.out.join("config.txt"), &c.render())?;
    let every = c.resolved_ckpt_every() as u32;
    let mut rows: Vec<EpochLog> = Vec::new();
    let log_path = args.out.join("log.csv");
    write_text(&log_path, &log_csv(&rows))?;
    let out_dir = args.out.clone();
    let hooks = Hooks {
        on_step: None,
        on_epoch: Some(Box::new(|ck: &Checkpoint, row: &EpochLog| {
            rows.push(*row);
            write_text(&log_path, &log_csv(&rows))?;
            println!(
                "epoch {} step {} lr {:.3e} l_kld {:.4} l_ctc {:.4} ter {:.4}",
                row.epoch, row.step, row.lr, row.l_kld, row.l_ctc, row.test_ter_full_depth
            );
            if row.epoch.is_multiple_of(every) {
                ck.save(&out_dir.join(snapshot_name(row.epoch)))?;
            }
            Ok(())
        })),
    };
    let output = match mode {
        TrainMode::Reference => train_reference(&dataset, &encoder, &c.train, hooks)?,
        TrainMode::DldStudent => {
            let r = reference.as_ref().expect("checked above");
            train_student_dld(&dataset, r, &c.train, hooks)?
        }
        TrainMode::RdStudent => train_student_rd(&dataset, &encoder, reference.as_ref(), &c.train, hooks)?,
    };
    let final_path = args.out.join("final.dldc");
    output.checkpoint.save(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn sweep(args: &ConfigArgs, ckpt: &Path, data: &Path, ref_ckpt: Option<&Path>, format: &str, out: &Path) -> Result<()> {
    let c = args.resolve(out)?;
    let format: ReportFormat = format.parse()?;
    let model = Checkpoint::load(ckpt)?;
    let dataset = Dataset::load(data)?;
    let reference = match ref_ckpt {
        Some(p) => Checkpoint::load(p)?.params,
        None => model.params.clone(),
    };
    let depths = c.resolved_depths(model.config().num_blocks);
    let report = depth_sweep(&model.params, &dataset.test, &depths, c.policy, Some(&reference))?;
    emit_report(&report, format, out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    println!("runs = {}", runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>().join(","));
    println!("out = {}", out.display());
    let mut loaded = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join("sweep.csv");
        let text = fs::read_to_string(&path).map_err(|e| DldError::io(&path, e))?;
        loaded.push((run_label(dir), SweepReport::parse_csv(&text)?));
    }
    let md = compare_markdown(&loaded);
    write_text(out, &md)?;
    print!("{md}");
    Ok(())
}

fn run_epoch_sweep(args: &ConfigArgs, run_dir: &Path, data: &Path, out: &Path) -> Result<()> {
    let c = args.resolve(out)?;
    let run_cfg = ExperimentConfig::load(&run_dir.join("config.txt"))?;
    let every = run_cfg.resolved_ckpt_every() as u32;
    let epochs: Vec<u32> = (1..=run_cfg.train.epochs as u32).filter(|e| e % every == 0).collect();
    let dataset = Dataset::load(data)?;
    let mut loaded: Vec<(u32, Option<ModelParams>)> = Vec::with_capacity(epochs.len());
    for e in epochs {
        let path = run_dir.join(snapshot_name(e));
        let params = if path.exists() { Some(Checkpoint::load(&path)?.params) } else { None };
        loaded.push((e, params));
    }
    let n = loaded
        .iter()
        .find_map(|(_, p)| p.as_ref().map(|p| p.config.num_blocks))
        .unwrap_or(run_cfg.num_blocks);
    let refs: Vec<(u32, Option<&ModelParams>)> = loaded.iter().map(|(e, p)| (*e, p.as_ref())).collect();
    let table = epoch_sweep(&refs, &dataset.test, &c.resolved_depths(n), c.policy)?;
    let md = table.to_markdown();
    write_text(out, &md)?;
    print!("{md}");
    Ok(())
}
