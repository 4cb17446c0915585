//! Depth-sweep evaluation: token error rate, executed parameters, speedup.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::write_file;
use crate::data::SyntheticSample;
use crate::encoder::{count_executed_params, encoder_forward, select_gates, GatePolicy, GateVector, ModelParams, SeqLayout};
use crate::error::{DldError, Result};
use crate::losses::greedy_ctc_decode;
use crate::tensor::kernels::{map_indexed, Exec};
use crate::tensor::Tensor;

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// Largest stacked batch used at evaluation time.
const EVAL_CHUNK: usize = 64;

/// Greedy decodes of every sample, in input order.
pub fn decode_all(params: &ModelParams, samples: &[SyntheticSample], gates: &GateVector) -> Result<Vec<Vec<u32>>> {
    decode_all_with(Exec::default(), params, samples, gates)
}

/// [`decode_all`] with an explicit strategy for spreading chunks over threads.
pub fn decode_all_with(
    exec: Exec,
    params: &ModelParams,
    samples: &[SyntheticSample],
    gates: &GateVector,
) -> Result<Vec<Vec<u32>>> {
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        by_len.entry(s.frames()).or_default().push(i);
    }
    let chunks: Vec<(usize, Vec<usize>)> = by_len
        .into_iter()
        .flat_map(|(t, idx)| idx.chunks(EVAL_CHUNK).map(|c| (t, c.to_vec())).collect::<Vec<_>>())
        .collect();
    let vocab = params.config.vocab_size;
    let decoded = map_indexed(exec, chunks.len(), |c| -> Result<Vec<(usize, Vec<u32>)>> {
        let (t, idx) = &chunks[c];
        let dim = samples[idx[0]].features.cols();
        let mut data = Vec::with_capacity(idx.len() * t * dim);
        for &i in idx {
            data.extend_from_slice(samples[i].features.data());
        }
        let layout = SeqLayout {
            batch: idx.len(),
            seq_len: *t,
        };
        let x = Tensor::from_vec(vec![layout.frames(), dim], data)?;
        let out = encoder_forward(params, &x, layout, gates)?;
        let per = t * vocab;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(b, &i)| (i, greedy_ctc_decode(&out.log_probs.data()[b * per..(b + 1) * per], vocab)))
            .collect())
    });
    let mut result = vec![Vec::new(); samples.len()];
    for chunk in decoded {
        for (i, d) in chunk? {
            result[i] = d;
        }
    }
    Ok(result)
}

/// Total edit distance over total target length. Not clipped: insertions can push it above 1.
pub fn token_error_rate(params: &ModelParams, samples: &[SyntheticSample], gates: &GateVector) -> Result<f64> {
    if samples.is_empty() {
        return Err(DldError::contract("token_error_rate needs a nonempty dataset"));
    }
    let decoded = decode_all(params, samples, gates)?;
    Ok(ter_from_decodes(samples, &decoded))
}

pub fn ter_from_decodes(samples: &[SyntheticSample], decoded: &[Vec<u32>]) -> f64 {
    let mut errors = 0usize;
    let mut total = 0usize;
    for (s, d) in samples.iter().zip(decoded) {
        errors += edit_distance(d, s.target.tokens());
        total += s.target.len();
    }
    errors as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_ds: usize,
    /// Gate policy name, or `reference` for the reference row.
    pub policy: String,
    pub ter: f64,
    pub params: u64,
    pub speedup: f64,
}

pub const REFERENCE_POLICY: &str = "reference";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepReport {
    /// Sorted by `n_ds` descending.
    pub rows: Vec<SweepRow>,
    pub reference: Option<SweepRow>,
}

/// Evaluates `params` at each depth, plus an optional full-depth reference row.
pub fn depth_sweep(
    params: &ModelParams,
    samples: &[SyntheticSample],
    depths: &[usize],
    policy: GatePolicy,
    reference: Option<&ModelParams>,
) -> Result<SweepReport> {
    let n = params.config.num_blocks;
    let mut depths = depths.to_vec();
    depths.sort_unstable_by(|a, b| b.cmp(a));
    depths.dedup();
    if let Some(&bad) = depths.iter().find(|&&d| d == 0 || d > n) {
        return Err(DldError::Config(format!("depth {bad} outside [1, {n}]")));
    }
    let full = count_executed_params(&params.config, n)?;
    let mut rows = Vec::with_capacity(depths.len());
    for d in depths {
        let gates = select_gates(d, n, policy)?;
        let executed = count_executed_params(&params.config, d)?;
        rows.push(SweepRow {
            n_ds: d,
            policy: policy.name().to_string(),
            ter: token_error_rate(params, samples, &gates)?,
            params: executed,
            speedup: full as f64 / executed as f64,
        });
    }
    let reference = match reference {
        Some(r) => Some(reference_row(r, samples)?),
        None => None,
    };
    Ok(SweepReport { rows, reference })
}

fn reference_row(params: &ModelParams, samples: &[SyntheticSample]) -> Result<SweepRow> {
    let n = params.config.num_blocks;
    Ok(SweepRow {
        n_ds: n,
        policy: REFERENCE_POLICY.to_string(),
        ter: token_error_rate(params, samples, &GateVector::all_on(n))?,
        params: count_executed_params(&params.config, n)?,
        speedup: 1.0,
    })
}

pub const CSV_HEADER: &str = "n_ds,policy,ter,params,speedup";

impl SweepReport {
    pub fn all_rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().chain(self.reference.iter())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.all_rows() {
            let _ = writeln!(out, "{},{},{:.6},{},{:.6}", r.n_ds, r.policy, r.ter, r.params, r.speedup);
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| DldError::format("sweep csv", format!("line {line}: {what}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(bad(1, "missing header"));
        }
        let mut report = SweepReport::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 2, "expected 5 fields"));
            }
            let row = SweepRow {
                n_ds: f[0].parse().map_err(|_| bad(i + 2, "n_ds"))?,
                policy: f[1].to_string(),
                ter: f[2].parse().map_err(|_| bad(i + 2, "ter"))?,
                params: f[3].parse().map_err(|_| bad(i + 2, "params"))?,
                speedup: f[4].parse().map_err(|_| bad(i + 2, "speedup"))?,
            };
            if row.policy == REFERENCE_POLICY {
                report.reference = Some(row);
            } else {
                report.rows.push(row);
            }
        }
        Ok(report)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| n_DS | TER (%) | Params | Speed-up |\n|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(out, "| {} | {:.2} | {} | {:.2}x |", r.n_ds, 100.0 * r.ter, r.params, r.speedup);
        }
        if let Some(r) = &self.reference {
            let _ = writeln!(out, "| ref | {:.2} | {} | {:.2}x |", 100.0 * r.ter, r.params, r.speedup);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = DldError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(DldError::Config(format!("unknown format `{other}`; valid: csv, md"))),
        }
    }
}

pub fn emit_report(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv(),
        ReportFormat::Markdown => report.to_markdown(),
    };
    write_file(path, text.as_bytes())
}

/// Side-by-side TER table, one column per run, best value per row in bold.
pub fn compare_markdown(runs: &[(String, SweepReport)]) -> String {
    let mut depths: Vec<usize> = runs.iter().flat_map(|(_, r)| r.rows.iter().map(|x| x.n_ds)).collect();
    depths.sort_unstable_by(|a, b| b.cmp(a));
    depths.dedup();

    let mut out = String::from("| n_DS |");
    for (name, _) in runs {
        let _ = write!(out, " {name} |");
    }
    out.push_str(" Params |\n|---:|");
    for _ in runs {
        out.push_str("---:|");
    }
    out.push_str("---:|\n");

    let mut line = |label: String, cells: Vec<Option<&SweepRow>>| {
        let best = cells.iter().flatten().map(|r| r.ter).fold(f64::INFINITY, f64::min);
        let _ = write!(out, "| {label} |");
        for c in &cells {
            match c {
                Some(r) if r.ter == best => {
                    let _ = write!(out, " **{:.2}** |", 100.0 * r.ter);
                }
                Some(r) => {
                    let _ = write!(out, " {:.2} |", 100.0 * r.ter);
                }
                None => out.push_str(" - |"),
            }
        }
        let params = cells.iter().flatten().next().map(|r| r.params.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, " {params} |");
    };
    for d in depths {
        let cells = runs.iter().map(|(_, r)| r.rows.iter().find(|x| x.n_ds == d)).collect();
        line(d.to_string(), cells);
    }
    if runs.iter().any(|(_, r)| r.reference.is_some()) {
        line("ref".into(), runs.iter().map(|(_, r)| r.reference.as_ref()).collect());
    }
    out
}

/// TER per (depth, epoch); `None` marks a missing checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSweep {
    pub epochs: Vec<u32>,
    pub depths: Vec<usize>,
    /// `cells[depth_index][epoch_index]`
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn epoch_sweep(
    checkpoints: &[(u32, Option<&ModelParams>)],
    samples: &[SyntheticSample],
    depths: &[usize],
    policy: GatePolicy,
) -> Result<EpochSweep> {
    let mut depths = depths.to_vec();
    depths.sort_unstable_by(|a, b| b.cmp(a));
    depths.dedup();
    let mut cells = vec![vec![None; checkpoints.len()]; depths.len()];
    for (e, (_, params)) in checkpoints.iter().enumerate() {
        let Some(params) = params else { continue };
        let report = depth_sweep(params, samples, &depths, policy, None)?;
        for (d, row) in report.rows.iter().enumerate() {
            cells[d][e] = Some(row.ter);
        }
    }
    Ok(EpochSweep {
        epochs: checkpoints.iter().map(|(e, _)| *e).collect(),
        depths,
        cells,
    })
}

impl EpochSweep {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| n_DS |");
        for e in &self.epochs {
            let _ = write!(out, " epoch {e} |");
        }
        out.push_str("\n|---:|");
        for _ in &self.epochs {
            out.push_str("---:|");
        }
        out.push('\n');
        for (d, row) in self.depths.iter().zip(&self.cells) {
            let _ = write!(out, "| {d} |");
            for c in row {
                match c {
                    Some(t) => {
                        let _ = write!(out, " {:.2} |", 100.0 * t);
                    }
                    None => out.push_str(" missing |"),
                }
            }
            out.push('\n');
        }
        out
    }
}
