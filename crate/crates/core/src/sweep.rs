//! Grid sweeps over `(N, L, s, b)` producing one CSV row per cell.
//!
//! Cell index order is `s`, then `b`, then `L`, then `N` (last varies
//! fastest). The `s` axis is the total context reached by the run:
//! `prompt_len = s + 1 - gen_len`.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{expected_transfers, generate, top1_agreement, EngineConfig, Prompt};
use crate::error::{KcError, Result};
use crate::fmt_sig9;
use crate::kvcache::{memory_footprint, CacheMode};
use crate::model::{ModelConfig, ModelWeights};
use crate::perf::{project_run, HardwareProfile, ProjectionInput};

pub const MAX_CELLS: usize = 10_000;

pub const COLUMNS: &[&str] = &[
    "cell",
    "n_top",
    "resident_layers",
    "seq_len",
    "batch",
    "prompt_len",
    "gen_len",
    "fast_bytes",
    "slow_bytes",
    "weight_bytes",
    "d2h_bytes",
    "h2d_bytes",
    "baseline_tokens_per_s",
    "kcache_tokens_per_s",
    "throughput_ratio",
    "probe_dropped_mass",
    "run_dropped_mass",
    "top1_agreement",
];

/// A TopN axis entry: absolute, or a fraction `s/k` of the cell's `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopNValue {
    Absolute(usize),
    /// `s / k`, floored, at least 1.
    Fraction(usize),
}

impl TopNValue {
    pub fn resolve(self, seq_len: usize) -> usize {
        match self {
            Self::Absolute(n) => n,
            Self::Fraction(k) => (seq_len / k).max(1),
        }
    }
}

impl FromStr for TopNValue {
    type Err = KcError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || KcError::arg(format!("bad TopN value '{t}' (expected an integer, 's' or 's/K')"));
        if t == "s" {
            return Ok(Self::Fraction(1));
        }
        if let Some(k) = t.strip_prefix("s/") {
            let k: usize = k.parse().map_err(|_| bad())?;
            return if k == 0 { Err(bad()) } else { Ok(Self::Fraction(k)) };
        }
        match t.parse() {
            Ok(0) | Err(_) => Err(bad()),
            Ok(n) => Ok(Self::Absolute(n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub top_n: Vec<TopNValue>,
    pub resident_layers: Vec<usize>,
    pub seq_len: Vec<usize>,
    pub batch: Vec<usize>,
    pub gen_len: usize,
    pub bytes_per_element: usize,
    pub seed: u64,
    pub renormalize: bool,
    pub overlap_h2d: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub index: usize,
    pub top_n: usize,
    pub resident_layers: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub probe_dropped_mass: f64,
    pub run_dropped_mass: f64,
    pub top1_agreement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    pub gen_len: usize,
    pub fast_bytes: u64,
    pub slow_bytes: u64,
    pub weight_bytes: u64,
    pub d2h_bytes: u64,
    pub h2d_bytes: u64,
    pub baseline_tokens_per_s: f64,
    pub kcache_tokens_per_s: f64,
    pub throughput_ratio: f64,
    pub measured: Option<Measured>,
}

impl SweepSpec {
    /// Expands the grid, validating every cell against `model`.
    pub fn cells(&self, model: &ModelConfig) -> Result<Vec<Cell>> {
        for (name, len) in [
            ("topn", self.top_n.len()),
            ("resident-layers", self.resident_layers.len()),
            ("seq-len", self.seq_len.len()),
            ("batch", self.batch.len()),
        ] {
            if len == 0 {
                return Err(KcError::arg(format!("sweep axis '{name}' is empty")));
            }
        }
        let count = [self.top_n.len(), self.resident_layers.len(), self.seq_len.len(), self.batch.len()]
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .filter(|&c| c <= MAX_CELLS)
            .ok_or_else(|| KcError::arg(format!("sweep exceeds {MAX_CELLS} cells")))?;
        if self.gen_len == 0 {
            return Err(KcError::arg("sweep gen_len must be >= 1"));
        }
        let mut cells = Vec::with_capacity(count);
        for &s in &self.seq_len {
            if s < self.gen_len || s > model.max_seq {
                return Err(KcError::arg(format!("seq_len {s} must lie in [{}, {}]", self.gen_len, model.max_seq)));
            }
            for &b in &self.batch {
                if b == 0 {
                    return Err(KcError::arg("batch must be >= 1"));
                }
                for &l in &self.resident_layers {
                    if l > model.n_layers {
                        return Err(KcError::arg(format!("resident layers {l} exceeds {}", model.n_layers)));
                    }
                    for &n in &self.top_n {
                        cells.push(Cell {
                            index: cells.len(),
                            top_n: n.resolve(s),
                            resident_layers: l,
                            seq_len: s,
                            batch: b,
                            prompt_len: s + 1 - self.gen_len,
                        });
                    }
                }
            }
        }
        Ok(cells)
    }

    fn engine_config(&self, cell: &Cell) -> EngineConfig {
        let mut cfg = EngineConfig::kcache(self.seed, cell.prompt_len, self.gen_len, cell.top_n, cell.resident_layers)
            .with_batch(cell.batch);
        cfg.renormalize = self.renormalize;
        cfg.bytes_per_element = self.bytes_per_element;
        cfg
    }

    fn run_cell(&self, model: &ModelConfig, weights: Option<&ModelWeights>, profile: &HardwareProfile, cell: &Cell) -> Result<SweepRow> {
        let kc = self.engine_config(cell);
        let fp = memory_footprint(
            model,
            cell.batch,
            cell.seq_len,
            CacheMode::KCache { resident_layers: cell.resident_layers },
            self.bytes_per_element,
        )?;
        let projection = project_run(
            model,
            &ProjectionInput {
                batch: cell.batch as u64,
                seq_len: cell.seq_len as u64,
                top_n: cell.top_n as u64,
                resident_layers: cell.resident_layers as u64,
                bytes: self.bytes_per_element as u64,
                overlap_h2d: self.overlap_h2d,
            },
            profile,
        )?;
        let mut transfers = expected_transfers(model, &kc, kc.decode_steps());
        let measured = match weights {
            None => None,
            Some(w) => {
                let prompt = Prompt::random(self.seed, cell.batch, cell.prompt_len, model.vocab);
                let mut base_cfg = EngineConfig { probe_top_n: vec![cell.top_n], ..kc.clone() };
                base_cfg.mode = crate::engine::Mode::Baseline;
                let baseline = generate(&base_cfg, w, &prompt)?;
                let run = generate(&kc, w, &prompt)?;
                transfers = run.ledger;
                Some(Measured {
                    probe_dropped_mass: baseline.probe_means().first().map_or(0.0, |p| p.mean_dropped_mass),
                    run_dropped_mass: run.mean_dropped_mass().unwrap_or(0.0),
                    top1_agreement: top1_agreement(w, &baseline, &kc)?.fraction(),
                })
            }
        };
        Ok(SweepRow {
            cell: *cell,
            gen_len: self.gen_len,
            fast_bytes: fp.fast_bytes,
            slow_bytes: fp.slow_bytes,
            weight_bytes: fp.weight_bytes,
            d2h_bytes: transfers.d2h_bytes,
            h2d_bytes: transfers.h2d_bytes,
            baseline_tokens_per_s: projection.baseline_tokens_per_s,
            kcache_tokens_per_s: projection.kcache_tokens_per_s,
            throughput_ratio: projection.throughput_ratio,
            measured,
        })
    }
}

/// Runs every cell. With `weights`, each cell also runs the engine in both
/// modes and reports measured columns; without, transfer columns come from
/// the closed form and measured columns are left empty.
pub fn run_sweep(
    spec: &SweepSpec,
    model: &ModelConfig,
    weights: Option<&ModelWeights>,
    profile: &HardwareProfile,
    threads: Option<usize>,
) -> Result<Vec<SweepRow>> {
    let cells = spec.cells(model)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| KcError::State(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|c| spec.run_cell(model, weights, profile, c)).collect())
}

/// `KCACHE_THREADS` as a positive integer, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("KCACHE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(KcError::arg(format!("KCACHE_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let c = &r.cell;
        let (probe, run, agree) = match &r.measured {
            Some(m) => (fmt_sig9(m.probe_dropped_mass), fmt_sig9(m.run_dropped_mass), fmt_sig9(m.top1_agreement)),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{probe},{run},{agree}",
            c.index,
            c.top_n,
            c.resident_layers,
            c.seq_len,
            c.batch,
            c.prompt_len,
            r.gen_len,
            r.fast_bytes,
            r.slow_bytes,
            r.weight_bytes,
            r.d2h_bytes,
            r.h2d_bytes,
            fmt_sig9(r.baseline_tokens_per_s),
            fmt_sig9(r.kcache_tokens_per_s),
            fmt_sig9(r.throughput_ratio),
        );
    }
    out
}
