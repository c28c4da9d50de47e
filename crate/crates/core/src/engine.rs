//! Prefill plus greedy autoregressive decode in plain or KCache mode.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    decode_attention_full, decode_attention_topn, decode_probabilities, dropped_mass, prefill_attention, Fault,
    TopNOptions, TopNSelection,
};
use crate::error::{KcError, Result};
use crate::kvcache::{memory_footprint, CacheMode, CacheShape, Direction, Phase, TierPlacement, TieredKVCache};
use crate::model::{block_forward, ModelConfig, ModelWeights};
use crate::perf::{project_run, HardwareProfile, Projection, ProjectionInput};
use crate::rng::SeededRng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    KCache,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: Mode,
    /// `N` for TopN selection (KCache mode).
    pub top_n: usize,
    /// `L`: layers whose V stays in the fast tier (KCache mode).
    pub resident_layers: usize,
    pub renormalize: bool,
    /// Also apply TopN on resident layers instead of full attention.
    #[serde(default)]
    pub topn_on_resident: bool,
    /// Seed for randomly drawn prompts.
    pub seed: u64,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub bytes_per_element: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_capacity: Option<u64>,
    /// TopN sizes whose dropped mass is measured on the decode attention
    /// rows of layers `>= resident_layers` without influencing the run.
    /// Also honoured in baseline mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe_top_n: Vec<usize>,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl EngineConfig {
    pub fn baseline(seed: u64, prompt_len: usize, gen_len: usize) -> Self {
        Self {
            mode: Mode::Baseline,
            top_n: 0,
            resident_layers: 0,
            renormalize: false,
            topn_on_resident: false,
            seed,
            prompt_len,
            gen_len,
            batch: 1,
            bytes_per_element: 2,
            fast_capacity: None,
            probe_top_n: Vec::new(),
            fault: None,
        }
    }

    pub fn kcache(seed: u64, prompt_len: usize, gen_len: usize, top_n: usize, resident_layers: usize) -> Self {
        Self { mode: Mode::KCache, top_n, resident_layers, ..Self::baseline(seed, prompt_len, gen_len) }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    /// Final cache length: the last generated token is never fed back.
    pub fn max_context(&self) -> usize {
        self.prompt_len + self.gen_len.saturating_sub(1)
    }

    pub fn decode_steps(&self) -> usize {
        self.gen_len.saturating_sub(1)
    }

    /// Layers whose V rows end up in the fast tier.
    pub fn effective_resident(&self, model: &ModelConfig) -> usize {
        match self.mode {
            Mode::Baseline => model.n_layers,
            Mode::KCache => self.resident_layers,
        }
    }

    pub fn uses_topn(&self, layer: usize) -> bool {
        self.mode == Mode::KCache && (layer >= self.resident_layers || self.topn_on_resident)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 {
            return Err(KcError::arg("batch must be >= 1"));
        }
        if self.prompt_len == 0 {
            return Err(KcError::arg("prompt must hold at least one token"));
        }
        if self.bytes_per_element == 0 {
            return Err(KcError::arg("bytes per element must be >= 1"));
        }
        if self.mode == Mode::KCache {
            if self.top_n == 0 {
                return Err(KcError::arg("kcache mode requires N >= 1"));
            }
            if self.resident_layers > model.n_layers {
                return Err(KcError::arg(format!(
                    "resident layers {} exceeds layer count {}",
                    self.resident_layers, model.n_layers
                )));
            }
        }
        if self.probe_top_n.contains(&0) {
            return Err(KcError::arg("probe sizes must be >= 1"));
        }
        if self.max_context() > model.max_seq {
            return Err(KcError::arg(format!(
                "prompt {} + generation {} exceeds max_seq {}",
                self.prompt_len, self.gen_len, model.max_seq
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Seeded,
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub source: PromptSource,
    pub rows: Vec<Vec<u32>>,
}

impl Prompt {
    /// Uniform token ids, row by row.
    pub fn random(seed: u64, batch: usize, len: usize, vocab: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        let rows = (0..batch)
            .map(|_| (0..len).map(|_| rng.below(vocab as u64) as u32).collect())
            .collect();
        Self { source: PromptSource::Seeded, rows }
    }

    /// One line of space-separated ids per batch row; blank lines skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|e| KcError::arg(format!("prompt line {}: '{t}': {e}", n + 1))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let prompt = Self { source: PromptSource::File, rows };
        prompt.validate(None)?;
        Ok(prompt)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(u32::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn batch(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, vocab: Option<usize>) -> Result<()> {
        if self.rows.is_empty() || self.rows[0].is_empty() {
            return Err(KcError::arg("empty prompt"));
        }
        let len = self.rows[0].len();
        if self.rows.iter().any(|r| r.len() != len) {
            return Err(KcError::arg("all prompt rows must have the same length"));
        }
        if let Some(v) = vocab {
            if let Some(bad) = self.rows.iter().flatten().find(|&&t| t as usize >= v) {
                return Err(KcError::arg(format!("token id {bad} out of range (vocab {v})")));
            }
        }
        Ok(())
    }
}

/// Argmax per row, lowest index on ties.
pub fn greedy(logits: &Matrix) -> Vec<u32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTransfer {
    pub layer: usize,
    pub d2h_bytes: u64,
    pub h2d_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub mean_dropped_mass: f64,
    pub max_dropped_mass: f64,
    pub selected_rows: u64,
    /// Mean of `index / (len - 1)` over selected rows (0 = oldest).
    pub mean_relative_position: f64,
    /// Share of selected rows in the most recent quarter of the context.
    pub recent_quarter_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeStat {
    pub top_n: usize,
    pub mean_dropped_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0 is the prefill.
    pub step: usize,
    pub phase: Phase,
    /// Cache length after the step.
    pub seq_len: usize,
    pub d2h_bytes: u64,
    pub h2d_bytes: u64,
    pub layers: Vec<LayerTransfer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeStat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Matrix,
    pub tokens: Vec<u32>,
    pub record: StepRecord,
}

#[derive(Default)]
struct SelectionAccumulator {
    heads: u64,
    dropped_sum: f64,
    dropped_max: f64,
    rows: u64,
    position_sum: f64,
    recent: u64,
}

impl SelectionAccumulator {
    fn add(&mut self, selection: &TopNSelection, len: usize) {
        let recent_start = len - len.div_ceil(4);
        for sel in &selection.heads {
            self.heads += 1;
            self.dropped_sum += sel.dropped_mass as f64;
            self.dropped_max = self.dropped_max.max(sel.dropped_mass as f64);
            for &i in &sel.indices {
                self.rows += 1;
                self.position_sum += if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 };
                self.recent += u64::from(i >= recent_start);
            }
        }
    }

    fn finish(&self) -> Option<SelectionStats> {
        (self.heads > 0).then(|| SelectionStats {
            mean_dropped_mass: self.dropped_sum / self.heads as f64,
            max_dropped_mass: self.dropped_max,
            selected_rows: self.rows,
            mean_relative_position: self.position_sum / self.rows as f64,
            recent_quarter_fraction: self.recent as f64 / self.rows as f64,
        })
    }
}

/// One generation session: weights plus an exclusively owned cache.
pub struct Session<'w> {
    weights: &'w ModelWeights,
    config: EngineConfig,
    cache: TieredKVCache,
    steps: Vec<StepRecord>,
    ledger_mark: usize,
}

impl<'w> Session<'w> {
    pub fn new(weights: &'w ModelWeights, config: EngineConfig) -> Result<Self> {
        let model = &weights.config;
        config.validate(model)?;
        if let Some(limit) = config.fast_capacity {
            let mode = match config.mode {
                Mode::Baseline => CacheMode::Baseline,
                Mode::KCache => CacheMode::KCache { resident_layers: config.resident_layers },
            };
            let fp = memory_footprint(model, config.batch, config.max_context(), mode, config.bytes_per_element)?;
            if fp.fast_bytes > limit {
                return Err(KcError::Capacity { required: fp.fast_bytes, limit });
            }
        }
        let placement = TierPlacement::new(config.effective_resident(model), model.n_layers, config.bytes_per_element)?;
        let cache = TieredKVCache::new(CacheShape::from_model(model, config.batch), placement)?
            .with_capacity_limit(config.fast_capacity);
        Ok(Self { weights, config, cache, steps: Vec::new(), ledger_mark: 0 })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn cache(&self) -> &TieredKVCache {
        &self.cache
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    fn close_step(&mut self, selection: SelectionAccumulator, probes: Vec<ProbeStat>) -> StepRecord {
        let l = self.weights.config.n_layers;
        let mut layers: Vec<LayerTransfer> =
            (0..l).map(|layer| LayerTransfer { layer, d2h_bytes: 0, h2d_bytes: 0 }).collect();
        for e in &self.cache.ledger().events()[self.ledger_mark..] {
            match e.dir {
                Direction::D2H => layers[e.layer].d2h_bytes += e.bytes,
                Direction::H2D => layers[e.layer].h2d_bytes += e.bytes,
            }
        }
        self.ledger_mark = self.cache.ledger().len();
        let record = StepRecord {
            step: self.steps.len(),
            phase: self.cache.phase(),
            seq_len: self.cache.current_len(),
            d2h_bytes: layers.iter().map(|t| t.d2h_bytes).sum(),
            h2d_bytes: layers.iter().map(|t| t.h2d_bytes).sum(),
            layers,
            selection: selection.finish(),
            probes,
        };
        self.steps.push(record.clone());
        record
    }

    /// Full causal forward over the prompt, filling the cache and
    /// offloading V of non-resident layers layer by layer. Returns the
    /// last-position logits (`batch x vocab`).
    pub fn prefill(&mut self, prompt: &[Vec<u32>]) -> Result<Matrix> {
        if !self.steps.is_empty() {
            return Err(KcError::state("prefill already done"));
        }
        let model = self.weights.config;
        if prompt.len() != self.config.batch {
            return Err(KcError::arg(format!("prompt has {} rows, batch is {}", prompt.len(), self.config.batch)));
        }
        let s = prompt.first().map_or(0, Vec::len);
        if s == 0 {
            return Err(KcError::arg("empty prompt"));
        }
        if prompt.iter().any(|r| r.len() != s) {
            return Err(KcError::arg("all prompt rows must have the same length"));
        }
        if s > model.max_seq {
            return Err(KcError::State(format!("prompt of {s} tokens exceeds max_seq {}", model.max_seq)));
        }
        self.cache.set_phase(Phase::Prefill);
        let mut hidden = prompt.iter().map(|row| self.weights.embed(row)).collect::<Result<Vec<_>>>()?;
        for (layer, lw) in self.weights.layers.iter().enumerate() {
            let mut ks = Vec::with_capacity(hidden.len());
            let mut vs = Vec::with_capacity(hidden.len());
            for x in hidden.iter_mut() {
                *x = block_forward(x, lw, |q, k, v| {
                    ks.push(k.clone());
                    vs.push(v.clone());
                    prefill_attention(q, k, v, model.n_heads, model.head_dim)
                })?;
            }
            let k_refs: Vec<&[f32]> = ks.iter().map(Matrix::data).collect();
            let v_refs: Vec<&[f32]> = vs.iter().map(Matrix::data).collect();
            self.cache.append_kv(layer, &k_refs, &v_refs)?;
            self.cache.offload_prefill_v(layer)?;
        }
        let last: Vec<Vec<f32>> = hidden.iter().map(|h| h.row(h.rows() - 1).to_vec()).collect();
        let logits = self.weights.logits(&Matrix::from_rows(&last)?)?;
        self.close_step(SelectionAccumulator::default(), Vec::new());
        self.cache.set_phase(Phase::Decode);
        Ok(logits)
    }

    /// Feeds one token per batch row and returns next-token logits and the
    /// greedy choice.
    pub fn decode_step(&mut self, prev: &[u32]) -> Result<StepOutput> {
        if self.steps.is_empty() {
            return Err(KcError::state("decode before prefill"));
        }
        let model = self.weights.config;
        if prev.len() != self.config.batch {
            return Err(KcError::arg(format!("{} tokens for batch {}", prev.len(), self.config.batch)));
        }
        if self.cache.current_len() + 1 > model.max_seq {
            return Err(KcError::State(format!("cache overflow: max_seq {} reached", model.max_seq)));
        }
        let options = TopNOptions { renormalize: self.config.renormalize, fault: self.config.fault };
        let mut selection = SelectionAccumulator::default();
        let mut probe_sums = vec![0.0f64; self.config.probe_top_n.len()];
        let mut probe_rows = 0u64;

        let mut x = self.weights.embed(prev)?;
        for (layer, lw) in self.weights.layers.iter().enumerate() {
            let cache = &mut self.cache;
            let config = &self.config;
            let (sel, probe_sums, probe_rows) = (&mut selection, &mut probe_sums, &mut probe_rows);
            x = block_forward(&x, lw, |q, k, v| {
                let k_rows: Vec<&[f32]> = (0..k.rows()).map(|r| k.row(r)).collect();
                let v_rows: Vec<&[f32]> = (0..v.rows()).map(|r| v.row(r)).collect();
                cache.append_kv(layer, &k_rows, &v_rows)?;
                let len = cache.layer_len(layer);
                if !config.probe_top_n.is_empty() && layer >= config.resident_layers {
                    for probs in decode_probabilities(q, cache, layer)? {
                        *probe_rows += 1;
                        for (sum, &n) in probe_sums.iter_mut().zip(&config.probe_top_n) {
                            *sum += dropped_mass(&probs, n)? as f64;
                        }
                    }
                }
                if config.uses_topn(layer) {
                    let out = decode_attention_topn(q, cache, layer, config.top_n, options)?;
                    sel.add(&out.selection, len);
                    Ok(out.output)
                } else {
                    decode_attention_full(q, cache, layer)
                }
            })?;
        }
        let logits = self.weights.logits(&x)?;
        let tokens = greedy(&logits);
        let probes = self
            .config
            .probe_top_n
            .iter()
            .zip(&probe_sums)
            .map(|(&top_n, &sum)| ProbeStat { top_n, mean_dropped_mass: if probe_rows == 0 { 0.0 } else { sum / probe_rows as f64 } })
            .collect();
        let record = self.close_step(selection, probes);
        Ok(StepOutput { logits, tokens, record })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTotals {
    pub d2h_bytes: u64,
    pub h2d_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_seed: Option<u64>,
    pub engine: EngineConfig,
    pub prompt: Prompt,
    /// `gen_len` tokens per batch row.
    pub tokens: Vec<Vec<u32>>,
    /// Logits that produced the last token of each row.
    pub final_logits: Vec<Vec<f32>>,
    pub steps: Vec<StepRecord>,
    pub ledger: TransferTotals,
    /// Closed-form totals the ledger must equal.
    pub expected_ledger: TransferTotals,
    pub fast_bytes: u64,
    pub slow_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<Projection>,
}

/// Closed-form transfer totals for a run of `decode_steps` decode steps.
///
/// D2H: `bytes * b * d * (l - L) * (prompt_len + decode_steps)`.
/// H2D: `Σ_t Σ_{layer >= L} bytes * b * n * min(N, prompt_len + t) * h`
/// over decode steps `t = 1..=decode_steps`.
pub fn expected_transfers(model: &ModelConfig, config: &EngineConfig, decode_steps: usize) -> TransferTotals {
    let resident = config.effective_resident(model) as u64;
    let offloaded = model.n_layers as u64 - resident;
    let bytes = config.bytes_per_element as u64;
    let b = config.batch as u64;
    let d2h_bytes = bytes * b * model.d_model as u64 * offloaded * (config.prompt_len + decode_steps) as u64;
    let h2d_bytes = if config.mode == Mode::KCache {
        (1..=decode_steps)
            .map(|t| {
                let rows = config.top_n.min(config.prompt_len + t) as u64;
                offloaded * bytes * b * model.n_heads as u64 * rows * model.head_dim as u64
            })
            .sum()
    } else {
        0
    };
    TransferTotals { d2h_bytes, h2d_bytes }
}

/// Prefill plus `gen_len - 1` decode steps, emitting `gen_len` tokens per
/// row (the first from the prefill logits).
pub fn generate(config: &EngineConfig, weights: &ModelWeights, prompt: &Prompt) -> Result<GenerationReport> {
    prompt.validate(Some(weights.config.vocab))?;
    if prompt.batch() != config.batch || prompt.len() != config.prompt_len {
        return Err(KcError::arg(format!(
            "prompt is {}x{}, config expects {}x{}",
            prompt.batch(),
            prompt.len(),
            config.batch,
            config.prompt_len
        )));
    }
    let mut session = Session::new(weights, config.clone())?;
    let mut logits = session.prefill(&prompt.rows)?;
    let mut tokens: Vec<Vec<u32>> = vec![Vec::with_capacity(config.gen_len); config.batch];
    if config.gen_len > 0 {
        let mut prev = greedy(&logits);
        for (row, &t) in tokens.iter_mut().zip(&prev) {
            row.push(t);
        }
        for _ in 1..config.gen_len {
            let out = session.decode_step(&prev)?;
            for (row, &t) in tokens.iter_mut().zip(&out.tokens) {
                row.push(t);
            }
            prev = out.tokens;
            logits = out.logits;
        }
    }
    let cache = session.cache();
    Ok(GenerationReport {
        model: weights.config,
        weights_seed: None,
        engine: config.clone(),
        prompt: prompt.clone(),
        tokens,
        final_logits: (0..logits.rows()).map(|r| logits.row(r).to_vec()).collect(),
        ledger: TransferTotals {
            d2h_bytes: cache.ledger().total(Direction::D2H),
            h2d_bytes: cache.ledger().total(Direction::H2D),
        },
        expected_ledger: expected_transfers(&weights.config, config, config.decode_steps()),
        fast_bytes: cache.fast_bytes_used(),
        slow_bytes: cache.slow_bytes_used(),
        steps: session.steps().to_vec(),
        projection: None,
    })
}

impl GenerationReport {
    pub fn ledger_matches(&self) -> bool {
        self.ledger == self.expected_ledger
    }

    /// Mean TopN dropped mass across decode steps that ran a selection.
    pub fn mean_dropped_mass(&self) -> Option<f64> {
        let vals: Vec<f64> = self.steps.iter().filter_map(|s| s.selection.map(|x| x.mean_dropped_mass)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Per-probe mean dropped mass across decode steps.
    pub fn probe_means(&self) -> Vec<ProbeStat> {
        let decode: Vec<&StepRecord> = self.steps.iter().filter(|s| !s.probes.is_empty()).collect();
        self.engine
            .probe_top_n
            .iter()
            .enumerate()
            .map(|(i, &top_n)| ProbeStat {
                top_n,
                mean_dropped_mass: if decode.is_empty() {
                    0.0
                } else {
                    decode.iter().map(|s| s.probes[i].mean_dropped_mass).sum::<f64>() / decode.len() as f64
                },
            })
            .collect()
    }

    /// Projection of this run's shape and final context under `profile`.
    pub fn attach_projection(&mut self, profile: &HardwareProfile, overlap_h2d: bool) -> Result<()> {
        let e = &self.engine;
        let input = ProjectionInput {
            batch: e.batch as u64,
            seq_len: e.max_context() as u64,
            top_n: if e.mode == Mode::KCache { e.top_n as u64 } else { e.max_context() as u64 },
            resident_layers: e.effective_resident(&self.model) as u64,
            bytes: e.bytes_per_element as u64,
            overlap_h2d,
        };
        self.projection = Some(project_run(&self.model, &input, profile)?);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| KcError::arg(format!("bad report JSON: {e}")))
    }

    /// Per-step CSV: `step,phase,seq_len,d2h_bytes,h2d_bytes,mean_dropped_mass`.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,phase,seq_len,d2h_bytes,h2d_bytes,mean_dropped_mass\n");
        for s in &self.steps {
            let phase = match s.phase {
                Phase::Prefill => "prefill",
                Phase::Decode => "decode",
            };
            let dm = s.selection.map(|x| crate::fmt_sig9(x.mean_dropped_mass)).unwrap_or_default();
            let _ = writeln!(out, "{},{phase},{},{},{},{dm}", s.step, s.seq_len, s.d2h_bytes, s.h2d_bytes);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub matches: u64,
    pub total: u64,
}

impl Agreement {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matches as f64 / self.total as f64
        }
    }
}

/// Teacher-forced top-1 agreement: runs `config` over the reference run's
/// prompt and tokens and counts positions where its greedy choice equals
/// the reference token.
pub fn top1_agreement(weights: &ModelWeights, reference: &GenerationReport, config: &EngineConfig) -> Result<Agreement> {
    let mut session = Session::new(weights, config.clone())?;
    let mut agreement = Agreement { matches: 0, total: 0 };
    let gen_len = reference.tokens.first().map_or(0, Vec::len);
    if gen_len == 0 {
        return Ok(agreement);
    }
    let mut tally = |choice: &[u32], step: usize| {
        for (row, &c) in reference.tokens.iter().zip(choice) {
            agreement.total += 1;
            agreement.matches += u64::from(row[step] == c);
        }
    };
    let first = greedy(&session.prefill(&reference.prompt.rows)?);
    tally(&first, 0);
    for step in 1..gen_len {
        let prev: Vec<u32> = reference.tokens.iter().map(|r| r[step - 1]).collect();
        let out = session.decode_step(&prev)?;
        tally(&out.tokens, step);
    }
    Ok(agreement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_weights;
    use crate::reference;

    fn weights() -> ModelWeights {
        generate_weights(&ModelConfig::toy(), 11).unwrap()
    }

    fn run(w: &ModelWeights, cfg: &EngineConfig) -> GenerationReport {
        let prompt = Prompt::random(cfg.seed, cfg.batch, cfg.prompt_len, w.config.vocab);
        generate(cfg, w, &prompt).unwrap()
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0, 3.0], vec![-1.0, -1.0, -2.0]]).unwrap();
        assert_eq!(greedy(&m), vec![1, 0]);
    }

    #[test]
    fn baseline_matches_full_recompute() {
        let w = weights();
        let cfg = EngineConfig::baseline(3, 12, 6);
        let report = run(&w, &cfg);
        let (tokens, logits) = reference::generate(&w, &report.prompt.rows[0], 6).unwrap();
        assert_eq!(report.tokens[0], tokens);
        assert!(reference::relative_error(&report.final_logits[0], logits.last().unwrap()) < 1e-5);
    }

    #[test]
    fn large_n_is_bitwise_baseline() {
        let w = weights();
        let base = run(&w, &EngineConfig::baseline(5, 20, 8).with_batch(2));
        let kc = run(&w, &EngineConfig::kcache(5, 20, 8, 4096, 0).with_batch(2));
        assert_eq!(base.tokens, kc.tokens);
        assert_eq!(base.final_logits, kc.final_logits);
    }

    #[test]
    fn ledger_equals_closed_form() {
        let w = weights();
        for (n, l) in [(1, 0), (4, 2), (64, 3), (2, 4)] {
            let r = run(&w, &EngineConfig::kcache(9, 10, 7, n, l).with_batch(2));
            assert!(r.ledger_matches(), "N={n} L={l}: {:?} vs {:?}", r.ledger, r.expected_ledger);
        }
        let r = run(&w, &EngineConfig::baseline(9, 10, 7));
        assert_eq!(r.ledger, TransferTotals { d2h_bytes: 0, h2d_bytes: 0 });
    }

    #[test]
    fn zero_generation_emits_nothing() {
        let w = weights();
        let r = run(&w, &EngineConfig::kcache(1, 5, 0, 2, 1));
        assert!(r.tokens.iter().all(Vec::is_empty));
        assert_eq!(r.steps.len(), 1);
        assert!(r.ledger_matches());
    }

    #[test]
    fn capacity_limit_is_enforced() {
        let w = weights();
        let mut cfg = EngineConfig::baseline(1, 16, 4);
        cfg.fast_capacity = Some(1000);
        let err = Session::new(&w, cfg).err().unwrap();
        assert!(matches!(err, KcError::Capacity { .. }));
    }

    #[test]
    fn overlong_run_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.max_seq = 8;
        let w = generate_weights(&cfg, 1).unwrap();
        assert!(EngineConfig::baseline(1, 6, 3).validate(&w.config).is_ok());
        assert!(EngineConfig::baseline(1, 6, 4).validate(&w.config).is_err());
    }

    #[test]
    fn probes_are_monotone() {
        let w = weights();
        let mut cfg = EngineConfig::baseline(2, 24, 5);
        cfg.probe_top_n = vec![1, 4, 16, 64];
        let r = run(&w, &cfg);
        let means = r.probe_means();
        assert!(means.windows(2).all(|p| p[1].mean_dropped_mass <= p[0].mean_dropped_mass));
        assert!(means[3].mean_dropped_mass.abs() < 1e-6);
    }

    #[test]
    fn teacher_forced_agreement_is_total_for_same_config() {
        let w = weights();
        let cfg = EngineConfig::baseline(4, 9, 5);
        let r = run(&w, &cfg);
        let a = top1_agreement(&w, &r, &EngineConfig::kcache(4, 9, 5, 64, 0)).unwrap();
        assert_eq!(a.total, 5);
        assert_eq!(a.fraction(), 1.0);
    }

    #[test]
    fn prompt_file_round_trip() {
        let p = Prompt::parse("1 2 3\n\n4 5 6\n").unwrap();
        assert_eq!(p.rows, vec![vec![1, 2, 3], vec![4, 5, 6]]);
        assert_eq!(Prompt::parse(&p.to_text()).unwrap(), p);
        assert!(Prompt::parse("1 2\n3\n").is_err());
        assert!(Prompt::parse("x").is_err());
    }
}
