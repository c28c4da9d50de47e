//! Two-tier KV store.
//!
//! K rows for every layer and V rows for layers `0..L` live in the fast
//! tier. V rows for layers `L..l` live in the slow tier once their prefill
//! offload has run. Both tiers are host memory here; a "transfer" is a
//! logical move plus a ledger entry, and the cost model turns ledger bytes
//! into time.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{KcError, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Fast,
    Slow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    D2H,
    H2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub phase: Phase,
    pub layer: usize,
    pub dir: Direction,
    pub bytes: u64,
    pub elements: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLedger {
    events: Vec<TransferEvent>,
}

impl TransferLedger {
    pub fn events(&self) -> &[TransferEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total(&self, dir: Direction) -> u64 {
        self.events.iter().filter(|e| e.dir == dir).map(|e| e.bytes).sum()
    }

    pub fn total_for_layer(&self, layer: usize, dir: Direction) -> u64 {
        self.events.iter().filter(|e| e.dir == dir && e.layer == layer).map(|e| e.bytes).sum()
    }

    /// One JSON object per line: `{"phase","layer","dir","bytes","elements"}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    fn push(&mut self, event: TransferEvent) {
        self.events.push(event);
    }
}

/// Which layers keep their V rows in the fast tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierPlacement {
    resident_layers: usize,
    n_layers: usize,
    bytes_per_element: usize,
}

impl TierPlacement {
    pub fn new(resident_layers: usize, n_layers: usize, bytes_per_element: usize) -> Result<Self> {
        if resident_layers > n_layers {
            return Err(KcError::arg(format!(
                "resident layers {resident_layers} exceeds layer count {n_layers}"
            )));
        }
        if bytes_per_element == 0 {
            return Err(KcError::arg("bytes per element must be >= 1"));
        }
        Ok(Self { resident_layers, n_layers, bytes_per_element })
    }

    /// Every layer resident: the plain KV-cache layout.
    pub fn all_resident(n_layers: usize, bytes_per_element: usize) -> Result<Self> {
        Self::new(n_layers, n_layers, bytes_per_element)
    }

    pub fn resident_layers(&self) -> usize {
        self.resident_layers
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn bytes_per_element(&self) -> usize {
        self.bytes_per_element
    }

    pub fn is_resident(&self, layer: usize) -> bool {
        layer < self.resident_layers
    }
}

/// Geometry of one cache: batch rows and attention layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheShape {
    pub batch: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl CacheShape {
    pub fn from_model(config: &ModelConfig, batch: usize) -> Self {
        Self { batch, n_layers: config.n_layers, n_heads: config.n_heads, head_dim: config.head_dim }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// Metadata the cost model needs about one prefill offload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffloadRecord {
    pub layer: usize,
    pub bytes: u64,
}

/// V rows gathered into the fast tier for one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredV {
    /// One block per `(batch, head)` in batch-major order; each block is
    /// `indices.len() x head_dim`, rows in the order given.
    pub blocks: Vec<Vec<f32>>,
    pub h2d_bytes: u64,
}

#[derive(Debug, Clone)]
struct LayerValues {
    offloaded: bool,
    rows: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct TieredKVCache {
    shape: CacheShape,
    placement: TierPlacement,
    /// `[layer][batch]`, seq-major rows of width d.
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<LayerValues>,
    lens: Vec<usize>,
    phase: Phase,
    ledger: TransferLedger,
    h2d_total: u64,
    d2h_total: u64,
    capacity: Option<u64>,
    offloads: Vec<OffloadRecord>,
}

impl TieredKVCache {
    pub fn new(shape: CacheShape, placement: TierPlacement) -> Result<Self> {
        if shape.n_layers != placement.n_layers() {
            return Err(KcError::arg(format!(
                "placement covers {} layers, cache has {}",
                placement.n_layers(),
                shape.n_layers
            )));
        }
        if shape.batch == 0 || shape.n_heads == 0 || shape.head_dim == 0 {
            return Err(KcError::arg("batch, heads and head_dim must be >= 1"));
        }
        let l = shape.n_layers;
        Ok(Self {
            shape,
            placement,
            keys: vec![vec![Vec::new(); shape.batch]; l],
            values: (0..l)
                .map(|_| LayerValues { offloaded: false, rows: vec![Vec::new(); shape.batch] })
                .collect(),
            lens: vec![0; l],
            phase: Phase::Prefill,
            ledger: TransferLedger::default(),
            h2d_total: 0,
            d2h_total: 0,
            capacity: None,
            offloads: Vec::new(),
        })
    }

    /// Limit on steady-state fast-tier bytes (K rows plus resident V rows).
    pub fn with_capacity_limit(mut self, limit: Option<u64>) -> Self {
        self.capacity = limit;
        self
    }

    pub fn shape(&self) -> CacheShape {
        self.shape
    }

    pub fn placement(&self) -> TierPlacement {
        self.placement
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn offloads(&self) -> &[OffloadRecord] {
        &self.offloads
    }

    pub fn h2d_bytes_total(&self) -> u64 {
        self.h2d_total
    }

    pub fn d2h_bytes_total(&self) -> u64 {
        self.d2h_total
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.lens[layer]
    }

    /// Sequence length held by layer 0; after a complete step every layer
    /// agrees (see [`Self::lengths_consistent`]).
    pub fn current_len(&self) -> usize {
        self.lens.first().copied().unwrap_or(0)
    }

    pub fn lengths_consistent(&self) -> bool {
        self.lens.windows(2).all(|w| w[0] == w[1])
    }

    pub fn v_tier(&self, layer: usize) -> Tier {
        if self.placement.is_resident(layer) || !self.values[layer].offloaded {
            Tier::Fast
        } else {
            Tier::Slow
        }
    }

    fn bytes(&self, elements: usize) -> u64 {
        elements as u64 * self.placement.bytes_per_element() as u64
    }

    fn key_elements(&self) -> usize {
        self.keys.iter().flatten().map(Vec::len).sum()
    }

    fn value_elements(&self, layer: usize) -> usize {
        self.values[layer].rows.iter().map(Vec::len).sum()
    }

    pub fn fast_bytes_used(&self) -> u64 {
        let v: usize = (0..self.shape.n_layers)
            .filter(|&l| self.v_tier(l) == Tier::Fast)
            .map(|l| self.value_elements(l))
            .sum();
        self.bytes(self.key_elements() + v)
    }

    pub fn slow_bytes_used(&self) -> u64 {
        let v: usize = (0..self.shape.n_layers)
            .filter(|&l| self.v_tier(l) == Tier::Slow)
            .map(|l| self.value_elements(l))
            .sum();
        self.bytes(v)
    }

    /// Fast-tier bytes excluding prefill V rows still waiting for offload.
    fn steady_fast_bytes(&self) -> u64 {
        let v: usize = (0..self.placement.resident_layers()).map(|l| self.value_elements(l)).sum();
        self.bytes(self.key_elements() + v)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.shape.n_layers {
            return Err(KcError::arg(format!("layer {layer} out of range ({} layers)", self.shape.n_layers)));
        }
        Ok(())
    }

    fn record(&mut self, layer: usize, dir: Direction, elements: usize) -> u64 {
        let bytes = self.bytes(elements);
        match dir {
            Direction::D2H => self.d2h_total += bytes,
            Direction::H2D => self.h2d_total += bytes,
        }
        self.ledger.push(TransferEvent { phase: self.phase, layer, dir, bytes, elements: elements as u64 });
        bytes
    }

    /// Appends one block of K/V rows per batch row. All blocks must carry
    /// the same number of rows of width d.
    ///
    /// K always lands in the fast tier. V lands in the fast tier for
    /// resident layers and for layers whose prefill offload has not run yet;
    /// otherwise it is written straight to the slow tier with a D2H entry.
    pub fn append_kv(&mut self, layer: usize, k_rows: &[&[f32]], v_rows: &[&[f32]]) -> Result<()> {
        self.check_layer(layer)?;
        let d = self.shape.d_model();
        if k_rows.len() != self.shape.batch || v_rows.len() != self.shape.batch {
            return Err(KcError::shape(format!(
                "append_kv expects {} batch rows, got {} K / {} V",
                self.shape.batch,
                k_rows.len(),
                v_rows.len()
            )));
        }
        let elems = k_rows[0].len();
        if !elems.is_multiple_of(d) || k_rows.iter().chain(v_rows).any(|r| r.len() != elems) {
            return Err(KcError::shape(format!("append_kv rows must share a length that is a multiple of d={d}")));
        }
        let t = elems / d;
        if let Some(limit) = self.capacity {
            let resident_v = if self.placement.is_resident(layer) { elems } else { 0 };
            let required = self.steady_fast_bytes() + self.bytes(self.shape.batch * (elems + resident_v));
            if required > limit {
                return Err(KcError::Capacity { required, limit });
            }
        }
        for (dst, src) in self.keys[layer].iter_mut().zip(k_rows) {
            dst.extend_from_slice(src);
        }
        for (dst, src) in self.values[layer].rows.iter_mut().zip(v_rows) {
            dst.extend_from_slice(src);
        }
        self.lens[layer] += t;
        if self.v_tier(layer) == Tier::Slow {
            self.record(layer, Direction::D2H, self.shape.batch * elems);
        }
        Ok(())
    }

    /// Moves a layer's prefill V rows to the slow tier. No-op for resident
    /// layers; a second call on the same layer is a state error.
    pub fn offload_prefill_v(&mut self, layer: usize) -> Result<()> {
        self.check_layer(layer)?;
        if self.placement.is_resident(layer) {
            return Ok(());
        }
        if self.values[layer].offloaded {
            return Err(KcError::state(format!("V of layer {layer} already offloaded")));
        }
        self.values[layer].offloaded = true;
        let bytes = self.record(layer, Direction::D2H, self.value_elements(layer));
        self.offloads.push(OffloadRecord { layer, bytes });
        Ok(())
    }

    pub fn keys(&self, layer: usize, batch: usize) -> &[f32] {
        &self.keys[layer][batch]
    }

    /// Raw V rows without transfer accounting.
    pub fn values(&self, layer: usize, batch: usize) -> &[f32] {
        &self.values[layer].rows[batch]
    }

    /// Accounts for pulling a layer's whole V back to the fast tier.
    /// Returns the H2D bytes charged (0 when V is already fast).
    pub fn fetch_full_v(&mut self, layer: usize) -> Result<u64> {
        self.check_layer(layer)?;
        if self.v_tier(layer) == Tier::Fast {
            return Ok(0);
        }
        Ok(self.record(layer, Direction::H2D, self.value_elements(layer)))
    }

    /// Copies the selected V rows, head slice only, for every
    /// `(batch, head)` pair. `indices` is batch-major with one strictly
    /// increasing set per pair. Slow-tier layers charge
    /// `bytes * Σ|set| * head_dim` H2D; fast-tier layers charge nothing.
    pub fn gather_v(&mut self, layer: usize, indices: &[Vec<usize>]) -> Result<GatheredV> {
        self.check_layer(layer)?;
        let (b, n, h) = (self.shape.batch, self.shape.n_heads, self.shape.head_dim);
        let d = n * h;
        if indices.len() != b * n {
            return Err(KcError::shape(format!("gather_v expects {} index sets, got {}", b * n, indices.len())));
        }
        let len = self.lens[layer];
        let mut blocks = Vec::with_capacity(b * n);
        let mut elements = 0usize;
        for (pair, set) in indices.iter().enumerate() {
            if let Some(&bad) = set.iter().find(|&&i| i >= len) {
                return Err(KcError::arg(format!("V index {bad} out of range (length {len})")));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(KcError::arg("V indices must be strictly increasing"));
            }
            let (batch, head) = (pair / n, pair % n);
            let src = &self.values[layer].rows[batch];
            let mut block = Vec::with_capacity(set.len() * h);
            for &row in set {
                let start = row * d + head * h;
                block.extend_from_slice(&src[start..start + h]);
            }
            elements += block.len();
            blocks.push(block);
        }
        let h2d_bytes = if self.v_tier(layer) == Tier::Slow {
            self.record(layer, Direction::H2D, elements)
        } else {
            0
        };
        Ok(GatheredV { blocks, h2d_bytes })
    }
}

/// Cache layout for footprint arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Baseline,
    KCache { resident_layers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub fast_bytes: u64,
    pub slow_bytes: u64,
    pub weight_bytes: u64,
}

fn product(factors: &[u64], what: &'static str) -> Result<u64> {
    let mut acc: u128 = 1;
    for &f in factors {
        acc = acc.checked_mul(f as u128).ok_or(KcError::Overflow(what))?;
    }
    u64::try_from(acc).map_err(|_| KcError::Overflow(what))
}

/// Fast/slow KV bytes for `b` sequences of length `s`, plus weight bytes.
///
/// Baseline: fast = `2 * bytes * b * s * d * l`. KCache with `L` resident
/// layers: fast = `bytes * b * s * d * (l + L)`, slow =
/// `bytes * b * s * d * (l - L)`.
pub fn memory_footprint(config: &ModelConfig, batch: usize, seq_len: usize, mode: CacheMode, bytes: usize) -> Result<Footprint> {
    let l = config.n_layers as u64;
    let per_layer = [bytes as u64, batch as u64, seq_len as u64, config.d_model as u64];
    let (fast_layers, slow_layers) = match mode {
        CacheMode::Baseline => (2 * l, 0),
        CacheMode::KCache { resident_layers } => {
            let r = resident_layers as u64;
            if r > l {
                return Err(KcError::arg(format!("resident layers {r} exceeds layer count {l}")));
            }
            (l + r, l - r)
        }
    };
    let with = |layers: u64| {
        let mut f = per_layer.to_vec();
        f.push(layers);
        product(&f, "kv footprint")
    };
    Ok(Footprint {
        fast_bytes: with(fast_layers)?,
        slow_bytes: with(slow_layers)?,
        weight_bytes: product(&[config.param_count(), bytes as u64], "weight bytes")?,
    })
}
