//! Analytic decode-phase cost model.
//!
//! FLOP and byte counts per attention submodule, the prefill offload
//! overlap condition, the decode transfer-benefit condition and a roofline
//! projection of per-step time for the plain and TopN/offloaded modes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KcError, Result};
use crate::kvcache::{memory_footprint, CacheMode, Footprint};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// FLOP/s at model precision.
    pub flops: f64,
    /// Device memory bandwidth, bytes/s.
    pub bw_gpu: f64,
    pub bw_h2d: f64,
    pub bw_d2h: f64,
    /// Fast-tier (device) capacity in bytes.
    pub fast_capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub const BUILTIN_PROFILES: &[&str] = &["a100-80g", "eval-gpu"];

impl HardwareProfile {
    /// A100 80GB. The FLOP rate is the public dense fp16 tensor-core figure.
    pub fn a100_80g() -> Self {
        Self {
            name: "a100-80g".into(),
            flops: 312e12,
            bw_gpu: 2039e9,
            bw_h2d: 32e9,
            bw_d2h: 32e9,
            fast_capacity: 80e9,
            note: None,
        }
    }

    /// 64 GB evaluation GPU with 1 TB/s memory bandwidth and 180 TFLOP/s.
    pub fn eval_gpu() -> Self {
        Self {
            name: "eval-gpu".into(),
            flops: 180e12,
            bw_gpu: 1e12,
            bw_h2d: 32e9,
            bw_d2h: 32e9,
            fast_capacity: 64e9,
            note: Some("host<->device bandwidth unreported; 32e9 assumed, projections approximate".into()),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "a100-80g" => Some(Self::a100_80g()),
            // Long form accepted as an alias.
            "eval-gpu" | "paper-eval-gpu" => Some(Self::eval_gpu()),
            _ => None,
        }
    }

    /// Built-in name, or a path to a JSON profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(p) = Self::builtin(name_or_path) {
            return Ok(p);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(KcError::arg(format!(
                "unknown profile '{name_or_path}' (built-ins: {})",
                BUILTIN_PROFILES.join(", ")
            )));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| KcError::arg(format!("bad profile JSON: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("flops", self.flops),
            ("bw_gpu", self.bw_gpu),
            ("bw_h2d", self.bw_h2d),
            ("bw_d2h", self.bw_d2h),
            ("fast_capacity", self.fast_capacity),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(KcError::arg(format!("profile {what} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_approximate(&self) -> bool {
        self.note.is_some()
    }
}

/// `2 * bytes * b * s * d * l`, exact.
pub fn kv_cache_bytes(b: u64, s: u64, d: u64, l: u64, bytes: u64) -> Result<u64> {
    let total = [b, s, d, l, bytes]
        .iter()
        .try_fold(2u128, |acc, &f| acc.checked_mul(f as u128))
        .ok_or(KcError::Overflow("kv cache bytes"))?;
    u64::try_from(total).map_err(|_| KcError::Overflow("kv cache bytes"))
}

/// Decode geometry for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeShape {
    pub batch: u64,
    /// Cached sequence length attended over.
    pub seq_len: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub head_dim: u64,
    pub bytes: u64,
}

impl DecodeShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.head_dim != self.d_model {
            return Err(KcError::shape(format!(
                "d {} != n {} x h {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if [self.batch, self.seq_len, self.d_model, self.bytes].contains(&0) {
            return Err(KcError::arg("batch, seq_len, d_model and bytes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    TopN(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmoduleCost {
    pub flops: u64,
    pub io_bytes: u64,
    /// Bytes pulled host-to-device for this submodule.
    pub h2d_bytes: u64,
}

impl SubmoduleCost {
    pub fn arithmetic_intensity(&self) -> f64 {
        self.flops as f64 / self.io_bytes as f64
    }

    pub fn compute_time(&self, p: &HardwareProfile) -> f64 {
        self.flops as f64 / p.flops
    }

    pub fn memory_time(&self, p: &HardwareProfile) -> f64 {
        self.io_bytes as f64 / p.bw_gpu
    }

    /// Roofline: the slower of compute and device-memory traffic.
    pub fn est_time(&self, p: &HardwareProfile) -> f64 {
        self.compute_time(p).max(self.memory_time(p))
    }

    pub fn transfer_time(&self, p: &HardwareProfile) -> f64 {
        self.h2d_bytes as f64 / p.bw_h2d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub qkv: SubmoduleCost,
    pub scores: SubmoduleCost,
    pub weighted_sum: SubmoduleCost,
    pub out_proj: SubmoduleCost,
    pub ffn: SubmoduleCost,
}

impl CostBreakdown {
    pub fn rows(&self) -> [(&'static str, SubmoduleCost); 5] {
        [
            ("qkv", self.qkv),
            ("scores", self.scores),
            ("weighted_sum", self.weighted_sum),
            ("out_proj", self.out_proj),
            ("ffn", self.ffn),
        ]
    }

    pub fn mha_rows(&self) -> [(&'static str, SubmoduleCost); 4] {
        [("qkv", self.qkv), ("scores", self.scores), ("weighted_sum", self.weighted_sum), ("out_proj", self.out_proj)]
    }

    /// Per-layer time with H2D transfers serialized after compute, or
    /// fully hidden behind it when `overlap_h2d` is set.
    pub fn layer_time(&self, p: &HardwareProfile, overlap_h2d: bool) -> f64 {
        let compute: f64 = self.rows().iter().map(|(_, c)| c.est_time(p)).sum();
        let transfer: f64 = self.rows().iter().map(|(_, c)| c.transfer_time(p)).sum();
        if overlap_h2d {
            compute.max(transfer)
        } else {
            compute + transfer
        }
    }

    pub fn mha_time(&self, p: &HardwareProfile) -> f64 {
        self.mha_rows().iter().map(|(_, c)| c.est_time(p) + c.transfer_time(p)).sum()
    }
}

/// FLOPs and I/O bytes of one decoder layer for one decode step.
///
/// Element counts follow the per-submodule accounting of reads and writes
/// at `bytes` per element; at `bytes = 2` they are exactly
/// `qkv: 6bd² / 12bd+6d²`, `scores: 2bsd / 2bnh+2bnhs+2bns`,
/// `weighted_sum: 2bsd / 2bns+2bsd+2bd`, `out_proj: 2bd² / 4bd+2d²`.
/// TopN replaces `s` by `N` in the probability read of `scores` and in
/// `weighted_sum`, and pulls `bytes * b * n * N * h` host-to-device.
/// `N` is clamped to `s`.
///
/// The FFN row (not part of the attention table) counts `6bdf` FLOPs and
/// `3df + 3bd + 3bf` elements.
pub fn decode_mha_cost(shape: &DecodeShape, ffn_hidden: u64, mode: AttentionMode) -> Result<CostBreakdown> {
    shape.validate()?;
    let DecodeShape { batch: b, seq_len: s, d_model: d, n_heads: n, head_dim: h, bytes } = *shape;
    let f = ffn_hidden;
    let cost = |flops: u64, elements: u64| SubmoduleCost { flops, io_bytes: bytes * elements, h2d_bytes: 0 };

    let qkv = cost(6 * b * d * d, 6 * b * d + 3 * d * d);
    let out_proj = cost(2 * b * d * d, 2 * b * d + d * d);
    let ffn = cost(6 * b * d * f, 3 * d * f + 3 * b * d + 3 * b * f);
    let (scores, weighted_sum) = match mode {
        AttentionMode::Full => (
            cost(2 * b * s * d, b * n * h + b * n * h * s + b * n * s),
            cost(2 * b * s * d, b * n * s + b * s * d + b * d),
        ),
        AttentionMode::TopN(top_n) => {
            if top_n == 0 {
                return Err(KcError::arg("TopN requires N >= 1"));
            }
            let nn = top_n.min(s);
            let mut ws = cost(2 * b * nn * d, b * n * nn + b * nn * d + b * d);
            ws.h2d_bytes = bytes * b * n * nn * h;
            (cost(2 * b * s * d, b * n * h + b * n * h * s + b * n * nn), ws)
        }
    };
    Ok(CostBreakdown { qkv, scores, weighted_sum, out_proj, ffn })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapCheck {
    /// Per-block prefill compute time, `(22bsd² + 4bs²d) / FLOPS`.
    pub block_compute_s: f64,
    /// Per-block V offload time, `bytes * b * s * d / bw_d2h`.
    pub block_transfer_s: f64,
    pub block_holds: bool,
    /// `11d + 2s`.
    pub lhs: f64,
    /// `(bytes / 2) * FLOPS / bw_d2h`.
    pub rhs: f64,
    /// Strict `lhs > rhs`.
    pub holds: bool,
}

/// Whether one block's prefill compute hides the previous block's V
/// offload.
pub fn prefill_overlap_check(s: u64, d: u64, b: u64, bytes: u64, profile: &HardwareProfile) -> OverlapCheck {
    let (sf, df, bf, bytes_f) = (s as f64, d as f64, b as f64, bytes as f64);
    let block_compute_s = (22.0 * bf * sf * df * df + 4.0 * bf * sf * sf * df) / profile.flops;
    let block_transfer_s = bytes_f * bf * sf * df / profile.bw_d2h;
    let lhs = 11.0 * df + 2.0 * sf;
    let rhs = bytes_f / 2.0 * (profile.flops / profile.bw_d2h);
    OverlapCheck {
        block_compute_s,
        block_transfer_s,
        block_holds: block_compute_s > block_transfer_s,
        lhs,
        rhs,
        holds: lhs > rhs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    /// `s / N`.
    pub ratio: f64,
    /// `bw_gpu / bw_h2d`.
    pub threshold: f64,
    pub beneficial: bool,
}

/// Reduced decode condition: TopN with offloaded V is no slower than
/// reading the full V from device memory when `s / N > bw_gpu / bw_h2d`.
pub fn decode_transfer_check(s: u64, top_n: u64, profile: &HardwareProfile) -> Result<TransferCheck> {
    if s == 0 || top_n == 0 {
        return Err(KcError::arg("s and N must be >= 1"));
    }
    let ratio = s as f64 / top_n as f64;
    let threshold = profile.bw_gpu / profile.bw_h2d;
    Ok(TransferCheck { ratio, threshold, beneficial: ratio > threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnreducedTransferCheck {
    /// `bytes * b * n * N * h / bw_h2d`.
    pub transfer_s: f64,
    /// Device-memory time saved on the weighted sum:
    /// `bytes * ((bns + bsd + bd) - (bnN + bNd + bd)) / bw_gpu`.
    pub saved_s: f64,
    pub beneficial: bool,
    /// `s / N` above which the unreduced form holds:
    /// `1 + d / (n + d) * bw_gpu / bw_h2d`.
    pub threshold: f64,
}

/// The decode condition with every term kept.
pub fn decode_transfer_check_unreduced(shape: &DecodeShape, top_n: u64, profile: &HardwareProfile) -> Result<UnreducedTransferCheck> {
    shape.validate()?;
    if top_n == 0 {
        return Err(KcError::arg("N must be >= 1"));
    }
    let DecodeShape { batch: b, seq_len: s, d_model: d, n_heads: n, head_dim: h, bytes } = *shape;
    let (b, s, d, n, h, nn, bytes) = (b as f64, s as f64, d as f64, n as f64, h as f64, top_n as f64, bytes as f64);
    let transfer_s = bytes * b * n * nn * h / profile.bw_h2d;
    let full = b * n * s + b * s * d + b * d;
    let topn = b * n * nn + b * nn * d + b * d;
    let saved_s = bytes * (full - topn) / profile.bw_gpu;
    Ok(UnreducedTransferCheck {
        transfer_s,
        saved_s,
        beneficial: transfer_s < saved_s,
        threshold: 1.0 + d / (n + d) * (profile.bw_gpu / profile.bw_h2d),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionInput {
    pub batch: u64,
    pub seq_len: u64,
    pub top_n: u64,
    pub resident_layers: u64,
    pub bytes: u64,
    /// Model H2D pulls as fully hidden behind compute.
    pub overlap_h2d: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub profile: String,
    pub approximate: bool,
    pub baseline_step_s: f64,
    pub kcache_step_s: f64,
    pub baseline_tokens_per_s: f64,
    pub kcache_tokens_per_s: f64,
    /// `kcache_tokens_per_s / baseline_tokens_per_s`.
    pub throughput_ratio: f64,
    pub baseline_mha_s: f64,
    pub kcache_mha_s: f64,
    pub h2d_bytes_per_step: u64,
    pub baseline_footprint: Footprint,
    pub kcache_footprint: Footprint,
    /// KV fast bytes plus weights within the profile's capacity.
    pub baseline_fits: bool,
    pub kcache_fits: bool,
}

/// Projected per-step decode time and throughput for both modes.
///
/// Every layer pays its roofline time; offloaded layers (`>= L`) use the
/// TopN rows plus the H2D pull. The output head is charged once per step.
pub fn project_run(config: &ModelConfig, input: &ProjectionInput, profile: &HardwareProfile) -> Result<Projection> {
    config.validate()?;
    profile.validate()?;
    let l = config.n_layers as u64;
    if input.resident_layers > l {
        return Err(KcError::arg(format!("resident layers {} exceeds {l}", input.resident_layers)));
    }
    let shape = DecodeShape {
        batch: input.batch,
        seq_len: input.seq_len,
        d_model: config.d_model as u64,
        n_heads: config.n_heads as u64,
        head_dim: config.head_dim as u64,
        bytes: input.bytes,
    };
    let f = config.ffn_hidden as u64;
    let full = decode_mha_cost(&shape, f, AttentionMode::Full)?;
    let topn = decode_mha_cost(&shape, f, AttentionMode::TopN(input.top_n))?;

    let (b, d, v) = (input.batch, config.d_model as u64, config.vocab as u64);
    let head = SubmoduleCost { flops: 2 * b * d * v, io_bytes: input.bytes * (d * v + b * d + b * v), h2d_bytes: 0 };
    let head_s = head.est_time(profile);

    let full_layer = full.layer_time(profile, input.overlap_h2d);
    let topn_layer = topn.layer_time(profile, input.overlap_h2d);
    let offloaded = l - input.resident_layers;
    let baseline_step_s = l as f64 * full_layer + head_s;
    let kcache_step_s = if offloaded == 0 {
        baseline_step_s
    } else {
        input.resident_layers as f64 * full_layer + offloaded as f64 * topn_layer + head_s
    };
    let baseline_mha_s = l as f64 * full.mha_time(profile);
    let kcache_mha_s = input.resident_layers as f64 * full.mha_time(profile) + offloaded as f64 * topn.mha_time(profile);

    let bytes = input.bytes as usize;
    let (batch, seq) = (input.batch as usize, input.seq_len as usize);
    let baseline_footprint = memory_footprint(config, batch, seq, CacheMode::Baseline, bytes)?;
    let kcache_footprint = memory_footprint(
        config,
        batch,
        seq,
        CacheMode::KCache { resident_layers: input.resident_layers as usize },
        bytes,
    )?;
    let fits = |fp: &Footprint| (fp.fast_bytes + fp.weight_bytes) as f64 <= profile.fast_capacity;

    let baseline_tokens_per_s = b as f64 / baseline_step_s;
    let kcache_tokens_per_s = b as f64 / kcache_step_s;
    Ok(Projection {
        profile: profile.name.clone(),
        approximate: profile.is_approximate(),
        baseline_step_s,
        kcache_step_s,
        baseline_tokens_per_s,
        kcache_tokens_per_s,
        throughput_ratio: kcache_tokens_per_s / baseline_tokens_per_s,
        baseline_mha_s,
        kcache_mha_s,
        h2d_bytes_per_step: offloaded * topn.weighted_sum.h2d_bytes,
        baseline_fits: fits(&baseline_footprint),
        kcache_fits: fits(&kcache_footprint),
        baseline_footprint,
        kcache_footprint,
    })
}
