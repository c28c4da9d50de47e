//! Self-check suite run by `kcache verify`. Each property is named so a
//! failure points at what broke.

use serde::Serialize;

use crate::attention::{decode_probabilities, dropped_mass, Fault};
use crate::engine::{generate, EngineConfig, Prompt, Session};
use crate::error::Result;
use crate::kvcache::{CacheShape, TierPlacement, TieredKVCache};
use crate::model::{generate_weights, ModelConfig, ModelWeights};
use crate::perf::{
    decode_mha_cost, decode_transfer_check, decode_transfer_check_unreduced, kv_cache_bytes, prefill_overlap_check,
    project_run, AttentionMode, DecodeShape, HardwareProfile, ProjectionInput,
};
use crate::reference;
use crate::rng::SeededRng;
use crate::tensor::{arg_topk, matmul, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Ctx {
    opts: VerifyOptions,
    weights: ModelWeights,
}

type Check = fn(&Ctx) -> Result<std::result::Result<String, String>>;

pub const PROPERTIES: &[&str] = &[
    "matmul-oracle",
    "softmax",
    "topk",
    "oracle-equivalence",
    "exact-equivalence",
    "degenerate-residency",
    "monotone-coverage",
    "ledger-identities",
    "kv-cache-formula",
    "overlap-condition",
    "transfer-condition",
    "cost-asymptotes",
    "trend",
];

const CHECKS: &[Check] = &[
    matmul_oracle,
    softmax,
    topk,
    oracle_equivalence,
    exact_equivalence,
    degenerate_residency,
    monotone_coverage,
    ledger_identities,
    kv_cache_formula,
    overlap,
    transfer,
    asymptotes,
    trend,
];

/// Runs every property; errors inside a property count as a failure.
pub fn run_suite(opts: VerifyOptions) -> Result<Vec<PropertyResult>> {
    let ctx = Ctx { opts, weights: generate_weights(&ModelConfig::toy(), opts.seed)? };
    Ok(PROPERTIES
        .iter()
        .zip(CHECKS)
        .map(|(&name, check)| {
            let (passed, detail) = match check(&ctx) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, e.to_string()),
            };
            PropertyResult { name, passed, detail }
        })
        .collect())
}

fn ensure(cond: bool, ok: impl Into<String>, fail: impl FnOnce() -> String) -> std::result::Result<String, String> {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail())
    }
}

fn matmul_oracle(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let mut rng = SeededRng::new(ctx.opts.seed ^ 0x11);
    for trial in 0..20 {
        let (m, k, n) = (1 + rng.below(12) as usize, 1 + rng.below(12) as usize, 1 + rng.below(12) as usize);
        let a = Matrix::random(m, k, 2.0, &mut rng);
        let b = Matrix::random(k, n, 2.0, &mut rng);
        let c = matmul(&a, &b)?;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.get(i, p) * b.get(p, j);
                }
                if acc.to_bits() != c.get(i, j).to_bits() {
                    return Ok(Err(format!("trial {trial}: entry ({i},{j}) differs")));
                }
            }
        }
    }
    Ok(Ok("20 random products bitwise equal to the triple loop".into()))
}

fn softmax(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let mut rng = SeededRng::new(ctx.opts.seed ^ 0x22);
    let m = Matrix::random(50, 33, 30.0, &mut rng);
    let p = softmax_rows(&m);
    for r in 0..p.rows() {
        let sum: f32 = p.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-5 || p.row(r).iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Ok(Err(format!("row {r} sums to {sum}")));
        }
    }
    Ok(Ok("50 rows normalized".into()))
}

fn topk(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    if arg_topk(&[0.1, 0.4, 0.2, 0.3], 2)? != vec![1, 3] {
        return Ok(Err("hand example wrong".into()));
    }
    let mut rng = SeededRng::new(ctx.opts.seed ^ 0x33);
    for _ in 0..50 {
        let len = 1 + rng.below(40) as usize;
        let vals: Vec<f32> = (0..len).map(|_| rng.below(8) as f32).collect();
        let k = 1 + rng.below(len as u64 + 3) as usize;
        let idx = arg_topk(&vals, k)?;
        let kept_min = idx.iter().map(|&i| vals[i]).fold(f32::INFINITY, f32::min);
        let dropped_max = (0..len).filter(|i| !idx.contains(i)).map(|i| vals[i]).fold(f32::NEG_INFINITY, f32::max);
        if idx.len() != k.min(len) || !idx.windows(2).all(|w| w[0] < w[1]) || dropped_max > kept_min {
            return Ok(Err(format!("bad selection for k={k} over {vals:?}")));
        }
    }
    Ok(Ok("hand example plus 50 random selections".into()))
}

fn oracle_equivalence(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let w = &ctx.weights;
    let mut worst = 0.0f64;
    for run in 0..3u64 {
        let cfg = EngineConfig::baseline(ctx.opts.seed + run, 16, 8);
        let prompt = Prompt::random(cfg.seed, 1, cfg.prompt_len, w.config.vocab);
        let mut session = Session::new(w, cfg)?;
        let mut seq = prompt.rows[0].clone();
        let mut logits = session.prefill(&prompt.rows)?;
        for _ in 0..8 {
            worst = worst.max(reference::relative_error(logits.row(0), &reference::next_logits(w, &seq)?));
            let next = crate::engine::greedy(&logits);
            seq.push(next[0]);
            logits = session.decode_step(&next)?.logits;
        }
    }
    Ok(ensure(worst <= 1e-5, format!("max relative error {worst:.3e}"), || format!("relative error {worst:.3e} > 1e-5")))
}

fn bitwise_equal(a: &crate::engine::GenerationReport, b: &crate::engine::GenerationReport) -> bool {
    a.tokens == b.tokens
        && a.final_logits.len() == b.final_logits.len()
        && a.final_logits.iter().flatten().zip(b.final_logits.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn compare_with_baseline(ctx: &Ctx, seeds: u64, make: impl Fn(u64) -> EngineConfig) -> Result<std::result::Result<String, String>> {
    let w = &ctx.weights;
    for i in 0..seeds {
        let seed = ctx.opts.seed.wrapping_add(100 + i);
        let mut kc = make(seed);
        kc.fault = ctx.opts.fault;
        let base = EngineConfig { mode: crate::engine::Mode::Baseline, top_n: 0, resident_layers: 0, fault: None, ..kc.clone() };
        let prompt = Prompt::random(seed, kc.batch, kc.prompt_len, w.config.vocab);
        let a = generate(&base, w, &prompt)?;
        let b = generate(&kc, w, &prompt)?;
        if !bitwise_equal(&a, &b) {
            return Ok(Err(format!("seed {seed}: N={} L={} diverges from baseline", kc.top_n, kc.resident_layers)));
        }
    }
    Ok(Ok(format!("{seeds} runs bitwise equal to baseline")))
}

fn exact_equivalence(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let max_seq = ctx.weights.config.max_seq;
    compare_with_baseline(ctx, 5, |seed| EngineConfig::kcache(seed, 24, 8, max_seq, 0).with_batch(2))
}

fn degenerate_residency(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let l = ctx.weights.config.n_layers;
    let ones = compare_with_baseline(ctx, 2, |seed| EngineConfig::kcache(seed, 16, 6, 1, l))?;
    if ones.is_err() {
        return Ok(ones);
    }
    compare_with_baseline(ctx, 2, |seed| EngineConfig::kcache(seed, 16, 6, 16, l))
}

fn monotone_coverage(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let mut rng = SeededRng::new(ctx.opts.seed ^ 0x44);
    let shape = CacheShape { batch: 1, n_layers: 1, n_heads: 4, head_dim: 16 };
    let d = shape.d_model();
    for inst in 0..100 {
        let s = 1 + rng.below(96) as usize;
        let mut cache = TieredKVCache::new(shape, TierPlacement::all_resident(1, 2)?)?;
        let k = Matrix::random(s, d, 3.0, &mut rng);
        let v = Matrix::random(s, d, 1.0, &mut rng);
        cache.append_kv(0, &[k.data()], &[v.data()])?;
        let q = Matrix::random(1, d, 3.0, &mut rng);
        for probs in decode_probabilities(&q, &cache, 0)? {
            let mut prev = f32::INFINITY;
            let mut n = 1;
            while n <= s {
                let dm = dropped_mass(&probs, n)?;
                if dm > prev {
                    return Ok(Err(format!("instance {inst}: dropped mass rose at N={n}")));
                }
                prev = dm;
                n *= 2;
            }
        }
    }
    Ok(Ok("100 instances, no violations".into()))
}

fn ledger_identities(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let w = &ctx.weights;
    for n in [1, 4, 64] {
        for l in [0, 2, 4] {
            let cfg = EngineConfig::kcache(ctx.opts.seed, 12, 6, n, l).with_batch(2);
            let prompt = Prompt::random(cfg.seed, 2, 12, w.config.vocab);
            let r = generate(&cfg, w, &prompt)?;
            if !r.ledger_matches() {
                return Ok(Err(format!("N={n} L={l}: ledger {:?} expected {:?}", r.ledger, r.expected_ledger)));
            }
        }
    }
    Ok(Ok("3x3 (N, L) grid exact".into()))
}

fn kv_cache_formula(_: &Ctx) -> Result<std::result::Result<String, String>> {
    let v = kv_cache_bytes(8, 32768, 4096, 32, 2)?;
    Ok(ensure(v == 137_438_953_472, format!("{v} bytes"), || format!("got {v}")))
}

fn overlap(_: &Ctx) -> Result<std::result::Result<String, String>> {
    let a100 = HardwareProfile::a100_80g();
    for s in [1, 128, 32768] {
        let c = prefill_overlap_check(s, 4096, 1, 2, &a100);
        if !c.holds || c.holds != c.block_holds {
            return Ok(Err(format!("s={s}: lhs {} rhs {}", c.lhs, c.rhs)));
        }
    }
    Ok(Ok("prefill transfer hidden for s in {1, 128, 32768}".into()))
}

fn transfer(ctx: &Ctx) -> Result<std::result::Result<String, String>> {
    let a100 = HardwareProfile::a100_80g();
    let c = decode_transfer_check(8192, 128, &a100)?;
    if (c.threshold - 63.72).abs() > 0.01 || !c.beneficial {
        return Ok(Err(format!("threshold {} beneficial {}", c.threshold, c.beneficial)));
    }
    let mut rng = SeededRng::new(ctx.opts.seed ^ 0x55);
    for _ in 0..1000 {
        let n = 1 + rng.below(64);
        let h = 1 + rng.below(256);
        let nn = 1 + rng.below(512);
        let s = nn + rng.below(nn * 200);
        let sh = DecodeShape { batch: 1 + rng.below(32), seq_len: s, d_model: n * h, n_heads: n, head_dim: h, bytes: 2 };
        let reduced = decode_transfer_check(s, nn, &a100)?;
        if reduced.beneficial != (s as f64 / nn as f64 > reduced.threshold) {
            return Ok(Err(format!("s={s} N={nn}: verdict inconsistent with ratio")));
        }
        let full = decode_transfer_check_unreduced(&sh, nn, &a100)?;
        if full.beneficial != reduced.beneficial {
            let (lo, hi) = (reduced.threshold.min(full.threshold), reduced.threshold.max(full.threshold));
            if reduced.ratio < lo * (1.0 - 1e-9) || reduced.ratio > hi * (1.0 + 1e-9) {
                return Ok(Err(format!("s={s} N={nn}: forms disagree outside the threshold band")));
            }
        }
    }
    Ok(Ok(format!("threshold {:.2}; forms agree outside the band", c.threshold)))
}

fn asymptotes(_: &Ctx) -> Result<std::result::Result<String, String>> {
    for b in [1u64, 8] {
        let sh = DecodeShape { batch: b, seq_len: 65536, d_model: 16384, n_heads: 64, head_dim: 256, bytes: 2 };
        let c = decode_mha_cost(&sh, 1, AttentionMode::Full)?;
        let checks = [
            ("qkv", c.qkv.arithmetic_intensity(), b as f64),
            ("out_proj", c.out_proj.arithmetic_intensity(), b as f64),
            ("scores", c.scores.arithmetic_intensity(), 1.0),
            ("weighted_sum", c.weighted_sum.arithmetic_intensity(), 1.0),
        ];
        for (name, got, want) in checks {
            if ((got - want) / want).abs() > 0.05 {
                return Ok(Err(format!("b={b} {name}: intensity {got:.4} vs {want}")));
            }
        }
    }
    Ok(Ok("intensities within 5% of b and 1".into()))
}

fn trend(_: &Ctx) -> Result<std::result::Result<String, String>> {
    let a100 = HardwareProfile::a100_80g();
    let cfg = ModelConfig::llama2_7b_shape();
    let mut prev = 0.0;
    let mut ratios = Vec::new();
    for s in [1024, 4096, 7168, 15360] {
        let input = ProjectionInput { batch: 8, seq_len: s, top_n: 128, resident_layers: 0, bytes: 2, overlap_h2d: false };
        let r = project_run(&cfg, &input, &a100)?.throughput_ratio;
        if r < prev {
            return Ok(Err(format!("ratio fell at s={s}: {r:.4} < {prev:.4}")));
        }
        prev = r;
        ratios.push(format!("{r:.3}"));
    }
    Ok(ensure(prev > 1.0, format!("ratios {}", ratios.join(" ")), || format!("ratio {prev:.4} <= 1 at s=15360")))
}
