use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kcache::attention::Fault;
use kcache::engine::{generate, EngineConfig, GenerationReport, Mode, Prompt};
use kcache::kvcache::{memory_footprint, CacheMode};
use kcache::model::{generate_weights, load_weights, save_weights, ModelConfig, ModelWeights, PRESETS};
use kcache::perf::{
    decode_mha_cost, decode_transfer_check, decode_transfer_check_unreduced, kv_cache_bytes, prefill_overlap_check,
    project_run, AttentionMode, CostBreakdown, DecodeShape, HardwareProfile, ProjectionInput,
};
use kcache::sweep::{run_sweep, threads_from_env, to_csv, SweepSpec, TopNValue};
use kcache::verify::{run_suite, VerifyOptions};
use kcache::KcError;

#[derive(Parser)]
#[command(name = "kcache", version, about = "K-resident / V-offloaded KV cache inference runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tokens and write a JSON run report.
    Gen(GenArgs),
    /// Print the analytic cost breakdown and transfer verdicts.
    Perf(PerfArgs),
    /// Run a parameter grid and emit one CSV row per cell.
    Sweep(SweepArgs),
    /// Run the self-check suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliMode {
    Baseline,
    Kcache,
}

#[derive(Args)]
struct ModelArgs {
    /// Built-in model shape (toy, 7b-shape).
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Weight file to load instead of generating from the preset.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed for generated weights and prompts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "baseline")]
    mode: CliMode,
    /// TopN size (kcache mode).
    #[arg(long)]
    topn: Option<usize>,
    /// Layers whose V stays in the fast tier (kcache mode).
    #[arg(long)]
    resident_layers: Option<usize>,
    /// Rescale the TopN weights to sum to one (kcache mode).
    #[arg(long)]
    renormalize: bool,
    /// Apply TopN on resident layers too (kcache mode).
    #[arg(long)]
    topn_on_resident: bool,
    #[arg(long, default_value_t = 64)]
    prompt_len: usize,
    /// Prompt token ids, one line of space-separated ids per batch row.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    gen_len: usize,
    #[arg(long, alias = "b", default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    bytes: usize,
    /// Fast-tier capacity in bytes for the KV cache.
    #[arg(long)]
    fast_capacity: Option<u64>,
    /// Attach a throughput projection for this hardware profile.
    #[arg(long)]
    profile: Option<String>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write a per-step CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the weights used for the run to this file.
    #[arg(long)]
    save_model: Option<PathBuf>,
}

#[derive(Args)]
struct PerfArgs {
    /// Model shape supplying defaults for d, n, l and the FFN width.
    #[arg(long, default_value = "7b-shape")]
    preset: String,
    #[arg(long, default_value = "a100-80g")]
    profile: String,
    #[arg(long, alias = "batch", default_value_t = 1)]
    b: u64,
    #[arg(long, default_value_t = 4096)]
    s: u64,
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    l: Option<u64>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    topn: Option<u64>,
    #[arg(long, default_value_t = 0)]
    resident_layers: u64,
    #[arg(long, default_value_t = 2)]
    bytes: u64,
    /// Treat H2D pulls as hidden behind compute in the projection.
    #[arg(long)]
    overlap_h2d: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "a100-80g")]
    profile: String,
    /// TopN axis: integers, `s` or `s/K`.
    #[arg(long, value_delimiter = ',', default_value = "s/16,s/4,s")]
    topn: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    resident_layers: Vec<usize>,
    /// Total context axis.
    #[arg(long, alias = "seq-len", value_delimiter = ',', default_value = "128")]
    s: Vec<usize>,
    #[arg(long, alias = "b", value_delimiter = ',', default_value = "1")]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    gen_len: usize,
    #[arg(long, default_value_t = 2)]
    bytes: usize,
    #[arg(long)]
    renormalize: bool,
    #[arg(long)]
    overlap_h2d: bool,
    /// Skip engine runs; transfer columns come from the closed form.
    #[arg(long)]
    no_measure: bool,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliFault {
    UnsortedTopn,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: break an invariant on purpose.
    #[arg(long, value_enum)]
    inject_fault: Option<CliFault>,
    /// Write per-property results as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(KcError),
    Verification,
}

impl From<KcError> for Failure {
    fn from(e: KcError) -> Self {
        match e {
            KcError::Argument(m) => Failure::Usage(m),
            other => Failure::Run(other),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Perf(a) => cmd_perf(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, KcError::Capacity { .. }) { 3 } else { 1 })
        }
        Err(Failure::Verification) => ExitCode::from(4),
    }
}

fn preset(name: &str) -> Result<ModelConfig, Failure> {
    ModelConfig::preset(name)
        .ok_or_else(|| Failure::Usage(format!("unknown preset '{name}' (available: {})", PRESETS.join(", "))))
}

fn profile(name: &str) -> Result<HardwareProfile, Failure> {
    HardwareProfile::resolve(name).map_err(|e| match e {
        KcError::Io(_) | KcError::Argument(_) => Failure::Usage(format!("cannot resolve profile '{name}': {e}")),
        other => Failure::Usage(other.to_string()),
    })
}

/// Weights from `--model`, or generated from the preset. `None` for the
/// shape-only preset.
fn weights(args: &ModelArgs) -> Result<Option<ModelWeights>, Failure> {
    if let Some(path) = &args.model {
        return Ok(Some(load_weights(path).map_err(Failure::Run)?));
    }
    let cfg = preset(&args.preset)?;
    if args.preset == "7b-shape" {
        return Ok(None);
    }
    Ok(Some(generate_weights(&cfg, args.seed)?))
}

fn write(path: &PathBuf, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Run(e.into()))
}

fn thousands(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let kcache_only = [
        (a.topn.is_some(), "--topn"),
        (a.resident_layers.is_some(), "--resident-layers"),
        (a.renormalize, "--renormalize"),
        (a.topn_on_resident, "--topn-on-resident"),
    ];
    if a.mode == CliMode::Baseline {
        if let Some((_, flag)) = kcache_only.iter().find(|(set, _)| *set) {
            return Err(Failure::Usage(format!("{flag} requires --mode kcache")));
        }
    }
    let w = weights(&a.model)?
        .ok_or_else(|| Failure::Usage("7b-shape is shape-only; use `perf` or a toy-scale model".into()))?;
    if let Some(path) = &a.save_model {
        save_weights(&w, path).map_err(Failure::Run)?;
    }
    let prompt = match &a.prompt_file {
        Some(path) => Prompt::from_file(path)?,
        None => Prompt::random(a.model.seed, a.batch, a.prompt_len, w.config.vocab),
    };
    let mut cfg = match a.mode {
        CliMode::Baseline => EngineConfig::baseline(a.model.seed, prompt.len(), a.gen_len),
        CliMode::Kcache => {
            let n = a.topn.ok_or_else(|| Failure::Usage("--mode kcache requires --topn".into()))?;
            let mut c = EngineConfig::kcache(a.model.seed, prompt.len(), a.gen_len, n, a.resident_layers.unwrap_or(0));
            c.renormalize = a.renormalize;
            c.topn_on_resident = a.topn_on_resident;
            c
        }
    }
    .with_batch(prompt.batch());
    cfg.bytes_per_element = a.bytes;
    cfg.fast_capacity = a.fast_capacity;

    let mut report = generate(&cfg, &w, &prompt)?;
    if a.model.model.is_none() {
        report.weights_seed = Some(a.model.seed);
    }
    if let Some(p) = &a.profile {
        report.attach_projection(&profile(p)?, false)?;
    }
    if let Some(path) = &a.report {
        write(path, &report.to_json())?;
    }
    if let Some(path) = &a.out {
        write(path, &report.steps_csv())?;
    }
    print_gen_summary(&report);
    Ok(())
}

fn print_gen_summary(r: &GenerationReport) {
    let e = &r.engine;
    match e.mode {
        Mode::Baseline => println!("mode: baseline"),
        Mode::KCache => println!(
            "mode: kcache (N={}, L={}, renormalize={})",
            e.top_n, e.resident_layers, e.renormalize
        ),
    }
    println!("prompt: {} x {} tokens, generated {} per row", e.batch, e.prompt_len, e.gen_len);
    for (i, row) in r.tokens.iter().enumerate() {
        let toks: Vec<String> = row.iter().map(u32::to_string).collect();
        println!("tokens[{i}]: {}", toks.join(" "));
    }
    match r.mean_dropped_mass() {
        Some(m) => println!("mean dropped mass: {m:.6}"),
        None => println!("mean dropped mass: n/a (no TopN steps)"),
    }
    println!("ledger D2H: {} bytes", thousands(r.ledger.d2h_bytes));
    println!("ledger H2D: {} bytes", thousands(r.ledger.h2d_bytes));
    println!("ledger matches closed form: {}", r.ledger_matches());
    println!("fast tier: {} bytes, slow tier: {} bytes", thousands(r.fast_bytes), thousands(r.slow_bytes));
    if let Some(p) = &r.projection {
        println!(
            "projection ({}): baseline {:.1} tok/s, kcache {:.1} tok/s, ratio {:.4}",
            p.profile, p.baseline_tokens_per_s, p.kcache_tokens_per_s, p.throughput_ratio
        );
    }
}

fn print_breakdown(title: &str, c: &CostBreakdown, p: &HardwareProfile) {
    println!("{title}");
    println!(
        "  {:<13} {:>16} {:>16} {:>12} {:>10} {:>12}",
        "submodule", "flops", "io_bytes", "h2d_bytes", "AI", "est_time_s"
    );
    for (name, row) in c.rows() {
        println!(
            "  {:<13} {:>16} {:>16} {:>12} {:>10.3} {:>12.4e}",
            name,
            row.flops,
            row.io_bytes,
            row.h2d_bytes,
            row.arithmetic_intensity(),
            row.est_time(p)
        );
    }
}

fn cmd_perf(a: PerfArgs) -> CliResult {
    let base = preset(&a.preset)?;
    let prof = profile(&a.profile)?;
    let d = a.d.unwrap_or(base.d_model as u64);
    let n = a.n.unwrap_or(base.n_heads as u64);
    let l = a.l.unwrap_or(base.n_layers as u64);
    if n == 0 || !d.is_multiple_of(n) {
        return Err(Failure::Usage(format!("d={d} must be a positive multiple of n={n}")));
    }
    let h = d / n;
    let ffn = if a.d.is_some() { kcache::model::default_ffn_hidden(d as usize) as u64 } else { base.ffn_hidden as u64 };
    let shape = DecodeShape { batch: a.b, seq_len: a.s, d_model: d, n_heads: n, head_dim: h, bytes: a.bytes };

    println!("profile: {}", prof.name);
    if let Some(note) = &prof.note {
        println!("note: {note}");
    }
    println!("shape: b={} s={} d={d} n={n} h={h} l={l} bytes={}", a.b, a.s, a.bytes);
    println!("KV cache: {} bytes", thousands(kv_cache_bytes(a.b, a.s, d, l, a.bytes)?));

    let full = decode_mha_cost(&shape, ffn, AttentionMode::Full)?;
    print_breakdown("decode cost per layer (full attention):", &full, &prof);
    if let Some(top_n) = a.topn {
        let topn = decode_mha_cost(&shape, ffn, AttentionMode::TopN(top_n))?;
        print_breakdown(&format!("decode cost per layer (TopN, N={top_n}):"), &topn, &prof);
    }

    let ov = prefill_overlap_check(a.s, d, a.b, a.bytes, &prof);
    println!("prefill overlap: {} (11d+2s = {:.1} vs {:.1})", ov.holds, ov.lhs, ov.rhs);
    if let Some(top_n) = a.topn {
        let t = decode_transfer_check(a.s, top_n, &prof)?;
        println!("transfer beneficial: {} (ratio {:.1} {} {:.1})", t.beneficial, t.ratio, if t.beneficial { ">" } else { "<=" }, t.threshold);
        let u = decode_transfer_check_unreduced(&shape, top_n, &prof)?;
        println!(
            "transfer beneficial (unreduced): {} (threshold {:.2}, transfer {:.4e} s vs saved {:.4e} s)",
            u.beneficial, u.threshold, u.transfer_s, u.saved_s
        );
    }

    let model = ModelConfig {
        n_layers: l as usize,
        d_model: d as usize,
        n_heads: n as usize,
        head_dim: h as usize,
        ffn_hidden: ffn as usize,
        max_seq: base.max_seq.max(a.s as usize),
        ..base
    };
    let fp_base = memory_footprint(&model, a.b as usize, a.s as usize, CacheMode::Baseline, a.bytes as usize)?;
    let fp_kc = memory_footprint(
        &model,
        a.b as usize,
        a.s as usize,
        CacheMode::KCache { resident_layers: a.resident_layers as usize },
        a.bytes as usize,
    )?;
    println!(
        "footprint baseline: fast {} bytes, slow {} bytes, weights {} bytes",
        thousands(fp_base.fast_bytes),
        thousands(fp_base.slow_bytes),
        thousands(fp_base.weight_bytes)
    );
    println!(
        "footprint kcache (L={}): fast {} bytes, slow {} bytes",
        a.resident_layers,
        thousands(fp_kc.fast_bytes),
        thousands(fp_kc.slow_bytes)
    );
    if let Some(top_n) = a.topn {
        let input = ProjectionInput {
            batch: a.b,
            seq_len: a.s,
            top_n,
            resident_layers: a.resident_layers,
            bytes: a.bytes,
            overlap_h2d: a.overlap_h2d,
        };
        let p = project_run(&model, &input, &prof)?;
        println!(
            "projection: baseline {:.2} tok/s, kcache {:.2} tok/s, ratio {:.4}{}",
            p.baseline_tokens_per_s,
            p.kcache_tokens_per_s,
            p.throughput_ratio,
            if p.approximate { " (approximate profile)" } else { "" }
        );
        println!("fits fast tier: baseline {}, kcache {}", p.baseline_fits, p.kcache_fits);
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let model_cfg = match &a.model.model {
        Some(_) => None,
        None => Some(preset(&a.model.preset)?),
    };
    let w = if a.no_measure { None } else { weights(&a.model)? };
    let model = match (&w, model_cfg) {
        (Some(w), _) => w.config,
        (None, Some(cfg)) => cfg,
        (None, None) => load_weights(a.model.model.as_ref().expect("model path")).map_err(Failure::Run)?.config,
    };
    let spec = SweepSpec {
        top_n: a.topn.iter().map(|t| t.parse::<TopNValue>()).collect::<Result<_, _>>()?,
        resident_layers: a.resident_layers,
        seq_len: a.s,
        batch: a.batch,
        gen_len: a.gen_len,
        bytes_per_element: a.bytes,
        seed: a.model.seed,
        renormalize: a.renormalize,
        overlap_h2d: a.overlap_h2d,
    };
    let prof = profile(&a.profile)?;
    let rows = run_sweep(&spec, &model, w.as_ref(), &prof, threads_from_env()?)?;
    let csv = to_csv(&rows);
    match &a.out {
        Some(path) => {
            write(path, &csv)?;
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult {
    let fault = a.inject_fault.map(|f| match f {
        CliFault::UnsortedTopn => Fault::UnsortedTopN,
    });
    let results = run_suite(VerifyOptions { seed: a.seed, fault })?;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if let Some(path) = &a.report {
        write(path, &serde_json::to_string_pretty(&results).expect("results serialize"))?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} properties passed", results.len());
        Ok(())
    } else {
        println!("failed: {}", failed.join(", "));
        Err(Failure::Verification)
    }
}
