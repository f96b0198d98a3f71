mod config;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sga_core::aggregator::ForwardOptions;
use sga_core::analysis::{
    entries_to_jsonl, layer_stats, probe_dense, rotation_consistency, stats_to_csv, topk_entries, write_attention_dump,
    ProbeOptions, RotationMode, DEFAULT_ELEMENT_BUDGET, DEFAULT_K_POOL, DEFAULT_K_REPORT, DEFAULT_TOP_K,
};
use sga_core::bench::{environment_note, records_to_csv, run_benchmark, sweep, Phase, SweepOutcome, SweepSpec};
use sga_core::model::{init_tokens, make_model};
use sga_core::output::{write_atomic, write_json_atomic};
use sga_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "sga", version, about = "Subsampled global attention: schedules, verification, benchmarks, analysis")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set schedule.sigma=4`
    /// (also accepted as `--schedule.sigma=4`).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved per-layer schedule.
    Schedule,
    /// Check the fast kernel against the exact reference.
    Verify(VerifyArgs),
    /// Time a schedule against the dense baseline.
    Bench(BenchArgs),
    /// Probe attention maps of global layers.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Maximum relative error of the kernel against the reference.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Perturb one kernel output to exercise the failure path.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    /// attn_layer, attn_schedule or forward.
    #[arg(long, default_value = "forward")]
    phase: Phase,
    /// Sweep file (TOML with [base], [grid] and [[points]]).
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Also time the sigma=1 configuration.
    #[arg(long)]
    dense_baseline: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Global layers to dump and rotation-test (all when omitted).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_K_POOL)]
    k_pool: usize,
    #[arg(long, default_value_t = DEFAULT_K_REPORT)]
    k_report: usize,
    /// Entries per layer in the top-k files and statistics.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Grid radius for cross-frame alignment.
    #[arg(long, default_value_t = 0)]
    radius: usize,
    /// re_encode or relabel.
    #[arg(long, default_value = "re_encode")]
    rotation: String,
    /// Largest probe matrix, in elements.
    #[arg(long, default_value_t = DEFAULT_ELEMENT_BUDGET)]
    budget: usize,
}

enum Failure {
    Verification(String),
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::Budget(_) | Error::Shape(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

/// Rewrites `--section.key=value` into `--set section.key=value`.
fn normalize_args(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for a in args {
        match a.strip_prefix("--") {
            Some(rest) if rest.split('=').next().is_some_and(|k| k.contains('.')) && rest.contains('=') => {
                out.push("--set".to_string());
                out.push(rest.to_string());
            }
            _ => out.push(a),
        }
    }
    out
}

fn configure_workers() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("SGA_WORKERS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Config(format!("SGA_WORKERS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunNote<'a> {
    command: &'a str,
    config_id: String,
    timestamp: String,
    environment: String,
}

/// Resolved configuration (deterministic) and a run note holding the
/// timestamp, kept apart so result files stay byte-identical across runs.
fn write_run_files(config: &RunConfig, dir: &Path, command: &str) -> Result<(), Error> {
    write_json_atomic(&dir.join("config.json"), config)?;
    let note = RunNote {
        command,
        config_id: config.config_id(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        environment: environment_note(),
    };
    write_json_atomic(&dir.join(format!("run_{command}.json")), &note)
}

fn cmd_schedule(config: &RunConfig) -> Result<(), Failure> {
    let schedule = config.layer_schedule()?;
    let model_config = config.model_config();
    #[derive(Serialize)]
    struct Row {
        layer: usize,
        block: usize,
        mode: String,
    }
    let blocks: Vec<usize> = (0..model_config.num_blocks).filter(|&b| model_config.is_global_block(b)).collect();
    let rows: Vec<Row> = schedule
        .modes
        .iter()
        .enumerate()
        .map(|(layer, m)| Row { layer, block: blocks[layer], mode: m.to_string() })
        .collect();
    println!("config {}", config.config_id());
    println!("{:>5}  {:>5}  mode", "layer", "block");
    for r in &rows {
        println!("{:>5}  {:>5}  {}", r.layer, r.block, r.mode);
    }
    let dir = config.run_dir();
    write_json_atomic(
        &dir.join("schedule.json"),
        &serde_json::json!({ "config_id": config.config_id(), "schedule": config.schedule_spec(), "layers": rows }),
    )?;
    write_run_files(config, &dir, "schedule")?;
    Ok(())
}

fn cmd_verify(config: &RunConfig, args: &VerifyArgs) -> Result<(), Failure> {
    if args.cases == 0 {
        return Err(Failure::Config("--cases must be at least 1".into()));
    }
    if !(args.tolerance >= 0.0) {
        return Err(Failure::Config("--tolerance must be nonnegative".into()));
    }
    let report = verify::run(config, args.cases, args.tolerance, args.inject_fault)?;
    let dir = config.run_dir();
    write_json_atomic(&dir.join("verify.json"), &report)?;
    write_run_files(config, &dir, "verify")?;
    println!("oracle: {}/{} passed (max relative error {:.2e}, tolerance {:.1e})", report.passed, report.cases, report.max_relative_error, report.tolerance);
    for f in report.failures.iter().take(10) {
        println!(
            "  case {} failed: sigma={} strategy={} layout={:?} diagonal={} mean_fill={} error={:.2e}",
            f.case, f.sigma, f.strategy, f.layout, f.diagonal, f.mean_fill, f.relative_error
        );
    }
    for c in &report.degeneracy {
        println!("{}: {} ({:.1e}, tolerance {:.0e})", c.name, if c.passed { "ok" } else { "FAILED" }, c.value, c.tolerance);
    }
    if report.all_passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{} of {} cases failed", report.cases - report.passed, report.cases)))
    }
}

fn write_bench(config: &RunConfig, dir: &Path, outcome: &SweepOutcome) -> Result<(), Error> {
    if config.wants("csv") {
        write_atomic(&dir.join("bench.csv"), &records_to_csv(&outcome.records)?)?;
    }
    if config.wants("json") {
        write_json_atomic(&dir.join("bench.json"), outcome)?;
    }
    Ok(())
}

fn cmd_bench(config: &RunConfig, args: &BenchArgs) -> Result<(), Failure> {
    let outcome = match &args.sweep {
        Some(path) => {
            let spec = SweepSpec::load(path)?;
            sweep(&spec)
        }
        None => {
            let base = config.bench_config(args.phase, args.repeats, args.warmups);
            let mut configs = vec![base.clone()];
            if args.dense_baseline {
                configs.push(sga_core::bench::BenchConfig { sigma: 1, ..base });
            }
            let mut outcome = SweepOutcome::default();
            for c in configs {
                outcome.records.push(run_benchmark(&c)?);
            }
            outcome
        }
    };
    for r in &outcome.records {
        println!(
            "{} N={} sigma={} {}: {:.4} s (dense {:.4} s), speedup {:.2}",
            r.config_id, r.config.frames, r.config.sigma, r.phase.name(), r.timing.median_s, r.dense.median_s, r.speedup
        );
    }
    for f in &outcome.failures {
        println!("{} failed: {}", f.config_id, f.error);
    }
    let dir = config.run_dir();
    write_bench(config, &dir, &outcome)?;
    write_run_files(config, &dir, "bench")?;
    Ok(())
}

fn cmd_analyze(config: &RunConfig, args: &AnalyzeArgs) -> Result<(), Failure> {
    let num_global = config.num_global();
    let layers: Vec<usize> = if args.layers.is_empty() { (0..num_global).collect() } else { args.layers.clone() };
    if let Some(&bad) = layers.iter().find(|&&l| l >= num_global) {
        return Err(Failure::Config(format!("layer {bad} out of range: the model has {num_global} global layers")));
    }
    if args.k_report > args.k_pool {
        return Err(Failure::Config("--k-report must not exceed --k-pool".into()));
    }
    let mode = match args.rotation.as_str() {
        "re_encode" => RotationMode::ReEncode,
        "relabel" => RotationMode::Relabel,
        other => return Err(Failure::Config(format!("unknown rotation mode {other:?}"))),
    };
    let model = make_model(config.model_config())?;
    let d = &config.data;
    let batch = init_tokens(model.config(), d.batch, d.frames, d.n_h, d.n_w, d.seed)?;
    let options = ProbeOptions {
        element_budget: args.budget,
        forward: ForwardOptions { score_maps: config.score_maps()?.map(|m| vec![m; d.batch]) },
        ..ProbeOptions::default()
    };
    let dir = config.run_dir();
    let attn = dir.join("attn");
    let stats = layer_stats(&model, &batch, args.top_k, args.radius, &options)?;
    write_atomic(&attn.join("stats.csv"), &stats_to_csv(&stats)?)?;
    for &layer in &layers {
        let matrix = probe_dense(&model, &batch, layer, &options)?.restricted();
        write_attention_dump(&attn, layer, &matrix)?;
        write_atomic(&attn.join(format!("topk_layer_{layer:02}.jsonl")), &entries_to_jsonl(&topk_entries(&matrix, args.top_k))?)?;
        let report = rotation_consistency(&model, &batch, layer, args.k_pool, args.k_report, mode, &options)?;
        write_json_atomic(&attn.join(format!("rotation_layer_{layer:02}.json")), &report)?;
        let s = &stats[layer];
        println!(
            "layer {layer:2}: max {:.4} entropy {:.3} self {:.2} aligned {:.2} rotation overlap {:.2}",
            s.max_weight, s.entropy, s.self_fraction, s.aligned_fraction, report.overlap_fraction
        );
    }
    write_run_files(config, &dir, "analyze")?;
    println!("wrote {}", attn.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_workers()?;
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Schedule => cmd_schedule(&config),
        Command::Verify(a) => cmd_verify(&config, a),
        Command::Bench(a) => cmd_bench(&config, a),
        Command::Analyze(a) => cmd_analyze(&config, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(normalize_args(std::env::args()));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
