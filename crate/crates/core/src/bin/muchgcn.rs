use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use muchgcn::config::RunConfig;
use muchgcn::experiment::run_experiment;
use muchgcn::graphio::{generate_synthetic_raw, write_tu_dataset, SyntheticFamily};
use muchgcn::verify::{
    bench_linearity, gradcheck_model, oracle_check, proposition1_check, tiny_config, BenchSpec, GradCheckOptions, Numeric,
};
use muchgcn::Variant;

#[derive(Parser)]
#[command(name = "muchgcn", version, about = "Multi-channel hierarchical GCN for graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated training from a JSON run config.
    Train(TrainArgs),
    /// Run a correctness check and print its JSON report.
    Verify(VerifyArgs),
    /// Time one training step over a K × C grid.
    Bench(BenchArgs),
    /// Write a synthetic dataset in TU format.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Replaces `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
    /// Directory for metrics.jsonl and summary.json when the config names
    /// no output paths.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyKind {
    Gradcheck,
    Oracle,
    Prop1,
}

#[derive(Args)]
struct VerifyArgs {
    kind: VerifyKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict gradcheck/oracle to one variant.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// Central-difference step for gradcheck.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Evaluate gradcheck differences with the engine's own f64 loss.
    #[arg(long)]
    engine_f64: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "K", value_delimiter = ',', default_values_t = [2, 4])]
    k: Vec<usize>,
    #[arg(long = "C", value_delimiter = ',', default_values_t = [2, 4])]
    c: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 100)]
    nodes: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.25)]
    assign_ratio: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    edge_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    family: SyntheticFamily,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Graphs for the oracle comparison go up to ten nodes.
const ORACLE_MAX_NODES: usize = 10;
const ORACLE_TOL: f64 = 1e-10;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CmdResult = Result<bool, Box<dyn std::error::Error>>;

fn emit(report: &impl Serialize, out: Option<&Path>) -> Result<(), Box<dyn std::error::Error>> {
    let text = serde_json::to_string_pretty(report)?;
    println!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text + "\n")?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?.with_overrides(&a.overrides)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        cfg.output.metrics_path.get_or_insert_with(|| dir.join("metrics.jsonl"));
        cfg.output.summary_path.get_or_insert_with(|| dir.join("summary.json"));
    }
    let summary = run_experiment(&cfg, a.parallel_folds)?;
    log::info!(
        "mean accuracy {:.4} ± {:.4} over {} folds",
        summary.mean_accuracy,
        summary.std_accuracy,
        summary.fold_accuracies.len()
    );
    Ok(true)
}

fn variants(only: Option<Variant>) -> Vec<Variant> {
    match only {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    }
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let out = a.out.as_deref();
    match a.kind {
        VerifyKind::Gradcheck => {
            let mut reports = Vec::new();
            for v in variants(a.variant) {
                let opts = GradCheckOptions {
                    h: a.h,
                    numeric: if a.engine_f64 { Numeric::EngineF64 } else { Numeric::DoubleDouble },
                    ..GradCheckOptions::default()
                };
                let r = gradcheck_model(&tiny_config(v), a.seed, &opts)?;
                log::info!("gradcheck {}: max relative error {:.3e}", r.variant, r.max_rel_error);
                reports.push(r);
            }
            let passed = reports.iter().all(|r| r.passed);
            emit(&reports, out)?;
            Ok(passed)
        }
        VerifyKind::Oracle => {
            let mut reports = Vec::new();
            for v in variants(a.variant) {
                let mut cfg = tiny_config(v);
                cfg.max_nodes = ORACLE_MAX_NODES;
                let r = oracle_check(&cfg, a.instances, a.seed, ORACLE_TOL)?;
                log::info!("oracle {}: max deviation {:.3e}", r.variant, r.max_abs_diff);
                reports.push(r);
            }
            let passed = reports.iter().all(|r| r.passed);
            emit(&reports, out)?;
            Ok(passed)
        }
        VerifyKind::Prop1 => {
            let r = proposition1_check(a.trials, a.seed)?;
            emit(&r, out)?;
            Ok(r.passed)
        }
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let spec = BenchSpec {
        nodes: a.nodes,
        hidden: a.hidden,
        layers: a.layers,
        assign_ratio: a.assign_ratio,
        batch_size: a.batch_size,
        edge_prob: a.edge_prob,
        k_values: a.k,
        c_values: a.c,
        reps: a.reps,
        seed: a.seed,
        ..BenchSpec::default()
    };
    spec.validate()?;
    let report = bench_linearity(&spec)?;
    emit(&report, a.out.as_deref())?;
    Ok(true)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let raw = generate_synthetic_raw(a.family, a.count, a.seed)?;
    write_tu_dataset(&raw, &a.out)?;
    log::info!("wrote {} graphs of {} to {}", raw.graphs.len(), raw.name, a.out.display());
    Ok(true)
}
