use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cocoba::corpus::{load_dataset, write_dataset, Dataset};
use cocoba::density::auto_bandwidth;
use cocoba::embeddings::{load_snapshot, write_snapshot, EmbeddingSnapshot};
use cocoba::engine::EngineConfig;
use cocoba::harness::{make_synthetic_dataset, run_experiment, summarize, write_outputs, ExperimentSpec, Summary, SynthSpec};
use cocoba::strategy::Strategy;

#[derive(Parser)]
#[command(name = "al-bench", version, about = "Learning-curve benchmarks with a gold-label oracle", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, seed) cell and write curves plus a summary.
    Run(RunArgs),
    /// Write a synthetic dataset and its embedding snapshot.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    /// Initial snapshot; repeat to add alternates cycled in by --swap-every.
    #[arg(long, required = true)]
    snapshot: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "cocoba,uncertainty,random")]
    strategy: Vec<Strategy>,
    /// Number of seeds, run as 1..=N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 50)]
    cold_start: usize,
    #[arg(long, default_value_t = 1.0)]
    budget_frac: f64,
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    #[arg(long, default_value_t = 350)]
    swap_every: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 15)]
    estimators: usize,
    /// Doc-view kernel bandwidth, or `auto` for the mean pairwise distance.
    #[arg(long, default_value = "30")]
    bandwidth_doc: String,
    /// Word-view kernel bandwidth, or `auto`.
    #[arg(long, default_value = "45")]
    bandwidth_word: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 0.18)]
    pos_rate: f64,
    #[arg(long, default_value_t = 8)]
    contexts: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn bandwidth(arg: &str, dataset: &Dataset, snap: &EmbeddingSnapshot, doc: bool) -> Result<f64> {
    if arg != "auto" {
        return arg.parse().with_context(|| format!("bad bandwidth {arg:?}"));
    }
    let mut points = Vec::with_capacity(dataset.len());
    for p in dataset.postings() {
        let v = snap.get(p.id()).with_context(|| format!("snapshot lacks {:?}", p.id()))?;
        points.push(if doc { v.doc.as_slice() } else { v.word.as_slice() });
    }
    Ok(auto_bandwidth(&points, 0)?)
}

fn print_summary(s: &Summary) {
    print!("{:<12}", "strategy");
    for f in &s.fractions {
        print!(" {:>8}", format!("{:.0}%", f * 100.0));
    }
    println!();
    for row in &s.rows {
        print!("{:<12}", row.strategy.as_str());
        for m in &row.mean {
            print!(" {m:>8.4}");
        }
        println!();
    }
    for c in &s.comparisons {
        if let Some(t) = c.test {
            println!(
                "{} vs {} @{:.0}%: diff {:+.4} p={:.4}{}",
                c.reference,
                c.other,
                c.fraction * 100.0,
                t.mean_diff,
                t.p,
                if c.significant { " *" } else { "" }
            );
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset, &args.meta)?;
    let snapshots: Vec<EmbeddingSnapshot> =
        args.snapshot.iter().map(|p| load_snapshot(p).with_context(|| format!("loading {}", p.display()))).collect::<Result<_>>()?;
    for s in &snapshots {
        s.check_coverage(dataset.postings().map(|p| p.id()))?;
    }
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let engine = EngineConfig {
        estimators: args.estimators,
        bandwidth_doc: bandwidth(&args.bandwidth_doc, &dataset, &snapshots[0], true)?,
        bandwidth_word: bandwidth(&args.bandwidth_word, &dataset, &snapshots[0], false)?,
        ..EngineConfig::default()
    };
    let spec = ExperimentSpec {
        strategies: args.strategy,
        seeds: (1..=args.seeds).collect(),
        cold_start: args.cold_start,
        budget_frac: args.budget_frac,
        eval_every: args.eval_every,
        swap_every: args.swap_every,
        fractions: args.fractions,
        engine,
    };
    let start = Instant::now();
    let curves = run_experiment(&dataset, &snapshots, &spec)?;
    let summary = summarize(&curves, &spec.fractions)?;
    write_outputs(&args.out, &curves, &summary)?;
    print_summary(&summary);
    eprintln!("{} cells in {:.1}s, written to {}", curves.len(), start.elapsed().as_secs_f64(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec { n: args.n, pos_rate: args.pos_rate, contexts: args.contexts, seed: args.seed, ..SynthSpec::default() };
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    let (dataset, snapshot) = make_synthetic_dataset(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    write_dataset(&dataset, &args.out.join("dataset.jsonl"), &args.out.join("dataset.meta.json"))?;
    write_snapshot(&args.out.join("snapshot.cvec"), &snapshot)?;
    eprintln!("{} postings written to {}", dataset.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
