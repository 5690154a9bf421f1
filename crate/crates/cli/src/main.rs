use agp_cli::bench::bench_complexity;
use agp_cli::config::parse_config;
use agp_cli::heatmap::export_heatmaps;
use agp_cli::report;
use agp_cli::suite::run_suite_with;
use agp_cli::verify::{run_checks, summarize, Injection};
use agp_cli::{checkpoint, OUT_ENV};
use agp_core::training::{stream_rng, Stream};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "agp", version, about = "Action-graph policy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method on every seed.
    Train {
        config: PathBuf,
        /// Output directory (overrides the config file and $AGP_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the analytic oracle checks.
    Verify {
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, hide = true, default_value_t = 1.0)]
        inject_topk_bound: f64,
    },
    /// Export averaged attention heatmaps from a checkpoint.
    Heatmap {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Directory for the CSVs; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation resets to average over (default from the config).
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time message passing over a grid of graph sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        agents: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        actions: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_root(flag: Option<PathBuf>, configured: &Path) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| configured.to_path_buf())
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<bool> {
    let cfg = parse_config(config)?;
    let out = output_root(out, &cfg.output_dir);
    let report = run_suite_with(&cfg, &out, &|cell| match &cell.outcome {
        Ok(Some(p)) => eprintln!("{} seed {}: success {:.4} after {} episodes", cell.method.name(), cell.seed, p.success_rate, p.episode),
        Ok(None) => eprintln!("{} seed {}: no episodes", cell.method.name(), cell.seed),
        Err(e) => eprintln!("{} seed {}: FAILED: {e}", cell.method.name(), cell.seed),
    })?;
    for row in &report.aggregate {
        println!("{:<14} seeds {}  success {:.4} ± {:.4}", row.method, row.seeds, row.mean_success, row.std_success);
    }
    println!("results in {}", out.display());
    Ok(report.failures() == 0)
}

fn verify(json: Option<PathBuf>, factor: f64) -> Result<bool> {
    let checks = run_checks(&Injection { topk_bound_factor: factor });
    for c in &checks {
        println!("{}", c.line());
    }
    let summary = summarize(&checks);
    let text = serde_json::to_string_pretty(&summary)?;
    match json {
        Some(path) => report::write(&path, &text)?,
        None => println!("{text}"),
    }
    Ok(summary.passed)
}

fn heatmap(ckpt: &Path, config: &Path, out: Option<PathBuf>, batch: Option<usize>, seed: u64) -> Result<bool> {
    let cfg = parse_config(config)?;
    let text = std::fs::read_to_string(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let agent = checkpoint::load(&text, &cfg.train.env)?;
    let dir = out.unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut rng = stream_rng(seed, Stream::Eval, 0);
    let (_, files) = export_heatmaps(&agent, &cfg.train.env, batch.unwrap_or(cfg.heatmap_batch), &dir, &mut rng)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(true)
}

fn bench(agents: &[usize], actions: &[usize], reps: usize, out: Option<PathBuf>) -> Result<bool> {
    if agents.is_empty() || actions.is_empty() {
        bail!("need at least one size");
    }
    let rows = bench_complexity(agents, actions, reps, &mut ChaCha8Rng::seed_from_u64(0))?;
    let text = report::bench_csv(&rows)?;
    match out {
        Some(path) => report::write(&path, &text)?,
        None => print!("{text}"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => train(&config, out),
        Command::Verify { json, inject_topk_bound } => verify(json, inject_topk_bound),
        Command::Heatmap {
            checkpoint,
            config,
            out,
            batch,
            seed,
        } => heatmap(&checkpoint, &config, out, batch, seed),
        Command::Bench { agents, actions, reps, out } => bench(&agents, &actions, reps, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
