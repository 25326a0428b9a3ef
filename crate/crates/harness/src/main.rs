use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use free_core::engine::emit_trace;
use free_core::model::save_weights;
use free_harness::adaptive::run_adaptive;
use free_harness::analysis::run_analysis;
use free_harness::config::{ExperimentConfig, Overrides, PolicyKind};
use free_harness::corpus::save_corpus;
use free_harness::sweep::{run_sweep, summary_csv, write_sweep};
use free_harness::{HarnessError, Result};

const SWEEP_HELP: &str = concat!(
    "Writes sweep.csv with columns\n  ",
    "policy,param,rouge_l,exact_match,token_agreement,mean_length,exit_rate,",
    "sa,ca,ffn,lm_head,kv_copy,normalized_cost,normalized_latency,state_copied\n",
    "sweep_summary.csv with columns\n  ",
    "policy,quality_target,lambda,rouge_l,normalized_cost,normalized_latency\n",
    "and traces.jsonl (one decode trace per line, full baseline first)."
);

#[derive(Parser)]
#[command(name = "free-bench", version, about = "Early-exit decoding benchmarks on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the model weights to <out-dir>/weights.bin.
    GenWeights(Common),
    /// Write a toy corpus to <out-dir>/corpus.jsonl.
    GenCorpus(Common),
    /// Decode the corpus for every policy point and tabulate quality and cost.
    #[command(after_help = SWEEP_HELP)]
    Sweep(Common),
    /// Calibrate the shallow-deep threshold online and decode the corpus.
    Adaptive(Common),
    /// Run the oracle, static, cost, spd_vs_sc, shallow_depth and
    /// calibration_size analyses into <out-dir>/analysis.json.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Restrict to one policy: full, static, conventional, oracle,
    /// shallow_deep or shallow_deep_sc.
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated threshold grid.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    shallow_depth: Option<usize>,
    #[arg(long)]
    max_new: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let overrides = Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            policy: self.policy.as_deref().map(PolicyKind::parse).transpose()?,
            lambdas: self.lambda.clone(),
            shallow_depth: self.shallow_depth,
            max_new: self.max_new,
        };
        cfg.apply(&overrides)?;
        Ok(cfg)
    }
}

fn out_file(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    Ok(dir.join(name))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = out_file(dir, name)?;
    fs::write(&path, text).map_err(HarnessError::io(&path))?;
    Ok(path)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenWeights(c) => {
            let cfg = c.resolve()?;
            let weights = cfg.build_weights()?;
            let path = out_file(&cfg.out_dir, "weights.bin")?;
            save_weights(&weights, &path).map_err(|e| HarnessError::Data(e.to_string()))?;
            println!("{} checksum {:016x}", path.display(), weights.checksum());
        }
        Command::GenCorpus(c) => {
            let cfg = c.resolve()?;
            let weights = cfg.build_weights()?;
            let corpus = cfg.build_corpus(&weights)?;
            let path = out_file(&cfg.out_dir, "corpus.jsonl")?;
            save_corpus(&corpus, &path)?;
            println!("{} ({} records)", path.display(), corpus.len());
        }
        Command::Sweep(c) => {
            let cfg = c.resolve()?;
            let result = run_sweep(&cfg)?;
            write_sweep(&result, &cfg.out_dir)?;
            print!("{}", summary_csv(&result.summary));
            println!("wrote {}", cfg.out_dir.join("sweep.csv").display());
        }
        Command::Adaptive(c) => {
            let cfg = c.resolve()?;
            let report = run_adaptive(&cfg)?;
            let dir = &cfg.out_dir;
            write_text(dir, "adaptive.json", &to_json(&report))?;
            let mut traj = String::from("sentence,lambda\n");
            for (i, l) in report.trajectory.iter().enumerate() {
                traj.push_str(&format!("{},{l:.6}\n", i + 1));
            }
            write_text(dir, "adaptive_trajectory.csv", &traj)?;
            write_text(dir, "estimator.txt", &(report.estimator_dump.clone() + "\n"))?;
            let mut traces = Vec::new();
            for t in &report.result.traces {
                emit_trace(t, &mut traces).map_err(HarnessError::io(dir))?;
            }
            fs::write(dir.join("adaptive_traces.jsonl"), traces).map_err(HarnessError::io(dir))?;
            println!(
                "lambda {:.3} after {} warm-up sentences; rouge_l {:.4}, normalized cost {:.4}, latency {:.4}",
                report.final_lambda,
                report.warmup_sentences,
                report.result.quality.rouge_l,
                report.result.cost.normalized_cost,
                report.result.cost.normalized_latency
            );
        }
        Command::Analyze(c) => {
            let cfg = c.resolve()?;
            let report = run_analysis(&cfg)?;
            let path = write_text(&cfg.out_dir, "analysis.json", &to_json(&report))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
