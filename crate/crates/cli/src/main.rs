use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dcrl_core::experiment::{
    compare_methods, evaluate, load_checkpoints, load_suite_specs, run_training, write_run, Method, RunSummary,
    TheoremGrid, TrainConfig,
};
use dcrl_core::gradcheck::run_grad_checks;
use dcrl_core::DcrlError;
use serde::Serialize;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser)]
#[command(name = "dcrl", version, about = "Dual-consensus label-free RL simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a generated suite and write metrics, summary and checkpoints.
    Train(Common),
    /// Sweep the election theorem over a grid of scenario families.
    TheoremCheck(Common),
    /// Run every consensus strategy on shared suites and tabulate them.
    CompareConsensus {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, counting up from the base seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference verification of the analytic gradients.
    GradCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Evaluate the checkpoints of a finished run directory.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn train_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(common: &Common) -> anyhow::Result<()> {
    let cfg = train_config(common)?;
    let out = cfg.resolved_output_dir();
    let (suite, run) = match run_training(&cfg) {
        Ok(r) => r,
        Err(e) => {
            if let Some(dir) = &out {
                save_abort(&e, dir)?;
            }
            return Err(e.into());
        }
    };
    if let Some(dir) = &out {
        write_run(dir, &cfg, &suite, &run)?;
    }
    println!("{}", serde_json::to_string_pretty(&run.summary)?);
    Ok(())
}

/// Writes `abort.json` into `dir` when `err` is a numerical abort.
fn save_abort(err: &DcrlError, dir: &Path) -> anyhow::Result<()> {
    if let DcrlError::NumericalAbort { dump, .. } = err {
        fs::create_dir_all(dir)?;
        let path = dir.join("abort.json");
        write_json(&path, dump)?;
        eprintln!("state dump written to {}", path.display());
    }
    Ok(())
}

fn theorem_check(common: &Common) -> anyhow::Result<()> {
    let mut grid = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TheoremGrid::from_json(&text).map_err(|e| match e {
                DcrlError::Json(j) => DcrlError::InvalidConfig(format!("{}: {j}", p.display())),
                other => other,
            })?
        }
        None => TheoremGrid::default(),
    };
    if let Some(s) = common.seed {
        grid.seed = s;
    }
    let report = grid.run()?;
    let mut jsonl = String::new();
    for row in &report.rows {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("theorem.jsonl"), &jsonl)?;
        }
        None => print!("{jsonl}"),
    }
    eprintln!(
        "{} scenarios, {} rejected draws; closed form {:.1}%, Monte Carlo G={} {:.1}%",
        report.rows.len(),
        report.rejected,
        100.0 * report.closed_form_rate,
        grid.thresholds.group_size,
        100.0 * report.monte_carlo_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct MethodRow {
    method: Method,
    runs: usize,
    final_label_accuracy: f64,
    final_anchor_label_accuracy: f64,
    reward_signal_correctness: f64,
    mean_exact_pass1: f64,
}

fn compare(common: &Common, seeds: u64) -> anyhow::Result<()> {
    if seeds == 0 {
        bail!(DcrlError::InvalidConfig("--seeds must be positive".into()));
    }
    let cfg = train_config(common)?;
    let list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let runs = compare_methods(&cfg, &list, &Method::ALL)?;
    let mut by: BTreeMap<Method, Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        by.entry(r.method).or_default().push(r);
    }
    let mean = |v: &[&RunSummary], f: fn(&RunSummary) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / v.len() as f64;
    let table: Vec<MethodRow> = Method::ALL
        .iter()
        .map(|m| {
            let v = &by[m];
            MethodRow {
                method: *m,
                runs: v.len(),
                final_label_accuracy: mean(v, |r| r.final_label_accuracy),
                final_anchor_label_accuracy: mean(v, |r| r.final_anchor_label_accuracy),
                reward_signal_correctness: mean(v, |r| r.reward_signal_correctness),
                mean_exact_pass1: mean(v, |r| r.eval.mean_exact_pass1),
            }
        })
        .collect();
    println!(
        "{:<16} {:>6} {:>10} {:>10} {:>8}",
        "method", "seeds", "label_acc", "reward_ok", "pass@1"
    );
    for r in &table {
        println!(
            "{:<16} {:>6} {:>10.3} {:>10.3} {:>8.3}",
            r.method.name(),
            r.runs,
            r.final_label_accuracy,
            r.reward_signal_correctness,
            r.mean_exact_pass1
        );
    }
    if let Some(dir) = cfg.resolved_output_dir() {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("comparison.json"), &table)?;
        write_json(&dir.join("runs.json"), &runs)?;
    }
    Ok(())
}

fn grad_check(seed: Option<u64>, instances: usize) -> anyhow::Result<()> {
    if instances == 0 {
        bail!(DcrlError::InvalidConfig("--instances must be positive".into()));
    }
    let report = run_grad_checks(instances, seed.unwrap_or(0))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed() {
        bail!("gradient check exceeded tolerance {:.0e}", report.tolerance);
    }
    Ok(())
}

fn eval(run: &Path, seed: Option<u64>, samples: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let policies = load_checkpoints(run)?;
    let truth = load_suite_specs(run)?
        .into_iter()
        .map(|s| (s.question_id, s.true_answer))
        .collect();
    let report = evaluate(&policies, &truth, samples, seed.unwrap_or(0))?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join("eval.json"), &report)?;
            fs::write(dir.join("eval.csv"), report.to_csv())?;
        }
        None => print!("{}", report.to_csv()),
    }
    eprintln!(
        "{} tasks: exact pass@1 {:.4}, empirical pass@1 {:.4} over {samples} samples",
        report.tasks.len(),
        report.mean_exact_pass1,
        report.mean_empirical_pass1
    );
    Ok(())
}

fn exit_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(DcrlError::NumericalAbort { .. }) = cause.downcast_ref::<DcrlError>() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::TheoremCheck(c) => theorem_check(c),
        Command::CompareConsensus { common, seeds } => compare(common, *seeds),
        Command::GradCheck { seed, instances } => grad_check(*seed, *instances),
        Command::Eval {
            run,
            seed,
            samples,
            out,
        } => eval(run, *seed, *samples, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_for(&e))
        }
    }
}
