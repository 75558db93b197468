use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minpro_lab::config::ExperimentConfig;
use minpro_lab::io::{long_rows, policy_from_json, policy_to_json, write_long_csv, write_metrics_csv};
use minpro_lab::objectives::Accumulation;
use minpro_lab::trainer::{evaluate_pass_at_k, run_many, run_training, TrainRecord};
use minpro_lab::verify::{render_table, run_suite, VerifyOptions};
use minpro_lab::{Error, Result};

mod plot;

#[derive(Parser)]
#[command(name = "minpro-lab", version, about = "Off-policy policy-gradient objectives on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle verification suite; exits nonzero if any check fails.
    Verify {
        /// Swap in a broken score function (negative control).
        #[arg(long)]
        corrupt_score: bool,
        #[arg(long, default_value_t = VerifyOptions::default().seed)]
        seed: u64,
    },
    /// Train one objective and write metrics.csv, policy.json and config.toml.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed accumulation order and single-threaded sampling.
        #[arg(long)]
        deterministic: bool,
    },
    /// Train every configured objective for each seed; write one long CSV.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Also write SVG line charts of the seed-averaged curves.
        #[arg(long)]
        plot: bool,
    },
    /// Estimate pass@k of a saved policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        k: usize,
        /// Environment and t_max come from this config (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        prompts: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First dataset index of the evaluation prompts.
        #[arg(long, default_value_t = 1_000_000)]
        offset: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { corrupt_score, seed } => cmd_verify(corrupt_score, seed),
        Command::Train {
            config,
            out,
            deterministic,
        } => cmd_train(&config, &out, deterministic).map(|_| ExitCode::SUCCESS),
        Command::Compare {
            config,
            out,
            seeds,
            plot,
        } => cmd_compare(&config, &out, &seeds, plot).map(|_| ExitCode::SUCCESS),
        Command::Eval {
            policy,
            k,
            config,
            prompts,
            seed,
            offset,
        } => cmd_eval(&policy, k, config.as_deref(), prompts, seed, offset).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_verify(corrupt_score: bool, seed: u64) -> Result<ExitCode> {
    let start = std::time::Instant::now();
    let results = run_suite(&VerifyOptions { seed, corrupt_score });
    print!("{}", render_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{} checks in {:.2?}", results.len(), start.elapsed());
    if failed.is_empty() {
        println!("all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAILED: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn write_resolved_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, deterministic: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let tc = cfg.train_config(cfg.objective)?;
    fs::create_dir_all(out)?;
    write_resolved_config(&cfg, out)?;
    let mode = if deterministic {
        Accumulation::Sequential
    } else {
        Accumulation::Parallel
    };
    let outcome = run_training(&tc, mode)?;
    write_metrics_csv(fs::File::create(out.join("metrics.csv"))?, &outcome.records)?;
    fs::write(out.join("policy.json"), policy_to_json(&outcome.policy)?)?;
    let last = outcome.records.last();
    println!(
        "{}: {} updates, final batch reward {:.4}, policy v{}",
        cfg.objective,
        outcome.records.len(),
        last.map_or(f64::NAN, |r| r.mean_reward),
        outcome.policy.version()
    );
    Ok(())
}

/// Seed-averaged value of `metric` per global step.
fn step_means(runs: &[&[TrainRecord]], metric: &str) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for records in runs {
        for r in records.iter() {
            if let Some((_, v)) = r.metrics().into_iter().find(|(m, _)| *m == metric) {
                let e = acc.entry(r.global_step).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(s, (sum, n))| (s as f64, sum / n as f64)).collect()
}

fn cmd_compare(config: &Path, out: &Path, seeds: &[u64], plot: bool) -> Result<()> {
    let base = load_config(config)?;
    fs::create_dir_all(out)?;
    write_resolved_config(&base, out)?;

    let mut labels = Vec::new();
    let mut cfgs = Vec::new();
    for &kind in &base.objectives {
        for &seed in seeds {
            let mut c = base.clone();
            c.seed = seed;
            cfgs.push(c.train_config(kind)?);
            labels.push((kind, seed));
        }
    }
    let outcomes = run_many(&cfgs)?;

    let mut rows = Vec::new();
    let mut by_objective: BTreeMap<String, Vec<Vec<TrainRecord>>> = BTreeMap::new();
    for ((kind, seed), outcome) in labels.iter().zip(outcomes) {
        let run_id = format!("{kind}-s{seed}");
        let outcome = outcome.map_err(|e| Error::Config(format!("run {run_id} failed: {e}")))?;
        rows.extend(long_rows(&run_id, kind.name(), *seed, base.staleness, &outcome.records));
        let last = outcome.records.last().map_or(f64::NAN, |r| r.mean_reward);
        println!("{run_id}: final batch reward {last:.4}");
        by_objective.entry(kind.name().to_string()).or_default().push(outcome.records);
    }
    write_long_csv(fs::File::create(out.join("compare.csv"))?, &rows)?;

    if plot {
        for metric in ["mean_reward", "mean_token_entropy", "clip_fraction", "mask_fraction"] {
            let series: Vec<plot::Series> = by_objective
                .iter()
                .map(|(name, runs)| plot::Series {
                    label: name.clone(),
                    points: step_means(&runs.iter().map(Vec::as_slice).collect::<Vec<_>>(), metric),
                })
                .collect();
            let title = format!("{metric} (n = {}, {} seeds)", base.staleness, seeds.len());
            fs::write(
                out.join(format!("{metric}.svg")),
                plot::line_chart(&title, "global step", metric, &series),
            )?;
        }
    }
    Ok(())
}

fn cmd_eval(policy: &Path, k: usize, config: Option<&Path>, prompts: u64, seed: u64, offset: u64) -> Result<()> {
    let cfg = match config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    let env = cfg.environment()?;
    let p = policy_from_json(&fs::read_to_string(policy)?)?;
    if p.vocab_size() != env.vocab_size() {
        return Err(Error::Config(format!(
            "policy vocabulary {} does not match the environment's {}",
            p.vocab_size(),
            env.vocab_size()
        )));
    }
    let indices: Vec<u64> = (offset..offset + prompts).collect();
    let score = evaluate_pass_at_k(&p, &env, k, &indices, seed, cfg.t_max)?;
    println!("pass@{k} = {score:.4} over {prompts} prompts");
    Ok(())
}
