use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcrpo_core::cmdp::Channel;
use pcrpo_core::evaluation::QEstimate;
use pcrpo_core::policy::SoftmaxPolicy;
use pcrpo_harness::config::{self, resolve_output, RunConfig};
use pcrpo_harness::run::{expected_artifacts, run_training};
use pcrpo_harness::{sweep, verify, HarnessError, Result};

#[derive(Parser)]
#[command(name = "pcrpo", version, about = "Soft-switching constrained policy optimization on tabular CMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Exact,
    Td,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write logs, summaries and the aggregate.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set trainer.eta=0.5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum)]
        eval_mode: Option<EvalModeArg>,
        /// Output directory; relative paths resolve under $PCRPO_OUTPUT_ROOT.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for seeds (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Randomized checks of the gradient projection algebra.
    VerifyGradients {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 8, 64])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check the one-step improvement bounds on random smooth quadratics.
    VerifyTheorems {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per value of one config axis and compare the results.
    Sweep {
        sweep: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write the configured CMDP as JSON and optionally an exact Q table.
    Export {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        spec_out: Option<PathBuf>,
        #[arg(long)]
        q_out: Option<PathBuf>,
        /// `reward` or `cost<i>`.
        #[arg(long, default_value = "reward")]
        channel: String,
        /// Policy JSON for the Q table (default: uniform).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(0) => Err(HarnessError::Usage("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| HarnessError::Usage(e.to_string())),
        None => Ok(f()),
    }
}

fn load_config(path: &Path, overrides: &[String], eval_mode: Option<EvalModeArg>) -> Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(mode) = eval_mode {
        all.push(format!(
            "trainer.eval_mode={}",
            match mode {
                EvalModeArg::Exact => "exact",
                EvalModeArg::Td => "td",
            }
        ));
    }
    config::load(path, &all)
}

fn cmd_train(
    path: &Path,
    overrides: &[String],
    eval_mode: Option<EvalModeArg>,
    out: Option<&Path>,
    jobs: Option<usize>,
) -> Result<()> {
    let cfg = load_config(path, overrides, eval_mode)?;
    let dir = cfg.output_path(out);
    let summary = with_pool(jobs, || run_training(&cfg, &dir, true))??;
    println!("wrote {} files to {}", expected_artifacts(&cfg).len(), dir.display());
    for s in &summary.seeds {
        println!(
            "seed {:>4}: final V_r {:.4}  V_c {:?}  flips {}  stalls {}",
            s.seed, s.final_reward, s.final_costs, s.flip_count, s.stall_count
        );
    }
    println!(
        "mean: V_r {:.4} ± {:.4}  V_c {:?} ± {:?}",
        summary.final_reward_mean, summary.final_reward_std, summary.final_cost_mean, summary.final_cost_std
    );
    Ok(())
}

fn cmd_sweep(path: &Path, out: Option<&Path>, jobs: Option<usize>) -> Result<()> {
    let prepared = sweep::load(path)?;
    let dir = resolve_output(out.unwrap_or(&prepared.output_dir));
    let outcomes = with_pool(jobs, || sweep::run_sweep(&prepared, &dir))??;
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(s) => println!(
                "{}={}: V_r {:.4}  V_c {:?}  flips {:.1}",
                prepared.axis, o.value, s.final_reward_mean, s.final_cost_mean, s.flip_count_mean
            ),
            Err(e) => {
                failed += 1;
                eprintln!("{}={}: FAILED {e}", prepared.axis, o.value);
            }
        }
    }
    println!("comparison written to {}", dir.join("comparison.csv").display());
    if failed > 0 {
        return Err(HarnessError::Assertion(format!("{failed} sweep point(s) failed")));
    }
    Ok(())
}

fn cmd_export(
    path: &Path,
    overrides: &[String],
    spec_out: Option<&Path>,
    q_out: Option<&Path>,
    channel: &str,
    policy: Option<&Path>,
) -> Result<()> {
    if spec_out.is_none() && q_out.is_none() {
        return Err(HarnessError::Usage("nothing to export: pass --spec-out and/or --q-out".into()));
    }
    let cfg = config::load(path, overrides)?;
    let spec = cfg.environment.build()?;
    let write =
        |p: &Path, text: String| std::fs::write(p, text).map_err(|source| HarnessError::Io { path: p.into(), source });
    if let Some(p) = spec_out {
        write(p, spec.to_json() + "\n")?;
    }
    if let Some(p) = q_out {
        let channel: Channel = channel.parse().map_err(|e| HarnessError::Usage(format!("{e}")))?;
        if let Channel::Cost(i) = channel {
            if i >= spec.n_costs() {
                return Err(HarnessError::Usage(format!(
                    "channel {channel} does not exist: the CMDP has {} cost(s)",
                    spec.n_costs()
                )));
            }
        }
        let pi = match policy {
            Some(pp) => {
                let text =
                    std::fs::read_to_string(pp).map_err(|source| HarnessError::ReadFile { path: pp.into(), source })?;
                SoftmaxPolicy::from_json(&text)
                    .map_err(|e| HarnessError::config(pp.display().to_string(), e.to_string()))?
            }
            None => SoftmaxPolicy::uniform(spec.n_states, spec.n_actions),
        };
        let q = QEstimate::exact(&spec, &pi, channel)?;
        let mut buf = Vec::new();
        q.write_csv(&mut buf)?;
        write(p, String::from_utf8(buf).expect("CSV output is UTF-8"))?;
    }
    Ok(())
}

fn report(suite: verify::SuiteReport) -> Result<()> {
    print!("{suite}");
    if suite.passed() {
        Ok(())
    } else {
        Err(HarnessError::Assertion("an asserted property failed".into()))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, eval_mode, out, jobs } => {
            cmd_train(&config, &overrides, eval_mode, out.as_deref(), jobs)
        }
        Command::VerifyGradients { samples, dims, seed } => {
            if samples == 0 || dims.is_empty() || dims.contains(&0) {
                return Err(HarnessError::Usage("samples and every dimension must be at least 1".into()));
            }
            report(verify::verify_gradients(samples, &dims, seed))
        }
        Command::VerifyTheorems { instances, seed } => {
            if instances == 0 {
                return Err(HarnessError::Usage("instances must be at least 1".into()));
            }
            report(verify::verify_theorems(instances, seed))
        }
        Command::Sweep { sweep, out, jobs } => cmd_sweep(&sweep, out.as_deref(), jobs),
        Command::Export { config, overrides, spec_out, q_out, channel, policy } => {
            cmd_export(&config, &overrides, spec_out.as_deref(), q_out.as_deref(), &channel, policy.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
