//! Multi-seed training runs and their on-disk artifacts.
//!
//! A run directory holds, per seed, `seed_<s>.csv` (the training log),
//! `seed_<s>.json` (summary) and `seed_<s>_policy.json` (final policy), plus
//! `aggregate.csv` (iteration-wise mean±std across seeds) and `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pcrpo_core::cmdp::CmdpSpec;
use pcrpo_core::policy::SoftmaxPolicy;
use pcrpo_core::trainer::{final_window_means, mode_flip_count, train, SlackConfig, TrainRecord, TrainerConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{mean_std, validate_log_file, write_aggregate, write_log, CSV_SCHEMA_VERSION};
use crate::{HarnessError, Result};

/// Iterations averaged for the reported final values.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub final_reward: f64,
    pub final_costs: Vec<f64>,
    pub flip_count: usize,
    pub stall_count: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub seeds: Vec<SeedSummary>,
    pub final_reward_mean: f64,
    pub final_reward_std: f64,
    pub final_cost_mean: Vec<f64>,
    pub final_cost_std: Vec<f64>,
    pub flip_count_mean: f64,
    pub slack: SlackConfig,
    pub config: RunConfig,
}

struct SeedRun {
    seed: u64,
    records: Vec<TrainRecord>,
    policy: SoftmaxPolicy,
    wall_time_s: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn train_seed(config: &TrainerConfig, spec: &CmdpSpec, slack: SlackConfig, seed: u64) -> Result<SeedRun> {
    let config = TrainerConfig { seed, ..config.clone() };
    let start = Instant::now();
    let out = train(&config, spec, slack)?;
    Ok(SeedRun { seed, records: out.records, policy: out.policy, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Train every seed of `config` and write the run directory `out`.
///
/// Seeds run on the current rayon pool when `parallel` is set; results are
/// identical either way.
pub fn run_training(config: &RunConfig, out: &Path, parallel: bool) -> Result<RunSummary> {
    let spec = config.validate()?;
    let slack = config.resolved_slack(&spec)?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let runs: Vec<SeedRun> = if parallel {
        config.seeds.par_iter().map(|&s| train_seed(&config.trainer, &spec, slack, s)).collect::<Result<_>>()?
    } else {
        config.seeds.iter().map(|&s| train_seed(&config.trainer, &spec, slack, s)).collect::<Result<_>>()?
    };

    let n_costs = spec.n_costs();
    let mut seeds = Vec::with_capacity(runs.len());
    for run in &runs {
        let log_path = out.join(format!("seed_{}.csv", run.seed));
        write_log(create(&log_path)?, &run.records, n_costs)?;
        validate_log_file(
            &log_path,
            config.trainer.algorithm,
            &spec.limits,
            config.trainer.safety_warmup_iters,
            config.trainer.kl_threshold,
        )?;
        let policy_path = out.join(format!("seed_{}_policy.json", run.seed));
        fs::write(&policy_path, run.policy.to_json() + "\n").map_err(io_err(&policy_path))?;

        let (final_reward, final_costs) =
            final_window_means(&run.records, FINAL_WINDOW).unwrap_or((f64::NAN, vec![f64::NAN; n_costs]));
        let summary = SeedSummary {
            schema_version: CSV_SCHEMA_VERSION,
            seed: run.seed,
            final_reward,
            final_costs,
            flip_count: mode_flip_count(&run.records),
            stall_count: run.records.iter().filter(|r| r.step_scale == 0.0).count(),
            wall_time_s: run.wall_time_s,
        };
        write_json(&out.join(format!("seed_{}.json", run.seed)), &summary)?;
        seeds.push(summary);
    }

    let logs: Vec<&[TrainRecord]> = runs.iter().map(|r| r.records.as_slice()).collect();
    write_aggregate(create(&out.join("aggregate.csv"))?, &logs, n_costs)?;

    let rewards: Vec<f64> = seeds.iter().map(|s| s.final_reward).collect();
    let (final_reward_mean, final_reward_std) = mean_std(&rewards);
    let (final_cost_mean, final_cost_std) =
        (0..n_costs).map(|i| mean_std(&seeds.iter().map(|s| s.final_costs[i]).collect::<Vec<_>>())).unzip();
    let flips: Vec<f64> = seeds.iter().map(|s| s.flip_count as f64).collect();
    let summary = RunSummary {
        schema_version: CSV_SCHEMA_VERSION,
        name: config.name.clone(),
        seeds,
        final_reward_mean,
        final_reward_std,
        final_cost_mean,
        final_cost_std,
        flip_count_mean: mean_std(&flips).0,
        slack,
        config: config.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Files a run directory is expected to contain.
pub fn expected_artifacts(config: &RunConfig) -> Vec<PathBuf> {
    let mut files = vec![PathBuf::from("aggregate.csv"), PathBuf::from("summary.json")];
    for s in &config.seeds {
        files.push(format!("seed_{s}.csv").into());
        files.push(format!("seed_{s}.json").into());
        files.push(format!("seed_{s}_policy.json").into());
    }
    files
}
