use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use latb_core::env::Policy;
use latb_core::strategies::PolicyRunner;

use crate::config::Config;
use crate::error::Result;
use crate::pipeline::{self, FrozenLams, OutDir};
use crate::suites::{self, Row, Suite};

#[derive(Debug, Parser)]
#[command(name = "latb", about = "Latent action supervision benchmark on a toy manipulation environment")]
pub struct Cli {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LamKind {
    Action,
    Image,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the expert demonstration dataset.
    GenData,
    /// Train a latent action model and export its token cache.
    TrainLam {
        #[arg(value_enum)]
        kind: LamKind,
    },
    /// Train one policy per seed for the configured strategy.
    TrainPolicy,
    /// Evaluate trained checkpoints, the expert or a random policy.
    Evaluate,
    /// Run an ablation suite.
    Suite { name: String },
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Command::Suite { name } = &cli.command {
        let suite: Suite = name.parse()?;
        let out = OutDir::new(&cli.out)?;
        suites::run_suite(suite, &cfg, &out)?;
        return Ok(());
    }
    let out = OutDir::new(&cli.out)?;
    match &cli.command {
        Command::GenData => {
            let data = pipeline::dataset(&cfg, &out)?;
            println!(
                "{} episodes, {} steps -> {}",
                data.episodes.len(),
                data.num_steps(),
                out.dataset().display()
            );
        }
        Command::TrainLam { kind } => {
            let data = pipeline::dataset(&cfg, &out)?;
            match kind {
                LamKind::Action => {
                    let (lam, log) = pipeline::train_action_lam(&cfg, &data)?;
                    pipeline::save_action_lam(&out, &lam, &log)?;
                    let table = pipeline::action_targets(&lam, &data)?;
                    pipeline::write_action_tokens(&out.path("action_tokens.txt"), &table)?;
                    println!("action LAM -> {}", out.action_lam().display());
                }
                LamKind::Image => {
                    let (lam, log) = pipeline::train_image_lam(&cfg, &data)?;
                    pipeline::save_image_lam(&out, &lam, &log)?;
                    let table = pipeline::image_targets(&lam, &data)?;
                    pipeline::write_image_tokens(&out.path("image_tokens.bin"), &table)?;
                    println!("image LAM -> {}", out.image_lam().display());
                }
            }
        }
        Command::TrainPolicy => {
            let strategy = cfg.strategy()?;
            let lams = FrozenLams::load_for(&out, &[strategy])?;
            let data = pipeline::dataset(&cfg, &out)?.subset(cfg.data_fraction)?;
            let table = lams.targets(strategy, &data)?;
            for &seed in &cfg.seeds {
                let (model, log) = pipeline::train_policy(&cfg, strategy, seed, &data, table.as_ref())?;
                let path = out.policy(strategy, seed);
                pipeline::save_policy(&path, &model)?;
                pipeline::write_loss_log(&out.path(&format!("policy_{strategy}_s{seed}_loss.csv")), &log)?;
                println!("{strategy} seed {seed} -> {}", path.display());
            }
        }
        Command::Evaluate => {
            let rows = evaluate(&cfg, &out)?;
            suites::write_csv(&out.path("evaluate.csv"), &rows, cfg.record_timing)?;
            print!("{}", suites::summarize(&rows));
        }
        Command::Suite { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// One row per (seed, task) with the mean score over `eval_episodes`.
pub fn evaluate(cfg: &Config, out: &OutDir) -> Result<Vec<Row>> {
    let tasks = cfg.task_list()?;
    let strategy = cfg.strategy()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let model = match cfg.policy.as_str() {
            "trained" => {
                let path = match cfg.checkpoint.as_str() {
                    "auto" => out.policy(strategy, seed),
                    p => PathBuf::from(p),
                };
                Some(pipeline::load_policy(&path, strategy)?)
            }
            _ => None,
        };
        let mut row_cfg = cfg.clone();
        row_cfg.seeds = vec![seed];
        let hash = row_cfg.hash();
        for task in &tasks {
            let start = std::time::Instant::now();
            let mut policy: Box<dyn Policy + '_> = match (&model, cfg.policy.as_str()) {
                (Some(m), _) => Box::new(PolicyRunner { model: m }),
                (None, "expert") => Box::new(pipeline::expert_policy(cfg)),
                (None, _) => Box::new(pipeline::random_policy(cfg, seed)),
            };
            let (score, err) = pipeline::evaluate_task(cfg, policy.as_mut(), task);
            rows.push(Row {
                suite: "evaluate".into(),
                strategy: match cfg.policy.as_str() {
                    "trained" => strategy.name().into(),
                    other => other.into(),
                },
                variant_param: cfg.policy.clone(),
                seed,
                task: task.name(),
                score: Some(score),
                steps: model.as_ref().map_or(0, |_| cfg.policy_steps),
                wall_clock_s: start.elapsed().as_secs_f64(),
                config_hash: hash.clone(),
                status: err.map_or_else(|| "ok".to_string(), |e| format!("ok (rollout error: {e})")),
            });
        }
    }
    Ok(rows)
}
