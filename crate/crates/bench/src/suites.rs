//! Ablation suites: variants trained over all seeds, one CSV row per
//! (variant, seed, task).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use latb_core::dataset::Dataset;
use latb_core::env::Task;
use latb_core::strategies::{default_align_layer, PolicyRunner, Strategy};

use crate::config::Config;
use crate::error::{config, io, Result};
use crate::pipeline::{self, FrozenLams, OutDir};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Placeholder,
    AlignLayer,
    Lambda,
    DataFraction,
    DiscVsCont,
    Joint,
    All,
}

impl Suite {
    pub const EACH: [Suite; 6] = [
        Suite::Placeholder,
        Suite::AlignLayer,
        Suite::Lambda,
        Suite::DataFraction,
        Suite::DiscVsCont,
        Suite::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Placeholder => "placeholder",
            Suite::AlignLayer => "align_layer",
            Suite::Lambda => "lambda",
            Suite::DataFraction => "data_fraction",
            Suite::DiscVsCont => "disc_vs_cont",
            Suite::Joint => "joint",
            Suite::All => "all",
        }
    }

    /// Strategies compared when `suite_strategies` is empty.
    pub fn default_strategies(self) -> Vec<Strategy> {
        use Strategy::*;
        match self {
            Suite::Placeholder => vec![Baseline, PhDirect, PhCond, LaDirect, LaCond],
            Suite::AlignLayer => vec![LaAlign],
            Suite::Lambda => vec![LaTok],
            Suite::DataFraction => vec![Baseline, LaTok],
            Suite::DiscVsCont => vec![Baseline, LaDirect, DirectC, LaTok, TokC],
            Suite::Joint => vec![Baseline, LaDirect],
            Suite::All => Vec::new(),
        }
    }
}

impl FromStr for Suite {
    type Err = crate::error::BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .iter()
            .chain([Suite::All].iter())
            .copied()
            .find(|x| x.name() == s)
            .ok_or_else(|| config(format!("unknown suite {s:?}")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training tasks of a variant: all configured tasks jointly, or one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Multi,
    Single,
}

/// One trained configuration of a suite.
#[derive(Clone, Debug)]
pub struct Variant {
    pub strategy: Strategy,
    pub param: String,
    pub cfg: Config,
    pub grouping: Grouping,
}

fn variant(base: &Config, strategy: Strategy, param: String, edit: impl FnOnce(&mut Config)) -> Variant {
    let mut cfg = base.clone();
    cfg.strategy = strategy.name().into();
    edit(&mut cfg);
    Variant {
        strategy,
        param,
        cfg,
        grouping: Grouping::Multi,
    }
}

pub fn variants(suite: Suite, base: &Config) -> Result<Vec<Variant>> {
    let mut strategies = base.suite_strategies()?;
    if strategies.is_empty() {
        strategies = suite.default_strategies();
    }
    let mut out = Vec::new();
    for &s in &strategies {
        match suite {
            Suite::Placeholder => {
                let slots = s.layout(base.h, base.p).total();
                out.push(variant(base, s, format!("slots={slots}"), |_| {}));
            }
            Suite::AlignLayer => {
                let mut layers = base.align_layers.clone();
                if layers.is_empty() {
                    layers = vec![1, default_align_layer(base.layers), base.layers];
                    layers.dedup();
                }
                for l in layers {
                    out.push(variant(base, s, format!("align_layer={l}"), |c| c.align_layer = Some(l)));
                }
            }
            Suite::Lambda => {
                for &l in &base.lambdas {
                    out.push(variant(base, s, format!("lambda={l}"), |c| c.lambda = Some(l)));
                }
            }
            Suite::DataFraction => {
                for &f in &base.fractions {
                    out.push(variant(base, s, format!("fraction={f}"), |c| c.data_fraction = f));
                }
            }
            Suite::DiscVsCont => out.push(variant(base, s, "default".into(), |_| {})),
            Suite::Joint => {
                out.push(variant(base, s, "multi".into(), |_| {}));
                let mut single = variant(base, s, "single".into(), |_| {});
                single.grouping = Grouping::Single;
                out.push(single);
            }
            Suite::All => return Err(config("`all` has no variants of its own")),
        }
    }
    for v in &out {
        v.cfg.validate()?;
    }
    Ok(out)
}

/// One result row. `score` is `None` for failed runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub suite: String,
    pub strategy: String,
    pub variant_param: String,
    pub seed: u64,
    pub task: String,
    pub score: Option<f64>,
    pub steps: usize,
    pub wall_clock_s: f64,
    pub config_hash: String,
    pub status: String,
}

pub const CSV_HEADER: [&str; 10] = [
    "suite",
    "strategy",
    "variant_param",
    "seed",
    "task",
    "score",
    "steps",
    "wall_clock_s",
    "config_hash",
    "status",
];

/// Writes the result table. Wall-clock times only go into the CSV when
/// `record_timing` is set, so that reruns stay byte-identical by default.
pub fn write_csv(path: &std::path::Path, rows: &[Row], record_timing: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.suite.clone(),
            r.strategy.clone(),
            r.variant_param.clone(),
            r.seed.to_string(),
            r.task.clone(),
            r.score.map_or_else(String::new, |s| s.to_string()),
            r.steps.to_string(),
            if record_timing {
                format!("{:.3}", r.wall_clock_s)
            } else {
                String::new()
            },
            r.config_hash.clone(),
            r.status.clone(),
        ])?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

fn write_timing(path: &std::path::Path, rows: &[Row]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["suite", "strategy", "variant_param", "seed", "task", "wall_clock_s"])?;
    for r in rows {
        w.write_record([
            r.suite.clone(),
            r.strategy.clone(),
            r.variant_param.clone(),
            r.seed.to_string(),
            r.task.clone(),
            format!("{:.3}", r.wall_clock_s),
        ])?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

/// Mean and sample standard deviation of the scores per (strategy, variant, task).
pub fn summarize(rows: &[Row]) -> String {
    let mut groups: BTreeMap<(String, String, String), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let g = groups
            .entry((r.strategy.clone(), r.variant_param.clone(), r.task.clone()))
            .or_default();
        match r.score {
            Some(s) => g.0.push(s),
            None => g.1 += 1,
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:<18} {:<10} {:>7} {:>7} {:>4} {:>6}", "strategy", "variant", "task", "mean", "std", "n", "failed");
    for ((s, v, t), (scores, failed)) in &groups {
        let n = scores.len();
        let mean = if n > 0 { scores.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let std = if n > 1 {
            (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(out, "{s:<12} {v:<18} {t:<10} {mean:>7.4} {std:>7.4} {n:>4} {failed:>6}");
    }
    out
}

/// Mean score per strategy and variant over all tasks and seeds.
pub fn mean_scores(rows: &[Row]) -> BTreeMap<(String, String), f64> {
    let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(s) = r.score {
            let e = acc.entry((r.strategy.clone(), r.variant_param.clone())).or_default();
            e.0 += s;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

struct Group {
    data: Dataset,
    tasks: Vec<Task>,
}

fn groups(v: &Variant, full: &Dataset) -> Result<Vec<Group>> {
    let data = full.subset(v.cfg.data_fraction)?;
    let tasks = v.cfg.task_list()?;
    Ok(match v.grouping {
        Grouping::Multi => vec![Group { data, tasks }],
        Grouping::Single => tasks
            .into_iter()
            .map(|t| Group {
                data: data.only_tasks(&[t.id]),
                tasks: vec![t],
            })
            .collect(),
    })
}

fn run_variant(suite: Suite, v: &Variant, full: &Dataset, lams: &FrozenLams, out: &OutDir, rows: &mut Vec<Row>) -> Result<()> {
    let groups = groups(v, full)?;
    for group in &groups {
        let table = lams.targets(v.strategy, &group.data);
        for &seed in &v.cfg.seeds {
            let start = Instant::now();
            let mut row_cfg = v.cfg.clone();
            row_cfg.seeds = vec![seed];
            row_cfg.tasks = group.tasks.iter().map(|t| t.name()).collect();
            let hash = row_cfg.hash();
            let trained = match &table {
                Ok(t) => pipeline::train_policy(&v.cfg, v.strategy, seed, &group.data, t.as_ref()),
                Err(e) => Err(config(e.to_string())),
            };
            let mut push = |task: &Task, score: Option<f64>, status: String, secs: f64| {
                rows.push(Row {
                    suite: suite.name().into(),
                    strategy: v.strategy.name().into(),
                    variant_param: v.param.clone(),
                    seed,
                    task: task.name(),
                    score,
                    steps: v.cfg.policy_steps,
                    wall_clock_s: secs,
                    config_hash: hash.clone(),
                    status,
                })
            };
            match trained {
                Ok((model, log)) => {
                    let tag = format!("{}_{}_{}_s{seed}", suite.name(), v.strategy, v.param.replace('=', "-"));
                    let tag = match v.grouping {
                        Grouping::Multi => tag,
                        Grouping::Single => format!("{tag}_{}", group.tasks[0].name()),
                    };
                    pipeline::save_policy(&out.path(&format!("policy_{tag}.ckpt")), &model)?;
                    pipeline::write_loss_log(&out.path(&format!("loss_{tag}.csv")), &log)?;
                    let train_secs = start.elapsed().as_secs_f64();
                    for task in &group.tasks {
                        let t0 = Instant::now();
                        let mut runner = PolicyRunner { model: &model };
                        let (score, err) = pipeline::evaluate_task(&v.cfg, &mut runner, task);
                        let status = err.map_or_else(|| "ok".to_string(), |e| format!("ok (rollout error: {e})"));
                        push(task, Some(score), status, train_secs + t0.elapsed().as_secs_f64());
                    }
                }
                Err(e) => {
                    eprintln!("{suite}: {} {} seed {seed} failed: {e}", v.strategy, v.param);
                    for task in &group.tasks {
                        push(task, None, format!("failed: {e}"), start.elapsed().as_secs_f64());
                    }
                }
            }
            eprintln!("{suite}: {} {} seed {seed} done in {:.1}s", v.strategy, v.param, start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

/// Runs one suite (or each of them for `all`) and writes
/// `suite_<name>.csv`, `suite_<name>_timing.csv` and `suite_<name>_report.txt`.
pub fn run_suite(suite: Suite, cfg: &Config, out: &OutDir) -> Result<Vec<Row>> {
    let list: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut plans = Vec::new();
    for &s in &list {
        plans.push((s, variants(s, cfg)?));
    }
    let full = pipeline::dataset(cfg, out)?;
    let strategies: Vec<Strategy> = plans.iter().flat_map(|(_, vs)| vs.iter().map(|v| v.strategy)).collect();
    let lams = FrozenLams::train_for(cfg, &full, out, &strategies)?;
    let mut all = Vec::new();
    for (s, vs) in &plans {
        let mut rows = Vec::new();
        for v in vs {
            run_variant(*s, v, &full, &lams, out, &mut rows)?;
        }
        write_outputs(s.name(), &rows, cfg, out)?;
        all.extend(rows);
    }
    if suite == Suite::All {
        write_outputs("all", &all, cfg, out)?;
    }
    Ok(all)
}

fn write_outputs(name: &str, rows: &[Row], cfg: &Config, out: &OutDir) -> Result<()> {
    write_csv(&out.path(&format!("suite_{name}.csv")), rows, cfg.record_timing)?;
    write_timing(&out.path(&format!("suite_{name}_timing.csv")), rows)?;
    let report = format!("suite {name}\n\n{}", summarize(rows));
    pipeline::write_file(&out.path(&format!("suite_{name}_report.txt")), report.as_bytes())?;
    print!("{report}");
    Ok(())
}
