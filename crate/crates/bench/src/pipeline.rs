//! Training and evaluation steps shared by the CLI verbs and the suites.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use latb_core::action_lam::{write_tokens, ActionLam};
use latb_core::dataset::Dataset;
use latb_core::env::{self, obs_to_f32, rollout, Policy, Task, ACTION_DIM};
use latb_core::image_lam::{supervised_subset, write_token_cache, ImageLam, TokenRecord, TransitionBatch};
use latb_core::strategies::{LatentTargets, PolicyBatch, PolicyModel, Strategy, TargetSource};
use latb_tensor::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{config, io, BenchError, Result};

const ENCODE_BATCH: usize = 64;

/// File names under the output directory.
#[derive(Clone, Debug)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io(&root))?;
        Ok(OutDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn dataset(&self) -> PathBuf {
        self.path("dataset.lads")
    }

    pub fn action_lam(&self) -> PathBuf {
        self.path("action_lam.ckpt")
    }

    pub fn image_lam(&self) -> PathBuf {
        self.path("image_lam.ckpt")
    }

    pub fn policy(&self, strategy: Strategy, seed: u64) -> PathBuf {
        self.path(&format!("policy_{strategy}_s{seed}.ckpt"))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(io(path))?))
}

/// The configured dataset: read from `dataset` when set, otherwise generated
/// from (tasks, n_demos, data_seed) and written to the output directory.
pub fn dataset(cfg: &Config, out: &OutDir) -> Result<Dataset> {
    if cfg.dataset != "auto" {
        let path = PathBuf::from(&cfg.dataset);
        if !path.exists() {
            return Err(config(format!("dataset file {} does not exist", path.display())));
        }
        let data = Dataset::read(&mut open(&path)?)?;
        let want: Vec<u32> = cfg.task_list()?.iter().map(|t| t.id).collect();
        return Ok(data.only_tasks(&want));
    }
    let data = Dataset::generate(&cfg.task_list()?, cfg.n_demos, cfg.data_seed)?;
    write_file(&out.dataset(), &data.to_bytes())?;
    Ok(data)
}

/// Every (episode, timestep) index of a dataset.
pub fn step_index(data: &Dataset) -> Vec<(usize, usize)> {
    data.episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
        .collect()
}

fn normalized_chunk(data: &Dataset, e: usize, t: usize, h: usize) -> Vec<f32> {
    data.norm.normalize(&data.episodes[e].action_chunk(t, h))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One row of a loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub values: Vec<(&'static str, Option<f64>)>,
}

pub fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    if let Some(first) = rows.first() {
        let mut header = vec!["step"];
        header.extend(first.values.iter().map(|(k, _)| *k));
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.step.to_string()];
        rec.extend(r.values.iter().map(|(_, v)| v.map_or_else(String::new, |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

fn logged(step: usize, total: usize, every: usize) -> bool {
    step.is_multiple_of(every) || step + 1 == total
}

pub fn train_action_lam(cfg: &Config, data: &Dataset) -> Result<(ActionLam, Vec<LossRow>)> {
    let mut lam = ActionLam::new(cfg.action_lam(), cfg.data_seed)?;
    let mut adam = Adam::new(&lam.store, cfg.alam_lr);
    let mut rng = stream(cfg.data_seed, 3);
    let index = step_index(data);
    let (h, b) = (cfg.h, cfg.alam_batch);
    let mut log = Vec::new();
    for step in 0..cfg.alam_steps {
        let mut chunks = Vec::with_capacity(b * h * ACTION_DIM);
        for _ in 0..b {
            let (e, t) = index[rng.random_range(0..index.len())];
            chunks.extend(normalized_chunk(data, e, t, h));
        }
        let v = lam.train_step(&mut adam, &chunks, b, &mut rng)?;
        if logged(step, cfg.alam_steps, cfg.log_every) {
            log.push(LossRow {
                step,
                values: vec![
                    ("rec", Some(v.rec)),
                    ("mask", Some(v.mask)),
                    ("commit", Some(v.commit)),
                    ("total", Some(v.total)),
                ],
            });
        }
    }
    Ok((lam, log))
}

/// `(start, end)` observation pairs `(t, min(t + delta, T - 1))`.
fn transition_obs(data: &Dataset, e: usize, t: usize, delta: usize) -> (Vec<f32>, Vec<f32>) {
    let ep = &data.episodes[e];
    let end = (t + delta).min(ep.len() - 1);
    (obs_to_f32(&ep.steps[t].obs), obs_to_f32(&ep.steps[end].obs))
}

pub fn train_image_lam(cfg: &Config, data: &Dataset) -> Result<(ImageLam, Vec<LossRow>)> {
    let icfg = cfg.image_lam();
    let mut lam = ImageLam::new(icfg.clone(), cfg.data_seed)?;
    let mut adam = Adam::new(&lam.store, icfg.lr);
    let mut rng = stream(cfg.data_seed, 4);
    let index = step_index(data);
    let supervised = supervised_subset(index.len(), icfg.supervised_fraction, cfg.data_seed);
    let b = icfg.batch;
    let mut log = Vec::new();
    for step in 0..cfg.ilam_steps {
        let mut batch = TransitionBatch {
            n: b,
            ..TransitionBatch::default()
        };
        for row in 0..b {
            let i = rng.random_range(0..index.len());
            let (e, t) = index[i];
            let (s, x) = transition_obs(data, e, t, icfg.delta);
            batch.start.extend(s);
            batch.end.extend(x);
            if supervised.binary_search(&i).is_ok() {
                batch.sup.push(row);
                batch.actions.extend(data.norm.normalize(&data.episodes[e].steps[t].action));
            }
        }
        let v = lam.train_step(&mut adam, &batch)?;
        if logged(step, cfg.ilam_steps, cfg.log_every) {
            log.push(LossRow {
                step,
                values: vec![
                    ("rec", Some(v.rec)),
                    ("codebook", Some(v.codebook)),
                    ("commit", Some(v.commit)),
                    ("act", Some(v.act)),
                    ("total", Some(v.total)),
                ],
            });
        }
    }
    Ok((lam, log))
}

/// Per-step latent targets of one dataset, indexed `[episode][t]`.
#[derive(Clone, Debug, Default)]
pub struct TargetTable {
    pub tokens: Vec<Vec<Vec<usize>>>,
    pub c: Vec<Vec<Vec<f32>>>,
}

fn batched<F>(data: &Dataset, mut f: F) -> Result<TargetTable>
where
    F: FnMut(&[(usize, usize)]) -> Result<(Vec<usize>, Vec<f32>)>,
{
    let mut table = TargetTable {
        tokens: data.episodes.iter().map(|e| vec![Vec::new(); e.len()]).collect(),
        c: data.episodes.iter().map(|e| vec![Vec::new(); e.len()]).collect(),
    };
    for part in step_index(data).chunks(ENCODE_BATCH) {
        let (tokens, c) = f(part)?;
        let (tk, ck) = (tokens.len() / part.len(), c.len() / part.len());
        for (i, &(e, t)) in part.iter().enumerate() {
            table.tokens[e][t] = tokens[i * tk..(i + 1) * tk].to_vec();
            table.c[e][t] = c[i * ck..(i + 1) * ck].to_vec();
        }
    }
    Ok(table)
}

/// `h` action tokens and latents for the chunk starting at every step.
pub fn action_targets(lam: &ActionLam, data: &Dataset) -> Result<TargetTable> {
    let h = lam.cfg.h;
    batched(data, |part| {
        let chunks: Vec<f32> = part.iter().flat_map(|&(e, t)| normalized_chunk(data, e, t, h)).collect();
        let seq = lam.tokenize_batch(&chunks, part.len())?;
        Ok((seq.indices, seq.c))
    })
}

/// `p` image tokens and latents for the transition starting at every step.
pub fn image_targets(lam: &ImageLam, data: &Dataset) -> Result<TargetTable> {
    let delta = lam.cfg.delta;
    batched(data, |part| {
        let (mut start, mut end) = (Vec::new(), Vec::new());
        for &(e, t) in part {
            let (s, x) = transition_obs(data, e, t, delta);
            start.extend(s);
            end.extend(x);
        }
        Ok(lam.tokenize(&start, &end, part.len())?)
    })
}

pub fn write_action_tokens(path: &Path, table: &TargetTable) -> Result<()> {
    let rows: Vec<Vec<usize>> = table.tokens.iter().flatten().cloned().collect();
    let mut w = create(path)?;
    write_tokens(&mut w, &rows)?;
    w.flush().map_err(io(path))
}

pub fn write_image_tokens(path: &Path, table: &TargetTable) -> Result<()> {
    let mut records = Vec::new();
    for (e, (toks, cs)) in table.tokens.iter().zip(&table.c).enumerate() {
        for (t, (tk, c)) in toks.iter().zip(cs).enumerate() {
            records.push(TokenRecord {
                episode: e as u32,
                t: t as u32,
                tokens: tk.iter().map(|&k| k as u8).collect(),
                c: c.clone(),
            });
        }
    }
    let mut w = create(path)?;
    write_token_cache(&mut w, &records)?;
    w.flush().map_err(io(path))
}

/// Frozen latent models, loaded only when a strategy needs them.
#[derive(Clone, Debug, Default)]
pub struct FrozenLams {
    pub action: Option<ActionLam>,
    pub image: Option<ImageLam>,
}

impl FrozenLams {
    /// Loads the checkpoints the given strategies need from the output directory.
    pub fn load_for(out: &OutDir, strategies: &[Strategy]) -> Result<Self> {
        let mut lams = FrozenLams::default();
        let needs = |src| strategies.iter().any(|s| s.target_source() == src);
        if needs(TargetSource::Action) {
            let path = out.action_lam();
            if !path.exists() {
                return Err(config(format!(
                    "{} is missing; run `train-lam action` first",
                    path.display()
                )));
            }
            lams.action = Some(ActionLam::load(&mut open(&path)?)?);
        }
        if needs(TargetSource::Image) {
            let path = out.image_lam();
            if !path.exists() {
                return Err(config(format!(
                    "{} is missing; run `train-lam image` first",
                    path.display()
                )));
            }
            lams.image = Some(ImageLam::load(&mut open(&path)?)?);
        }
        Ok(lams)
    }

    /// Trains the latent models the given strategies need and saves them.
    pub fn train_for(cfg: &Config, data: &Dataset, out: &OutDir, strategies: &[Strategy]) -> Result<Self> {
        let mut lams = FrozenLams::default();
        let needs = |src| strategies.iter().any(|s| s.target_source() == src);
        if needs(TargetSource::Action) {
            let (lam, log) = train_action_lam(cfg, data)?;
            save_action_lam(out, &lam, &log)?;
            lams.action = Some(lam);
        }
        if needs(TargetSource::Image) {
            let (lam, log) = train_image_lam(cfg, data)?;
            save_image_lam(out, &lam, &log)?;
            lams.image = Some(lam);
        }
        Ok(lams)
    }

    /// Targets for `strategy` over `data`.
    pub fn targets(&self, strategy: Strategy, data: &Dataset) -> Result<Option<TargetTable>> {
        match strategy.target_source() {
            TargetSource::None => Ok(None),
            TargetSource::Action => {
                let lam = self.action.as_ref().ok_or_else(|| config("action LAM not loaded"))?;
                Ok(Some(action_targets(lam, data)?))
            }
            TargetSource::Image => {
                let lam = self.image.as_ref().ok_or_else(|| config("image LAM not loaded"))?;
                Ok(Some(image_targets(lam, data)?))
            }
        }
    }
}

pub fn save_action_lam(out: &OutDir, lam: &ActionLam, log: &[LossRow]) -> Result<()> {
    let mut bytes = Vec::new();
    lam.save(&mut bytes)?;
    write_file(&out.action_lam(), &bytes)?;
    write_loss_log(&out.path("action_lam_loss.csv"), log)
}

pub fn save_image_lam(out: &OutDir, lam: &ImageLam, log: &[LossRow]) -> Result<()> {
    let mut bytes = Vec::new();
    lam.save(&mut bytes)?;
    write_file(&out.image_lam(), &bytes)?;
    write_loss_log(&out.path("image_lam_loss.csv"), log)
}

/// Assembles a policy batch for the given (episode, t) samples.
pub fn policy_batch(
    model: &PolicyModel,
    data: &Dataset,
    table: Option<&TargetTable>,
    samples: &[(usize, usize)],
) -> Result<PolicyBatch> {
    let (h, n) = (model.cfg.h, samples.len());
    let mut batch = PolicyBatch {
        n,
        ..PolicyBatch::default()
    };
    let mut targets = LatentTargets::default();
    for &(e, t) in samples {
        let ep = &data.episodes[e];
        let step = &ep.steps[t];
        batch.obs.extend(obs_to_f32(&step.obs));
        batch.state.extend_from_slice(&step.state);
        batch.instr.push(Task::from_id(ep.task_id)?.instruction_id());
        batch.actions.extend(normalized_chunk(data, e, t, h));
        let Some(table) = table else { continue };
        match model.cfg.strategy.target_source() {
            TargetSource::Image => {
                for i in 0..h {
                    let s = (t + i).min(ep.len() - 1);
                    targets.img_tokens.extend_from_slice(&table.tokens[e][s]);
                    targets.img_c.extend_from_slice(&table.c[e][s]);
                }
            }
            TargetSource::Action => {
                targets.act_tokens.extend_from_slice(&table.tokens[e][t]);
                targets.act_c.extend_from_slice(&table.c[e][t]);
            }
            TargetSource::None => {}
        }
    }
    batch.targets = targets;
    Ok(batch)
}

/// Learning rate after `step` steps of step decay.
pub fn lr_at(cfg: &Config, step: usize) -> f64 {
    match cfg.lr_decay_every {
        0 => cfg.policy_lr,
        every => cfg.policy_lr * cfg.lr_decay_factor.powi((step / every) as i32),
    }
}

/// Policy training with a sampling stream separate from initialization.
pub fn train_policy(
    cfg: &Config,
    strategy: Strategy,
    seed: u64,
    data: &Dataset,
    table: Option<&TargetTable>,
) -> Result<(PolicyModel, Vec<LossRow>)> {
    if strategy.has_latent_loss() && table.is_none() {
        return Err(config(format!("{strategy} needs latent targets")));
    }
    let mut model = PolicyModel::new(cfg.policy_config(strategy), seed)?;
    model.norm = data.norm.clone();
    let mut adam = Adam::new(&model.store, cfg.policy_lr);
    let mut rng = stream(seed, 2);
    let index = step_index(data);
    if index.is_empty() {
        return Err(config("training data has no steps"));
    }
    let mut log = Vec::new();
    for step in 0..cfg.policy_steps {
        adam.lr = lr_at(cfg, step);
        let samples: Vec<(usize, usize)> = (0..cfg.policy_batch)
            .map(|_| index[rng.random_range(0..index.len())])
            .collect();
        let batch = policy_batch(&model, data, table, &samples)?;
        let v = model.train_step(&mut adam, &batch)?;
        if logged(step, cfg.policy_steps, cfg.log_every) {
            log.push(LossRow {
                step,
                values: vec![
                    ("l_action", Some(v.action)),
                    ("l_latent", v.latent),
                    ("total", Some(v.total)),
                    ("lr", Some(adam.lr)),
                ],
            });
        }
    }
    Ok((model, log))
}

pub fn save_policy(path: &Path, model: &PolicyModel) -> Result<()> {
    let mut bytes = Vec::new();
    model.save(&mut bytes)?;
    write_file(path, &bytes)
}

pub fn load_policy(path: &Path, expect: Strategy) -> Result<PolicyModel> {
    if !path.exists() {
        return Err(config(format!("policy checkpoint {} does not exist", path.display())));
    }
    PolicyModel::load(&mut open(path)?, Some(expect)).map_err(|e| match e {
        latb_core::CoreError::Invalid(m) => config(m),
        other => BenchError::from(other),
    })
}

/// Mean score over `eval_episodes` rollouts with environment seeds
/// `eval_seed + i`, plus the first rollout error if any.
pub fn evaluate_task(cfg: &Config, policy: &mut dyn Policy, task: &Task) -> (f64, Option<String>) {
    let mut total = 0.0;
    let mut error = None;
    for i in 0..cfg.eval_episodes {
        let r = rollout(policy, task, cfg.eval_seed + i as u64, task.max_steps());
        total += r.score;
        if error.is_none() {
            error = r.error;
        }
    }
    (total / cfg.eval_episodes as f64, error)
}

pub fn expert_policy(cfg: &Config) -> env::ExpertPolicy {
    env::ExpertPolicy { h: cfg.h }
}

pub fn random_policy(cfg: &Config, seed: u64) -> env::RandomPolicy {
    env::RandomPolicy {
        h: cfg.h,
        rng: stream(seed, 5),
    }
}
