//! Expert demonstration datasets and the `LADS` binary format.
//!
//! Layout, little-endian: magic `LADS`, version u32, task count u32, then
//! (task id u32, episode count u32) per task, state dim u32, action dim u32,
//! per-dimension action min then max (f32 each), total episode count u32, and
//! the episodes. Each episode is task id u32, length u32, then per step the
//! observation bytes, the state vector (f32) and the action (f32).

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{expert_action, EnvState, Task, ACTION_DIM, OBS_LEN, STATE_DIM};
use crate::error::{invalid, CoreError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"LADS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<u8>,
    pub state: Vec<f32>,
    pub action: [f32; ACTION_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task_id: u32,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Actions `t..t+h`, repeating the last action past the end.
    pub fn action_chunk(&self, t: usize, h: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(h * ACTION_DIM);
        for i in 0..h {
            let s = (t + i).min(self.steps.len() - 1);
            out.extend_from_slice(&self.steps[s].action);
        }
        out
    }
}

/// Per-dimension min/max scaling to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut min = vec![f32::INFINITY; dim];
        let mut max = vec![f32::NEG_INFINITY; dim];
        let mut any = false;
        for r in rows {
            any = true;
            for i in 0..dim {
                min[i] = min[i].min(r[i]);
                max[i] = max[i].max(r[i]);
            }
        }
        if !any {
            return Self::identity(dim);
        }
        Normalizer { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Rows of width `dim`, flattened. Constant dimensions map to 0.
    pub fn normalize(&self, x: &[f32]) -> Vec<f32> {
        let d = self.dim();
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.min[i % d], self.max[i % d]);
                if hi - lo <= f32::EPSILON {
                    0.0
                } else {
                    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                }
            })
            .collect()
    }

    pub fn denormalize(&self, x: &[f32]) -> Vec<f32> {
        let d = self.dim();
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.min[i % d], self.max[i % d]);
                lo + (v + 1.0) * 0.5 * (hi - lo)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// (task id, episode count) in file order.
    pub tasks: Vec<(u32, u32)>,
    pub norm: Normalizer,
    pub episodes: Vec<Episode>,
}

/// Runs the expert from `seed`'s start state; `None` if it fails within the
/// step budget.
pub fn expert_episode(task: &Task, seed: u64) -> Option<Episode> {
    let mut s = EnvState::reset(task, seed);
    let mut steps = Vec::new();
    for _ in 0..task.max_steps() {
        if s.is_done(task) {
            break;
        }
        let a = expert_action(task, &s);
        steps.push(Step {
            obs: s.render(task),
            state: s.to_vector(),
            action: a,
        });
        s.step(task, &a);
    }
    s.is_done(task).then_some(Episode {
        task_id: task.id,
        steps,
    })
}

fn task_stream(seed: u64, task: &Task) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.id as u64 + 1);
    rng
}

impl Dataset {
    /// `n_demos` successful expert episodes per task. Fails if the expert
    /// misses on more than 10% of attempts for any task.
    pub fn generate(tasks: &[Task], n_demos: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() || n_demos == 0 {
            return Err(invalid("dataset needs at least one task and one demo"));
        }
        let mut episodes = Vec::new();
        let mut counts = Vec::new();
        for task in tasks {
            let mut rng = task_stream(seed, task);
            let (mut ok, mut failed) = (0usize, 0usize);
            while ok < n_demos {
                match expert_episode(task, rng.next_u64()) {
                    Some(ep) => {
                        episodes.push(ep);
                        ok += 1;
                    }
                    None => failed += 1,
                }
                if failed * 10 > n_demos {
                    return Err(invalid(format!(
                        "expert failed {failed} times on {} (more than 10% of {n_demos} demos)",
                        task.name()
                    )));
                }
            }
            counts.push((task.id, n_demos as u32));
        }
        let norm = Normalizer::fit(
            ACTION_DIM,
            episodes.iter().flat_map(|e| e.steps.iter().map(|s| &s.action[..])),
        );
        Ok(Dataset {
            tasks: counts,
            norm,
            episodes,
        })
    }

    /// Keeps the first `ceil(fraction * count)` episodes of every task.
    /// Normalization statistics are kept from the full set.
    pub fn subset(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(format!("data fraction {fraction} outside (0, 1]")));
        }
        let mut tasks = Vec::new();
        let mut episodes = Vec::new();
        for &(id, count) in &self.tasks {
            let keep = ((fraction * count as f64).ceil() as usize).clamp(1, count as usize);
            episodes.extend(self.episodes.iter().filter(|e| e.task_id == id).take(keep).cloned());
            tasks.push((id, keep as u32));
        }
        Ok(Dataset {
            tasks,
            norm: self.norm.clone(),
            episodes,
        })
    }

    /// Restricts to the given task ids.
    pub fn only_tasks(&self, ids: &[u32]) -> Self {
        Dataset {
            tasks: self.tasks.iter().copied().filter(|(id, _)| ids.contains(id)).collect(),
            norm: self.norm.clone(),
            episodes: self.episodes.iter().filter(|e| ids.contains(&e.task_id)).cloned().collect(),
        }
    }

    pub fn task_list(&self) -> Result<Vec<Task>> {
        self.tasks.iter().map(|&(id, _)| Task::from_id(id)).collect()
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let u = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        let f = |out: &mut Vec<u8>, v: f32| out.extend_from_slice(&v.to_le_bytes());
        u(&mut out, DATASET_VERSION);
        u(&mut out, self.tasks.len() as u32);
        for &(id, n) in &self.tasks {
            u(&mut out, id);
            u(&mut out, n);
        }
        u(&mut out, STATE_DIM as u32);
        u(&mut out, ACTION_DIM as u32);
        for &v in self.norm.min.iter().chain(&self.norm.max) {
            f(&mut out, v);
        }
        u(&mut out, self.episodes.len() as u32);
        for e in &self.episodes {
            u(&mut out, e.task_id);
            u(&mut out, e.steps.len() as u32);
            for s in &e.steps {
                out.extend_from_slice(&s.obs);
                for &v in &s.state {
                    f(&mut out, v);
                }
                for &v in &s.action {
                    f(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != DATASET_MAGIC {
            return Err(CoreError::Format("bad dataset magic, expected LADS".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(CoreError::Format(format!("unsupported dataset version {version}")));
        }
        let nt = r.u32()? as usize;
        let mut tasks = Vec::with_capacity(nt);
        for _ in 0..nt {
            tasks.push((r.u32()?, r.u32()?));
        }
        let sd = r.u32()? as usize;
        let ad = r.u32()? as usize;
        if sd != STATE_DIM || ad != ACTION_DIM {
            return Err(CoreError::Format(format!(
                "dataset dims state={sd} action={ad}, expected {STATE_DIM} and {ACTION_DIM}"
            )));
        }
        let min = (0..ad).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let max = (0..ad).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let ne = r.u32()? as usize;
        let mut episodes = Vec::with_capacity(ne);
        for _ in 0..ne {
            let task_id = r.u32()?;
            let len = r.u32()? as usize;
            let mut steps = Vec::with_capacity(len);
            for _ in 0..len {
                let obs = r.take(OBS_LEN)?.to_vec();
                let state = (0..sd).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                let mut action = [0.0; ACTION_DIM];
                for a in &mut action {
                    *a = r.f32()?;
                }
                steps.push(Step { obs, state, action });
            }
            episodes.push(Episode { task_id, steps });
        }
        if r.pos != bytes.len() {
            return Err(CoreError::Format("trailing bytes after last episode".into()));
        }
        let declared: u64 = tasks.iter().map(|&(_, n)| n as u64).sum();
        if declared != ne as u64 {
            return Err(CoreError::Format(format!(
                "header lists {declared} episodes but file holds {ne}"
            )));
        }
        Ok(Dataset {
            tasks,
            norm: Normalizer { min, max },
            episodes,
        })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut b = Vec::new();
        r.read_to_end(&mut b)?;
        Self::from_bytes(&b)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.b.len() {
            return Err(CoreError::Format("truncated dataset".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
}
