//! Synthetic top-down manipulation environment with scripted experts.
//!
//! The agent moves in the unit square, toggles a gripper and carries at most
//! one object. All arithmetic is `f32` so stored episodes replay exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

pub const ACTION_DIM: usize = 3;
pub const MAX_OBJECTS: usize = 4;
/// agent x, y, gripper, held index + 1 (0 = none), stage, then object xy pairs.
pub const STATE_DIM: usize = 5 + 2 * MAX_OBJECTS;
pub const GRID: usize = 16;
pub const CHANNELS: usize = 3;
pub const OBS_LEN: usize = GRID * GRID * CHANNELS;
pub const NUM_TASKS: usize = 5;

pub const MOVE_SCALE: f32 = 0.1;
pub const GRASP_TOL: f32 = 0.05;
pub const PLACE_TOL: f32 = 0.08;
pub const REACH_TOL: f32 = 0.03;
pub const HOME: [f32; 2] = [0.5, 0.15];
pub const AGENT_JITTER: f32 = 0.1;
pub const SLOT_Y: f32 = 0.45;
pub const SLOT_SPACING: f32 = 0.2;
pub const OBJECT_JITTER: f32 = 0.05;
/// Third action component above this toggles the gripper.
pub const TOGGLE_THRESHOLD: f32 = 0.5;

const OBJECT_COLORS: [[u8; 3]; MAX_OBJECTS] = [[255, 64, 64], [64, 255, 64], [64, 128, 255], [255, 255, 64]];
const PAD_COLOR: [u8; 3] = [96, 96, 96];
const AGENT_OPEN: [u8; 3] = [255, 255, 255];
const AGENT_CLOSED: [u8; 3] = [255, 128, 255];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Reach,
    PickPlace,
    Stack(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Task {
    pub id: u32,
    pub kind: TaskKind,
    pub goal: [f32; 2],
}

impl Task {
    pub fn reach() -> Self {
        Task {
            id: 0,
            kind: TaskKind::Reach,
            goal: [0.8, 0.8],
        }
    }

    pub fn pick_place() -> Self {
        Task {
            id: 1,
            kind: TaskKind::PickPlace,
            goal: [0.8, 0.2],
        }
    }

    /// Stack `n` objects on the pad, in index order. `n` in 2..=4.
    pub fn stack(n: usize) -> Result<Self> {
        if !(2..=MAX_OBJECTS).contains(&n) {
            return Err(invalid(format!("stack_n needs n in 2..={MAX_OBJECTS}, got {n}")));
        }
        Ok(Task {
            id: n as u32,
            kind: TaskKind::Stack(n),
            goal: [0.5, 0.85],
        })
    }

    pub fn all() -> Vec<Task> {
        (0..NUM_TASKS as u32).map(|i| Task::from_id(i).expect("valid id")).collect()
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Task::reach()),
            1 => Ok(Task::pick_place()),
            2..=4 => Task::stack(id as usize),
            _ => Err(invalid(format!("unknown task id {id}"))),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "reach" => Ok(Task::reach()),
            "pick_place" => Ok(Task::pick_place()),
            _ => match name.strip_prefix("stack_").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) => Task::stack(n),
                None => Err(invalid(format!("unknown task {name:?}"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            TaskKind::Reach => "reach".into(),
            TaskKind::PickPlace => "pick_place".into(),
            TaskKind::Stack(n) => format!("stack_{n}"),
        }
    }

    pub fn instruction_id(&self) -> usize {
        self.id as usize
    }

    pub fn n_stages(&self) -> usize {
        match self.kind {
            TaskKind::Reach | TaskKind::PickPlace => 1,
            TaskKind::Stack(n) => n,
        }
    }

    pub fn n_objects(&self) -> usize {
        match self.kind {
            TaskKind::Reach => 0,
            TaskKind::PickPlace => 1,
            TaskKind::Stack(n) => n,
        }
    }

    pub fn max_steps(&self) -> usize {
        40 * self.n_stages() + 20
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub agent: [f32; 2],
    pub gripper: bool,
    pub objects: Vec<[f32; 2]>,
    pub held: Option<usize>,
    pub stage: usize,
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl EnvState {
    /// Jittered start: the agent near [`HOME`], objects in evenly spaced
    /// slots along `y = SLOT_Y`, each coordinate perturbed uniformly.
    pub fn reset(task: &Task, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |c: f32, r: f32| c + rng.random_range(-r..=r);
        let agent = [jitter(HOME[0], AGENT_JITTER), jitter(HOME[1], AGENT_JITTER)];
        let n = task.n_objects();
        let objects = (0..n)
            .map(|i| {
                let x = 0.5 + (i as f32 - (n as f32 - 1.0) / 2.0) * SLOT_SPACING;
                [jitter(x, OBJECT_JITTER), jitter(SLOT_Y, OBJECT_JITTER)]
            })
            .collect();
        EnvState {
            agent,
            gripper: false,
            objects,
            held: None,
            stage: 0,
        }
    }

    pub fn to_vector(&self) -> Vec<f32> {
        let mut v = vec![0.0; STATE_DIM];
        v[0] = self.agent[0];
        v[1] = self.agent[1];
        v[2] = self.gripper as u8 as f32;
        v[3] = self.held.map_or(0.0, |i| (i + 1) as f32);
        v[4] = self.stage as f32;
        for (i, o) in self.objects.iter().enumerate() {
            v[5 + 2 * i] = o[0];
            v[6 + 2 * i] = o[1];
        }
        v
    }

    pub fn from_vector(task: &Task, v: &[f32]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(invalid(format!("state vector has {} entries, expected {STATE_DIM}", v.len())));
        }
        let n = task.n_objects();
        let held = match v[3] as usize {
            0 => None,
            i if i <= n => Some(i - 1),
            i => return Err(invalid(format!("held index {i} out of range"))),
        };
        Ok(EnvState {
            agent: [v[0], v[1]],
            gripper: v[2] > 0.5,
            objects: (0..n).map(|i| [v[5 + 2 * i], v[6 + 2 * i]]).collect(),
            held,
            stage: v[4] as usize,
        })
    }

    pub fn is_done(&self, task: &Task) -> bool {
        self.stage >= task.n_stages()
    }

    /// Applies one action: move by `0.1 * clamp(delta)`, then toggle the gripper
    /// when the third component exceeds the threshold.
    pub fn step(&mut self, task: &Task, action: &[f32]) {
        let dx = action[0].clamp(-1.0, 1.0) * MOVE_SCALE;
        let dy = action[1].clamp(-1.0, 1.0) * MOVE_SCALE;
        self.agent = [(self.agent[0] + dx).clamp(0.0, 1.0), (self.agent[1] + dy).clamp(0.0, 1.0)];
        if let Some(i) = self.held {
            self.objects[i] = self.agent;
        }
        if action[2] > TOGGLE_THRESHOLD {
            if self.gripper {
                self.gripper = false;
                if let Some(i) = self.held.take() {
                    if i == self.stage && dist(self.objects[i], task.goal) <= PLACE_TOL {
                        self.stage += 1;
                    }
                }
            } else {
                self.gripper = true;
                let mut best: Option<(usize, f32)> = None;
                for (i, &o) in self.objects.iter().enumerate() {
                    let dd = dist(o, self.agent);
                    if dd <= GRASP_TOL && best.is_none_or(|(_, b)| dd < b) {
                        best = Some((i, dd));
                    }
                }
                if let Some((i, _)) = best {
                    self.held = Some(i);
                    self.objects[i] = self.agent;
                }
            }
        }
        if task.kind == TaskKind::Reach && self.stage == 0 && dist(self.agent, task.goal) <= REACH_TOL {
            self.stage = 1;
        }
    }

    /// 16x16x3 top-down render, row-major `[y][x][c]`, values 0..=255.
    pub fn render(&self, task: &Task) -> Vec<u8> {
        let mut img = vec![0u8; OBS_LEN];
        square(&mut img, task.goal, PAD_COLOR);
        for (i, &o) in self.objects.iter().enumerate() {
            square(&mut img, o, OBJECT_COLORS[i]);
        }
        let (ax, ay) = (cell(self.agent[0]), cell(self.agent[1]));
        let c = if self.gripper { AGENT_CLOSED } else { AGENT_OPEN };
        paint(&mut img, ax, ay, c);
        if ax > 0 {
            paint(&mut img, ax - 1, ay, c);
        }
        if ax + 1 < GRID {
            paint(&mut img, ax + 1, ay, c);
        }
        if ay > 0 {
            paint(&mut img, ax, ay - 1, c);
        }
        if ay + 1 < GRID {
            paint(&mut img, ax, ay + 1, c);
        }
        img
    }
}

fn cell(v: f32) -> usize {
    ((v * GRID as f32) as usize).min(GRID - 1)
}

fn paint(img: &mut [u8], x: usize, y: usize, c: [u8; 3]) {
    let o = (y * GRID + x) * CHANNELS;
    img[o..o + 3].copy_from_slice(&c);
}

/// 2x2 pixel square anchored at the cell containing `p`.
fn square(img: &mut [u8], p: [f32; 2], c: [u8; 3]) {
    let (x, y) = (cell(p[0]).min(GRID - 2), cell(p[1]).min(GRID - 2));
    for yy in y..y + 2 {
        for xx in x..x + 2 {
            paint(img, xx, yy, c);
        }
    }
}

/// Observation bytes as floats `k / 255`.
pub fn obs_to_f32(obs: &[u8]) -> Vec<f32> {
    obs.iter().map(|&b| b as f32 / 255.0).collect()
}

fn toward(from: [f32; 2], to: [f32; 2]) -> [f32; 3] {
    [
        ((to[0] - from[0]) / MOVE_SCALE).clamp(-1.0, 1.0),
        ((to[1] - from[1]) / MOVE_SCALE).clamp(-1.0, 1.0),
        0.0,
    ]
}

/// Proportional controller toward the current subgoal.
pub fn expert_action(task: &Task, s: &EnvState) -> [f32; 3] {
    const AT: f32 = 0.02;
    const TOGGLE: [f32; 3] = [0.0, 0.0, 1.0];
    if s.is_done(task) {
        return [0.0; 3];
    }
    match task.kind {
        TaskKind::Reach => toward(s.agent, task.goal),
        TaskKind::PickPlace | TaskKind::Stack(_) => match s.held {
            Some(i) if i == s.stage => {
                if dist(s.agent, task.goal) <= AT {
                    TOGGLE
                } else {
                    toward(s.agent, task.goal)
                }
            }
            // holding the wrong object or closed on nothing: let go
            Some(_) => TOGGLE,
            None if s.gripper => TOGGLE,
            None => {
                let target = s.objects[s.stage];
                if dist(s.agent, target) <= AT {
                    TOGGLE
                } else {
                    toward(s.agent, target)
                }
            }
        },
    }
}

/// Something that maps an observation to a chunk of actions.
pub trait Policy {
    /// `obs` has [`OBS_LEN`] values in `[0, 1]`; `state` has [`STATE_DIM`].
    /// Returns a chunk of actions, each [`ACTION_DIM`] wide, row-major.
    fn act_chunk(&mut self, task: &Task, obs: &[f32], state: &[f32]) -> Result<Vec<f32>>;
}

/// The scripted expert planned `h` steps ahead on a copy of the state.
pub struct ExpertPolicy {
    pub h: usize,
}

impl Policy for ExpertPolicy {
    fn act_chunk(&mut self, task: &Task, _obs: &[f32], state: &[f32]) -> Result<Vec<f32>> {
        let mut s = EnvState::from_vector(task, state)?;
        let mut out = Vec::with_capacity(self.h * ACTION_DIM);
        for _ in 0..self.h {
            let a = expert_action(task, &s);
            s.step(task, &a);
            out.extend_from_slice(&a);
        }
        Ok(out)
    }
}

/// Uniform random actions in `[-1, 1]^3`.
pub struct RandomPolicy {
    pub h: usize,
    pub rng: ChaCha8Rng,
}

impl Policy for RandomPolicy {
    fn act_chunk(&mut self, _task: &Task, _obs: &[f32], _state: &[f32]) -> Result<Vec<f32>> {
        Ok((0..self.h * ACTION_DIM).map(|_| self.rng.random_range(-1.0f32..=1.0)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub score: f64,
    pub steps: usize,
    pub stages: usize,
    pub error: Option<String>,
}

/// Graded score: completed stages over total stages.
pub fn score(task: &Task, stages: usize) -> f64 {
    stages.min(task.n_stages()) as f64 / task.n_stages() as f64
}

/// Closed-loop evaluation with open-loop chunk execution.
pub fn rollout(policy: &mut dyn Policy, task: &Task, seed: u64, max_steps: usize) -> RolloutResult {
    let mut s = EnvState::reset(task, seed);
    let mut steps = 0;
    while steps < max_steps && !s.is_done(task) {
        let obs = obs_to_f32(&s.render(task));
        let chunk = match policy.act_chunk(task, &obs, &s.to_vector()) {
            Ok(c) => c,
            Err(e) => {
                return RolloutResult {
                    score: 0.0,
                    steps,
                    stages: s.stage,
                    error: Some(format!("policy error: {e}")),
                }
            }
        };
        if chunk.is_empty() || chunk.len() % ACTION_DIM != 0 {
            return RolloutResult {
                score: 0.0,
                steps,
                stages: s.stage,
                error: Some(format!("policy returned {} action values", chunk.len())),
            };
        }
        if chunk.iter().any(|v| !v.is_finite()) {
            return RolloutResult {
                score: 0.0,
                steps,
                stages: s.stage,
                error: Some("policy produced a non-finite action".into()),
            };
        }
        for a in chunk.chunks_exact(ACTION_DIM) {
            if steps >= max_steps || s.is_done(task) {
                break;
            }
            s.step(task, a);
            steps += 1;
        }
    }
    RolloutResult {
        score: score(task, s.stage),
        steps,
        stages: s.stage,
        error: None,
    }
}
