//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use latb_core::action_lam::ActionLamConfig;
use latb_core::env::Task;
use latb_core::image_lam::ImageLamConfig;
use latb_core::policy::BackboneConfig;
use latb_core::strategies::{default_align_layer, PolicyConfig, Strategy};
use sha2::{Digest, Sha256};

use crate::error::{config, io, Result};

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, bool, String);

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl<T: Value> Value for Option<T> {
    fn parse(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(None)
        } else {
            T::parse(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), T::render)
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() {
            return Some(Vec::new());
        }
        s.split(',').map(|x| T::parse(x.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_struct {
    ($($(#[doc = $doc:literal])* $name:ident : $t:ty = $default:expr,)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])* pub $name: $t,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($name: $default,)* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$t as Value>::parse(value).ok_or_else(|| {
                            config(format!("bad value {value:?} for {key} (expected {})", stringify!($t)))
                        })?;
                    })*
                    _ => return Err(config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Every key with its effective value, one `key = value` per line.
            pub fn canonical(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($name), Value::render(&self.$name));)*
                out
            }
        }
    };
}

config_struct! {
    /// Policy training seeds; one CSV row per (strategy, seed, task).
    seeds: Vec<u64> = vec![0, 1, 2, 3, 4],
    /// Seed for data generation and latent model training.
    data_seed: u64 = 0,
    tasks: Vec<String> = vec!["stack_3".into()],
    /// Dataset file; `auto` generates or reuses `dataset.lads` under `--out`.
    dataset: String = "auto".into(),
    n_demos: usize = 50,
    data_fraction: f64 = 1.0,
    h: usize = 8,
    p: usize = 4,
    delta: usize = 4,
    strategy: String = "baseline".into(),
    lambda: Option<f64> = None,
    align_layer: Option<usize> = None,
    layers: usize = 6,
    d_hidden: usize = 64,
    heads: usize = 4,
    ff: usize = 128,
    state_proj: usize = 32,
    head_hidden: usize = 128,
    latent_hidden: usize = 128,
    policy_steps: usize = 5000,
    policy_batch: usize = 32,
    policy_lr: f64 = 1e-4,
    /// The learning rate is multiplied by `lr_decay_factor` every `lr_decay_every` steps (0: never).
    lr_decay_every: usize = 2000,
    lr_decay_factor: f64 = 0.5,
    alam_steps: usize = 2000,
    alam_batch: usize = 128,
    alam_lr: f64 = 1e-4,
    alam_k: usize = 256,
    alam_d: usize = 128,
    alam_layers: usize = 2,
    alam_heads: usize = 4,
    alam_ff: usize = 256,
    alam_dec_hidden: usize = 256,
    alam_kernel: usize = 3,
    alam_lambda_mask: f64 = 0.1,
    alam_beta: f64 = 0.25,
    alam_mask_ratio: f64 = 0.15,
    alam_decay: f64 = 0.99,
    alam_quantize_masked: bool = false,
    ilam_steps: usize = 2000,
    ilam_batch: usize = 32,
    ilam_lr: f64 = 1e-4,
    ilam_k: usize = 16,
    ilam_d: usize = 128,
    ilam_patch_dim: usize = 32,
    ilam_dec_hidden: usize = 256,
    ilam_act_hidden: usize = 128,
    ilam_beta: f64 = 0.25,
    ilam_lambda_act: f64 = 1.0,
    ilam_supervised_fraction: f64 = 0.05,
    eval_episodes: usize = 10,
    /// Environment seeds are `eval_seed + i` for episode `i`, shared by all policies.
    eval_seed: u64 = 10_000,
    record_timing: bool = false,
    /// Overrides the strategies a suite compares (empty: the suite's own list).
    suite_strategies: Vec<String> = Vec::new(),
    lambdas: Vec<f64> = vec![0.1, 0.2, 0.5],
    fractions: Vec<f64> = vec![0.33, 0.5, 1.0],
    /// Empty: first, default and last layer.
    align_layers: Vec<usize> = Vec::new(),
    /// `trained`, `expert` or `random`, for `evaluate`.
    policy: String = "trained".into(),
    /// Policy checkpoint for `evaluate`; `auto` uses the default path under `--out`.
    checkpoint: String = "auto".into(),
    log_every: usize = 100,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected `key = value`, got {raw:?}", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical listing, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy).map_err(|e| config(e.to_string()))
    }

    pub fn suite_strategies(&self) -> Result<Vec<Strategy>> {
        self.suite_strategies
            .iter()
            .map(|s| Strategy::parse(s).map_err(|e| config(e.to_string())))
            .collect()
    }

    pub fn task_list(&self) -> Result<Vec<Task>> {
        if self.tasks.is_empty() {
            return Err(config("tasks must not be empty"));
        }
        self.tasks
            .iter()
            .map(|t| Task::from_name(t).map_err(|e| config(e.to_string())))
            .collect()
    }

    pub fn action_lam(&self) -> ActionLamConfig {
        ActionLamConfig {
            h: self.h,
            m: latb_core::env::ACTION_DIM,
            k: self.alam_k,
            d: self.alam_d,
            kernel: self.alam_kernel,
            layers: self.alam_layers,
            heads: self.alam_heads,
            ff: self.alam_ff,
            dec_hidden: self.alam_dec_hidden,
            lambda_mask: self.alam_lambda_mask,
            beta: self.alam_beta,
            mask_ratio: self.alam_mask_ratio,
            lr: self.alam_lr,
            batch: self.alam_batch,
            decay: self.alam_decay,
            quantize_masked: self.alam_quantize_masked,
            ..ActionLamConfig::default()
        }
    }

    pub fn image_lam(&self) -> ImageLamConfig {
        ImageLamConfig {
            k: self.ilam_k,
            p: self.p,
            d: self.ilam_d,
            delta: self.delta,
            patch_dim: self.ilam_patch_dim,
            dec_hidden: self.ilam_dec_hidden,
            act_hidden: self.ilam_act_hidden,
            beta: self.ilam_beta,
            lambda_act: self.ilam_lambda_act,
            supervised_fraction: self.ilam_supervised_fraction,
            lr: self.ilam_lr,
            batch: self.ilam_batch,
            ..ImageLamConfig::default()
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            layers: self.layers,
            d: self.d_hidden,
            heads: self.heads,
            ff: self.ff,
            ..BackboneConfig::default()
        }
    }

    /// Policy configuration for `strategy` with this config's overrides.
    pub fn policy_config(&self, strategy: Strategy) -> PolicyConfig {
        let mut pc = PolicyConfig::new(strategy).with_backbone(self.backbone());
        pc.lambda = self.lambda.unwrap_or(strategy.default_lambda());
        pc.align_layer = self.align_layer.unwrap_or(default_align_layer(self.layers));
        pc.h = self.h;
        pc.p = self.p;
        pc.k_img = self.ilam_k;
        pc.k_act = self.alam_k;
        pc.d_img = self.ilam_d;
        pc.d_act = self.alam_d;
        pc.state_proj = self.state_proj;
        pc.head_hidden = self.head_hidden;
        pc.latent_hidden = self.latent_hidden;
        pc
    }

    /// Checks every value that would otherwise fail later in a run.
    pub fn validate(&self) -> Result<()> {
        let strategy = self.strategy()?;
        self.suite_strategies()?;
        self.task_list()?;
        if self.seeds.is_empty() {
            return Err(config("seeds must not be empty"));
        }
        let positive = [
            ("n_demos", self.n_demos),
            ("policy_steps", self.policy_steps),
            ("policy_batch", self.policy_batch),
            ("alam_batch", self.alam_batch),
            ("ilam_batch", self.ilam_batch),
            ("eval_episodes", self.eval_episodes),
            ("log_every", self.log_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config(format!("{k} must be positive")));
            }
        }
        let fraction_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !fraction_ok(self.data_fraction) || !self.fractions.iter().all(|&f| fraction_ok(f)) {
            return Err(config("data fractions must lie in (0, 1]"));
        }
        if self.lr_decay_factor <= 0.0 || self.policy_lr <= 0.0 {
            return Err(config("policy_lr and lr_decay_factor must be positive"));
        }
        if self.lambdas.iter().any(|&l| l < 0.0) {
            return Err(config("lambdas must be non-negative"));
        }
        if let Some(&bad) = self.align_layers.iter().find(|&&l| l == 0 || l > self.layers) {
            return Err(config(format!("align layer {bad} outside 1..={}", self.layers)));
        }
        if !["trained", "expert", "random"].contains(&self.policy.as_str()) {
            return Err(config(format!("policy must be trained, expert or random, got {:?}", self.policy)));
        }
        self.action_lam().validate().map_err(|e| config(e.to_string()))?;
        self.image_lam().validate().map_err(|e| config(e.to_string()))?;
        self.policy_config(strategy).validate().map_err(|e| config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = Config::parse("# header\nstrategy = la_tok  # trailing\nseeds = 3, 4\nlambda = 0.2\n\n").unwrap();
        assert_eq!(cfg.strategy, "la_tok");
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.lambda, Some(0.2));
        assert_eq!(cfg.policy_steps, 5000);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::parse("nonsense").is_err());
        assert!(Config::parse("no_such_key = 1").is_err());
        assert!(Config::parse("policy_steps = many").is_err());
        assert!(Config::parse("strategy = s9").is_err());
        assert!(Config::parse("tasks = stack_9").is_err());
        assert_eq!(Config::parse("heads = 5").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn canonical_round_trips_and_hash_tracks_values() {
        let cfg = Config::parse("lambda = 0.1\nsuite_strategies = la_direct,baseline").unwrap();
        let back = Config::parse(&cfg.canonical()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = Config::parse("lambda = 0.2").unwrap();
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        assert_eq!(cfg.canonical().lines().count(), Config::KEYS.len());
    }
}
