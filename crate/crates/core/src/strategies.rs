//! Latent-action supervision strategies on top of the toy backbone.

use std::fmt;
use std::io::{Read, Write};

use latb_tensor::nn::{Linear, Mlp};
use latb_tensor::{Adam, Graph, Param, ParamStore, Real, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt;
use crate::dataset::Normalizer;
use crate::env::{self, Task, ACTION_DIM, STATE_DIM};
use crate::error::{check_finite, invalid, Result};
use crate::policy::{ActionHead, Backbone, BackboneConfig, Hidden, Layout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Baseline,
    LaAlign,
    LaDirect,
    LaCond,
    LaTok,
    DirectC,
    TokC,
    PhDirect,
    PhCond,
}

/// Which frozen latent model a strategy draws its targets from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSource {
    None,
    Image,
    Action,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Baseline,
        Strategy::LaAlign,
        Strategy::LaDirect,
        Strategy::LaCond,
        Strategy::LaTok,
        Strategy::DirectC,
        Strategy::TokC,
        Strategy::PhDirect,
        Strategy::PhCond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::LaAlign => "la_align",
            Strategy::LaDirect => "la_direct",
            Strategy::LaCond => "la_cond",
            Strategy::LaTok => "la_tok",
            Strategy::DirectC => "direct_c",
            Strategy::TokC => "tok_c",
            Strategy::PhDirect => "ph_direct",
            Strategy::PhCond => "ph_cond",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid(format!("unknown strategy {s:?}")))
    }

    pub fn id(self) -> usize {
        Strategy::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Strategy::ALL
            .get(id)
            .copied()
            .ok_or_else(|| invalid(format!("unknown strategy id {id}")))
    }

    /// (latent slots, action slots) for chunk length `h` and `p` image tokens per step.
    pub fn layout(self, h: usize, p: usize) -> Layout {
        let (latent, action) = match self {
            Strategy::Baseline | Strategy::LaAlign => (0, h),
            Strategy::LaDirect | Strategy::DirectC => (p * h, 0),
            Strategy::LaCond => (p * h, h),
            Strategy::LaTok | Strategy::TokC => (h, 0),
            Strategy::PhDirect => (0, p * h),
            Strategy::PhCond => (0, p * h + h),
        };
        Layout { latent, action }
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            Strategy::Baseline | Strategy::PhDirect | Strategy::PhCond => 0.0,
            Strategy::LaAlign => 1.0,
            Strategy::LaDirect | Strategy::LaCond | Strategy::LaTok => 0.1,
            Strategy::DirectC | Strategy::TokC => 0.1,
        }
    }

    pub fn target_source(self) -> TargetSource {
        match self {
            Strategy::LaAlign | Strategy::LaDirect | Strategy::LaCond | Strategy::DirectC => TargetSource::Image,
            Strategy::LaTok | Strategy::TokC => TargetSource::Action,
            Strategy::Baseline | Strategy::PhDirect | Strategy::PhCond => TargetSource::None,
        }
    }

    pub fn has_latent_loss(self) -> bool {
        self.target_source() != TargetSource::None
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Default alignment layer, `ceil(0.6 * n)` (1-indexed).
pub fn default_align_layer(n_layers: usize) -> usize {
    ((0.6 * n_layers as f64).ceil() as usize).clamp(1, n_layers)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub backbone: BackboneConfig,
    pub strategy: Strategy,
    pub lambda: f64,
    pub align_layer: usize,
    pub h: usize,
    pub p: usize,
    pub m: usize,
    pub k_img: usize,
    pub k_act: usize,
    pub d_img: usize,
    pub d_act: usize,
    pub state_proj: usize,
    pub head_hidden: usize,
    pub latent_hidden: usize,
}

impl PolicyConfig {
    pub fn new(strategy: Strategy) -> Self {
        let backbone = BackboneConfig::default();
        PolicyConfig {
            align_layer: default_align_layer(backbone.layers),
            backbone,
            strategy,
            lambda: strategy.default_lambda(),
            h: 8,
            p: 4,
            m: ACTION_DIM,
            k_img: 16,
            k_act: 256,
            d_img: 128,
            d_act: 128,
            state_proj: 32,
            head_hidden: 128,
            latent_hidden: 128,
        }
    }

    /// Replaces the backbone and resets the align layer to its default for the new depth.
    pub fn with_backbone(mut self, backbone: BackboneConfig) -> Self {
        self.align_layer = default_align_layer(backbone.layers);
        self.backbone = backbone;
        self
    }

    pub fn layout(&self) -> Layout {
        self.strategy.layout(self.h, self.p)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(invalid("lambda must be a finite non-negative number"));
        }
        if self.align_layer == 0 || self.align_layer > self.backbone.layers {
            return Err(invalid(format!(
                "align_layer {} outside 1..={}",
                self.align_layer, self.backbone.layers
            )));
        }
        for (name, v) in [
            ("h", self.h),
            ("p", self.p),
            ("m", self.m),
            ("k_img", self.k_img),
            ("k_act", self.k_act),
            ("d_img", self.d_img),
            ("d_act", self.d_act),
            ("state_proj", self.state_proj),
            ("head_hidden", self.head_hidden),
            ("latent_hidden", self.latent_hidden),
        ] {
            if v == 0 {
                return Err(invalid(format!("policy {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Frozen-model targets for a batch. Image targets hold `n*h*p` tokens and
/// `n*h*p*d_img` embeddings (step-major); action targets `n*h` tokens and
/// `n*h*d_act` embeddings. Unused parts stay empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentTargets {
    pub img_tokens: Vec<usize>,
    pub img_c: Vec<f32>,
    pub act_tokens: Vec<usize>,
    pub act_c: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct PolicyBatch {
    pub obs: Vec<f32>,
    pub state: Vec<f32>,
    pub instr: Vec<usize>,
    /// Normalized action chunks, `n*h*m`.
    pub actions: Vec<f32>,
    pub n: usize,
    pub targets: LatentTargets,
}

/// Strategy-specific modules, created from their own random stream.
#[derive(Clone, Debug)]
pub enum LatentHead {
    None,
    Align(Linear),
    Tokens(Linear),
    Regress(Mlp),
}

pub struct ForwardVars {
    pub hidden: Hidden,
    pub actions: Var,
    /// Logits or regressions at the supervised positions.
    pub latent_out: Option<Var>,
}

pub struct PolicyLossVars {
    pub fwd: ForwardVars,
    pub action_loss: Var,
    pub latent_loss: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyLossValues {
    pub action: f64,
    pub latent: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: ActionHead,
    pub latent_head: LatentHead,
    pub norm: Normalizer,
}

impl PolicyModel {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), layout, &mut rng)?;
        let mut widths = Vec::new();
        if layout.latent > 0 {
            widths.push(backbone.aggregate_width(layout.latent));
        }
        if layout.action > 0 {
            widths.push(backbone.aggregate_width(layout.action));
        }
        let head = ActionHead::new(
            &mut store,
            cfg.backbone.d,
            &widths,
            cfg.state_proj,
            cfg.head_hidden,
            cfg.h,
            cfg.m,
            &mut rng,
        )?;
        let mut srng = ChaCha8Rng::seed_from_u64(seed);
        srng.set_stream(1);
        let d = cfg.backbone.d;
        let latent_head = match cfg.strategy {
            Strategy::LaAlign => LatentHead::Align(Linear::new(&mut store, "latent.align", d, cfg.d_img, &mut srng)),
            Strategy::LaDirect | Strategy::LaCond => {
                LatentHead::Tokens(Linear::new(&mut store, "latent.tokens", d, cfg.k_img, &mut srng))
            }
            Strategy::LaTok => LatentHead::Tokens(Linear::new(&mut store, "latent.tokens", d, cfg.k_act, &mut srng)),
            Strategy::DirectC => {
                LatentHead::Regress(Mlp::new(&mut store, "latent.reg", d, cfg.latent_hidden, cfg.d_img, &mut srng))
            }
            Strategy::TokC => {
                LatentHead::Regress(Mlp::new(&mut store, "latent.reg", d, cfg.latent_hidden, cfg.d_act, &mut srng))
            }
            Strategy::Baseline | Strategy::PhDirect | Strategy::PhCond => LatentHead::None,
        };
        Ok(PolicyModel {
            norm: Normalizer::identity(cfg.m),
            cfg,
            store,
            backbone,
            head,
            latent_head,
        })
    }

    pub fn layout(&self) -> Layout {
        self.backbone.layout
    }

    /// Runs backbone, head and latent head from an already embedded sequence.
    pub fn forward_from_seq<T: Real>(
        &self,
        g: &mut Graph<T>,
        seq: Var,
        state: &[f32],
        n: usize,
    ) -> Result<ForwardVars> {
        let bb = &self.backbone;
        let hidden = bb.encode(g, &self.store, seq, n)?;
        let layout = bb.layout;
        let h_img = bb.image_summary(g, &hidden)?;
        let mut parts = Vec::new();
        if layout.latent > 0 {
            parts.push(bb.aggregate(g, &hidden, &bb.latent_rows(n))?);
        }
        if layout.action > 0 {
            parts.push(bb.aggregate(g, &hidden, &bb.action_rows(n))?);
        }
        let actions = self.head.forward(g, &self.store, h_img, &parts, state)?;
        let last = *hidden.layers.last().expect("layers");
        let latent_out = match &self.latent_head {
            LatentHead::None => None,
            LatentHead::Align(proj) => {
                let nu = g.gather_rows(hidden.layers[self.cfg.align_layer - 1], &bb.action_rows(n))?;
                Some(proj.forward(g, &self.store, nu)?)
            }
            LatentHead::Tokens(lin) => {
                let nu = g.gather_rows(last, &bb.latent_rows(n))?;
                Some(lin.forward(g, &self.store, nu)?)
            }
            LatentHead::Regress(mlp) => {
                let nu = g.gather_rows(last, &bb.latent_rows(n))?;
                Some(mlp.forward(g, &self.store, nu)?)
            }
        };
        Ok(ForwardVars {
            hidden,
            actions,
            latent_out,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        obs: &[f32],
        state: &[f32],
        instr: &[usize],
        n: usize,
    ) -> Result<ForwardVars> {
        let seq = self.backbone.embed(g, &self.store, obs, instr, n)?;
        self.forward_from_seq(g, seq, state, n)
    }

    /// Strategy loss from the latent head output.
    pub fn latent_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        out: Var,
        targets: &LatentTargets,
        n: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (h, p) = (cfg.h, cfg.p);
        match (&self.latent_head, cfg.strategy) {
            (LatentHead::Align(_), _) => {
                let (d, want) = (cfg.d_img, n * h * p * cfg.d_img);
                if targets.img_c.len() != want {
                    return Err(invalid(format!("align targets: expected {want} values, got {}", targets.img_c.len())));
                }
                // mean over the p tokens of each step
                let mut pooled = vec![T::zero(); n * h * d];
                for r in 0..n * h {
                    for j in 0..d {
                        let s: f64 = (0..p).map(|t| targets.img_c[(r * p + t) * d + j] as f64).sum();
                        pooled[r * d + j] = T::of(s / p as f64);
                    }
                }
                let tgt = g.constant(&[n * h, d], pooled)?;
                let cos = g.cosine_similarity(out, tgt, 1e-8)?;
                let mean = g.mean(cos)?;
                Ok(g.scale(mean, -1.0)?)
            }
            (LatentHead::Tokens(_), Strategy::LaTok) => {
                check_tokens(&targets.act_tokens, n * h, cfg.k_act, "action")?;
                let ce = g.cross_entropy(out, &targets.act_tokens)?;
                Ok(g.scale(ce, h as f64)?)
            }
            (LatentHead::Tokens(_), _) => {
                check_tokens(&targets.img_tokens, n * h * p, cfg.k_img, "image")?;
                let ce = g.cross_entropy(out, &targets.img_tokens)?;
                Ok(g.scale(ce, (h * p) as f64)?)
            }
            (LatentHead::Regress(_), s) => {
                let (vals, width) = if s == Strategy::DirectC {
                    (&targets.img_c, cfg.d_img)
                } else {
                    (&targets.act_c, cfg.d_act)
                };
                let rows = g.shape(out)[0];
                if vals.len() != rows * width {
                    return Err(invalid(format!(
                        "regression targets: expected {} values, got {}",
                        rows * width,
                        vals.len()
                    )));
                }
                let tgt = g.constant(&[rows, width], vals.iter().map(|&v| T::of_f32(v)).collect())?;
                let mse = g.mse(out, tgt)?;
                Ok(g.scale(mse, width as f64)?)
            }
            (LatentHead::None, _) => Err(invalid("strategy has no latent loss")),
        }
    }

    pub fn loss_graph<T: Real>(&self, g: &mut Graph<T>, batch: &PolicyBatch) -> Result<PolicyLossVars> {
        let cfg = &self.cfg;
        let n = batch.n;
        if batch.actions.len() != n * cfg.h * cfg.m {
            return Err(invalid("action targets do not match batch size and chunk shape"));
        }
        let fwd = self.forward(g, &batch.obs, &batch.state, &batch.instr, n)?;
        let tgt = g.constant(&[n, cfg.h * cfg.m], batch.actions.iter().map(|&v| T::of_f32(v)).collect())?;
        let mse = g.mse(fwd.actions, tgt)?;
        let action_loss = g.scale(mse, (cfg.h * cfg.m) as f64)?;
        let latent_loss = match fwd.latent_out {
            Some(out) => Some(self.latent_loss(g, out, &batch.targets, n)?),
            None => None,
        };
        let total = combine(g, action_loss, latent_loss, cfg.lambda)?;
        Ok(PolicyLossVars {
            fwd,
            action_loss,
            latent_loss,
            total,
        })
    }

    pub fn train_step(&mut self, adam: &mut Adam, batch: &PolicyBatch) -> Result<PolicyLossValues> {
        let mut g = Graph::<f32>::new();
        let lv = self.loss_graph(&mut g, batch)?;
        let values = PolicyLossValues {
            action: check_finite("policy action loss", g.scalar(lv.action_loss) as f64)?,
            latent: lv.latent_loss.map(|v| g.scalar(v) as f64),
            total: check_finite("policy total loss", g.scalar(lv.total) as f64)?,
        };
        g.backward(lv.total)?;
        let grads = g.param_grads(&self.store);
        adam.step(&mut self.store, &grads)?;
        Ok(values)
    }

    /// Normalized action chunks `n * h * m`.
    pub fn predict(&self, obs: &[f32], state: &[f32], instr: &[usize], n: usize) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let f = self.forward(&mut g, obs, state, instr, n)?;
        Ok(g.value(f.actions).to_vec())
    }

    pub fn meta(&self) -> Vec<(&'static str, f64)> {
        let c = &self.cfg;
        let b = &c.backbone;
        let l = self.layout();
        vec![
            ("kind", 3.0),
            ("strategy", c.strategy.id() as f64),
            ("lambda", c.lambda),
            ("align_layer", c.align_layer as f64),
            ("h", c.h as f64),
            ("p", c.p as f64),
            ("m", c.m as f64),
            ("latent_slots", l.latent as f64),
            ("action_slots", l.action as f64),
            ("layers", b.layers as f64),
            ("d_hidden", b.d as f64),
            ("heads", b.heads as f64),
            ("ff", b.ff as f64),
            ("n_instructions", b.n_instructions as f64),
            ("grid", b.grid as f64),
            ("channels", b.channels as f64),
            ("patch", b.patch as f64),
            ("k_img", c.k_img as f64),
            ("k_act", c.k_act as f64),
            ("d_img", c.d_img as f64),
            ("d_act", c.d_act as f64),
            ("state_proj", c.state_proj as f64),
            ("head_hidden", c.head_hidden as f64),
            ("latent_hidden", c.latent_hidden as f64),
        ]
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let extra = [
            Param {
                name: "norm.min".into(),
                shape: vec![self.norm.dim()],
                data: self.norm.min.clone(),
            },
            Param {
                name: "norm.max".into(),
                shape: vec![self.norm.dim()],
                data: self.norm.max.clone(),
            },
        ];
        ckpt::save(w, &self.meta(), &self.store, &extra)
    }

    /// Loads a checkpoint; with `expect` set, its strategy and layout must match.
    pub fn load<R: Read>(r: &mut R, expect: Option<Strategy>) -> Result<Self> {
        let mut l = ckpt::Loaded::read(r)?;
        if l.meta("kind")? != 3.0 {
            return Err(invalid("checkpoint is not a policy"));
        }
        let strategy = Strategy::from_id(l.meta_usize("strategy")?)?;
        let cfg = PolicyConfig {
            backbone: BackboneConfig {
                layers: l.meta_usize("layers")?,
                d: l.meta_usize("d_hidden")?,
                heads: l.meta_usize("heads")?,
                ff: l.meta_usize("ff")?,
                n_instructions: l.meta_usize("n_instructions")?,
                grid: l.meta_usize("grid")?,
                channels: l.meta_usize("channels")?,
                patch: l.meta_usize("patch")?,
            },
            strategy,
            lambda: l.meta("lambda")?,
            align_layer: l.meta_usize("align_layer")?,
            h: l.meta_usize("h")?,
            p: l.meta_usize("p")?,
            m: l.meta_usize("m")?,
            k_img: l.meta_usize("k_img")?,
            k_act: l.meta_usize("k_act")?,
            d_img: l.meta_usize("d_img")?,
            d_act: l.meta_usize("d_act")?,
            state_proj: l.meta_usize("state_proj")?,
            head_hidden: l.meta_usize("head_hidden")?,
            latent_hidden: l.meta_usize("latent_hidden")?,
        };
        let stored = Layout {
            latent: l.meta_usize("latent_slots")?,
            action: l.meta_usize("action_slots")?,
        };
        if stored != cfg.layout() {
            return Err(invalid(format!(
                "checkpoint layout {stored:?} disagrees with {strategy} layout {:?}",
                cfg.layout()
            )));
        }
        if let Some(want) = expect {
            if want.layout(cfg.h, cfg.p) != stored || want != strategy {
                return Err(invalid(format!(
                    "checkpoint holds {strategy} with layout {stored:?}; requested {want} with layout {:?}",
                    want.layout(cfg.h, cfg.p)
                )));
            }
        }
        let mut model = PolicyModel::new(cfg, 0)?;
        let min = l.take("norm.min")?;
        let max = l.take("norm.max")?;
        model.norm = Normalizer {
            min: min.data,
            max: max.data,
        };
        l.fill(&mut model.store)?;
        Ok(model)
    }
}

/// `L_action + lambda * L_latent`; the latent term is left out entirely when
/// absent or when `lambda == 0`.
pub fn combine<T: Real>(g: &mut Graph<T>, action: Var, latent: Option<Var>, lambda: f64) -> Result<Var> {
    Ok(match latent {
        Some(l) if lambda != 0.0 => {
            let w = g.scale(l, lambda)?;
            g.add(action, w)?
        }
        _ => action,
    })
}

fn check_tokens(tokens: &[usize], want: usize, k: usize, what: &str) -> Result<()> {
    if tokens.len() != want {
        return Err(invalid(format!("{what} token targets: expected {want}, got {}", tokens.len())));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= k) {
        return Err(invalid(format!("{what} token target {t} >= {k}")));
    }
    Ok(())
}

/// Adapts a trained policy to the environment's [`env::Policy`] interface.
pub struct PolicyRunner<'a> {
    pub model: &'a PolicyModel,
}

impl env::Policy for PolicyRunner<'_> {
    fn act_chunk(&mut self, task: &Task, obs: &[f32], state: &[f32]) -> Result<Vec<f32>> {
        if state.len() != STATE_DIM {
            return Err(invalid("state vector has the wrong length"));
        }
        let a = self.model.predict(obs, state, &[task.instruction_id()], 1)?;
        Ok(self.model.norm.denormalize(&a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()).unwrap(), s);
            assert_eq!(Strategy::from_id(s.id()).unwrap(), s);
        }
        assert!(Strategy::parse("s5").is_err());
    }

    #[test]
    fn default_lambdas() {
        assert_eq!(Strategy::Baseline.default_lambda(), 0.0);
        assert_eq!(Strategy::LaAlign.default_lambda(), 1.0);
        assert_eq!(Strategy::LaDirect.default_lambda(), 0.1);
        assert_eq!(Strategy::LaCond.default_lambda(), 0.1);
        assert_eq!(Strategy::LaTok.default_lambda(), 0.1);
        assert_eq!(Strategy::PhCond.default_lambda(), 0.0);
    }

    #[test]
    fn align_layer_default() {
        assert_eq!(default_align_layer(6), 4);
        assert_eq!(default_align_layer(29), 18);
    }
}
