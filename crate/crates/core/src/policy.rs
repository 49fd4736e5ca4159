//! Toy transformer policy: patch tokens, an instruction token and
//! placeholder slots, with latter-half layer aggregation into an action head.

use latb_tensor::nn::{Linear, Mlp, TransformerLayer};
use latb_tensor::{Graph, Init, ParamId, ParamStore, Real, Var, MASKED};
use rand::Rng;

use crate::env::{CHANNELS, GRID, NUM_TASKS, STATE_DIM};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub n_instructions: usize,
    pub grid: usize,
    pub channels: usize,
    pub patch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 6,
            d: 64,
            heads: 4,
            ff: 128,
            n_instructions: NUM_TASKS,
            grid: GRID,
            channels: CHANNELS,
            patch: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(invalid("backbone needs at least 2 layers"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(invalid(format!("d_hidden {} not divisible by {} heads", self.d, self.heads)));
        }
        if self.patch == 0 || !self.grid.is_multiple_of(self.patch) || self.ff == 0 || self.n_instructions == 0 {
            return Err(invalid("invalid backbone patch/ff/instruction sizes"));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn obs_len(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    /// Patch tokens plus the instruction token.
    pub fn prefix_len(&self) -> usize {
        self.n_patches() + 1
    }
}

/// Placeholder slot counts; latent slots precede action slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub latent: usize,
    pub action: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.latent + self.action
    }
}

/// Layers `ceil(n/2) ..= n`, 1-indexed.
pub fn aggregation_layers(n: usize) -> Vec<usize> {
    (n.div_ceil(2)..=n).collect()
}

/// Additive mask: prefix tokens see only the prefix; placeholder `i` sees the
/// prefix and placeholders up to and including itself.
pub fn attention_mask(prefix: usize, placeholders: usize) -> Vec<f64> {
    let l = prefix + placeholders;
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let blocked = if i < prefix { j >= prefix } else { j > i };
            if blocked {
                m[i * l + j] = MASKED;
            }
        }
    }
    m
}

/// `[n*patches, patch_len]` rows in raster patch order.
pub fn patchify(obs: &[f32], n: usize, grid: usize, channels: usize, patch: usize) -> Vec<f32> {
    let len = grid * grid * channels;
    let per = grid / patch;
    let mut out = Vec::with_capacity(obs.len());
    for b in 0..n {
        let o = &obs[b * len..(b + 1) * len];
        for py in 0..per {
            for px in 0..per {
                for y in py * patch..(py + 1) * patch {
                    let s = (y * grid + px * patch) * channels;
                    out.extend_from_slice(&o[s..s + patch * channels]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub layout: Layout,
    pub patch_embed: Linear,
    pub instr: ParamId,
    /// Row 0: latent placeholder, row 1: action placeholder.
    pub placeholders: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerLayer>,
}

/// Hidden states after every layer, `[n*seq, d]` each.
pub struct Hidden {
    pub layers: Vec<Var>,
    pub n: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: BackboneConfig,
        layout: Layout,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let patch_embed = Linear::new(store, "bb.patch", cfg.patch_len(), d, rng);
        let instr = store.add("bb.instr", &[cfg.n_instructions, d], Init::Normal(0.02), rng);
        let placeholders = store.add("bb.placeholders", &[2, d], Init::Normal(0.02), rng);
        let pos = store.add("bb.pos", &[cfg.prefix_len() + layout.total(), d], Init::Normal(0.02), rng);
        let blocks = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("bb.tf{i}"), d, cfg.heads, cfg.ff, rng))
            .collect();
        Ok(Backbone {
            cfg,
            layout,
            patch_embed,
            instr,
            placeholders,
            pos,
            blocks,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.cfg.prefix_len() + self.layout.total()
    }

    /// Row of position `pos` of sample `b` in the flattened sequence.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq_len() + pos
    }

    pub fn latent_rows(&self, n: usize) -> Vec<usize> {
        let start = self.cfg.prefix_len();
        (0..n)
            .flat_map(|b| (0..self.layout.latent).map(move |i| (b, start + i)))
            .map(|(b, p)| self.row(b, p))
            .collect()
    }

    pub fn action_rows(&self, n: usize) -> Vec<usize> {
        let start = self.cfg.prefix_len() + self.layout.latent;
        (0..n)
            .flat_map(|b| (0..self.layout.action).map(move |i| (b, start + i)))
            .map(|(b, p)| self.row(b, p))
            .collect()
    }

    pub fn patch_rows(&self, n: usize) -> Vec<usize> {
        (0..n)
            .flat_map(|b| (0..self.cfg.n_patches()).map(move |i| (b, i)))
            .map(|(b, p)| self.row(b, p))
            .collect()
    }

    /// Input sequence `[n*seq, d]` including positional embeddings.
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        obs: &[f32],
        instr: &[usize],
        n: usize,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        if n == 0 || obs.len() != n * cfg.obs_len() || instr.len() != n {
            return Err(invalid(format!(
                "policy input: {n} samples need {} observation values and {n} instructions",
                n * cfg.obs_len()
            )));
        }
        if let Some(&bad) = instr.iter().find(|&&i| i >= cfg.n_instructions) {
            return Err(invalid(format!("unknown instruction id {bad}")));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::CoreError::NonFinite("observation".into()));
        }
        let np = cfg.n_patches();
        let patches = patchify(obs, n, cfg.grid, cfg.channels, cfg.patch);
        let x = g.constant(&[n * np, cfg.patch_len()], patches.into_iter().map(T::of_f32).collect())?;
        let pe = self.patch_embed.forward(g, store, x)?;
        let table = g.param(store, self.instr)?;
        let ie = g.gather_rows(table, instr)?;
        let ph = g.param(store, self.placeholders)?;
        let all = g.concat_rows(&[pe, ie, ph])?;
        // Row indices into `all`: patches, then instructions, then the two placeholder rows.
        let (inst0, ph0) = (n * np, n * np + n);
        let mut idx = Vec::with_capacity(n * self.seq_len());
        for b in 0..n {
            idx.extend((0..np).map(|i| b * np + i));
            idx.push(inst0 + b);
            idx.extend(std::iter::repeat_n(ph0, self.layout.latent));
            idx.extend(std::iter::repeat_n(ph0 + 1, self.layout.action));
        }
        let seq = g.gather_rows(all, &idx)?;
        let pos = g.param(store, self.pos)?;
        let pidx: Vec<usize> = (0..n).flat_map(|_| 0..self.seq_len()).collect();
        let pos = g.gather_rows(pos, &pidx)?;
        Ok(g.add(seq, pos)?)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, seq: Var, n: usize) -> Result<Hidden> {
        let mask: Vec<T> = attention_mask(self.cfg.prefix_len(), self.layout.total())
            .into_iter()
            .map(T::of)
            .collect();
        let mut layers = Vec::with_capacity(self.blocks.len());
        let mut h = seq;
        for block in &self.blocks {
            h = block.forward(g, store, h, n, self.seq_len(), Some(&mask))?;
            layers.push(h);
        }
        Ok(Hidden { layers, n })
    }

    /// Stacks the placeholder states of the aggregation layers:
    /// `[n, count * n_layers * d]`, ordered position, layer, feature.
    pub fn aggregate<T: Real>(&self, g: &mut Graph<T>, hidden: &Hidden, rows: &[usize]) -> Result<Var> {
        let n = hidden.n;
        if rows.is_empty() || !rows.len().is_multiple_of(n) {
            return Err(invalid("aggregate needs the same non-zero slot count per sample"));
        }
        let per = rows.len() / n;
        let agg = aggregation_layers(self.cfg.layers);
        let mut parts = Vec::with_capacity(agg.len());
        for &k in &agg {
            parts.push(g.gather_rows(hidden.layers[k - 1], rows)?);
        }
        let stacked = g.concat_cols(&parts)?;
        Ok(g.reshape(stacked, &[n, per * agg.len() * self.cfg.d])?)
    }

    /// Mean of the final-layer patch states, `[n, d]`.
    pub fn image_summary<T: Real>(&self, g: &mut Graph<T>, hidden: &Hidden) -> Result<Var> {
        let last = *hidden.layers.last().expect("at least one layer");
        let rows = self.patch_rows(hidden.n);
        let p = g.gather_rows(last, &rows)?;
        Ok(g.mean_pool_groups(p, self.cfg.n_patches())?)
    }

    /// Width of one aggregated representation for `count` slots.
    pub fn aggregate_width(&self, count: usize) -> usize {
        count * aggregation_layers(self.cfg.layers).len() * self.cfg.d
    }
}

/// `f_head([h_img; parts...; proj(s)])`, predicting `h x m` actions.
#[derive(Clone, Debug)]
pub struct ActionHead {
    pub state_proj: Linear,
    pub mlp: Mlp,
    pub in_dim: usize,
    pub h: usize,
    pub m: usize,
}

impl ActionHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_img: usize,
        part_widths: &[usize],
        state_proj: usize,
        hidden: usize,
        h: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if part_widths.is_empty() {
            return Err(invalid("action head needs at least one aggregated representation"));
        }
        let in_dim = d_img + part_widths.iter().sum::<usize>() + state_proj;
        Ok(ActionHead {
            state_proj: Linear::new(store, "head.state", STATE_DIM, state_proj, rng),
            mlp: Mlp::new(store, "head", in_dim, hidden, h * m, rng),
            in_dim,
            h,
            m,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        h_img: Var,
        parts: &[Var],
        state: &[f32],
    ) -> Result<Var> {
        let n = g.shape(h_img)[0];
        if state.len() != n * STATE_DIM {
            return Err(invalid(format!("expected {n} state vectors of {STATE_DIM}")));
        }
        let s = g.constant(&[n, STATE_DIM], state.iter().map(|&v| T::of_f32(v)).collect())?;
        let sp = self.state_proj.forward(g, store, s)?;
        let mut cols = vec![h_img];
        cols.extend_from_slice(parts);
        cols.push(sp);
        let x = g.concat_cols(&cols)?;
        if g.shape(x)[1] != self.in_dim {
            return Err(invalid(format!(
                "action head expects {} input features, got {}",
                self.in_dim,
                g.shape(x)[1]
            )));
        }
        Ok(self.mlp.forward(g, store, x)?)
    }
}
