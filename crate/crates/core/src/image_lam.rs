//! Transition VQ-VAE over pairs of rendered observations, with a loss-trained
//! codebook and an action-prediction regularizer on a small labelled subset.

use std::io::{Read, Write};

use latb_tensor::nn::{Linear, Mlp};
use latb_tensor::{Adam, Graph, Init, ParamId, ParamStore, Real, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt;
use crate::codebook::nearest_rows;
use crate::error::{check_finite, invalid, CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageLamConfig {
    pub grid: usize,
    pub channels: usize,
    pub patch: usize,
    pub patch_dim: usize,
    pub k: usize,
    pub p: usize,
    pub d: usize,
    pub delta: usize,
    pub beta: f64,
    pub lambda_act: f64,
    pub supervised_fraction: f64,
    pub act_hidden: usize,
    pub dec_hidden: usize,
    pub m: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ImageLamConfig {
    fn default() -> Self {
        ImageLamConfig {
            grid: 16,
            channels: 3,
            patch: 4,
            patch_dim: 32,
            k: 16,
            p: 4,
            d: 128,
            delta: 4,
            beta: 0.25,
            lambda_act: 1.0,
            supervised_fraction: 0.05,
            act_hidden: 128,
            dec_hidden: 256,
            m: 3,
            lr: 1e-4,
            batch: 32,
        }
    }
}

impl ImageLamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("grid", self.grid),
            ("channels", self.channels),
            ("patch", self.patch),
            ("patch_dim", self.patch_dim),
            ("k", self.k),
            ("p", self.p),
            ("d", self.d),
            ("delta", self.delta),
            ("act_hidden", self.act_hidden),
            ("dec_hidden", self.dec_hidden),
            ("m", self.m),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(invalid(format!("image LAM {name} must be positive")));
            }
        }
        if !self.grid.is_multiple_of(2 * self.patch) {
            return Err(invalid("image grid must split into 2x2 groups of patches"));
        }
        if !(0.0..=1.0).contains(&self.supervised_fraction) {
            return Err(invalid("supervised_fraction must lie in [0, 1]"));
        }
        if self.beta < 0.0 || self.lambda_act < 0.0 || self.lr <= 0.0 {
            return Err(invalid("loss weights must be non-negative and lr positive"));
        }
        Ok(())
    }

    pub fn obs_len(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    pub fn patches_per_side(&self) -> usize {
        self.grid / self.patch
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Pooled regions after 2x2 mean pooling of the patch grid.
    pub fn n_regions(&self) -> usize {
        self.n_patches() / 4
    }
}

/// Patch order that places each 2x2 block of neighbouring patches on
/// consecutive rows. Entry `i` is `(patch_row, patch_col)`.
pub fn pooled_patch_order(per_side: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(per_side * per_side);
    for ry in 0..per_side / 2 {
        for rx in 0..per_side / 2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    out.push((2 * ry + dy, 2 * rx + dx));
                }
            }
        }
    }
    out
}

/// Flattens the given patches of `[y][x][c]` images into rows. With
/// `pair = Some(end)` each pixel carries start channels then end channels.
fn patch_rows(
    cfg: &ImageLamConfig,
    start: &[f32],
    end: Option<&[f32]>,
    n: usize,
    order: &[(usize, usize)],
) -> Vec<f32> {
    let (g, c, ps) = (cfg.grid, cfg.channels, cfg.patch);
    let len = cfg.obs_len();
    let mut out = Vec::with_capacity(n * order.len() * cfg.patch_len() * 2);
    for b in 0..n {
        let s = &start[b * len..(b + 1) * len];
        let e = end.map(|e| &e[b * len..(b + 1) * len]);
        for &(py, px) in order {
            for y in py * ps..(py + 1) * ps {
                for x in px * ps..(px + 1) * ps {
                    let o = (y * g + x) * c;
                    out.extend_from_slice(&s[o..o + c]);
                    if let Some(e) = e {
                        out.extend_from_slice(&e[o..o + c]);
                    }
                }
            }
        }
    }
    out
}

/// Row-major patch order.
pub fn raster_order(per_side: usize) -> Vec<(usize, usize)> {
    (0..per_side).flat_map(|y| (0..per_side).map(move |x| (y, x))).collect()
}

/// Seed-deterministic choice of `round(fraction * n)` sample indices (at
/// least one when the fraction is positive), returned sorted.
pub fn supervised_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    if n == 0 || fraction <= 0.0 {
        return Vec::new();
    }
    let count = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

/// A batch of transitions. `sup` lists the batch rows carrying an action,
/// with their actions in `actions` (row-major, `m` wide).
#[derive(Clone, Debug, Default)]
pub struct TransitionBatch {
    pub start: Vec<f32>,
    pub end: Vec<f32>,
    pub n: usize,
    pub sup: Vec<usize>,
    pub actions: Vec<f32>,
}

pub struct ImageLossVars {
    pub c: Var,
    pub zq: Var,
    pub pred: Var,
    pub rec: Var,
    pub codebook: Var,
    pub commit: Var,
    pub act: Option<Var>,
    pub total: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImageLossValues {
    pub rec: f64,
    pub codebook: f64,
    pub commit: f64,
    pub act: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct ImageLam {
    pub cfg: ImageLamConfig,
    pub store: ParamStore,
    pub enc_patch: Linear,
    pub enc_proj: Linear,
    pub codebook: ParamId,
    pub dec_patch: Linear,
    pub dec: Mlp,
    pub act_head: Mlp,
}

impl ImageLam {
    pub fn new(cfg: ImageLamConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pd = cfg.patch_dim;
        let enc_patch = Linear::new(&mut store, "enc.patch", 2 * cfg.patch_len(), pd, &mut rng);
        let enc_proj = Linear::new(&mut store, "enc.proj", cfg.n_regions() * pd, cfg.p * cfg.d, &mut rng);
        let a = 1.0 / cfg.k as f32;
        let codebook = store.add("codebook", &[cfg.k, cfg.d], Init::Uniform(a), &mut rng);
        let dec_patch = Linear::new(&mut store, "dec.patch", cfg.patch_len(), pd, &mut rng);
        let dec = Mlp::new(
            &mut store,
            "dec",
            cfg.n_patches() * pd + cfg.p * cfg.d,
            cfg.dec_hidden,
            cfg.obs_len(),
            &mut rng,
        );
        let act_head = Mlp::new(&mut store, "act", cfg.p * cfg.d, cfg.act_hidden, cfg.m, &mut rng);
        Ok(ImageLam {
            cfg,
            store,
            enc_patch,
            enc_proj,
            codebook,
            dec_patch,
            dec,
            act_head,
        })
    }

    fn check_obs(&self, x: &[f32], n: usize, what: &str) -> Result<()> {
        if n == 0 || x.len() != n * self.cfg.obs_len() {
            return Err(invalid(format!(
                "{what}: expected {n} observations of {} values, got {} values",
                self.cfg.obs_len(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(what.into()));
        }
        Ok(())
    }

    pub fn codebook_values(&self) -> &[f32] {
        &self.store.get(self.codebook).data
    }

    /// Pre-quantization latents `[n*p, d]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, start: &[f32], end: &[f32], n: usize) -> Result<Var> {
        self.check_obs(start, n, "o_start")?;
        self.check_obs(end, n, "o_end")?;
        let cfg = &self.cfg;
        let order = pooled_patch_order(cfg.patches_per_side());
        let rows = patch_rows(cfg, start, Some(end), n, &order);
        let x = g.constant(&[n * cfg.n_patches(), 2 * cfg.patch_len()], rows.into_iter().map(T::of_f32).collect())?;
        let h = self.enc_patch.forward(g, &self.store, x)?;
        let h = g.gelu(h)?;
        let pooled = g.mean_pool_groups(h, 4)?;
        let flat = g.reshape(pooled, &[n, cfg.n_regions() * cfg.patch_dim])?;
        let c = self.enc_proj.forward(g, &self.store, flat)?;
        Ok(g.reshape(c, &[n * cfg.p, cfg.d])?)
    }

    /// `o_start + MLP([patch features of o_start; z])` with `z: [n*p, d]`.
    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, start: &[f32], z: Var, n: usize) -> Result<Var> {
        self.check_obs(start, n, "o_start")?;
        let cfg = &self.cfg;
        let order = raster_order(cfg.patches_per_side());
        let rows = patch_rows(cfg, start, None, n, &order);
        let x = g.constant(&[n * cfg.n_patches(), cfg.patch_len()], rows.into_iter().map(T::of_f32).collect())?;
        let h = self.dec_patch.forward(g, &self.store, x)?;
        let h = g.gelu(h)?;
        let h = g.reshape(h, &[n, cfg.n_patches() * cfg.patch_dim])?;
        let zf = g.reshape(z, &[n, cfg.p * cfg.d])?;
        let inp = g.concat_cols(&[h, zf])?;
        let delta = self.dec.forward(g, &self.store, inp)?;
        let base = g.constant(&[n, cfg.obs_len()], start.iter().map(|&v| T::of_f32(v)).collect())?;
        Ok(g.add(base, delta)?)
    }

    /// Action prediction from flattened latents `c: [n*p, d]` for batch rows `rows`.
    pub fn action_graph<T: Real>(&self, g: &mut Graph<T>, c: Var, n: usize, rows: &[usize]) -> Result<Var> {
        let flat = g.reshape(c, &[n, self.cfg.p * self.cfg.d])?;
        let sel = g.gather_rows(flat, rows)?;
        Ok(self.act_head.forward(g, &self.store, sel)?)
    }

    pub fn loss_graph<T: Real>(&self, g: &mut Graph<T>, batch: &TransitionBatch) -> Result<ImageLossVars> {
        let cfg = &self.cfg;
        let n = batch.n;
        if batch.actions.len() != batch.sup.len() * cfg.m {
            return Err(invalid("supervised actions do not match supervised rows"));
        }
        if let Some(&r) = batch.sup.iter().find(|&&r| r >= n) {
            return Err(invalid(format!("supervised row {r} outside batch of {n}")));
        }
        let c = self.encode_graph(g, &batch.start, &batch.end, n)?;
        let c32: Vec<f32> = g.value(c).iter().map(|v| v.as_f32()).collect();
        let indices = nearest_rows(self.codebook_values(), cfg.d, &c32);
        let book = g.param(&self.store, self.codebook)?;
        let zq_rows = g.gather_rows(book, &indices)?;
        let zq_vals = g.value(zq_rows).to_vec();
        let sg_c = g.detach(c);
        let codebook = g.mse(sg_c, zq_rows)?;
        let sg_zq = g.constant(&[n * cfg.p, cfg.d], zq_vals.clone())?;
        let commit = g.mse(c, sg_zq)?;
        let zq = g.straight_through(c, zq_vals)?;
        let pred = self.decode_graph(g, &batch.start, zq, n)?;
        let target = g.constant(&[n, cfg.obs_len()], batch.end.iter().map(|&v| T::of_f32(v)).collect())?;
        let rec = g.mse(pred, target)?;
        let act = if batch.sup.is_empty() {
            None
        } else {
            let a_hat = self.action_graph(g, c, n, &batch.sup)?;
            let a = g.constant(&[batch.sup.len(), cfg.m], batch.actions.iter().map(|&v| T::of_f32(v)).collect())?;
            Some(g.mse(a_hat, a)?)
        };
        let mut total = g.add(rec, codebook)?;
        if cfg.beta != 0.0 {
            let t = g.scale(commit, cfg.beta)?;
            total = g.add(total, t)?;
        }
        if let Some(a) = act {
            if cfg.lambda_act != 0.0 {
                let t = g.scale(a, cfg.lambda_act)?;
                total = g.add(total, t)?;
            }
        }
        Ok(ImageLossVars {
            c,
            zq,
            pred,
            rec,
            codebook,
            commit,
            act,
            total,
            indices,
        })
    }

    pub fn train_step(&mut self, adam: &mut Adam, batch: &TransitionBatch) -> Result<ImageLossValues> {
        let mut g = Graph::<f32>::new();
        let lv = self.loss_graph(&mut g, batch)?;
        let values = ImageLossValues {
            rec: check_finite("image LAM rec loss", g.scalar(lv.rec) as f64)?,
            codebook: g.scalar(lv.codebook) as f64,
            commit: g.scalar(lv.commit) as f64,
            act: lv.act.map_or(0.0, |v| g.scalar(v) as f64),
            total: check_finite("image LAM total loss", g.scalar(lv.total) as f64)?,
        };
        g.backward(lv.total)?;
        let grads = g.param_grads(&self.store);
        adam.step(&mut self.store, &grads)?;
        Ok(values)
    }

    /// Pre-quantization latents `[n*p*d]` for observation pairs.
    pub fn encode(&self, start: &[f32], end: &[f32], n: usize) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new();
        let c = self.encode_graph(&mut g, start, end, n)?;
        Ok(g.value(c).to_vec())
    }

    /// Token indices (`n*p`) and pre-quantization latents.
    pub fn tokenize(&self, start: &[f32], end: &[f32], n: usize) -> Result<(Vec<usize>, Vec<f32>)> {
        let c = self.encode(start, end, n)?;
        Ok((nearest_rows(self.codebook_values(), self.cfg.d, &c), c))
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Vec<f32>> {
        let d = self.cfg.d;
        let book = self.codebook_values();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.cfg.k {
                return Err(invalid(format!("image token {i} >= {}", self.cfg.k)));
            }
            out.extend_from_slice(&book[i * d..(i + 1) * d]);
        }
        Ok(out)
    }

    /// Predicted end observation for `o_start` and quantized latents.
    pub fn decode_future(&self, start: &[f32], zq: &[f32], n: usize) -> Result<Vec<f32>> {
        if zq.len() != n * self.cfg.p * self.cfg.d {
            return Err(invalid("z_q does not hold p x d values per sample"));
        }
        let mut g = Graph::<f32>::new();
        let z = g.constant(&[n * self.cfg.p, self.cfg.d], zq.to_vec())?;
        let o = self.decode_graph(&mut g, start, z, n)?;
        Ok(g.value(o).to_vec())
    }

    pub fn meta(&self) -> Vec<(&'static str, f64)> {
        let c = &self.cfg;
        vec![
            ("kind", 2.0),
            ("grid", c.grid as f64),
            ("channels", c.channels as f64),
            ("patch", c.patch as f64),
            ("patch_dim", c.patch_dim as f64),
            ("k", c.k as f64),
            ("p", c.p as f64),
            ("d", c.d as f64),
            ("delta", c.delta as f64),
            ("beta", c.beta),
            ("lambda_act", c.lambda_act),
            ("supervised_fraction", c.supervised_fraction),
            ("act_hidden", c.act_hidden as f64),
            ("dec_hidden", c.dec_hidden as f64),
            ("m", c.m as f64),
        ]
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        ckpt::save(w, &self.meta(), &self.store, &[])
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let l = ckpt::Loaded::read(r)?;
        if l.meta("kind")? != 2.0 {
            return Err(invalid("checkpoint is not an image LAM"));
        }
        let cfg = ImageLamConfig {
            grid: l.meta_usize("grid")?,
            channels: l.meta_usize("channels")?,
            patch: l.meta_usize("patch")?,
            patch_dim: l.meta_usize("patch_dim")?,
            k: l.meta_usize("k")?,
            p: l.meta_usize("p")?,
            d: l.meta_usize("d")?,
            delta: l.meta_usize("delta")?,
            beta: l.meta("beta")?,
            lambda_act: l.meta("lambda_act")?,
            supervised_fraction: l.meta("supervised_fraction")?,
            act_hidden: l.meta_usize("act_hidden")?,
            dec_hidden: l.meta_usize("dec_hidden")?,
            m: l.meta_usize("m")?,
            ..ImageLamConfig::default()
        };
        let mut model = ImageLam::new(cfg, 0)?;
        l.fill(&mut model.store)?;
        Ok(model)
    }
}

/// One entry of the pre-computed token cache.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRecord {
    pub episode: u32,
    pub t: u32,
    pub tokens: Vec<u8>,
    pub c: Vec<f32>,
}

/// Per record: episode u32, timestep u32, `p` token bytes, `p*d` f32 values.
pub fn write_token_cache<W: Write>(w: &mut W, records: &[TokenRecord]) -> Result<()> {
    for r in records {
        w.write_all(&r.episode.to_le_bytes())?;
        w.write_all(&r.t.to_le_bytes())?;
        w.write_all(&r.tokens)?;
        for v in &r.c {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_token_cache(bytes: &[u8], p: usize, d: usize) -> Result<Vec<TokenRecord>> {
    let rec = 8 + p + 4 * p * d;
    if !bytes.len().is_multiple_of(rec) {
        return Err(CoreError::Format(format!(
            "token cache length {} is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|b| {
            let u = |o: usize| u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
            TokenRecord {
                episode: u(0),
                t: u(4),
                tokens: b[8..8 + p].to_vec(),
                c: b[8 + p..]
                    .chunks_exact(4)
                    .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
                    .collect(),
            }
        })
        .collect())
}
