//! Action-chunk VQ-VAE: DFT-augmented features, dilated conv + transformer
//! encoder, EMA codebook, per-timestep MLP decoder, masked latent consistency.

use std::f64::consts::PI;
use std::io::{Read, Write};

use latb_tensor::nn::{Conv1d, Linear, Mlp, TransformerLayer};
use latb_tensor::{Adam, Graph, Param, ParamStore, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::ckpt;
use crate::codebook::Codebook;
use crate::error::{check_finite, invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ActionLamConfig {
    pub h: usize,
    pub m: usize,
    pub k: usize,
    pub d: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub dec_hidden: usize,
    pub lambda_mask: f64,
    pub beta: f64,
    pub mask_ratio: f64,
    pub lr: f64,
    pub batch: usize,
    pub decay: f64,
    pub ema_eps: f64,
    /// Quantize the masked latents before decoding them in the consistency
    /// branch instead of decoding them directly.
    pub quantize_masked: bool,
}

impl Default for ActionLamConfig {
    fn default() -> Self {
        ActionLamConfig {
            h: 8,
            m: 3,
            k: 256,
            d: 128,
            kernel: 3,
            dilations: vec![1, 2, 4],
            layers: 2,
            heads: 4,
            ff: 256,
            dec_hidden: 256,
            lambda_mask: 0.1,
            beta: 0.25,
            mask_ratio: 0.15,
            lr: 1e-4,
            batch: 128,
            decay: 0.99,
            ema_eps: 1e-5,
            quantize_masked: false,
        }
    }
}

impl ActionLamConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("h", self.h),
            ("m", self.m),
            ("k", self.k),
            ("d", self.d),
            ("kernel", self.kernel),
            ("heads", self.heads),
            ("ff", self.ff),
            ("dec_hidden", self.dec_hidden),
            ("batch", self.batch),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(invalid(format!("action LAM {name} must be positive")));
            }
        }
        if self.h < 2 {
            return Err(invalid("action LAM horizon must be at least 2"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(invalid("action LAM d must be divisible by heads"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid("mask_ratio must lie in [0, 1]"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) || self.ema_eps <= 0.0 {
            return Err(invalid("EMA decay must lie in (0, 1) and eps be positive"));
        }
        if self.kernel.is_multiple_of(2) || self.dilations.contains(&0) {
            return Err(invalid("conv kernel must be odd and dilations positive"));
        }
        if self.lambda_mask < 0.0 || self.beta < 0.0 || self.lr <= 0.0 {
            return Err(invalid("loss weights must be non-negative and lr positive"));
        }
        Ok(())
    }

    /// Number of real DFT bins.
    pub fn bins(&self) -> usize {
        self.h / 2 + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.m + 2 * self.bins()
    }
}

/// Repeats the last action to reach `h` rows, or keeps the first `h` rows.
pub fn pad_or_truncate(actions: &[f32], m: usize, h: usize) -> Result<Vec<f32>> {
    if m == 0 || !actions.len().is_multiple_of(m) {
        return Err(invalid(format!("{} action values do not split into rows of {m}", actions.len())));
    }
    let t = actions.len() / m;
    if t == 0 {
        return Err(invalid("cannot pad an empty action sequence"));
    }
    let mut out = Vec::with_capacity(h * m);
    for row in 0..h {
        let src = row.min(t - 1);
        out.extend_from_slice(&actions[src * m..(src + 1) * m]);
    }
    Ok(out)
}

/// Real DFT matrix `[h, 2B]`: cosine columns for bins `0..B`, then negated
/// sine columns, so `x^T M` lists real then imaginary parts.
pub fn dft_matrix(h: usize) -> Vec<f64> {
    let b = h / 2 + 1;
    let mut out = vec![0.0; h * 2 * b];
    for t in 0..h {
        for k in 0..b {
            let w = 2.0 * PI * (k * t) as f64 / h as f64;
            out[t * 2 * b + k] = w.cos();
            out[t * 2 * b + b + k] = -w.sin();
        }
    }
    out
}

/// Spectrum summary of a chunk: the DFT of each action dimension over time,
/// averaged across dimensions, as `[re_0..re_{B-1}, im_0..im_{B-1}]`.
pub fn spectrum(chunk: &[f32], h: usize, m: usize) -> Vec<f64> {
    let b = h / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(h);
    let mut acc = vec![Complex::new(0.0, 0.0); b];
    for dim in 0..m {
        let mut buf: Vec<Complex<f64>> =
            (0..h).map(|t| Complex::new(chunk[t * m + dim] as f64, 0.0)).collect();
        fft.process(&mut buf);
        for k in 0..b {
            acc[k] += buf[k];
        }
    }
    let mut out = vec![0.0; 2 * b];
    for k in 0..b {
        out[k] = acc[k].re / m as f64;
        out[b + k] = acc[k].im / m as f64;
    }
    out
}

/// `[h, m + 2B]` features: raw actions followed by the tiled spectrum summary.
pub fn fft_features(chunk: &[f32], h: usize, m: usize) -> Result<Vec<f32>> {
    if h < 2 {
        return Err(invalid("fft_features needs at least two timesteps"));
    }
    if chunk.len() != h * m {
        return Err(invalid(format!("chunk has {} values, expected {h}x{m}", chunk.len())));
    }
    if chunk.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::CoreError::NonFinite("fft_features input".into()));
    }
    let spec = spectrum(chunk, h, m);
    let mut out = Vec::with_capacity(h * (m + spec.len()));
    for t in 0..h {
        out.extend_from_slice(&chunk[t * m..(t + 1) * m]);
        out.extend(spec.iter().map(|&v| v as f32));
    }
    Ok(out)
}

/// Quantized view of a chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodeSeq {
    pub indices: Vec<usize>,
    pub zq: Vec<f32>,
    pub c: Vec<f32>,
}

/// Graph handles for one evaluation of the training objective.
pub struct LossVars {
    pub c: Var,
    pub zq: Var,
    pub recon: Var,
    pub rec: Var,
    pub commit: Var,
    pub mask: Option<Var>,
    pub total: Var,
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub rec: f64,
    pub mask: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct ActionLam {
    pub cfg: ActionLamConfig,
    pub store: ParamStore,
    pub codebook: Codebook,
    input: Linear,
    convs: Vec<Conv1d>,
    blocks: Vec<TransformerLayer>,
    dec: Mlp,
    dft: Vec<f64>,
}

impl ActionLam {
    pub fn new(cfg: ActionLamConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let input = Linear::new(&mut store, "enc.in", cfg.feature_dim(), d, &mut rng);
        let convs = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| Conv1d::new(&mut store, &format!("enc.conv{i}"), d, d, cfg.kernel, dil, &mut rng))
            .collect();
        let blocks = (0..cfg.layers)
            .map(|i| TransformerLayer::new(&mut store, &format!("enc.tf{i}"), d, cfg.heads, cfg.ff, &mut rng))
            .collect();
        let dec = Mlp::new(&mut store, "dec", d, cfg.dec_hidden, cfg.m, &mut rng);
        let codebook = Codebook::new(cfg.k, d, cfg.decay, cfg.ema_eps, &mut rng);
        let dft = dft_matrix(cfg.h);
        Ok(ActionLam {
            cfg,
            store,
            codebook,
            input,
            convs,
            blocks,
            dec,
            dft,
        })
    }

    pub fn decoder(&self) -> &Mlp {
        &self.dec
    }

    fn check_chunks(&self, data: &[f32], n: usize) -> Result<()> {
        let want = n * self.cfg.h * self.cfg.m;
        if n == 0 || data.len() != want {
            return Err(invalid(format!(
                "expected {n} chunks of {}x{} ({want} values), got {}",
                self.cfg.h,
                self.cfg.m,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::CoreError::NonFinite("action chunk".into()));
        }
        Ok(())
    }

    /// In-graph feature construction for `x: [n*h, m]`.
    pub fn features_graph<T: Real>(&self, g: &mut Graph<T>, x: Var, n: usize) -> Result<Var> {
        let (h, m) = (self.cfg.h, self.cfg.m);
        let avg = g.constant(&[m, 1], vec![T::of(1.0 / m as f64); m])?;
        let mean = g.matmul(x, avg)?;
        let mean = g.reshape(mean, &[n, h])?;
        let nb = 2 * self.cfg.bins();
        let dft = g.constant(&[h, nb], self.dft.iter().map(|&v| T::of(v)).collect())?;
        let spec = g.matmul(mean, dft)?;
        let idx: Vec<usize> = (0..n * h).map(|r| r / h).collect();
        let tiled = g.gather_rows(spec, &idx)?;
        Ok(g.concat_cols(&[x, tiled])?)
    }

    /// Pre-quantization latents `[n*h, d]` for chunks `x: [n*h, m]`.
    pub fn encode_graph<T: Real>(&self, g: &mut Graph<T>, x: Var, n: usize) -> Result<Var> {
        let f = self.features_graph(g, x, n)?;
        let mut hdn = self.input.forward(g, &self.store, f)?;
        for conv in &self.convs {
            let c = conv.forward(g, &self.store, hdn, n, self.cfg.h)?;
            let c = g.gelu(c)?;
            hdn = g.add(hdn, c)?;
        }
        for block in &self.blocks {
            hdn = block.forward(g, &self.store, hdn, n, self.cfg.h, None)?;
        }
        Ok(hdn)
    }

    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        Ok(self.dec.forward(g, &self.store, z)?)
    }

    pub fn encode(&self, chunks: &[f32], n: usize) -> Result<Vec<f32>> {
        self.check_chunks(chunks, n)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[n * self.cfg.h, self.cfg.m], chunks.to_vec())?;
        let c = self.encode_graph(&mut g, x, n)?;
        Ok(g.value(c).to_vec())
    }

    pub fn decode(&self, zq: &[f32]) -> Result<Vec<f32>> {
        let d = self.cfg.d;
        if zq.is_empty() || !zq.len().is_multiple_of(d) {
            return Err(invalid(format!("latent values {} not a multiple of d={d}", zq.len())));
        }
        let mut g = Graph::<f32>::new();
        let z = g.constant(&[zq.len() / d, d], zq.to_vec())?;
        let y = self.decode_graph(&mut g, z)?;
        Ok(g.value(y).to_vec())
    }

    pub fn quantize(&self, c: &[f32]) -> LatentCodeSeq {
        let indices = self.codebook.quantize(c);
        let zq = self.codebook.lookup(&indices).expect("indices come from the codebook");
        LatentCodeSeq {
            indices,
            zq,
            c: c.to_vec(),
        }
    }

    /// Normalized actions (`t x m`, any `t >= 1`) to `h` codes.
    pub fn tokenize(&self, actions: &[f32]) -> Result<LatentCodeSeq> {
        let chunk = pad_or_truncate(actions, self.cfg.m, self.cfg.h)?;
        let c = self.encode(&chunk, 1)?;
        Ok(self.quantize(&c))
    }

    /// Tokenizes many already padded chunks at once.
    pub fn tokenize_batch(&self, chunks: &[f32], n: usize) -> Result<LatentCodeSeq> {
        let c = self.encode(chunks, n)?;
        Ok(self.quantize(&c))
    }

    pub fn detokenize(&self, indices: &[usize]) -> Result<Vec<f32>> {
        let zq = self.codebook.lookup(indices)?;
        self.decode(&zq)
    }

    /// Per-chunk masked timesteps: Bernoulli(mask_ratio) per step, redrawn
    /// once if nothing was selected.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<usize>> {
        let p = self.cfg.mask_ratio;
        (0..n)
            .map(|_| {
                if p <= 0.0 {
                    return Vec::new();
                }
                let mut draw = || (0..self.cfg.h).filter(|_| rng.random::<f64>() < p).collect::<Vec<_>>();
                let first = draw();
                if first.is_empty() {
                    draw()
                } else {
                    first
                }
            })
            .collect()
    }

    /// Builds the full objective on `g` for normalized `chunks` (`n` of them)
    /// with the given per-chunk masked timesteps.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        chunks: &[f32],
        n: usize,
        masks: &[Vec<usize>],
    ) -> Result<LossVars> {
        self.check_chunks(chunks, n)?;
        if masks.len() != n {
            return Err(invalid(format!("{} masks for {n} chunks", masks.len())));
        }
        let (h, m, d) = (self.cfg.h, self.cfg.m, self.cfg.d);
        let rows = n * h;
        let x = g.constant(&[rows, m], chunks.iter().map(|&v| T::of_f32(v)).collect())?;
        let c = self.encode_graph(g, x, n)?;
        let c32: Vec<f32> = g.value(c).iter().map(|v| v.as_f32()).collect();
        let indices = self.codebook.quantize(&c32);
        let zq_vals: Vec<T> = self.codebook.lookup(&indices)?.into_iter().map(T::of_f32).collect();
        let zq = g.straight_through(c, zq_vals.clone())?;
        let recon = self.decode_graph(g, zq)?;
        let rec = g.mse(recon, x)?;
        let sg_zq = g.constant(&[rows, d], zq_vals)?;
        let commit = g.mse(c, sg_zq)?;

        let masked_rows: Vec<usize> = masks
            .iter()
            .enumerate()
            .flat_map(|(i, ms)| ms.iter().map(move |&t| i * h + t))
            .collect();
        if let Some(&bad) = masks.iter().flatten().find(|&&t| t >= h) {
            return Err(invalid(format!("masked timestep {bad} outside horizon {h}")));
        }
        let mask = if masked_rows.is_empty() {
            None
        } else {
            let mut keep = vec![T::one(); rows * d];
            for &r in &masked_rows {
                keep[r * d..(r + 1) * d].fill(T::zero());
            }
            let keep = g.constant(&[rows, d], keep)?;
            let mut cm = g.mul(c, keep)?;
            if self.cfg.quantize_masked {
                let v: Vec<f32> = g.value(cm).iter().map(|v| v.as_f32()).collect();
                let idx = self.codebook.quantize(&v);
                let q: Vec<T> = self.codebook.lookup(&idx)?.into_iter().map(T::of_f32).collect();
                cm = g.straight_through(cm, q)?;
            }
            let tilde = self.decode_graph(g, cm)?;
            let re = self.encode_graph(g, tilde, n)?;
            let a = g.gather_rows(re, &masked_rows)?;
            let b = g.gather_rows(c, &masked_rows)?;
            Some(g.mse(a, b)?)
        };

        let mut total = rec;
        if self.cfg.beta != 0.0 {
            let t = g.scale(commit, self.cfg.beta)?;
            total = g.add(total, t)?;
        }
        if let Some(mv) = mask {
            if self.cfg.lambda_mask != 0.0 {
                let t = g.scale(mv, self.cfg.lambda_mask)?;
                total = g.add(total, t)?;
            }
        }
        Ok(LossVars {
            c,
            zq,
            recon,
            rec,
            commit,
            mask,
            total,
            indices,
        })
    }

    /// One optimizer step plus one EMA codebook update.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        chunks: &[f32],
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossValues> {
        let masks = self.sample_masks(rng, n);
        let mut g = Graph::<f32>::new();
        let lv = self.loss_graph(&mut g, chunks, n, &masks)?;
        let values = LossValues {
            rec: check_finite("action LAM rec loss", g.scalar(lv.rec) as f64)?,
            mask: lv.mask.map_or(0.0, |v| g.scalar(v) as f64),
            commit: check_finite("action LAM commit loss", g.scalar(lv.commit) as f64)?,
            total: check_finite("action LAM total loss", g.scalar(lv.total) as f64)?,
        };
        g.backward(lv.total)?;
        let grads = g.param_grads(&self.store);
        adam.step(&mut self.store, &grads)?;
        self.codebook.ema_update(&lv.indices, g.value(lv.c))?;
        Ok(values)
    }

    pub fn meta(&self) -> Vec<(&'static str, f64)> {
        let c = &self.cfg;
        let mut meta = vec![
            ("kind", 1.0),
            ("h", c.h as f64),
            ("m", c.m as f64),
            ("k", c.k as f64),
            ("d", c.d as f64),
            ("kernel", c.kernel as f64),
            ("n_dilations", c.dilations.len() as f64),
            ("layers", c.layers as f64),
            ("heads", c.heads as f64),
            ("ff", c.ff as f64),
            ("dec_hidden", c.dec_hidden as f64),
            ("lambda_mask", c.lambda_mask),
            ("beta", c.beta),
            ("mask_ratio", c.mask_ratio),
            ("decay", c.decay),
            ("ema_eps", c.ema_eps),
            ("quantize_masked", c.quantize_masked as u8 as f64),
        ];
        const DIL_KEYS: [&str; 8] = ["dil0", "dil1", "dil2", "dil3", "dil4", "dil5", "dil6", "dil7"];
        for (i, &dl) in c.dilations.iter().enumerate().take(DIL_KEYS.len()) {
            meta.push((DIL_KEYS[i], dl as f64));
        }
        meta
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let cb = &self.codebook;
        let extra = [
            Param {
                name: "codebook.embeddings".into(),
                shape: vec![cb.k, cb.d],
                data: cb.embeddings.clone(),
            },
            Param {
                name: "codebook.counts".into(),
                shape: vec![cb.k],
                data: cb.counts.iter().map(|&v| v as f32).collect(),
            },
            Param {
                name: "codebook.sums".into(),
                shape: vec![cb.k, cb.d],
                data: cb.sums.iter().map(|&v| v as f32).collect(),
            },
        ];
        ckpt::save(w, &self.meta(), &self.store, &extra)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut l = ckpt::Loaded::read(r)?;
        if l.meta("kind")? != 1.0 {
            return Err(invalid("checkpoint is not an action LAM"));
        }
        let nd = l.meta_usize("n_dilations")?;
        let mut dilations = Vec::with_capacity(nd);
        for i in 0..nd {
            dilations.push(l.meta_usize(&format!("dil{i}"))?);
        }
        let cfg = ActionLamConfig {
            h: l.meta_usize("h")?,
            m: l.meta_usize("m")?,
            k: l.meta_usize("k")?,
            d: l.meta_usize("d")?,
            kernel: l.meta_usize("kernel")?,
            dilations,
            layers: l.meta_usize("layers")?,
            heads: l.meta_usize("heads")?,
            ff: l.meta_usize("ff")?,
            dec_hidden: l.meta_usize("dec_hidden")?,
            lambda_mask: l.meta("lambda_mask")?,
            beta: l.meta("beta")?,
            mask_ratio: l.meta("mask_ratio")?,
            decay: l.meta("decay")?,
            ema_eps: l.meta("ema_eps")?,
            quantize_masked: l.meta("quantize_masked")? != 0.0,
            ..ActionLamConfig::default()
        };
        let mut model = ActionLam::new(cfg, 0)?;
        let emb = l.take("codebook.embeddings")?;
        let counts = l.take("codebook.counts")?;
        let sums = l.take("codebook.sums")?;
        let cb = &mut model.codebook;
        if emb.data.len() != cb.k * cb.d || counts.data.len() != cb.k || sums.data.len() != cb.k * cb.d {
            return Err(invalid("codebook records do not match the configured size"));
        }
        cb.embeddings = emb.data;
        cb.counts = counts.data.iter().map(|&v| v as f64).collect();
        cb.sums = sums.data.iter().map(|&v| v as f64).collect();
        l.fill(&mut model.store)?;
        Ok(model)
    }
}

/// Newline-delimited token export: one chunk per line, indices separated by spaces.
pub fn write_tokens<W: Write>(w: &mut W, chunks: &[Vec<usize>]) -> Result<()> {
    for c in chunks {
        let line: Vec<String> = c.iter().map(|i| i.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_tokens(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| invalid(format!("bad token {t:?}: {e}"))))
                .collect()
        })
        .collect()
}
