//! Parameterized layers built from graph ops.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_init(store, name, din, dout, Init::FanIn, rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), &[din, dout], init, rng);
        let b = store.add(format!("{name}.b"), &[dout], Init::Zeros, rng);
        Linear { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), &[dim], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), &[dim], Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Same-length dilated temporal convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let a = 1.0 / ((kernel * cin) as f32).sqrt();
        Conv1d {
            w: store.add(format!("{name}.w"), &[kernel * cin, cout], Init::Uniform(a), rng),
            b: store.add(format!("{name}.b"), &[cout], Init::Zeros, rng),
            kernel,
            dilation,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.conv1d(x, w, batch, seq, self.kernel, self.dilation)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<&[T]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let a = g.attention(q, k, v, self.heads, batch, seq, mask)?;
        self.o.forward(g, store, a)
    }
}

/// Two linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.0"), din, hidden, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, dout, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.l2.forward(g, store, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff: usize,
        rng: &mut R,
    ) -> Self {
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            ff: Mlp::new(store, &format!("{name}.ff"), dim, ff, dim, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<&[T]>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, batch, seq, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}
