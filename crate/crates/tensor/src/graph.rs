//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every forward op as a node holding its output value.
//! [`Graph::backward`] walks the tape in reverse once and leaves gradients on
//! every node that needs one. Parameters enter the tape through
//! [`Graph::param`] and come back out through [`Graph::param_grads`].

use std::collections::HashMap;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::{gemm, Real, View};
use crate::tensor::Tensor;

/// Additive score used for masked attention entries. `exp` of it underflows
/// to exactly zero in both `f32` and `f64`.
pub const MASKED: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Conv1d {
        x: Var,
        w: Var,
        batch: usize,
        seq: usize,
        kernel: usize,
        dilation: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        seq: usize,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    SumSquares(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
        eps: f64,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Detach,
    StraightThrough(Var),
    MeanPoolGroups {
        x: Var,
        group: usize,
    },
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    overrides: HashMap<ParamId, Vec<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// GELU with the tanh approximation, evaluated in `f64`.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn with_grad<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
    f(buf);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            overrides: HashMap::new(),
            backward_done: false,
        }
    }

    /// Replaces the stored value of a parameter when it is loaded onto this
    /// graph. Used by finite-difference checks to evaluate at perturbed points
    /// with full precision.
    pub fn override_param(&mut self, id: ParamId, values: Vec<T>) {
        self.overrides.insert(id, values);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).unwrap_or_else(|_| {
            // Non-finite intermediate: still hand the values back.
            let mut t = Tensor::zeros(&n.shape);
            t.data_mut().copy_from_slice(&n.value);
            t
        })
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(invalid(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----- leaves -----

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Input that receives a gradient.
    pub fn input_grad(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> Result<Var> {
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "input" });
        }
        let shape = t.shape().to_vec();
        Ok(self.push(t.into_data(), shape, Op::Leaf, needs_grad))
    }

    /// Shorthand for an untracked constant from raw values.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.input(Tensor::new(shape, data)?)
    }

    /// Loads a parameter. Each parameter maps to one node per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let value: Vec<T> = match self.overrides.get(&id) {
            Some(o) => {
                if o.len() != p.data.len() {
                    return Err(mismatch("param", &p.shape, &[o.len()]));
                }
                o.clone()
            }
            None => p.data.iter().map(|&x| T::of_f32(x)).collect(),
        };
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "param" });
        }
        let v = self.push(value, p.shape.clone(), Op::Param, true);
        self.params.insert(id, v);
        Ok(v)
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Scale(a, s), ng))
    }

    /// Adds a row vector `[c]` to every row of `x: [n, c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "add_bias")?;
        if self.shape(b) != [c] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let mut value = self.value(x).to_vec();
        for r in 0..n {
            for (o, &bb) in value[r * c..(r + 1) * c].iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(value, vec![n, c], Op::AddBias(x, b), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| T::of(gelu(v.f64()))).collect();
        let ng = self.ng(x);
        Ok(self.push(value, self.shape(x).to_vec(), Op::Gelu(x), ng))
    }

    // ----- linear algebra -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut value = vec![T::zero(); m * n];
        gemm(
            self.value(a),
            View::dense(0, m, k),
            self.value(b),
            View::dense(0, k, n),
            &mut value,
            View::dense(0, m, n),
            T::one(),
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, vec![m, n], Op::MatMul(a, b), ng))
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = vec![T::zero(); n * c];
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::of(rs);
            for j in 0..c {
                let h = (row[j].f64() - mean) * rs;
                xhat[r * c + j] = T::of(h);
                value[r * c + j] = T::of(h * g[j].f64() + b[j].f64());
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            vec![n, c],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "softmax")?;
        let mut value = self.value(x).to_vec();
        for r in 0..n {
            softmax_row(&mut value[r * c..(r + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(value, vec![n, c], Op::Softmax(x), ng))
    }

    /// Dilated temporal convolution over `batch` sequences of length `seq`
    /// stacked as rows of `x: [batch*seq, c_in]`. The weight is `[kernel*c_in,
    /// c_out]` (one `[c_in, c_out]` block per tap). Symmetric zero padding
    /// keeps the output length equal to the input length.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        batch: usize,
        seq: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (rows, cin) = self.dims2(x, "conv1d")?;
        let (wr, cout) = self.dims2(w, "conv1d")?;
        if rows != batch * seq {
            return Err(invalid(
                "conv1d",
                format!("{rows} rows is not batch {batch} x seq {seq}"),
            ));
        }
        if kernel.is_multiple_of(2) || dilation == 0 {
            return Err(invalid("conv1d", "kernel must be odd and dilation positive"));
        }
        if wr != kernel * cin {
            return Err(mismatch("conv1d", self.shape(x), self.shape(w)));
        }
        let mut value = vec![T::zero(); rows * cout];
        let xv = self.value(x);
        let wv = self.value(w);
        for_each_tap(batch, seq, kernel, dilation, |tap, src, dst, len| {
            gemm(
                xv,
                View::dense(src * cin, len, cin),
                wv,
                View::dense(tap * cin * cout, cin, cout),
                &mut value,
                View::dense(dst * cout, len, cout),
                T::one(),
                true,
            );
        });
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            value,
            vec![rows, cout],
            Op::Conv1d {
                x,
                w,
                batch,
                seq,
                kernel,
                dilation,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are `[batch*seq, d]`; `mask` is an optional
    /// additive `[seq, seq]` score mask shared by every sequence and head.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        seq: usize,
        mask: Option<&[T]>,
    ) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if rows != batch * seq {
            return Err(invalid(
                "attention",
                format!("{rows} rows is not batch {batch} x seq {seq}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(invalid("attention", format!("{d} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.len() != seq * seq {
                return Err(mismatch("attention", &[seq, seq], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut value = vec![T::zero(); rows * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm(
                    qv,
                    View::block(base, seq, dh, d),
                    kv,
                    View::block(base, seq, dh, d).t(),
                    p,
                    View::dense(0, seq, seq),
                    scale,
                    false,
                );
                if let Some(m) = mask {
                    for (pp, &mm) in p.iter_mut().zip(m) {
                        *pp = *pp + mm;
                    }
                }
                for r in 0..seq {
                    softmax_row(&mut p[r * seq..(r + 1) * seq]);
                }
                gemm(
                    p,
                    View::dense(0, seq, seq),
                    vv,
                    View::block(base, seq, dh, d),
                    &mut value,
                    View::block(base, seq, dh, d),
                    T::one(),
                    false,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            value,
            vec![rows, d],
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                seq,
                probs,
            },
            ng,
        ))
    }

    // ----- reductions and losses -----

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![T::of(s / n as f64)], vec![1], Op::Mse(a, b), ng))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.f64().powi(2)).sum();
        let ng = self.ng(x);
        Ok(self.push(vec![T::of(s)], vec![1], Op::SumSquares(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        let ng = self.ng(x);
        Ok(self.push(vec![T::of(s)], vec![1], Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        let ng = self.ng(x);
        Ok(self.push(vec![T::of(s / n as f64)], vec![1], Op::Mean(x), ng))
    }

    /// Mean over rows of the cross-entropy between row softmax of
    /// `logits: [n, k]` and the target class of each row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(mismatch("cross_entropy", &[n, k], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(invalid(
                "cross_entropy",
                format!("target {t} out of range for {k} classes"),
            ));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for r in 0..n {
            let row = &mut probs[r * k..(r + 1) * k];
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]].f64();
            for v in row.iter_mut() {
                *v = T::of((v.f64() - lse).exp());
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![T::of(total / n as f64)],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Row-wise cosine similarity of `a, b: [n, d]`, giving `[n]`. Norms
    /// below `eps` are clamped to `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (n, d) = self.dims2(a, "cosine_similarity")?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut na = vec![0.0; n];
        let mut nb = vec![0.0; n];
        let mut value = vec![T::zero(); n];
        for r in 0..n {
            let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x.f64() * y.f64()).sum();
            na[r] = ra.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
            nb[r] = rb.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
            value[r] = T::of(dot / (na[r].max(eps) * nb[r].max(eps)));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, vec![n], Op::Cosine { a, b, na, nb, eps }, ng))
    }

    // ----- structure -----

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols", "no inputs"));
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, vec![n, total], Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_rows", "no inputs"));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, cc) = self.dims2(p, "concat_rows")?;
            if cc != c {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, vec![rows, c], Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects rows of `x: [n, c]` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(invalid("gather_rows", "empty index list"));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid("gather_rows", format!("row {i} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            value.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            value,
            vec![idx.len(), c],
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), ng))
    }

    /// Stop-gradient: same value, no gradient flows back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).to_vec();
        self.push(value, self.shape(x).to_vec(), Op::Detach, false)
    }

    /// Straight-through estimator: the output takes `value` exactly, and the
    /// backward pass hands the output gradient to `src` unchanged.
    pub fn straight_through(&mut self, src: Var, value: Vec<T>) -> Result<Var> {
        if value.len() != self.value(src).len() {
            return Err(mismatch("straight_through", self.shape(src), &[value.len()]));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "straight_through" });
        }
        let ng = self.ng(src);
        Ok(self.push(value, self.shape(src).to_vec(), Op::StraightThrough(src), ng))
    }

    /// Averages consecutive groups of `group` rows: `[n*group, c] -> [n, c]`.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.dims2(x, "mean_pool_groups")?;
        if group == 0 || rows % group != 0 {
            return Err(invalid(
                "mean_pool_groups",
                format!("{rows} rows not divisible into groups of {group}"),
            ));
        }
        let n = rows / group;
        let xv = self.value(x);
        let mut value = vec![T::zero(); n * c];
        for g in 0..n {
            for j in 0..c {
                let s: f64 = (0..group).map(|i| xv[(g * group + i) * c + j].f64()).sum();
                value[g * c + j] = T::of(s / group as f64);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(value, vec![n, c], Op::MeanPoolGroups { x, group }, ng))
    }

    // ----- backward -----

    /// Back-propagates from a single-element `loss`. Runs once per graph
    /// until [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter loaded onto this graph, converted to `f32`.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; store.len()];
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                grads[id.0] = Some(g.iter().map(|x| x.as_f32()).collect());
            }
        }
        ParamGrads { grads }
    }

    /// Gradient for one parameter in the graph's own precision.
    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    fn backprop_node(&mut self, i: usize, gy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::Add(a, b) => {
                with_grad(grads, nodes, *a, |g| add_into(g, gy));
                with_grad(grads, nodes, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                with_grad(grads, nodes, *a, |g| add_into(g, gy));
                with_grad(grads, nodes, *b, |g| {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o = *o - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad(grads, nodes, *a, |g| {
                    for ((o, &d), &y) in g.iter_mut().zip(gy).zip(bv) {
                        *o = *o + d * y;
                    }
                });
                with_grad(grads, nodes, *b, |g| {
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad(grads, nodes, *a, |g| {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o = *o + d * *s;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let c = nodes[b.0].value.len();
                with_grad(grads, nodes, *x, |g| add_into(g, gy));
                with_grad(grads, nodes, *b, |g| {
                    for (j, gj) in g.iter_mut().enumerate().take(c) {
                        let s: f64 = gy.iter().skip(j).step_by(c).map(|v| v.f64()).sum();
                        *gj = *gj + T::of(s);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                with_grad(grads, nodes, *x, |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(gy).zip(xv) {
                        *o = *o + d * T::of(gelu_parts(v.f64()).1);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad(grads, nodes, *a, |g| {
                    gemm(
                        gy,
                        View::dense(0, m, n),
                        bv,
                        View::dense(0, k, n).t(),
                        g,
                        View::dense(0, m, k),
                        T::one(),
                        true,
                    )
                });
                with_grad(grads, nodes, *b, |g| {
                    gemm(
                        av,
                        View::dense(0, m, k).t(),
                        gy,
                        View::dense(0, m, n),
                        g,
                        View::dense(0, k, n),
                        T::one(),
                        true,
                    )
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let gv = &nodes[gamma.0].value;
                with_grad(grads, nodes, *gamma, |g| {
                    for j in 0..c {
                        let s: f64 = (0..n)
                            .map(|r| gy[r * c + j].f64() * xhat[r * c + j].f64())
                            .sum();
                        g[j] = g[j] + T::of(s);
                    }
                });
                with_grad(grads, nodes, *beta, |g| {
                    for j in 0..c {
                        let s: f64 = (0..n).map(|r| gy[r * c + j].f64()).sum();
                        g[j] = g[j] + T::of(s);
                    }
                });
                with_grad(grads, nodes, *x, |g| {
                    for r in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gy[r * c + j].f64() * gv[j].f64();
                            m1 += dh;
                            m2 += dh * xhat[r * c + j].f64();
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        let rs = rstd[r].f64();
                        for j in 0..c {
                            let dh = gy[r * c + j].f64() * gv[j].f64();
                            let dx = rs * (dh - m1 - xhat[r * c + j].f64() * m2);
                            g[r * c + j] = g[r * c + j] + T::of(dx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (n, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                with_grad(grads, nodes, *x, |g| {
                    for r in 0..n {
                        let s: f64 = (r * c..(r + 1) * c).map(|j| gy[j].f64() * y[j].f64()).sum();
                        for j in r * c..(r + 1) * c {
                            g[j] = g[j] + T::of(y[j].f64() * (gy[j].f64() - s));
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                batch,
                seq,
                kernel,
                dilation,
            } => {
                let cin = nodes[x.0].shape[1];
                let cout = node.shape[1];
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                with_grad(grads, nodes, *x, |g| {
                    for_each_tap(*batch, *seq, *kernel, *dilation, |tap, src, dst, len| {
                        gemm(
                            gy,
                            View::dense(dst * cout, len, cout),
                            wv,
                            View::dense(tap * cin * cout, cin, cout).t(),
                            g,
                            View::dense(src * cin, len, cin),
                            T::one(),
                            true,
                        );
                    });
                });
                with_grad(grads, nodes, *w, |g| {
                    for_each_tap(*batch, *seq, *kernel, *dilation, |tap, src, dst, len| {
                        gemm(
                            xv,
                            View::dense(src * cin, len, cin).t(),
                            gy,
                            View::dense(dst * cout, len, cout),
                            g,
                            View::dense(tap * cin * cout, cin, cout),
                            T::one(),
                            true,
                        );
                    });
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                seq,
                probs,
            } => {
                let (heads, batch, seq) = (*heads, *batch, *seq);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * d + h * dh;
                        let blk = View::block(base, seq, dh, d);
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let pv = View::dense(0, seq, seq);
                        // dV += P^T dO
                        gemm(p, pv.t(), gy, blk, &mut dv, blk, T::one(), true);
                        // dP = dO V^T
                        gemm(gy, blk, vv, blk.t(), &mut dp, pv, T::one(), false);
                        for r in 0..seq {
                            let row = r * seq..(r + 1) * seq;
                            let s: f64 = row.clone().map(|j| dp[j].f64() * p[j].f64()).sum();
                            for j in row {
                                dp[j] = T::of(p[j].f64() * (dp[j].f64() - s));
                            }
                        }
                        // dQ += scale dS K ; dK += scale dS^T Q
                        gemm(&dp, pv, kv, blk, &mut dq, blk, scale, true);
                        gemm(&dp, pv.t(), qv, blk, &mut dk, blk, scale, true);
                    }
                }
                with_grad(grads, nodes, *q, |g| add_into(g, &dq));
                with_grad(grads, nodes, *k, |g| add_into(g, &dk));
                with_grad(grads, nodes, *v, |g| add_into(g, &dv));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = 2.0 * gy[0].f64() / av.len() as f64;
                with_grad(grads, nodes, *a, |g| {
                    for ((o, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                        *o = *o + T::of(c * (x.f64() - y.f64()));
                    }
                });
                with_grad(grads, nodes, *b, |g| {
                    for ((o, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                        *o = *o - T::of(c * (x.f64() - y.f64()));
                    }
                });
            }
            Op::SumSquares(x) => {
                let xv = &nodes[x.0].value;
                let c = 2.0 * gy[0].f64();
                with_grad(grads, nodes, *x, |g| {
                    for (o, &v) in g.iter_mut().zip(xv) {
                        *o = *o + T::of(c * v.f64());
                    }
                });
            }
            Op::Sum(x) => {
                with_grad(grads, nodes, *x, |g| {
                    for o in g.iter_mut() {
                        *o = *o + gy[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let d = T::of(gy[0].f64() / n as f64);
                with_grad(grads, nodes, *x, |g| {
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let c = gy[0].f64() / n as f64;
                with_grad(grads, nodes, *logits, |g| {
                    for r in 0..n {
                        for j in 0..k {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            g[r * k + j] = g[r * k + j] + T::of(c * (probs[r * k + j].f64() - onehot));
                        }
                    }
                });
            }
            Op::Cosine { a, b, na, nb, eps } => {
                let n = na.len();
                let d = nodes[a.0].value.len() / n;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let cosv = &node.value;
                let side = |g: &mut [T], x: &[T], y: &[T], nx: &[f64], ny: &[f64]| {
                    for r in 0..n {
                        let (dx, dy) = (nx[r].max(*eps), ny[r].max(*eps));
                        let clamped = nx[r] <= *eps;
                        let cs = cosv[r].f64();
                        let up = gy[r].f64();
                        for j in r * d..(r + 1) * d {
                            let mut v = y[j].f64() / (dx * dy);
                            if !clamped {
                                v -= cs * x[j].f64() / (dx * dx);
                            }
                            g[j] = g[j] + T::of(up * v);
                        }
                    }
                };
                with_grad(grads, nodes, *a, |g| side(g, av, bv, na, nb));
                with_grad(grads, nodes, *b, |g| side(g, bv, av, nb, na));
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].shape[1];
                    with_grad(grads, nodes, p, |g| {
                        for r in 0..n {
                            let src = &gy[r * total + off..r * total + off + c];
                            add_into(&mut g[r * c..(r + 1) * c], src);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    with_grad(grads, nodes, p, |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::Gather { x, idx } => {
                let c = node.shape[1];
                with_grad(grads, nodes, *x, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &gy[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                with_grad(grads, nodes, *x, |g| add_into(g, gy));
            }
            Op::MeanPoolGroups { x, group } => {
                let c = node.shape[1];
                let inv = T::of(1.0 / *group as f64);
                with_grad(grads, nodes, *x, |g| {
                    for (r, o) in g.iter_mut().enumerate() {
                        let (row, j) = (r / c, r % c);
                        *o = *o + gy[(row / group) * c + j] * inv;
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        let e = (v.f64() - max).exp();
        s += e;
        *v = T::of(e);
    }
    for v in row.iter_mut() {
        *v = T::of(v.f64() / s);
    }
}

/// Visits every (tap, source row, destination row, run length) block of a
/// same-padded dilated convolution.
fn for_each_tap(
    batch: usize,
    seq: usize,
    kernel: usize,
    dilation: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let center = (kernel / 2) as isize;
    for tap in 0..kernel {
        let off = (tap as isize - center) * dilation as isize;
        let lo = (-off).max(0) as usize;
        let hi = (seq as isize - off).min(seq as isize).max(0) as usize;
        if lo >= hi {
            continue;
        }
        for b in 0..batch {
            let dst = b * seq + lo;
            let src = (dst as isize + off) as usize;
            f(tap, src, dst, hi - lo);
        }
    }
}
