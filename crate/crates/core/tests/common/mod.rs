//! Plain-loop f64 reference implementations used as forward oracles.
#![allow(dead_code)]

use latb_tensor::ParamStore;

pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    store.get(id).data.iter().map(|&v| v as f64).collect()
}

pub fn shape(store: &ParamStore, name: &str) -> Vec<usize> {
    store.get(store.find(name).unwrap()).shape.clone()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_all(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| gelu(v)).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `x [rows, din] * w [din, dout] + b`.
pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    let s = shape(store, &format!("{name}.w"));
    let (din, dout) = (s[0], s[1]);
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            let mut acc = b[j];
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + j];
            }
            out[r * dout + j] = acc;
        }
    }
    out
}

pub fn mlp(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let h = gelu_all(&linear(store, &format!("{name}.0"), x));
    linear(store, &format!("{name}.1"), &h)
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let gamma = param(store, &format!("{name}.gamma"));
    let beta = param(store, &format!("{name}.beta"));
    let d = gamma.len();
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for j in 0..d {
            o[j] = (row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
        }
    }
    out
}

/// Same-length dilated convolution with zero padding; weight rows are tap-major.
pub fn conv1d(store: &ParamStore, name: &str, x: &[f64], batch: usize, seq: usize, kernel: usize, dil: usize) -> Vec<f64> {
    let w = param(store, &format!("{name}.w"));
    let b = param(store, &format!("{name}.b"));
    let s = shape(store, &format!("{name}.w"));
    let (cin, cout) = (s[0] / kernel, s[1]);
    let mut out = vec![0.0; batch * seq * cout];
    for bi in 0..batch {
        for t in 0..seq {
            for o in 0..cout {
                let mut acc = b[o];
                for tap in 0..kernel {
                    let src = t as isize + (tap as isize - (kernel / 2) as isize) * dil as isize;
                    if src < 0 || src >= seq as isize {
                        continue;
                    }
                    let src = bi * seq + src as usize;
                    for i in 0..cin {
                        acc += x[src * cin + i] * w[(tap * cin + i) * cout + o];
                    }
                }
                out[(bi * seq + t) * cout + o] = acc;
            }
        }
    }
    out
}

/// Multi-head self-attention with an optional "may attend" predicate.
pub fn attention(
    store: &ParamStore,
    name: &str,
    x: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let q = linear(store, &format!("{name}.q"), x);
    let k = linear(store, &format!("{name}.k"), x);
    let v = linear(store, &format!("{name}.v"), x);
    let d = q.len() / (batch * seq);
    let dh = d / heads;
    let mut ctx = vec![0.0; q.len()];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let qi = (b * seq + i) * d + h * dh;
                let js: Vec<usize> = (0..seq).filter(|&j| allowed(i, j)).collect();
                let scores: Vec<f64> = js
                    .iter()
                    .map(|&j| {
                        let kj = (b * seq + j) * d + h * dh;
                        (0..dh).map(|t| q[qi + t] * k[kj + t]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for (&j, e) in js.iter().zip(&ex) {
                    let vj = (b * seq + j) * d + h * dh;
                    for t in 0..dh {
                        ctx[qi + t] += e / z * v[vj + t];
                    }
                }
            }
        }
    }
    linear(store, &format!("{name}.o"), &ctx)
}

pub fn transformer(
    store: &ParamStore,
    name: &str,
    x: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let h = layer_norm(store, &format!("{name}.ln1"), x);
    let a = attention(store, &format!("{name}.attn"), &h, batch, seq, heads, allowed);
    let x = add(x, &a);
    let h = layer_norm(store, &format!("{name}.ln2"), &x);
    let f = mlp(store, &format!("{name}.ff"), &h);
    add(&x, &f)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).abs()).fold(0.0, f64::max)
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Direct O(h^2) real DFT of `x`, as `(re, im)` for bins `0..h/2+1`.
pub fn dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = x.len();
    let b = h / 2 + 1;
    let mut re = vec![0.0; b];
    let mut im = vec![0.0; b];
    for k in 0..b {
        for (t, &v) in x.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * (k * t) as f64 / h as f64;
            re[k] += v * w.cos();
            im[k] -= v * w.sin();
        }
    }
    (re, im)
}
