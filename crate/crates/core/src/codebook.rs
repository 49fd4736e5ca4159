use rand::Rng;

use crate::error::{invalid, Result};

/// Index of the nearest row of `codes` (`k x d`, row-major) to `x` by squared
/// L2 distance. Distances are accumulated in `f64`; ties go to the lowest index.
pub fn nearest(codes: &[f32], d: usize, x: &[f32]) -> usize {
    debug_assert_eq!(x.len(), d);
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, row) in codes.chunks_exact(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(x)
            .map(|(&e, &c)| {
                let t = c as f64 - e as f64;
                t * t
            })
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = j;
        }
    }
    best
}

/// Nearest code for every `d`-wide row of `rows`.
pub fn nearest_rows(codes: &[f32], d: usize, rows: &[f32]) -> Vec<usize> {
    rows.chunks_exact(d).map(|r| nearest(codes, d, r)).collect()
}

/// Codebook maintained by exponential moving averages of assignment counts
/// and sums, with Laplace-smoothed counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub embeddings: Vec<f32>,
    pub counts: Vec<f64>,
    pub sums: Vec<f64>,
    pub decay: f64,
    pub eps: f64,
}

impl Codebook {
    /// Rows uniform in `[-1/k, 1/k]`; each code starts with one pseudo-count
    /// whose running sum is its own embedding.
    pub fn new<R: Rng + ?Sized>(k: usize, d: usize, decay: f64, eps: f64, rng: &mut R) -> Self {
        let a = 1.0 / k as f32;
        let embeddings: Vec<f32> = (0..k * d).map(|_| rng.random_range(-a..=a)).collect();
        Self::from_embeddings(k, d, embeddings, decay, eps)
    }

    pub fn from_embeddings(k: usize, d: usize, embeddings: Vec<f32>, decay: f64, eps: f64) -> Self {
        assert_eq!(embeddings.len(), k * d);
        Codebook {
            k,
            d,
            sums: embeddings.iter().map(|&v| v as f64).collect(),
            counts: vec![1.0; k],
            embeddings,
            decay,
            eps,
        }
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.embeddings[j * self.d..(j + 1) * self.d]
    }

    pub fn nearest(&self, x: &[f32]) -> usize {
        nearest(&self.embeddings, self.d, x)
    }

    pub fn quantize(&self, rows: &[f32]) -> Vec<usize> {
        nearest_rows(&self.embeddings, self.d, rows)
    }

    /// Gathers the embedding rows for `indices`.
    pub fn lookup(&self, indices: &[usize]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.k {
                return Err(invalid(format!("code index {i} >= codebook size {}", self.k)));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(out)
    }

    /// One EMA step from a batch of `(index, vector)` assignments given as
    /// parallel slices. An empty batch only decays the statistics.
    pub fn ema_update(&mut self, indices: &[usize], vectors: &[f32]) -> Result<()> {
        let d = self.d;
        if vectors.len() != indices.len() * d {
            return Err(invalid(format!(
                "ema_update: {} vectors of width {d} expected, got {} values",
                indices.len(),
                vectors.len()
            )));
        }
        let mut count = vec![0.0f64; self.k];
        let mut sum = vec![0.0f64; self.k * d];
        for (&j, v) in indices.iter().zip(vectors.chunks_exact(d)) {
            if j >= self.k {
                return Err(invalid(format!("code index {j} >= codebook size {}", self.k)));
            }
            count[j] += 1.0;
            for (s, &x) in sum[j * d..(j + 1) * d].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        let g = self.decay;
        for (n, &c) in self.counts.iter_mut().zip(&count) {
            *n = g * *n + (1.0 - g) * c;
        }
        for (m, s) in self.sums.iter_mut().zip(&sum) {
            *m = g * *m + (1.0 - g) * s;
        }
        let total: f64 = self.counts.iter().sum();
        let kf = self.k as f64;
        for j in 0..self.k {
            let smoothed = (self.counts[j] + self.eps) / (total + kf * self.eps) * total;
            for i in 0..d {
                self.embeddings[j * d + i] = (self.sums[j * d + i] / smoothed) as f32;
            }
        }
        Ok(())
    }
}
