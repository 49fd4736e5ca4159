mod common;

use common::*;
use latb_core::image_lam::{supervised_subset, ImageLam, ImageLamConfig, TransitionBatch};
use latb_tensor::{Adam, Graph, ParamId, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBS: usize = 768;

fn perturb(store: &mut ParamStore, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..store.len() {
        for v in &mut store.get_mut(ParamId(i)).data {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n * OBS).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Pixels of patch `(py, px)` as `[start c; end c]` per pixel, or start only.
fn patch_pixels(start: &[f64], end: Option<&[f64]>, py: usize, px: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for y in 4 * py..4 * py + 4 {
        for x in 4 * px..4 * px + 4 {
            let o = (y * 16 + x) * 3;
            out.extend_from_slice(&start[o..o + 3]);
            if let Some(e) = end {
                out.extend_from_slice(&e[o..o + 3]);
            }
        }
    }
    out
}

fn oracle_encode(lam: &ImageLam, start: &[f64], end: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        let s = &start[b * OBS..(b + 1) * OBS];
        let e = &end[b * OBS..(b + 1) * OBS];
        let mut regions = Vec::new();
        for ry in 0..2 {
            for rx in 0..2 {
                let mut acc = vec![0.0; 32];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let px = patch_pixels(s, Some(e), 2 * ry + dy, 2 * rx + dx);
                    let f = gelu_all(&linear(&lam.store, "enc.patch", &px));
                    for j in 0..32 {
                        acc[j] += f[j] / 4.0;
                    }
                }
                regions.extend(acc);
            }
        }
        out.extend(linear(&lam.store, "enc.proj", &regions));
    }
    out
}

fn oracle_decode(lam: &ImageLam, start: &[f64], zq: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        let s = &start[b * OBS..(b + 1) * OBS];
        let mut inp = Vec::new();
        for py in 0..4 {
            for px in 0..4 {
                inp.extend(gelu_all(&linear(&lam.store, "dec.patch", &patch_pixels(s, None, py, px))));
            }
        }
        inp.extend_from_slice(&zq[b * 512..(b + 1) * 512]);
        let delta = mlp(&lam.store, "dec", &inp);
        out.extend(s.iter().zip(&delta).map(|(a, d)| a + d));
    }
    out
}

fn nearest_brute(book: &[f32], row: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..book.len() / row.len() {
        let d: f64 = row.iter().enumerate().map(|(i, &v)| (v - book[j * row.len() + i] as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[test]
fn defaults() {
    let c = ImageLamConfig::default();
    assert_eq!((c.k, c.p, c.d), (16, 4, 128));
    assert_eq!((c.beta, c.lambda_act), (0.25, 1.0));
    assert_eq!(c.supervised_fraction, 0.05);
}

#[test]
fn encoder_matches_oracle_with_shape_p_by_d() {
    let mut lam = ImageLam::new(ImageLamConfig::default(), 1).unwrap();
    perturb(&mut lam.store, 2, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, e) = (random_obs(&mut rng, 2), random_obs(&mut rng, 2));
    let got = lam.encode(&s, &e, 2).unwrap();
    assert_eq!(got.len(), 2 * 4 * 128);
    let want = oracle_encode(&lam, &to_f64(&s), &to_f64(&e), 2);
    assert!(max_abs_diff(&want, &got) < 1e-4, "{}", max_abs_diff(&want, &got));
}

#[test]
fn no_motion_pairs_are_deterministic() {
    let lam = ImageLam::new(ImageLamConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let o = random_obs(&mut rng, 1);
    let pair: Vec<f32> = o.iter().chain(&o).copied().collect();
    let c = lam.encode(&pair, &pair, 2).unwrap();
    assert_eq!(c[..512], c[512..]);
    assert_eq!(lam.tokenize(&o, &o, 1).unwrap(), lam.tokenize(&o, &o, 1).unwrap());
}

#[test]
fn tokens_are_nearest_codes() {
    let lam = ImageLam::new(ImageLamConfig::default(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (s, e) = (random_obs(&mut rng, 8), random_obs(&mut rng, 8));
    let (idx, c) = lam.tokenize(&s, &e, 8).unwrap();
    assert_eq!(idx.len(), 32);
    for (r, &i) in idx.iter().enumerate() {
        assert!(i < 16);
        assert_eq!(i, nearest_brute(lam.codebook_values(), &to_f64(&c[r * 128..(r + 1) * 128])));
    }
    assert!(c.iter().all(|v| v.is_finite()));
    assert!(lam.lookup(&idx).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn decoder_matches_oracle_and_is_deterministic() {
    let mut lam = ImageLam::new(ImageLamConfig::default(), 8).unwrap();
    perturb(&mut lam.store, 9, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = random_obs(&mut rng, 2);
    let z: Vec<f32> = (0..2 * 512).map(|_| rng.random_range(-0.5..0.5)).collect();
    let got = lam.decode_future(&s, &z, 2).unwrap();
    let want = oracle_decode(&lam, &to_f64(&s), &to_f64(&z), 2);
    assert!(max_abs_diff(&want, &got) < 1e-4);
    assert_eq!(got, lam.decode_future(&s, &z, 2).unwrap());
}

fn batch(rng: &mut ChaCha8Rng, n: usize, sup: Vec<usize>) -> TransitionBatch {
    let actions = (0..sup.len() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    TransitionBatch {
        start: random_obs(rng, n),
        end: random_obs(rng, n),
        n,
        sup,
        actions,
    }
}

#[test]
fn loss_matches_oracle() {
    let mut lam = ImageLam::new(ImageLamConfig::default(), 11).unwrap();
    perturb(&mut lam.store, 12, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = batch(&mut rng, 3, vec![1]);
    let mut g = Graph::<f64>::new();
    let lv = lam.loss_graph(&mut g, &b).unwrap();

    let c = oracle_encode(&lam, &to_f64(&b.start), &to_f64(&b.end), 3);
    let book = lam.codebook_values();
    let idx: Vec<usize> = c.chunks(128).map(|r| nearest_brute(book, r)).collect();
    assert_eq!(idx, lv.indices);
    let zq: Vec<f64> = idx.iter().flat_map(|&i| to_f64(&book[i * 128..(i + 1) * 128])).collect();
    let pred = oracle_decode(&lam, &to_f64(&b.start), &zq, 3);
    let rec = mse(&pred, &to_f64(&b.end));
    let vq = mse(&c, &zq);
    let a_hat = mlp(&lam.store, "act", &c[512..1024]);
    let act = mse(&a_hat, &to_f64(&b.actions));
    let total = rec + vq + 0.25 * vq + act;
    for (got, want) in [
        (g.scalar(lv.rec), rec),
        (g.scalar(lv.codebook), vq),
        (g.scalar(lv.commit), vq),
        (g.scalar(lv.act.unwrap()), act),
        (g.scalar(lv.total), total),
    ] {
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }
}

#[test]
fn no_supervised_rows_gives_no_action_term() {
    let lam = ImageLam::new(ImageLamConfig::default(), 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let b = batch(&mut rng, 2, vec![]);
    let mut g = Graph::<f32>::new();
    let lv = lam.loss_graph(&mut g, &b).unwrap();
    assert!(lv.act.is_none());
}

#[test]
fn latents_on_codes_have_zero_vq_terms() {
    let mut lam = ImageLam::new(ImageLamConfig::default(), 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let b = batch(&mut rng, 1, vec![]);
    let c = lam.encode(&b.start, &b.end, 1).unwrap();
    let id = lam.codebook;
    let book = &mut lam.store.get_mut(id).data;
    book[..512].copy_from_slice(&c);
    book[512..].fill(100.0);
    let mut g = Graph::<f32>::new();
    let lv = lam.loss_graph(&mut g, &b).unwrap();
    assert_eq!(lv.indices, vec![0, 1, 2, 3]);
    assert_eq!(g.scalar(lv.codebook), 0.0);
    assert_eq!(g.scalar(lv.commit), 0.0);
}

#[test]
fn exact_action_prediction_has_zero_loss() {
    let mut lam = ImageLam::new(ImageLamConfig::default(), 18).unwrap();
    let w = lam.store.find("act.1.w").unwrap();
    lam.store.get_mut(w).data.fill(0.0);
    let bias = lam.store.find("act.1.b").unwrap();
    lam.store.get_mut(bias).data.copy_from_slice(&[0.25, -0.5, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut b = batch(&mut rng, 2, vec![0, 1]);
    b.actions = vec![0.25, -0.5, 1.0, 0.25, -0.5, 1.0];
    let mut g = Graph::<f32>::new();
    let lv = lam.loss_graph(&mut g, &b).unwrap();
    assert_eq!(g.scalar(lv.act.unwrap()), 0.0);
}

fn grads_for(lam: &ImageLam, b: &TransitionBatch, pick: fn(&latb_core::image_lam::ImageLossVars) -> latb_tensor::Var) -> Vec<(String, f64)> {
    let mut g = Graph::<f32>::new();
    let lv = lam.loss_graph(&mut g, b).unwrap();
    g.backward(pick(&lv)).unwrap();
    let grads = g.param_grads(&lam.store);
    lam.store
        .iter()
        .map(|(id, p)| {
            let norm = grads.get(id).map_or(0.0, |v| v.iter().map(|&x| (x as f64).abs()).sum());
            (p.name.clone(), norm)
        })
        .collect()
}

#[test]
fn stop_gradients_route_vq_terms() {
    let lam = ImageLam::new(ImageLamConfig::default(), 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let b = batch(&mut rng, 2, vec![0]);
    for (name, norm) in grads_for(&lam, &b, |lv| lv.codebook) {
        assert_eq!(norm > 0.0, name == "codebook", "codebook loss reached {name}");
    }
    for (name, norm) in grads_for(&lam, &b, |lv| lv.commit) {
        if name.starts_with("enc.") && name.ends_with(".w") {
            assert!(norm > 0.0, "commitment missed {name}");
        } else if !name.starts_with("enc.") {
            assert_eq!(norm, 0.0, "commitment reached {name}");
        }
    }
}

#[test]
fn action_weight_zero_leaves_other_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let b = batch(&mut rng, 3, vec![0, 2]);
    let on = ImageLam::new(ImageLamConfig::default(), 23).unwrap();
    let off = ImageLam::new(
        ImageLamConfig {
            lambda_act: 0.0,
            ..ImageLamConfig::default()
        },
        23,
    )
    .unwrap();
    let mut g1 = Graph::<f32>::new();
    let a = on.loss_graph(&mut g1, &b).unwrap();
    let mut g2 = Graph::<f32>::new();
    let z = off.loss_graph(&mut g2, &b).unwrap();
    assert_eq!(g1.scalar(a.rec), g2.scalar(z.rec));
    assert_eq!(g1.scalar(a.codebook), g2.scalar(z.codebook));
    assert_eq!(g1.scalar(a.commit), g2.scalar(z.commit));
    let rest = g1.scalar(a.rec) + g1.scalar(a.codebook) + 0.25 * g1.scalar(a.commit);
    assert_eq!(g2.scalar(z.total), rest);
}

#[test]
fn supervised_subset_is_seed_deterministic() {
    let a = supervised_subset(1000, 0.05, 7);
    assert_eq!(a.len(), 50);
    assert_eq!(a, supervised_subset(1000, 0.05, 7));
    assert_ne!(a, supervised_subset(1000, 0.05, 8));
    assert!(a.windows(2).all(|w| w[0] < w[1]) && *a.last().unwrap() < 1000);
    assert_eq!(supervised_subset(10, 0.05, 1).len(), 1);
    assert!(supervised_subset(10, 0.0, 1).is_empty());
}

fn square(x: usize, y: usize) -> Vec<f32> {
    let mut o = vec![0.0; OBS];
    for yy in y..y + 2 {
        for xx in x..x + 2 {
            o[(yy * 16 + xx) * 3] = 1.0;
        }
    }
    o
}

fn moving_pairs(rng: &mut ChaCha8Rng, n: usize) -> TransitionBatch {
    let (mut start, mut end) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let (x, y) = (rng.random_range(0..12), rng.random_range(0..15));
        start.extend(square(x, y));
        end.extend(square(x + 2, y));
    }
    TransitionBatch {
        start,
        end,
        n,
        sup: vec![],
        actions: vec![],
    }
}

#[test]
fn learns_one_object_moving_right() {
    let cfg = ImageLamConfig {
        lr: 1e-3,
        ..ImageLamConfig::default()
    };
    let mut lam = ImageLam::new(cfg, 24).unwrap();
    let mut adam = Adam::new(&lam.store, lam.cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..400 {
        let b = moving_pairs(&mut rng, 32);
        lam.train_step(&mut adam, &b).unwrap();
    }
    let held = moving_pairs(&mut ChaCha8Rng::seed_from_u64(999), 50);
    let (idx, _) = lam.tokenize(&held.start, &held.end, 50).unwrap();
    let zq = lam.lookup(&idx).unwrap();
    let pred = lam.decode_future(&held.start, &zq, 50).unwrap();
    let mut better = 0;
    for i in 0..50 {
        let r = i * OBS..(i + 1) * OBS;
        let e = &held.end[r.clone()];
        let dp: f64 = pred[r.clone()].iter().zip(e).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let ds: f64 = held.start[r].iter().zip(e).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        if dp < ds {
            better += 1;
        }
    }
    assert!(better >= 45, "{better}/50 pairs improved");
    let again = lam.tokenize(&held.start, &held.end, 50).unwrap();
    assert_eq!(again.0, idx);
}

#[test]
fn checkpoint_round_trip() {
    let mut lam = ImageLam::new(ImageLamConfig::default(), 26).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let b = batch(&mut rng, 4, vec![1]);
    let mut adam = Adam::new(&lam.store, 1e-3);
    lam.train_step(&mut adam, &b).unwrap();
    let mut buf = Vec::new();
    lam.save(&mut buf).unwrap();
    let back = ImageLam::load(&mut buf.as_slice()).unwrap();
    assert_eq!(back.cfg, lam.cfg);
    assert_eq!(back.tokenize(&b.start, &b.end, 4).unwrap(), lam.tokenize(&b.start, &b.end, 4).unwrap());
}
