use latb_core::env::STATE_DIM;
use latb_core::policy::{BackboneConfig, Layout};
use latb_core::strategies::{combine, default_align_layer, LatentTargets, PolicyBatch, PolicyConfig, PolicyModel, Strategy};
use latb_tensor::{grad_check_params, Adam, Graph, ParamId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(s: Strategy) -> PolicyConfig {
    let mut cfg = PolicyConfig::new(s).with_backbone(BackboneConfig {
        layers: 2,
        d: 16,
        heads: 2,
        ff: 16,
        ..BackboneConfig::default()
    });
    cfg.h = 3;
    cfg.p = 2;
    cfg.d_img = 8;
    cfg.d_act = 8;
    cfg.k_act = 256;
    cfg.state_proj = 4;
    cfg.head_hidden = 16;
    cfg.latent_hidden = 8;
    cfg
}

fn batch(cfg: &PolicyConfig, rng: &mut ChaCha8Rng, n: usize) -> PolicyBatch {
    let (h, p) = (cfg.h, cfg.p);
    PolicyBatch {
        obs: (0..n * 768).map(|_| rng.random_range(0.0..1.0)).collect(),
        state: (0..n * STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
        instr: (0..n).map(|_| rng.random_range(0..5)).collect(),
        actions: (0..n * h * cfg.m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        n,
        targets: LatentTargets {
            img_tokens: (0..n * h * p).map(|_| rng.random_range(0..cfg.k_img)).collect(),
            img_c: (0..n * h * p * cfg.d_img).map(|_| rng.random_range(-1.0..1.0)).collect(),
            act_tokens: (0..n * h).map(|_| rng.random_range(0..cfg.k_act)).collect(),
            act_c: (0..n * h * cfg.d_act).map(|_| rng.random_range(-1.0..1.0)).collect(),
        },
    }
}

#[test]
fn layouts_follow_the_placeholder_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let (h, p) = (rng.random_range(1..33), rng.random_range(1..9));
        let want = |s: Strategy| match s {
            Strategy::Baseline | Strategy::LaAlign => (0, h),
            Strategy::LaDirect | Strategy::DirectC => (p * h, 0),
            Strategy::LaCond => (p * h, h),
            Strategy::LaTok | Strategy::TokC => (h, 0),
            Strategy::PhDirect => (0, p * h),
            Strategy::PhCond => (0, p * h + h),
        };
        for s in Strategy::ALL {
            let l = s.layout(h, p);
            assert_eq!((l.latent, l.action), want(s), "{s} h={h} p={p}");
        }
        assert_eq!(Strategy::PhDirect.layout(h, p).total(), Strategy::LaDirect.layout(h, p).total());
        assert_eq!(Strategy::PhCond.layout(h, p).total(), Strategy::LaCond.layout(h, p).total());
    }
    assert_eq!(Strategy::Baseline.layout(8, 4).total(), 8);
    assert_eq!(Strategy::LaCond.layout(8, 4).total(), 40);
    assert_eq!(Strategy::LaTok.layout(8, 4), Layout { latent: 8, action: 0 });
}

#[test]
fn lambda_defaults() {
    let d: Vec<f64> = [Strategy::Baseline, Strategy::LaAlign, Strategy::LaDirect, Strategy::LaCond, Strategy::LaTok]
        .iter()
        .map(|s| s.default_lambda())
        .collect();
    assert_eq!(d, vec![0.0, 1.0, 0.1, 0.1, 0.1]);
    assert_eq!(Strategy::PhDirect.default_lambda(), 0.0);
    assert_eq!(default_align_layer(6), 4);
    assert_eq!(PolicyConfig::new(Strategy::LaAlign).align_layer, 4);
}

#[test]
fn combination_arithmetic() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(&[1], vec![0.5]).unwrap();
    let l = g.constant(&[1], vec![2.0]).unwrap();
    let t = combine(&mut g, a, Some(l), 0.1).unwrap();
    assert!((g.scalar(t) - 0.7).abs() < 1e-15);
    let t0 = combine(&mut g, a, Some(l), 0.0).unwrap();
    assert_eq!(g.scalar(t0), 0.5);
    assert_eq!(t0, a);
}

fn out_var(g: &mut Graph<f64>, rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> latb_tensor::Var {
    let v = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
    g.constant(&[rows, cols], v).unwrap()
}

#[test]
fn align_loss_extremes() {
    let cfg = tiny(Strategy::LaAlign);
    let model = PolicyModel::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = batch(&cfg, &mut rng, 2);
    let (rows, d, p) = (2 * cfg.h, cfg.d_img, cfg.p);
    let pooled = |r: usize, j: usize| (0..p).map(|t| b.targets.img_c[(r * p + t) * d + j] as f64).sum::<f64>() / p as f64;
    let mut g = Graph::<f64>::new();
    let par = out_var(&mut g, rows, d, |r, j| 3.0 * pooled(r, j));
    let anti = out_var(&mut g, rows, d, |r, j| -0.5 * pooled(r, j));
    // orthogonal: rotate each pair of coordinates
    let orth = out_var(&mut g, rows, d, |r, j| if j % 2 == 0 { -pooled(r, j + 1) } else { pooled(r, j - 1) });
    for (v, want) in [(par, -1.0), (anti, 1.0), (orth, 0.0)] {
        let l = model.latent_loss(&mut g, v, &b.targets, 2).unwrap();
        assert!((g.scalar(l) - want).abs() < 1e-9, "{} vs {want}", g.scalar(l));
    }
}

#[test]
fn uniform_logits_give_log_k_per_token() {
    for (s, k) in [(Strategy::LaDirect, 16usize), (Strategy::LaTok, 256)] {
        let cfg = tiny(s);
        let model = PolicyModel::new(cfg.clone(), 0).unwrap();
        let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(2), 3);
        let positions = if s == Strategy::LaTok { cfg.h } else { cfg.h * cfg.p };
        let mut g = Graph::<f64>::new();
        let logits = out_var(&mut g, 3 * positions, k, |_, _| 0.7);
        let l = model.latent_loss(&mut g, logits, &b.targets, 3).unwrap();
        let per_token = g.scalar(l) / positions as f64;
        assert!((per_token - (k as f64).ln()).abs() < 1e-6, "{s}: {per_token}");
    }
    assert!((16f64.ln() - 2.7726).abs() < 1e-4 && (256f64.ln() - 5.5452).abs() < 1e-4);
}

#[test]
fn confident_correct_logits_give_zero_ce() {
    for s in [Strategy::LaDirect, Strategy::LaCond, Strategy::LaTok] {
        let cfg = tiny(s);
        let model = PolicyModel::new(cfg.clone(), 0).unwrap();
        let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(3), 2);
        let (tokens, k) = if s == Strategy::LaTok {
            (&b.targets.act_tokens, cfg.k_act)
        } else {
            (&b.targets.img_tokens, cfg.k_img)
        };
        let mut g = Graph::<f64>::new();
        let logits = out_var(&mut g, tokens.len(), k, |r, j| if j == tokens[r] { 60.0 } else { 0.0 });
        let l = model.latent_loss(&mut g, logits, &b.targets, 2).unwrap();
        assert!(g.scalar(l) >= 0.0 && g.scalar(l) < 1e-20, "{s}: {}", g.scalar(l));
    }
}

#[test]
fn regression_losses() {
    for s in [Strategy::DirectC, Strategy::TokC] {
        let cfg = tiny(s);
        let model = PolicyModel::new(cfg.clone(), 0).unwrap();
        let mut b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(4), 2);
        let (vals, width) = if s == Strategy::DirectC {
            (&mut b.targets.img_c, cfg.d_img)
        } else {
            (&mut b.targets.act_c, cfg.d_act)
        };
        let rows = vals.len() / width;
        // zero-mean targets: subtract per-column means
        for j in 0..width {
            let m: f32 = (0..rows).map(|r| vals[r * width + j]).sum::<f32>() / rows as f32;
            for r in 0..rows {
                vals[r * width + j] -= m;
            }
        }
        let vals = vals.clone();
        let mut g = Graph::<f64>::new();
        let exact = out_var(&mut g, rows, width, |r, j| vals[r * width + j] as f64);
        let l = model.latent_loss(&mut g, exact, &b.targets, 2).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let zero = out_var(&mut g, rows, width, |_, _| 0.0);
        let l = model.latent_loss(&mut g, zero, &b.targets, 2).unwrap();
        let want = vals.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / rows as f64;
        assert!((g.scalar(l) - want).abs() < 1e-9, "{s}");
    }
}

#[test]
fn latent_slot_counts() {
    let cfg = tiny(Strategy::LaTok);
    let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(5), 2);
    let model = PolicyModel::new(cfg.clone(), 0).unwrap();
    let mut g = Graph::<f32>::new();
    let f = model.forward(&mut g, &b.obs, &b.state, &b.instr, 2).unwrap();
    assert_eq!(g.shape(f.latent_out.unwrap()), &[2 * cfg.h, 256]);
    let big = PolicyConfig::new(Strategy::LaTok);
    assert_eq!(big.layout().latent, 8);
}

#[test]
fn latent_losses_have_the_right_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for s in Strategy::ALL.into_iter().filter(|s| s.has_latent_loss()) {
        for seed in 0..5 {
            let cfg = tiny(s);
            let model = PolicyModel::new(cfg.clone(), seed).unwrap();
            let b = batch(&cfg, &mut rng, 2);
            let mut g = Graph::<f64>::new();
            let lv = model.loss_graph(&mut g, &b).unwrap();
            let l = g.scalar(lv.latent_loss.unwrap());
            if s == Strategy::LaAlign {
                assert!((-1.0..=1.0).contains(&l), "{s}: {l}");
            } else {
                assert!(l >= 0.0, "{s}: {l}");
            }
            let want = g.scalar(lv.action_loss) + cfg.lambda * l;
            assert!((g.scalar(lv.total) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn strategies_without_latent_terms() {
    for s in [Strategy::Baseline, Strategy::PhDirect, Strategy::PhCond] {
        let cfg = tiny(s);
        let model = PolicyModel::new(cfg.clone(), 0).unwrap();
        let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(7), 2);
        let mut g = Graph::<f32>::new();
        let lv = model.loss_graph(&mut g, &b).unwrap();
        assert!(lv.latent_loss.is_none());
        assert_eq!(lv.total, lv.action_loss);
    }
}

#[test]
fn zero_lambda_drops_the_latent_term_but_keeps_layout() {
    let mut cfg = tiny(Strategy::LaCond);
    cfg.lambda = 0.0;
    let model = PolicyModel::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.layout(), tiny(Strategy::LaCond).layout());
    let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(8), 2);
    let mut g = Graph::<f32>::new();
    let lv = model.loss_graph(&mut g, &b).unwrap();
    assert!(g.scalar(lv.latent_loss.unwrap()) > 0.0);
    assert_eq!(g.scalar(lv.total), g.scalar(lv.action_loss));
}

#[test]
fn zero_lambda_align_trains_exactly_like_baseline() {
    let mut align = tiny(Strategy::LaAlign);
    align.lambda = 0.0;
    let base = tiny(Strategy::Baseline);
    let mut a = PolicyModel::new(align.clone(), 11).unwrap();
    let mut b = PolicyModel::new(base, 11).unwrap();
    let shared = b.store.len();
    let mut oa = Adam::new(&a.store, 1e-3);
    let mut ob = Adam::new(&b.store, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let batch = batch(&align, &mut rng, 4);
        let la = a.train_step(&mut oa, &batch).unwrap();
        let lb = b.train_step(&mut ob, &batch).unwrap();
        assert_eq!(la.action.to_bits(), lb.action.to_bits());
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
    }
    for i in 0..shared {
        assert_eq!(a.store.get(ParamId(i)).data, b.store.get(ParamId(i)).data);
    }
}

#[test]
fn latent_logits_ignore_action_placeholders() {
    let cfg = tiny(Strategy::LaCond);
    let model = PolicyModel::new(cfg.clone(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 2;
    let b = batch(&cfg, &mut rng, n);
    let bb = &model.backbone;
    let d = cfg.backbone.d;
    let rows = bb.action_rows(n);
    let mut g = Graph::<f32>::new();
    let seq = bb.embed(&mut g, &model.store, &b.obs, &b.instr, n).unwrap();
    let base = model.forward_from_seq(&mut g, seq, &b.state, n).unwrap();
    let logits = g.value(base.latent_out.unwrap()).to_vec();
    let total = n * bb.seq_len();
    for trial in 0..20 {
        let mut vals = g.value(seq).to_vec();
        let scale = 10f32.powi(trial % 4 - 1);
        for &r in &rows {
            for v in &mut vals[r * d..(r + 1) * d] {
                *v = scale * rng.random_range(-1.0..1.0);
            }
        }
        let s2 = g.constant(&[total, d], vals).unwrap();
        let f = model.forward_from_seq(&mut g, s2, &b.state, n).unwrap();
        let diff = logits.iter().zip(g.value(f.latent_out.unwrap())).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-6, "trial {trial}: {diff}");
        assert_ne!(g.value(f.actions), g.value(base.actions));
    }
}

#[test]
fn strategy_losses_pass_gradient_checks() {
    for s in Strategy::ALL {
        for seed in 0..2 {
            let cfg = tiny(s);
            let model = PolicyModel::new(cfg.clone(), seed).unwrap();
            let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(100 + seed), 2);
            let ids: Vec<ParamId> = (0..model.store.len()).map(ParamId).collect();
            let err = grad_check_params(&model.store, &ids, 2, 1e-4, |g| {
                let lv = model.loss_graph(g, &b).map_err(|e| latb_tensor::TensorError::Invalid {
                    op: "policy",
                    msg: e.to_string(),
                })?;
                Ok(lv.total)
            })
            .unwrap();
            assert!(err < 1e-4, "{s} seed {seed}: {err}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_layout_check() {
    let cfg = tiny(Strategy::LaCond);
    let mut model = PolicyModel::new(cfg.clone(), 15).unwrap();
    model.norm.min = vec![-2.0, -1.0, 0.0];
    model.norm.max = vec![2.0, 1.0, 1.0];
    let b = batch(&cfg, &mut ChaCha8Rng::seed_from_u64(16), 2);
    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let back = PolicyModel::load(&mut buf.as_slice(), Some(Strategy::LaCond)).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.norm, model.norm);
    assert_eq!(
        back.predict(&b.obs, &b.state, &b.instr, 2).unwrap(),
        model.predict(&b.obs, &b.state, &b.instr, 2).unwrap()
    );
    assert!(PolicyModel::load(&mut buf.as_slice(), Some(Strategy::Baseline)).is_err());
    assert!(PolicyModel::load(&mut buf.as_slice(), None).is_ok());
}
