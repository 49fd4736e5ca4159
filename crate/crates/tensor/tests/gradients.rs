use latb_tensor::nn::{Conv1d, Linear, Mlp, TransformerLayer};
use latb_tensor::{grad_check, grad_check_params, Graph, Init, ParamStore, Result, Tensor, Var, MASKED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

/// Loads random parameters of the given shapes, applies `op`, and reduces the
/// output with a fixed random weighting so every output entry matters.
fn check_op<F>(seed: u64, shapes: &[&[usize]], op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), s, Init::Uniform(1.0), &mut rng))
        .collect();
    // Shape of the op output is discovered on a probe graph.
    let mut probe = Graph::<f64>::new();
    let vars: Vec<Var> = ids.iter().map(|&id| probe.param(&store, id).unwrap()).collect();
    let out = op(&mut probe, &vars).unwrap();
    let out_shape = probe.shape(out).to_vec();
    let n: usize = out_shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    grad_check_params(&store, &ids, 48, STEP, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect::<Result<_>>()?;
        let y = op(g, &vars)?;
        if n == 1 {
            return Ok(y);
        }
        let w = g.constant(&out_shape, weights.clone())?;
        let p = g.mul(y, w)?;
        g.sum(p)
    })
    .unwrap()
}

fn all_seeds<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let err = check_op(seed, shapes, &op);
        assert!(err < TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn matmul() {
    all_seeds("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn elementwise() {
    all_seeds("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    all_seeds("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    all_seeds("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    all_seeds("mul_self", &[&[5]], |g, v| g.mul(v[0], v[0]));
    all_seeds("scale", &[&[6]], |g, v| g.scale(v[0], -1.7));
    all_seeds("add_bias", &[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1]));
    all_seeds("gelu", &[&[4, 4]], |g, v| {
        let x = g.scale(v[0], 3.0)?;
        g.gelu(x)
    });
}

#[test]
fn normalization_and_softmax() {
    all_seeds("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    all_seeds("softmax", &[&[3, 5]], |g, v| {
        let x = g.scale(v[0], 2.0)?;
        g.softmax(x)
    });
}

#[test]
fn dilated_conv() {
    for dilation in [1, 2, 4] {
        all_seeds("conv1d", &[&[2 * 7, 3], &[3 * 3, 2]], move |g, v| {
            g.conv1d(v[0], v[1], 2, 7, 3, dilation)
        });
    }
}

#[test]
fn attention_plain_and_masked() {
    all_seeds("attention", &[&[2 * 4, 6], &[2 * 4, 6], &[2 * 4, 6]], |g, v| {
        g.attention(v[0], v[1], v[2], 2, 2, 4, None)
    });
    let seq = 5;
    let mut mask = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in i + 1..seq {
            mask[i * seq + j] = MASKED;
        }
    }
    all_seeds("masked_attention", &[&[seq, 4], &[seq, 4], &[seq, 4]], |g, v| {
        g.attention(v[0], v[1], v[2], 2, 1, seq, Some(&mask))
    });
    all_seeds("self_attention", &[&[seq, 4]], |g, v| {
        g.attention(v[0], v[0], v[0], 1, 1, seq, None)
    });
}

#[test]
fn losses() {
    all_seeds("mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1]));
    all_seeds("sum_squares", &[&[7]], |g, v| g.sum_squares(v[0]));
    all_seeds("sum", &[&[2, 3]], |g, v| g.sum(v[0]));
    all_seeds("mean", &[&[2, 3]], |g, v| g.mean(v[0]));
    all_seeds("cross_entropy", &[&[4, 16]], |g, v| {
        let x = g.scale(v[0], 3.0)?;
        g.cross_entropy(x, &[0, 5, 15, 5])
    });
    all_seeds("cosine", &[&[3, 5], &[3, 5]], |g, v| g.cosine_similarity(v[0], v[1], 1e-8));
}

#[test]
fn structural() {
    all_seeds("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
    all_seeds("concat_rows", &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[1], v[0]]));
    all_seeds("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]));
    all_seeds("slice_rows", &[&[5, 2]], |g, v| g.slice_rows(v[0], 1, 3));
    all_seeds("reshape", &[&[4, 3]], |g, v| {
        let r = g.reshape(v[0], &[2, 6])?;
        let w = g.constant(&[6, 2], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect())?;
        g.matmul(r, w)
    });
    all_seeds("mean_pool_groups", &[&[6, 2]], |g, v| g.mean_pool_groups(v[0], 3));
}

#[test]
fn layers() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 8, &mut rng);
        let conv = Conv1d::new(&mut store, "conv", 8, 8, 3, 2, &mut rng);
        let block = TransformerLayer::new(&mut store, "tf", 8, 2, 12, &mut rng);
        let head = Mlp::new(&mut store, "head", 8, 6, 2, &mut rng);
        let x: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..2 * 5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let err = grad_check_params(&store, &ids, 12, STEP, |g| {
            let xv = g.constant(&[10, 4], x.clone())?;
            let h = lin.forward(g, &store, xv)?;
            let c = conv.forward(g, &store, h, 2, 5)?;
            let c = g.gelu(c)?;
            let h = g.add(h, c)?;
            let h = block.forward(g, &store, h, 2, 5, None)?;
            let o = head.forward(g, &store, h)?;
            let t = g.constant(&[10, 2], y.clone())?;
            g.mse(o, t)
        })
        .unwrap();
        assert!(err < TOL, "layers seed {seed}: {err:e}");
    }
}

#[test]
fn mse_of_linear_map_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
        let y: Vec<f64> = (0..9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = Tensor::new(&[4, 3], (0..12).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let w = g.constant(&[3, 4], w.clone())?;
                let wx = g.matmul(w, x)?;
                let t = g.constant(&[3, 3], y.clone())?;
                g.mse(wx, t)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn half_squared_norm_is_exact() {
    let x = Tensor::new(&[5], vec![3.0, -2.0, 0.25, 10.0, -7.5]).unwrap();
    let err = grad_check(
        |g, x| {
            let s = g.sum_squares(x)?;
            g.scale(s, 0.5)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn cosine_against_fixed_vector() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[1, 6], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let u = g.constant(&[1, 6], u.clone())?;
                let c = g.cosine_similarity(x, u, 1e-8)?;
                g.sum(c)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn stopped_path_is_reflected_numerically() {
    // f(x) = sum(x * sg(x)): the analytic gradient sees only the live path,
    // giving x, while central differences of the same function give 2x.
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let err = grad_check(
        |g, x| {
            let s = g.detach(x);
            let p = g.mul(x, s)?;
            g.sum(p)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err > 0.1);
    // With detach on a separate branch only, the check passes.
    let err = grad_check(
        |g, x| {
            let s = g.detach(x);
            let a = g.sum_squares(x)?;
            let b = g.sum(s)?;
            let b = g.scale(b, 0.0)?;
            g.add(a, b)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn non_finite_function_value_is_an_error() {
    let x = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
    let r = grad_check(
        |g, x| {
            let s = g.sum(x)?;
            g.scale(s, f64::MAX)
        },
        &x,
        STEP,
    );
    assert!(r.is_err());
}
