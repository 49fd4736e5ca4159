use latb_tensor::{Adam, ParamGrads, ParamStore};

/// Literal evaluation of the bias-corrected Adam recurrence for one scalar.
fn oracle(p0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut p) = (0.0, 0.0, p0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}

fn run(p0: &[f32], grads: &[Vec<f32>], lr: f64) -> Vec<Vec<f32>> {
    let mut store = ParamStore::new();
    let id = store.add_values("p", &[p0.len()], p0.to_vec());
    let mut adam = Adam::new(&store, lr);
    let mut out = Vec::new();
    for g in grads {
        adam.step(&mut store, &ParamGrads { grads: vec![Some(g.clone())] }).unwrap();
        out.push(store.get(id).data.clone());
    }
    out
}

#[test]
fn first_step_moves_by_lr_against_gradient_sign() {
    let p0 = [0.5f32, -0.25, 2.0];
    let g = vec![0.3f32, -4.0, 1e-3];
    let lr = 1e-3;
    let got = run(&p0, std::slice::from_ref(&g), lr);
    for i in 0..3 {
        let want = oracle(p0[i] as f64, &[g[i] as f64], lr)[0];
        assert!((got[0][i] as f64 - want).abs() < 1e-7, "{i}: {} vs {want}", got[0][i]);
        // first bias-corrected step is lr * g/|g| up to eps
        let step = p0[i] as f64 - want;
        assert!((step - lr * (g[i] as f64).signum()).abs() < 1e-8);
    }
}

#[test]
fn two_identical_gradients_follow_recurrence() {
    let p0 = [1.0f32, -1.0];
    let g = vec![0.7f32, -0.02];
    let lr = 0.01;
    let got = run(&p0, &[g.clone(), g.clone()], lr);
    for i in 0..2 {
        let want = oracle(p0[i] as f64, &[g[i] as f64, g[i] as f64], lr);
        for s in 0..2 {
            assert!((got[s][i] as f64 - want[s]).abs() < 1e-6, "step {s} dim {i}");
        }
        let second = got[0][i] as f64 - got[1][i] as f64;
        let second_want = want[0] - want[1];
        assert!((second - second_want).abs() < 1e-6);
    }
}

#[test]
fn long_varying_sequence_tracks_oracle() {
    let grads: Vec<f64> = (0..200).map(|t| ((t as f64) * 0.37).sin() * 2.0).collect();
    let got = run(&[0.0], &grads.iter().map(|&g| vec![g as f32]).collect::<Vec<_>>(), 1e-3);
    let want = oracle(0.0, &grads, 1e-3);
    for (a, b) in got.iter().zip(&want) {
        assert!((a[0] as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn deterministic_given_inputs() {
    let grads: Vec<Vec<f32>> = (0..10).map(|t| vec![t as f32 * 0.1 - 0.3, 0.2]).collect();
    assert_eq!(run(&[0.1, 0.2], &grads, 1e-3), run(&[0.1, 0.2], &grads, 1e-3));
}
