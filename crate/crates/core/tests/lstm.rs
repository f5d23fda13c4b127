use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use rand::Rng as _;
use skilleval::lstm::*;
use skilleval::seed::rng_for;
use skilleval::selftest;

fn random_input(t: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "test-input", 0);
    Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step scalar LSTM, one gate row at a time.
fn naive_forward(net: &StackedLstm, x: &Array2<f64>) -> Vec<Vec<Vec<f64>>> {
    let mut layer_input: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut all = Vec::new();
    for layer in &net.layers {
        let h_dim = layer.w_recurrent.ncols();
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut outputs = Vec::new();
        for xt in &layer_input {
            let pre = |row: usize| -> f64 {
                let mut s = layer.bias[row];
                for (k, xv) in xt.iter().enumerate() {
                    s += layer.w_input[[row, k]] * xv;
                }
                for (k, hv) in h.iter().enumerate() {
                    s += layer.w_recurrent[[row, k]] * hv;
                }
                s
            };
            let mut h_new = vec![0.0; h_dim];
            let mut c_new = vec![0.0; h_dim];
            for j in 0..h_dim {
                let i = sig(pre(j));
                let f = sig(pre(h_dim + j));
                let o = sig(pre(2 * h_dim + j));
                let g = pre(3 * h_dim + j).tanh();
                c_new[j] = f * c[j] + i * g;
                h_new[j] = o * c_new[j].tanh();
            }
            h = h_new;
            c = c_new;
            outputs.push(h.clone());
        }
        layer_input = outputs.clone();
        all.push(outputs);
    }
    all
}

fn random_net(input: usize, hidden: &[usize], seed: u64) -> StackedLstm {
    let mut rng = rng_for(seed, "test-net", 0);
    let mut net = StackedLstm::init(input, hidden, &mut rng).unwrap();
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.9..0.9);
        }
    }
    net
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 0..3 {
        let net = random_net(4, &[6, 3], seed);
        let x = random_input(9, 4, seed);
        let cache = net.forward(x.view()).unwrap();
        let naive = naive_forward(&net, &x);
        for (l, layer) in naive.iter().enumerate() {
            for (t, row) in layer.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert_abs_diff_eq!(cache.hidden(l)[[t, j]], *v, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn forward_is_prefix_causal_and_repeatable() {
    let net = random_net(3, &[5, 4], 11);
    let x = random_input(6, 3, 11);
    let full = net.forward(x.view()).unwrap();
    let again = net.forward(x.view()).unwrap();
    assert_eq!(full.top_hidden(), again.top_hidden());
    for t in 1..=6 {
        let prefix = net.forward(x.slice(ndarray::s![..t, ..])).unwrap();
        assert_eq!(prefix.top_hidden(), full.top_hidden().slice(ndarray::s![..t, ..]));
    }
}

#[test]
fn gate_and_hidden_ranges() {
    let net = random_net(3, &[5, 5], 2);
    let x = random_input(8, 3, 2) * 4.0;
    let cache = net.forward(x.view()).unwrap();
    for l in 0..2 {
        for g in [Gate::Input, Gate::Forget, Gate::Output] {
            assert!(cache.gate(l, g).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(cache.hidden(l).iter().all(|&v| v > -1.0 && v < 1.0));
    }
    let state = cache.final_state();
    assert_eq!(state.h[1], cache.last_output().to_owned());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let report = selftest::lstm_grad_check(3, false).unwrap();
    assert!(report.pass, "max_rel_err={} worst={:?}", report.max_rel_err, report.worst.first());
    assert!(report.max_rel_err <= 1e-4);
}

#[test]
fn input_gradients_match_finite_differences() {
    let net = random_net(4, &[5, 5], 5);
    let x = random_input(7, 4, 5);
    let coeff = random_input(7, 5, 6);
    let loss = |x: &Array2<f64>| (&net.forward(x.view()).unwrap().top_hidden() * &coeff).sum();
    let cache = net.forward(x.view()).unwrap();
    let mut grads = net.zeros_like();
    let dx = net.backward(&cache, coeff.view(), &mut grads).unwrap();
    let eps = 1e-5;
    for t in 0..7 {
        for k in 0..4 {
            let mut p = x.clone();
            p[[t, k]] += eps;
            let mut m = x.clone();
            m[[t, k]] -= eps;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!(relative_error(dx[[t, k]], numeric) <= 1e-4, "dx[{t},{k}]");
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let net = random_net(3, &[4, 4], 8);
    let x = random_input(5, 3, 8);
    let cache = net.forward(x.view()).unwrap();
    let mut grads = net.zeros_like();
    let dx = net.backward(&cache, Array2::zeros((5, 4)).view(), &mut grads).unwrap();
    assert_eq!(grads.l2_norm(), 0.0);
    assert!(dx.iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_sequence_doubles_gradient_exactly() {
    let net = random_net(3, &[4, 4], 9);
    let x = random_input(6, 3, 9);
    let up = random_input(6, 4, 10);
    let cache = net.forward(x.view()).unwrap();
    let mut once = net.zeros_like();
    net.backward(&cache, up.view(), &mut once).unwrap();
    let mut twice = net.zeros_like();
    net.backward(&cache, up.view(), &mut twice).unwrap();
    net.backward(&cache, up.view(), &mut twice).unwrap();
    for ((_, a), (_, b)) in once.tensors().into_iter().zip(twice.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

#[test]
fn corrupted_forget_gradient_is_caught() {
    let report = selftest::lstm_grad_check(3, true).unwrap();
    assert!(!report.pass);
    assert!(report.worst.iter().any(|w| w.tensor.starts_with("layer0")));
}

#[test]
fn coarse_epsilon_grows_error_but_stays_finite() {
    let net = random_net(3, &[4, 4], 12);
    let x = random_input(5, 3, 12);
    let up = random_input(5, 4, 13);
    let objective = |p: &StackedLstm| {
        let cache = p.forward(x.view())?;
        let loss = (&cache.top_hidden() * &up).sum();
        let mut g = p.zeros_like();
        p.backward(&cache, up.view(), &mut g)?;
        Ok((loss, g))
    };
    let fine = grad_check(&net, objective, 1e-5, 1e-4).unwrap();
    let coarse = grad_check(&net, objective, 1e-1, 1e-4).unwrap();
    assert!(coarse.max_rel_err.is_finite());
    assert!(coarse.max_abs_err > fine.max_abs_err);
}

#[test]
fn clipping_hits_the_requested_norm() {
    let mut g = StackedLstm::zeros(2, &[3]).unwrap();
    g.tensors_mut()[0][0] = 6.0;
    g.tensors_mut()[2][1] = 8.0;
    let before = clip_gradients(&mut g, 1.0);
    assert_abs_diff_eq!(before, 10.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g.l2_norm(), 1.0, epsilon = 1e-12);
}

#[test]
fn adam_constant_gradient_matches_closed_form() {
    let config = AdamConfig {
        clip_norm: 1e9,
        ..AdamConfig::default()
    };
    let mut params = StackedLstm::zeros(1, &[1]).unwrap();
    let mut adam = Adam::new(&params, config);
    let g = -0.3;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut last_step = 0.0;
    for t in 1..=2000 {
        let before = params.tensors()[0].1[0];
        let mut grads = params.zeros_like();
        for tensor in grads.tensors_mut() {
            tensor.fill(g);
        }
        adam.step(&mut params, &mut grads).unwrap();
        let after = params.tensors()[0].1[0];
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let expected = -1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert_abs_diff_eq!(after - before, expected, epsilon = 1e-15);
        last_step = after - before;
    }
    // Step magnitude approaches lr * sign(-g).
    assert_abs_diff_eq!(last_step, 1e-3, epsilon = 1e-7);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let net = random_net(3, &[4, 2], 14);
    let mut file = skilleval::tensor_file::TensorFile::with_role("test");
    net.write_tensors(&mut file, "");
    let text = file.render(skilleval::tensor_file::LSTM_HEADER);
    let parsed = skilleval::tensor_file::TensorFile::parse(
        &text,
        skilleval::tensor_file::LSTM_HEADER,
        std::path::Path::new("mem"),
    )
    .unwrap();
    let back = StackedLstm::read_tensors(&parsed, "", std::path::Path::new("mem")).unwrap();
    assert_eq!(back, net);
}

#[test]
fn state_dimensions_follow_layers() {
    let net = StackedLstm::init(3, &[7, 2], &mut rng_for(0, "t", 0)).unwrap();
    let cache = net.forward(Array2::ones((2, 3)).view()).unwrap();
    let st = cache.final_state();
    assert_eq!(st.h.iter().map(Array1::len).collect::<Vec<_>>(), vec![7, 2]);
    assert_eq!(st.c.iter().map(Array1::len).collect::<Vec<_>>(), vec![7, 2]);
}
