use std::sync::Arc;

use gcnfault::eval::checks::random_connected_adjacency;
use gcnfault::graph::GraphOperator;
use gcnfault::nn::{cheb_apply, Activation, ChebConvLayer, DenseLayer, Mode, Model};
use gcnfault::oracle::{chebyshev_closed_form, eigendecompose};
use gcnfault::seed;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn conv_layer_commutes_with_node_relabeling() {
    let mut rng = seed::rng(21);
    for _ in 0..10 {
        let n = rng.random_range(5..15);
        let w = random_connected_adjacency(n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let wp = Array2::from_shape_fn((n, n), |(i, j)| w[[perm[i], perm[j]]]);
        let g = GraphOperator::from_adjacency(w, 1, 1.0).unwrap();
        // Power iteration starts from a fixed vector, so the estimate only
        // agrees to its tolerance; the layer is compared on one operator.
        let lp = GraphOperator::from_adjacency(wp, 1, 1.0).unwrap().lambda_max;
        assert!((g.lambda_max - lp).abs() <= 1e-6 * g.lambda_max);
        let gp = GraphOperator::from_scaled(Array2::from_shape_fn((n, n), |(i, j)| g.scaled[[perm[i], perm[j]]]), 1);
        let layer = ChebConvLayer::glorot(3, 5, 4, Activation::Relu, &mut rng);
        let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0));
        let xp = Array2::from_shape_fn((n, 5), |(i, c)| x[[perm[i], c]]);
        let (_, y) = layer.forward_batch(&g.scaled_sparse, x.view()).unwrap();
        let (_, yp) = layer.forward_batch(&gp.scaled_sparse, xp.view()).unwrap();
        for i in 0..n {
            for c in 0..4 {
                assert!((yp[[i, c]] - y[[perm[i], c]]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn chebyshev_terms_match_closed_form_in_eigenbasis() {
    let mut rng = seed::rng(5);
    for _ in 0..20 {
        let n = rng.random_range(4..16);
        let g = GraphOperator::from_adjacency(random_connected_adjacency(n, &mut rng), 1, 1.0).unwrap();
        let basis = eigendecompose(&g.laplacian).unwrap();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for k in 0..=6 {
            let mut alpha = vec![0.0; k + 1];
            alpha[k] = 1.0;
            let fast = cheb_apply(&g.scaled_sparse, &alpha, &f).unwrap();
            let u = &basis.vectors;
            let coef = u.t().dot(&Array1::from(f.clone()));
            let scaled: Array1<f64> = coef
                .iter()
                .zip(&basis.values)
                .map(|(c, &l)| c * chebyshev_closed_form(k, 2.0 * l / g.lambda_max - 1.0))
                .collect();
            let slow = u.dot(&scaled);
            for i in 0..n {
                assert!((fast[i] - slow[i]).abs() < 1e-10, "order {k}: {} vs {}", fast[i], slow[i]);
            }
        }
    }
}

fn constant_model(n: usize, width: usize, dropout: f64) -> Model {
    let hidden = DenseLayer {
        weights: Array2::zeros((n, width)),
        bias: Array1::ones(width),
        activation: Activation::Identity,
        dropout,
    };
    let out = DenseLayer {
        weights: Array2::eye(width),
        bias: Array1::zeros(width),
        activation: Activation::Identity,
        dropout: 0.0,
    };
    Model::new(None, n, 1, vec![], vec![hidden, out], width).unwrap()
}

#[test]
fn dropout_rate_and_scaling() {
    let (batch, width, p) = (200, 50, 0.3);
    let m = constant_model(4, width, p);
    let x = Array2::zeros((batch * 4, 1));
    let mut rng = seed::rng(8);
    let cache = m.forward(x.view(), Mode::Train, Some(&mut rng)).unwrap();
    let total = (batch * width) as f64;
    let dropped = cache.logits.iter().filter(|&&v| v == 0.0).count() as f64;
    for &v in cache.logits.iter() {
        assert!(v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-12);
    }
    let rate = dropped / total;
    let sd = (p * (1.0 - p) / total).sqrt();
    assert!((rate - p).abs() < 4.0 * sd, "drop rate {rate}");
    let mean = cache.logits.mean().unwrap();
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
}

#[test]
fn eval_mode_ignores_dropout() {
    let m = constant_model(3, 10, 0.5);
    let x = Array2::zeros((6, 1));
    let cache = m.forward(x.view(), Mode::Eval, None).unwrap();
    assert!(cache.logits.iter().all(|&v| v == 1.0));
    assert!(m.forward(x.view(), Mode::Train, None).is_err());
}

#[test]
fn graph_size_must_match_model() {
    let mut rng = seed::rng(1);
    let g = Arc::new(GraphOperator::from_adjacency(random_connected_adjacency(5, &mut rng), 1, 1.0).unwrap());
    let conv = vec![ChebConvLayer::glorot(1, 12, 2, Activation::Relu, &mut rng)];
    let dense = vec![DenseLayer::glorot(6 * 2, 3, Activation::Identity, 0.0, &mut rng)];
    assert!(Model::new(Some(g), 6, 12, conv, dense, 3).is_err());
}
