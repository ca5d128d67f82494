//! Numerical self-checks against the reference oracles.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fixtures;
use crate::graph::{adjacency_hops, build_weighted_adjacency, normalized_laplacian, DistanceMatrix, GraphOperator};
use crate::nn::{build_fcnn, cheb_apply, Activation, ChebConvLayer, DenseLayer, Gradients, Mode, Model};
use crate::oracle::{chebyshev_filter_oracle, eigendecompose, finite_difference_gradients, max_relative_error};
use crate::seed::{self, Rng as SeedRng};

/// Random spanning tree plus extra edges, weights in (0.1, 1].
pub fn random_connected_adjacency(n: usize, rng: &mut SeedRng) -> Array2<f64> {
    let mut w = Array2::zeros((n, n));
    let set = |w: &mut Array2<f64>, i: usize, j: usize, rng: &mut SeedRng| {
        let v = rng.random_range(0.1..=1.0);
        w[[i, j]] = v;
        w[[j, i]] = v;
    };
    for i in 1..n {
        let j = rng.random_range(0..i);
        set(&mut w, i, j, rng);
    }
    for _ in 0..n {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i != j {
            set(&mut w, i, j, rng);
        }
    }
    w
}

fn random_vec(n: usize, rng: &mut SeedRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Worst `max|recursion - oracle| / max|oracle|` of Chebyshev filtering over
/// `graphs` random connected graphs (5 to 20 nodes, orders 1 to 6).
pub fn spectral_equivalence(graphs: usize, seed_: u64) -> Result<f64> {
    let mut rng = seed::rng(seed_);
    let mut worst = 0.0f64;
    for _ in 0..graphs {
        let n = rng.random_range(5..=20);
        let g = GraphOperator::from_adjacency(random_connected_adjacency(n, &mut rng), 1, 1.0)?;
        let basis = eigendecompose(&g.laplacian)?;
        let k = rng.random_range(1..=6);
        let alpha = random_vec(k + 1, &mut rng);
        let f = random_vec(n, &mut rng);
        let fast = cheb_apply(&g.scaled_sparse, &alpha, &f)?;
        let slow = chebyshev_filter_oracle(&basis, g.lambda_max, &alpha, &f)?;
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = fast.iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplacianCheck {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Largest over trials of the smallest eigenvalue magnitude.
    pub smallest_magnitude: f64,
    /// Smallest over trials of the cosine between the null vector and `D^1/2 1`.
    pub min_cosine: f64,
}

/// Spectra of normalized Laplacians built from random point clouds with
/// random `Kn`; disconnected draws are redrawn.
pub fn laplacian_invariants(trials: usize, seed_: u64) -> Result<LaplacianCheck> {
    let mut rng = seed::rng(seed_);
    let mut out = LaplacianCheck {
        min_eigenvalue: f64::INFINITY,
        max_eigenvalue: f64::NEG_INFINITY,
        smallest_magnitude: 0.0,
        min_cosine: 1.0,
    };
    let mut done = 0;
    while done < trials {
        let n = rng.random_range(5..=20);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let s = Array2::from_shape_fn((n, n), |(i, j)| {
            ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt()
        });
        let kn = rng.random_range(2..n);
        let (w, _) = build_weighted_adjacency(&DistanceMatrix::new(s)?, kn)?;
        if adjacency_hops(&w).iter().any(|&h| h == usize::MAX) {
            continue;
        }
        let (degrees, lap) = normalized_laplacian(&w)?;
        let basis = eigendecompose(&lap)?;
        out.min_eigenvalue = out.min_eigenvalue.min(basis.values[0]);
        out.max_eigenvalue = out.max_eigenvalue.max(basis.values[n - 1]);
        out.smallest_magnitude = out.smallest_magnitude.max(basis.values[0].abs());
        let root: Vec<f64> = degrees.iter().map(|d| d.sqrt()).collect();
        let v = basis.vectors.column(0);
        let dot: f64 = v.iter().zip(&root).map(|(a, b)| a * b).sum();
        let norm = root.iter().map(|x| x * x).sum::<f64>().sqrt() * v.dot(&v).sqrt();
        out.min_cosine = out.min_cosine.min(dot.abs() / norm);
        done += 1;
    }
    Ok(out)
}

/// Largest output change of a single order-`k` convolution layer (identity
/// activation) at buses more than `k` hops (in `W`) from a perturbed bus.
pub fn locality_violation(k: usize, seed_: u64) -> Result<f64> {
    let feeder = fixtures::feeder25();
    let g = GraphOperator::from_feeder(&feeder, 8)?;
    let hops = adjacency_hops(&g.weights);
    let n = g.n();
    let mut rng = seed::rng(seed_);
    let layer = ChebConvLayer::glorot(k, 12, 4, Activation::Identity, &mut rng);
    let x = Array2::from_shape_fn((n, 12), |_| rng.random_range(-1.0..1.0));
    let (_, base) = layer.forward_batch(&g.scaled_sparse, x.view())?;
    let mut worst = 0.0f64;
    for src in 0..n {
        let mut xp = x.clone();
        for c in 0..12 {
            xp[[src, c]] += rng.random_range(-1.0..1.0);
        }
        let (_, out) = layer.forward_batch(&g.scaled_sparse, xp.view())?;
        for j in (0..n).filter(|&j| hops[[src, j]] > k) {
            for c in 0..4 {
                worst = worst.max((out[[j, c]] - base[[j, c]]).abs());
            }
        }
    }
    Ok(worst)
}

/// 6 nodes, 3 classes, two order-2 convolutions with 4 filters, dense 8.
pub fn small_gcn(seed_: u64) -> Result<Model> {
    let mut rng = seed::rng(seed_);
    let g = Arc::new(GraphOperator::from_adjacency(random_connected_adjacency(6, &mut rng), 1, 1.0)?);
    let conv = vec![
        ChebConvLayer::glorot(2, 12, 4, Activation::Relu, &mut rng),
        ChebConvLayer::glorot(2, 4, 4, Activation::Relu, &mut rng),
    ];
    let dense = vec![
        DenseLayer::glorot(6 * 4, 8, Activation::Relu, 0.0, &mut rng),
        DenseLayer::glorot(8, 3, Activation::Identity, 0.0, &mut rng),
    ];
    Model::new(Some(g), 6, 12, conv, dense, 3)
}

/// Backprop and central-difference gradients (step 1e-5) on a random batch.
pub fn gradient_pair(model: &Model, batch: usize, seed_: u64) -> Result<(Gradients, Gradients)> {
    let mut rng = seed::rng(seed_);
    let x = Array2::from_shape_fn((batch * model.n_buses(), model.in_channels()), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..model.classes())).collect();
    let cache = model.forward(x.view(), Mode::Eval, None)?;
    let (_, grads) = model.loss_and_backward(&cache, &labels)?;
    let fd = finite_difference_gradients(model, x.view(), &labels, 1e-5)?;
    Ok((grads, fd))
}

/// Worst relative error between backprop and central differences, absolute
/// floor 1e-8.
pub fn gradient_error(model: &Model, batch: usize, seed_: u64) -> Result<f64> {
    let (grads, fd) = gradient_pair(model, batch, seed_)?;
    Ok(max_relative_error(&grads, &fd, 1e-8))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.value <= self.bound
    }
}

/// Oracle suites run by the `selfcheck` command.
pub fn selfcheck(seed_: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![CheckResult {
        name: "chebyshev vs eigenbasis (relative error)",
        value: spectral_equivalence(50, seed_)?,
        bound: 1e-10,
    }];
    let lap = laplacian_invariants(100, seed_)?;
    out.push(CheckResult {
        name: "laplacian spectrum outside [0, 2]",
        value: (-lap.min_eigenvalue).max(lap.max_eigenvalue - 2.0).max(0.0),
        bound: 1e-9,
    });
    out.push(CheckResult {
        name: "laplacian null vector misalignment",
        value: (1.0 - lap.min_cosine).max(lap.smallest_magnitude),
        bound: 1e-9,
    });
    for k in 1..=3 {
        out.push(CheckResult {
            name: ["locality K=1", "locality K=2", "locality K=3"][k - 1],
            value: locality_violation(k, seed_)?,
            bound: 1e-12,
        });
    }
    out.push(CheckResult {
        name: "gcn gradient (relative error)",
        value: gradient_error(&small_gcn(seed_)?, 4, seed_)?,
        bound: 1e-4,
    });
    out.push(CheckResult {
        name: "fcnn gradient (relative error)",
        value: gradient_error(&build_fcnn(2, 3, seed_)?, 2, seed_)?,
        bound: 1e-4,
    });
    if out.iter().any(|c| !c.value.is_finite()) {
        return Err(Error::NonFinite("self-check produced a non-finite value".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_are_connected() {
        let mut rng = seed::rng(1);
        for n in 2..15 {
            let w = random_connected_adjacency(n, &mut rng);
            assert!(adjacency_hops(&w).iter().all(|&h| h != usize::MAX));
        }
    }

    #[test]
    fn locality_is_exact() {
        assert_eq!(locality_violation(2, 4).unwrap(), 0.0);
    }

    #[test]
    fn gcn_gradient_fixture() {
        let m = small_gcn(2).unwrap();
        assert_eq!(m.conv_layers().len(), 2);
        assert!(gradient_error(&m, 3, 2).unwrap() <= 1e-4);
    }

    #[test]
    fn gradient_check_detects_small_errors() {
        let m = small_gcn(3).unwrap();
        let (mut grads, fd) = gradient_pair(&m, 3, 3).unwrap();
        let large = grads.iter().flatten().filter(|g| g.abs() > 1e-3).count();
        assert!(large > 20, "only {large} sizeable gradients");
        let (t, i) = grads
            .iter()
            .enumerate()
            .flat_map(|(t, g)| g.iter().enumerate().map(move |(i, v)| (t, i, v.abs())))
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(t, i, _)| (t, i))
            .unwrap();
        grads[t][i] *= 1.0 + 1e-3;
        assert!(max_relative_error(&grads, &fd, 1e-8) > 1e-4);
    }
}
