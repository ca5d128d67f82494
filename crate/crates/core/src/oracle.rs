//! Independent reference computations.
//!
//! Nothing here shares code with the production paths it checks: the
//! eigensolver is a cyclic Jacobi iteration, Chebyshev responses are evaluated
//! in closed trigonometric form, and gradients come from central differences of
//! the forward pass.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Gradients, Mode, Model};

/// Orthonormal eigenvectors (columns) and ascending eigenvalues.
#[derive(Clone, Debug)]
pub struct EigenBasis {
    pub vectors: Array2<f64>,
    pub values: Vec<f64>,
}

impl EigenBasis {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// `Phi diag(values) Phi^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let n = self.n();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            scaled.column_mut(j).mapv_inplace(|x| x * self.values[j]);
        }
        scaled.dot(&self.vectors.t())
    }
}

pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eigendecompose(a: &Array2<f64>) -> Result<EigenBasis> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("matrix is {}x{}", n, a.ncols())));
    }
    for i in 0..n {
        for j in 0..i {
            let scale = a[[i, j]].abs().max(a[[j, i]].abs()).max(1.0);
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-12 * scale {
                return Err(Error::Shape(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut converged = n <= 1;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off <= 1e-30 * total {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(JACOBI_MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[[x, x]].total_cmp(&m[[y, y]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok(EigenBasis { vectors, values })
}

/// `Phi diag(beta) Phi^T f`.
pub fn spectral_filter_oracle(basis: &EigenBasis, beta: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let n = basis.n();
    if beta.len() != n || f.len() != n {
        return Err(Error::Shape(format!(
            "basis has {n} vectors, beta {} and signal {}",
            beta.len(),
            f.len()
        )));
    }
    let phi = &basis.vectors;
    let spectrum: Vec<f64> = (0..n)
        .map(|k| beta[k] * (0..n).map(|i| phi[[i, k]] * f[i]).sum::<f64>())
        .collect();
    Ok((0..n)
        .map(|i| (0..n).map(|k| phi[[i, k]] * spectrum[k]).sum())
        .collect())
}

/// Chebyshev polynomial `T_k(x)` in closed form.
pub fn chebyshev_closed_form(k: usize, x: f64) -> f64 {
    let kf = k as f64;
    if x.abs() <= 1.0 {
        (kf * x.acos()).cos()
    } else if x > 1.0 {
        (kf * x.acosh()).cosh()
    } else {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sign * (kf * (-x).acosh()).cosh()
    }
}

/// Spectral response `sum_k alpha_k T_k(2 lambda / lambda_max - 1)` for each eigenvalue.
pub fn chebyshev_response(values: &[f64], lambda_max: f64, alpha: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&l| {
            let x = 2.0 * l / lambda_max - 1.0;
            alpha
                .iter()
                .enumerate()
                .map(|(k, a)| a * chebyshev_closed_form(k, x))
                .sum()
        })
        .collect()
}

/// Polynomial filtering through the eigenbasis.
pub fn chebyshev_filter_oracle(
    basis: &EigenBasis,
    lambda_max: f64,
    alpha: &[f64],
    f: &[f64],
) -> Result<Vec<f64>> {
    let beta = chebyshev_response(&basis.values, lambda_max, alpha);
    spectral_filter_oracle(basis, &beta, f)
}

/// Evaluation-mode mean cross-entropy.
pub fn loss_at(model: &Model, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let cache = model.forward(x, Mode::Eval, None)?;
    Ok(softmax_cross_entropy(&cache.logits, labels)?.0)
}

/// Central differences of the evaluation-mode loss for every parameter.
pub fn finite_difference_gradients(
    model: &Model,
    x: ArrayView2<f64>,
    labels: &[usize],
    step: f64,
) -> Result<Gradients> {
    let mut probe = model.clone();
    let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::with_capacity(lens.len());
    for (t, &len) in lens.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.params()[t][i];
            probe.params_mut()[t][i] = orig + step;
            let up = loss_at(&probe, x, labels)?;
            probe.params_mut()[t][i] = orig - step;
            let down = loss_at(&probe, x, labels)?;
            probe.params_mut()[t][i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Worst relative error between two gradient sets; pairs whose absolute
/// difference is within `abs_floor` count as exact.
pub fn max_relative_error(a: &Gradients, b: &Gradients, abs_floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.iter().zip(tb) {
            let diff = (x - y).abs();
            if diff <= abs_floor {
                continue;
            }
            worst = worst.max(diff / x.abs().max(y.abs()));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn two_node_laplacian_basis() {
        let basis = eigendecompose(&array![[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        assert!(basis.values[0].abs() < 1e-14);
        assert!((basis.values[1] - 2.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let c0 = basis.vectors.column(0);
        assert!((c0[0].abs() - s).abs() < 1e-14 && (c0[0] - c0[1]).abs() < 1e-14);
        let c1 = basis.vectors.column(1);
        assert!((c1[0].abs() - s).abs() < 1e-14 && (c1[0] + c1[1]).abs() < 1e-14);
    }

    #[test]
    fn diagonal_matrix_basis_is_permuted_identity() {
        let basis = eigendecompose(&array![[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(basis.values, vec![1.0, 2.0, 3.0]);
        for c in 0..3 {
            let col = basis.vectors.column(c);
            assert_eq!(col.iter().filter(|x| x.abs() == 1.0).count(), 1);
        }
    }

    #[test]
    fn random_psd_reconstruction() {
        let mut rng = crate::seed::rng(11);
        let n = 15;
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let a = b.dot(&b.t());
        let basis = eigendecompose(&a).unwrap();
        let err = (&basis.reconstruct() - &a).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-9, "{err}");
        let gram = basis.vectors.t().dot(&basis.vectors);
        let orth = (&gram - &Array2::<f64>::eye(n)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(orth <= 1e-10, "{orth}");
        assert!(basis.values.windows(2).all(|w| w[0] <= w[1]));
        assert!(basis.values[0] >= -1e-9);
    }

    #[test]
    fn identity_and_laplacian_filters() {
        let lap = array![[1.0, -0.5, -0.5], [-0.5, 1.0, -0.5], [-0.5, -0.5, 1.0]];
        let basis = eigendecompose(&lap).unwrap();
        let f = [1.0, -2.0, 0.5];
        let same = spectral_filter_oracle(&basis, &[1.0; 3], &f).unwrap();
        assert!(same.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-14));
        let lf = spectral_filter_oracle(&basis, &basis.values, &f).unwrap();
        let direct = lap.dot(&ndarray::arr1(&f));
        assert!(lf.iter().zip(direct.iter()).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(spectral_filter_oracle(&basis, &[1.0; 2], &f).is_err());
    }

    #[test]
    fn chebyshev_closed_form_matches_polynomials() {
        for &x in &[-1.3, -1.0, -0.4, 0.0, 0.7, 1.0, 1.2] {
            assert!((chebyshev_closed_form(0, x) - 1.0).abs() < 1e-14);
            assert!((chebyshev_closed_form(1, x) - x).abs() < 1e-14);
            assert!((chebyshev_closed_form(2, x) - (2.0 * x * x - 1.0)).abs() < 1e-13);
            assert!((chebyshev_closed_form(3, x) - (4.0 * x * x * x - 3.0 * x)).abs() < 1e-13);
        }
    }

    #[test]
    fn finite_differences_of_small_fcnn() {
        let model = crate::nn::build_fcnn(2, 3, 7).unwrap();
        let mut rng = crate::seed::rng(3);
        let x = Array2::from_shape_fn((4, 12), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 2];
        let cache = model.forward(x.view(), Mode::Eval, None).unwrap();
        let (_, grads) = model.loss_and_backward(&cache, &labels).unwrap();
        let fd = finite_difference_gradients(&model, x.view(), &labels, 1e-5).unwrap();
        assert!(max_relative_error(&grads, &fd, 1e-8) <= 1e-4);
    }
}
