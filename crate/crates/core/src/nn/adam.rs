//! Adam optimizer.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 2e-4;

    /// Zero moments shaped like `shapes` (one length per parameter tensor).
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("tensor {k} length mismatch")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of tensor {k}")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = Adam::new(0.1, &[3]);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = vec![0.0, 0.0];
        let g = vec![0.3, -5.0];
        let mut adam = Adam::new(2e-4, &[2]);
        adam.step(vec![&mut p], &[g.clone()]).unwrap();
        for i in 0..2 {
            let expect = -2e-4 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl() {
        // f(x) = sum c_i (x_i - t_i)^2
        let target = [1.5, -0.7, 3.0];
        let c = [1.0, 4.0, 0.25];
        let mut x = vec![0.0; 3];
        let mut adam = Adam::new(0.05, &[3]);
        let mut steps = 0;
        for _ in 0..5000 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * (x[i] - target[i])).collect();
            adam.step(vec![&mut x], &[g]).unwrap();
            steps += 1;
            if (0..3).all(|i| (x[i] - target[i]).abs() <= 1e-6) {
                break;
            }
        }
        assert!((0..3).all(|i| (x[i] - target[i]).abs() <= 1e-6), "{x:?} after {steps}");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.0];
        let mut adam = Adam::new(0.1, &[1]);
        assert!(adam.step(vec![&mut p], &[vec![f64::NAN]]).is_err());
        assert_eq!(adam.t, 0);
    }
}
