//! Independent numerical references: finite-difference Jacobians, grid
//! quadrature and closed-form Gaussian quantities.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Central-difference Jacobian of `f` at `x`; row `i` holds the derivatives of
/// output `i`.
pub fn numerical_jacobian<F>(f: F, x: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let base = f(x)?;
    let mut jac = DMatrix::zeros(base.len(), x.len());
    let mut probe = x.to_vec();
    for c in 0..x.len() {
        probe[c] = x[c] + h;
        let up = f(&probe)?;
        probe[c] = x[c] - h;
        let down = f(&probe)?;
        probe[c] = x[c];
        for r in 0..base.len() {
            jac[(r, c)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// `log |det m|` through an LU factorisation.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().abs().ln()
}

/// Largest `|J[r, c]|` over pairs where output position `r` must not depend on
/// input position `c`, i.e. `pos[c] >= pos[r]` for the autoregressive order
/// given by `pos` (position of every coordinate in the order).
pub fn max_upper_entry(jac: &DMatrix<f64>, pos: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..jac.nrows() {
        for c in 0..jac.ncols() {
            if pos[c] >= pos[r] {
                worst = worst.max(jac[(r, c)].abs());
            }
        }
    }
    worst
}

/// Midpoint-rule integral of `exp(log_density)` over `[lo, hi]^2` with `n`
/// cells per axis. `log_density` receives the cell centres as rows `(x, y)`.
pub fn grid_integral_2d<F>(log_density: F, lo: f64, hi: f64, n: usize) -> Result<f64>
where
    F: Fn(&[[f64; 2]]) -> Result<Vec<f64>>,
{
    let step = (hi - lo) / n as f64;
    let mut total = 0.0;
    // One grid row at a time keeps memory flat.
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * step;
        let pts: Vec<[f64; 2]> = (0..n).map(|k| [x, lo + (k as f64 + 0.5) * step]).collect();
        let logs = log_density(&pts)?;
        total += logs.iter().map(|l| l.exp()).sum::<f64>();
    }
    Ok(total * step * step)
}

/// `KL(N(mu, diag exp(logvar)) || N(0, I))`.
pub fn gaussian_kl_standard(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
    let r = x - mean;
    let sol = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (r.dot(&sol) + logdet + x.len() as f64 * LN_2PI))
}

/// Linear-Gaussian sequence model with affine latent dynamics:
/// `z_0 ~ N(0, I)`, `z_l = A_l z_{l-1} + c_l`, `x_l = W z_l + b + e`,
/// `e ~ N(0, noise_var I)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianChain {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub noise_var: f64,
    pub transitions: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl LinearGaussianChain {
    fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Mean and covariance of the stacked observations `x_0 .. x_T`.
    pub fn joint(&self, frames: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if frames == 0 || frames > self.transitions.len() + 1 {
            return Err(Error::invalid(format!(
                "{frames} frames need {} transitions",
                frames.saturating_sub(1)
            )));
        }
        let d = self.latent_dim();
        // z_l = M_l z_0 + o_l
        let mut maps = vec![(DMatrix::identity(d, d), DVector::zeros(d))];
        for (a, c) in self.transitions.iter().take(frames - 1) {
            let (m, o) = maps.last().expect("start");
            maps.push((a * m, a * o + c));
        }
        let big_d = self.w.nrows();
        let mut mean = DVector::zeros(frames * big_d);
        let mut cov = DMatrix::zeros(frames * big_d, frames * big_d);
        for (l, (ml, ol)) in maps.iter().enumerate() {
            mean.rows_mut(l * big_d, big_d).copy_from(&(&self.w * ol + &self.b));
            for (k, (mk, _)) in maps.iter().enumerate() {
                let block = &self.w * ml * mk.transpose() * self.w.transpose();
                cov.view_mut((l * big_d, k * big_d), (big_d, big_d)).copy_from(&block);
            }
        }
        for i in 0..frames * big_d {
            cov[(i, i)] += self.noise_var;
        }
        Ok((mean, cov))
    }

    /// Exact `log p(x_0, ..., x_T)` of a sequence given as frames.
    pub fn log_likelihood(&self, frames: &[Vec<f64>]) -> Result<f64> {
        let (mean, cov) = self.joint(frames.len())?;
        let x = DVector::from_iterator(mean.len(), frames.iter().flatten().copied());
        gaussian_logpdf(&x, &mean, &cov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_of_a_linear_map() {
        let j = numerical_jacobian(|x| Ok(vec![2.0 * x[0] + x[1], -x[1]]), &[0.3, 0.7], 1e-4).unwrap();
        assert!((j[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((j[(0, 1)] - 1.0).abs() < 1e-10);
        assert!((j[(1, 1)] + 1.0).abs() < 1e-10);
        assert!((log_abs_det(&j) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn standard_normal_integrates_to_one() {
        let v = grid_integral_2d(
            |pts| Ok(pts.iter().map(|p| -0.5 * (p[0] * p[0] + p[1] * p[1]) - LN_2PI).collect()),
            -8.0,
            8.0,
            200,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(gaussian_kl_standard(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((gaussian_kl_standard(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_frame_matches_marginal() {
        let lg = LinearGaussianChain {
            w: DMatrix::from_row_slice(1, 1, &[2.0]),
            b: DVector::from_element(1, 0.5),
            noise_var: 0.25,
            transitions: vec![],
        };
        // x ~ N(0.5, 4.25)
        let x = 1.0;
        let expected = -0.5 * ((x - 0.5f64).powi(2) / 4.25 + 4.25f64.ln() + LN_2PI);
        assert!((lg.log_likelihood(&[vec![x]]).unwrap() - expected).abs() < 1e-12);
    }
}
