use nalgebra::{DMatrix, DVector};

use super::Family;
use crate::data::score::expit;
use crate::error::{Error, Result};

const RIDGE_SCALE: f64 = 1e-6;
const RIDGE_FALLBACK: f64 = 1e3;

/// Linear or logistic regression with an intercept and a tiny ridge penalty on
/// the slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Glm {
    family: Family,
    coef: DVector<f64>,
}

fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let p = x.first().map_or(0, Vec::len);
    DMatrix::from_fn(x.len(), p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

fn ridge(xtwx: &DMatrix<f64>) -> f64 {
    RIDGE_SCALE * xtwx.trace() / xtwx.ncols() as f64
}

fn penalize(mut m: DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    for j in 1..m.ncols() {
        m[(j, j)] += lambda;
    }
    m
}

fn solve_spd(m: &DMatrix<f64>, lambda: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    for scale in [1.0, RIDGE_FALLBACK] {
        if let Some(ch) = penalize(m.clone(), lambda * scale).cholesky() {
            return Ok(ch.solve(rhs));
        }
    }
    Err(Error::SingularDesign)
}

impl Glm {
    pub fn fit(x: &[Vec<f64>], y: &[f64], w: &[f64], family: Family) -> Result<Self> {
        let a = design(x);
        let coef = match family {
            Family::Continuous => {
                let aw = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * w[i]);
                let xtwx = aw.transpose() * &a;
                let xtwy = aw.transpose() * DVector::from_column_slice(y);
                solve_spd(&xtwx, ridge(&xtwx), &xtwy)?
            }
            Family::Binary => fit_logistic(&a, y, w)?,
        };
        Ok(Self { family, coef })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let lin = self.coef[0]
            + x.iter()
                .zip(self.coef.iter().skip(1))
                .map(|(a, b)| a * b)
                .sum::<f64>();
        match self.family {
            Family::Continuous => lin,
            Family::Binary => expit(lin),
        }
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coef
    }
}

fn penalized_loglik(a: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>, lambda: f64) -> f64 {
    let lin = a * beta;
    let ll: f64 = (0..y.len())
        .map(|i| {
            let t = lin[i];
            let sp = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            w[i] * (y[i] * t - sp)
        })
        .sum();
    ll - 0.5 * lambda * beta.rows(1, beta.len() - 1).norm_squared()
}

fn fit_logistic(a: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    let wsum: f64 = w.iter().sum();
    let ybar = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / wsum;
    if ybar <= 0.0 || ybar >= 1.0 {
        return Err(Error::DegenerateLabels);
    }
    let d = a.ncols();
    let gram = DMatrix::from_fn(d, d, |j, k| (0..a.nrows()).map(|i| w[i] * a[(i, j)] * a[(i, k)]).sum());
    let lambda = ridge(&gram);
    let mut beta = DVector::zeros(d);
    beta[0] = (ybar / (1.0 - ybar)).ln();
    let mut obj = penalized_loglik(a, y, w, &beta, lambda);
    for _ in 0..100 {
        let lin = a * &beta;
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..a.nrows() {
            let p = expit(lin[i]);
            let row = a.row(i).transpose();
            grad += &row * (w[i] * (y[i] - p));
            hess += &row * row.transpose() * (w[i] * p * (1.0 - p));
        }
        for j in 1..d {
            grad[j] -= lambda * beta[j];
        }
        let step = solve_spd(&hess, lambda, &grad)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let c = penalized_loglik(a, y, w, &cand, lambda);
            if c >= obj {
                beta = cand;
                obj = c;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || (step.amax() * t) < 1e-10 {
            break;
        }
    }
    Ok(beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_linear_fit() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 / 10.0]).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - v[0] + 0.5 * v[1]).collect();
        let g = Glm::fit(&x, &y, &vec![1.0; 20], Family::Continuous).unwrap();
        let c = g.coefficients();
        assert!((c[0] - 2.0).abs() < 1e-3 && (c[1] + 1.0).abs() < 1e-3 && (c[2] - 0.5).abs() < 1e-3, "{c}");
    }

    #[test]
    fn collinear_design_survives() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let g = Glm::fit(&x, &y, &vec![1.0; 10], Family::Continuous).unwrap();
        assert!((g.predict(&[3.0, 3.0]) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn logistic_matches_known_mle() {
        // 2x2 table: x=0 -> 1/4 successes, x=1 -> 3/4 successes.
        let x = vec![vec![0.0]; 4].into_iter().chain(vec![vec![1.0]; 4]).collect::<Vec<_>>();
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let g = Glm::fit(&x, &y, &[1.0; 8], Family::Binary).unwrap();
        assert!((g.predict(&[0.0]) - 0.25).abs() < 1e-5);
        assert!((g.predict(&[1.0]) - 0.75).abs() < 1e-5);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = vec![vec![0.0], vec![1.0]];
        assert_eq!(
            Glm::fit(&x, &[1.0, 1.0], &[1.0, 1.0], Family::Binary),
            Err(Error::DegenerateLabels)
        );
    }

    #[test]
    fn integer_weights_equal_replication() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y = [0.3, 1.0, 1.7, 3.2, 3.9, 5.5];
        let w = [1.0, 2.0, 1.0, 3.0, 1.0, 1.0];
        let g = Glm::fit(&x, &y, &w, Family::Continuous).unwrap();
        let mut xr = Vec::new();
        let mut yr = Vec::new();
        for i in 0..6 {
            for _ in 0..w[i] as usize {
                xr.push(x[i].clone());
                yr.push(y[i]);
            }
        }
        let h = Glm::fit(&xr, &yr, &vec![1.0; xr.len()], Family::Continuous).unwrap();
        assert!((g.coefficients() - h.coefficients()).amax() < 1e-9);
    }
}
