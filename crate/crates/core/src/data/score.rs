use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which estimand the score defines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// s = y - beta.
    MeanTarget,
    /// s = (y - a'beta) a with a = (1, x).
    LinearGlm,
    /// s = (y - expit(a'beta)) a with a = (1, x).
    LogisticGlm,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::MeanTarget => "mean",
            ScoreKind::LinearGlm => "linear",
            ScoreKind::LogisticGlm => "logistic",
        })
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ScoreKind::MeanTarget),
            "linear" => Ok(ScoreKind::LinearGlm),
            "logistic" => Ok(ScoreKind::LogisticGlm),
            other => Err(Error::InvalidConfig(format!("unknown estimand `{other}`"))),
        }
    }
}

pub(crate) fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// A score of the form `s(y, x; beta) = (y - g(a(x)'beta)) a(x)`.
///
/// The linear predictor is always `a(x)'beta`: for the mean target the design is
/// the constant 1, so the predictor is beta itself. Because the score is linear
/// in `y`, its conditional means follow from regressions of `Y` alone:
/// `m(x) = (mu(x) - g) a(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub kind: ScoreKind,
    /// Covariate dimension.
    pub p: usize,
}

impl ScoreModel {
    pub fn new(kind: ScoreKind, p: usize) -> Self {
        Self { kind, p }
    }

    /// Parameter dimension d.
    pub fn dim(&self) -> usize {
        match self.kind {
            ScoreKind::MeanTarget => 1,
            _ => self.p + 1,
        }
    }

    /// Design vector a(x).
    pub fn design(&self, x: &[f64]) -> DVector<f64> {
        match self.kind {
            ScoreKind::MeanTarget => DVector::from_element(1, 1.0),
            _ => DVector::from_iterator(
                self.p + 1,
                std::iter::once(1.0).chain(x.iter().copied()),
            ),
        }
    }

    /// Inverse link g.
    #[inline]
    pub fn link(&self, t: f64) -> f64 {
        match self.kind {
            ScoreKind::LogisticGlm => expit(t),
            _ => t,
        }
    }

    /// g'.
    #[inline]
    pub fn link_deriv(&self, t: f64) -> f64 {
        match self.kind {
            ScoreKind::LogisticGlm => {
                let e = expit(t);
                e * (1.0 - e)
            }
            _ => 1.0,
        }
    }

    /// An antiderivative of g; the estimating equations are gradients of
    /// convex functions built from it.
    #[inline]
    pub fn link_potential(&self, t: f64) -> f64 {
        match self.kind {
            ScoreKind::LogisticGlm => softplus(t),
            _ => 0.5 * t * t,
        }
    }

    pub fn linear_predictor(&self, x: &[f64], beta: &DVector<f64>) -> f64 {
        self.design(x).dot(beta)
    }

    /// s(y, x; beta).
    pub fn score(&self, y: f64, x: &[f64], beta: &DVector<f64>) -> DVector<f64> {
        self.conditional_score(y, x, beta)
    }

    /// (mu - g(a'beta)) a(x); with `mu = y` this is the score itself, with a
    /// regression of Y it is the conditional score mean.
    pub fn conditional_score(&self, mu: f64, x: &[f64], beta: &DVector<f64>) -> DVector<f64> {
        let a = self.design(x);
        let lin = a.dot(beta);
        a * (mu - self.link(lin))
    }

    /// ds/dbeta' = -g'(a'beta) a a'. Depends on x only.
    pub fn jacobian(&self, x: &[f64], beta: &DVector<f64>) -> DMatrix<f64> {
        let a = self.design(x);
        let lin = a.dot(beta);
        -(&a * a.transpose()) * self.link_deriv(lin)
    }

    pub(crate) fn check(&self, x: &[f64], beta: &DVector<f64>) -> Result<()> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                got: x.len(),
            });
        }
        if beta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: beta.len(),
            });
        }
        Ok(())
    }
}

/// Evaluate the score with dimension checks.
pub fn score_eval(
    model: &ScoreModel,
    y: f64,
    x: &[f64],
    beta: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check(x, beta)?;
    Ok(model.score(y, x, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_target_score() {
        let m = ScoreModel::new(ScoreKind::MeanTarget, 0);
        let s = score_eval(&m, 3.0, &[], &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(s[0], 2.0);
    }

    #[test]
    fn linear_zero_residual() {
        let m = ScoreModel::new(ScoreKind::LinearGlm, 2);
        let s = score_eval(&m, 0.0, &[1.0, 2.0], &DVector::zeros(3)).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn logistic_at_zero_predictor() {
        let m = ScoreModel::new(ScoreKind::LogisticGlm, 2);
        let x = [0.3, -1.2];
        let s = score_eval(&m, 1.0, &x, &DVector::zeros(3)).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5 * 0.3, 0.5 * -1.2]);
    }

    #[test]
    fn dimension_errors() {
        let m = ScoreModel::new(ScoreKind::LinearGlm, 2);
        assert_eq!(
            score_eval(&m, 0.0, &[1.0], &DVector::zeros(3)),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        );
        assert_eq!(
            score_eval(&m, 0.0, &[1.0, 2.0], &DVector::zeros(2)),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn least_squares_root_zeroes_average_score() {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = ScoreModel::new(ScoreKind::LinearGlm, 3);
        let xs: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 1.0 + x[0] - 0.5 * x[2] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        // normal equations
        let mut xtx = DMatrix::<f64>::zeros(4, 4);
        let mut xty = DVector::<f64>::zeros(4);
        for (x, &y) in xs.iter().zip(&ys) {
            let a = m.design(x);
            xtx += &a * a.transpose();
            xty += a * y;
        }
        let beta = xtx.lu().solve(&xty).unwrap();
        let mut avg = DVector::<f64>::zeros(4);
        for (x, &y) in xs.iter().zip(&ys) {
            avg += score_eval(&m, y, x, &beta).unwrap();
        }
        avg /= xs.len() as f64;
        assert!(avg.amax() < 1e-10, "{avg}");
    }

    fn fd_jacobian(m: &ScoreModel, y: f64, x: &[f64], beta: &DVector<f64>) -> DMatrix<f64> {
        let d = m.dim();
        let mut j = DMatrix::zeros(d, d);
        for c in 0..d {
            let h = 1e-5 * beta[c].abs().max(1.0);
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[c] += h;
            bm[c] -= h;
            let col = (m.score(y, x, &bp) - m.score(y, x, &bm)) / (2.0 * h);
            j.set_column(c, &col);
        }
        j
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn jacobian_matches_finite_differences(
            kind in prop_oneof![Just(ScoreKind::MeanTarget), Just(ScoreKind::LinearGlm), Just(ScoreKind::LogisticGlm)],
            y in -3.0f64..3.0,
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let m = ScoreModel::new(kind, 3);
            let beta = DVector::from_iterator(m.dim(), b.into_iter().take(m.dim()));
            let analytic = m.jacobian(&x, &beta);
            let numeric = fd_jacobian(&m, y, &x, &beta);
            let scale = analytic.amax().max(1e-3);
            prop_assert!((&analytic - &numeric).amax() / scale < 1e-6);
        }
    }
}
