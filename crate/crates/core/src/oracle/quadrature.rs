use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Gauss–Hermite rule for the weight `exp(-t²)`, from the eigen-decomposition
/// of the Jacobi matrix. Weights are normalized to sum to one, so that
/// `Σ w f(√2 σ t + m)` approximates `E f(m + σ Z)` for standard normal Z.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            j[(k - 1, k)] = b;
            j[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// E f(m + s Z), Z ~ N(0, 1).
    pub fn normal_expectation(&self, m: f64, s: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * s;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(m + scale * t))
            .sum()
    }
}

/// Shared 64-point rule.
pub fn gh64() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(64))
}
