use acpshift::data::{Scenario, ScoreKind};
use acpshift::oracle::{oracle_bounds, oracle_bounds_theta, DgpSpec, OutcomeFamily};

const MC: usize = 100_000;

fn spec(alpha: f64, zeta: f64) -> DgpSpec {
    DgpSpec::new(alpha, zeta, OutcomeFamily::Linear).unwrap()
}

fn trace(m: &[Vec<f64>]) -> f64 {
    (0..m.len()).map(|i| m[i][i]).sum()
}

#[test]
fn gain_trace_grows_with_signal() {
    for kind in [ScoreKind::MeanTarget, ScoreKind::LinearGlm] {
        let traces: Vec<f64> = (0..=5)
            .map(|a| trace(&oracle_bounds(&spec(a as f64, 0.0), kind, MC, 4).unwrap().gain))
            .collect();
        assert!(traces[0].abs() < 1e-12, "{traces:?}");
        assert!(traces.windows(2).all(|w| w[1] > w[0]), "{kind}: {traces:?}");
    }
}

#[test]
fn gain_is_psd_and_consistent_off_the_acceptance_grid() {
    for (alpha, zeta) in [(1.0, 0.3), (2.5, 0.9), (4.0, 0.5)] {
        for kind in [ScoreKind::MeanTarget, ScoreKind::LinearGlm] {
            let b = oracle_bounds(&spec(alpha, zeta), kind, MC, 9).unwrap();
            assert!(b.gain_min_eigenvalue() >= -4.0 * b.mc_se, "{alpha} {zeta} {kind}");
            assert!(b.consistent_within(4.0), "{alpha} {zeta} {kind}");
            assert_eq!(b.bound_for(Scenario::III), b.bound_for(Scenario::I));
        }
    }
}

#[test]
fn logistic_family_gain_is_psd() {
    let s = DgpSpec::new(5.0, 0.0, OutcomeFamily::Logistic).unwrap();
    let b = oracle_bounds(&s, ScoreKind::LogisticGlm, 20_000, 2).unwrap();
    assert!(b.gain_min_eigenvalue() >= -4.0 * b.mc_se);
    assert!(b.consistent_within(4.0));
}

/// Without covariate shift the combined-population mean has closed-form
/// bounds: Var(mu(X)) + E Var(Y|X) / pi without the surrogate, and a gain of
/// (1 - pi) / pi * alpha^2 (1 - zeta^2) with it.
#[test]
fn combined_population_mean_without_shift() {
    let no_shift = |alpha, zeta| DgpSpec {
        eta: vec![0.0; 5],
        ..spec(alpha, zeta)
    };
    let b = oracle_bounds_theta(&no_shift(0.0, 0.0), ScoreKind::MeanTarget, MC, 1).unwrap();
    assert_eq!(b.pi, 0.5);
    assert!((b.bound_wo[0][0] - 4.0).abs() < 0.1, "{}", b.bound_wo[0][0]);
    assert!(b.gain[0][0].abs() < 1e-12);

    let b = oracle_bounds_theta(&no_shift(5.0, 0.0), ScoreKind::MeanTarget, MC, 1).unwrap();
    let g = b.gain[0][0];
    assert!((g - 25.0).abs() < 5.0 * b.gain_se[0][0], "gain {g} se {}", b.gain_se[0][0]);
    // Var(mu) = 2, Var(Y|X) = 26.
    assert!((b.bound_wo[0][0] - 54.0).abs() < 1.0, "{}", b.bound_wo[0][0]);

    let b = oracle_bounds_theta(&no_shift(5.0, 0.6), ScoreKind::MeanTarget, MC, 1).unwrap();
    let g = b.gain[0][0];
    assert!((g - 16.0).abs() < 5.0 * b.gain_se[0][0], "gain {g} se {}", b.gain_se[0][0]);
}
