//! Pseudo-orbits of sampled approximations and the search for true solutions
//! that shadow them.

use rayon::prelude::*;
use serde::Serialize;

use crate::certificates::ErrorCertificate;
use crate::error::{Error, ErrorCategory, Result};
use crate::integrator::{
    error_trajectory, integrate_reference, IntegratorSettings, Lambda, Trajectory,
};
use crate::problem::OdeProblem;
use crate::sampler::{class_membership, SamplingSequence};

pub const SCAN_POINTS: usize = 33;
pub const GOLDEN_TOL: f64 = 1e-10;
pub const DEFAULT_EVAL_BUDGET: usize = 200;

/// A sampled approximate orbit with its measured distance to a true solution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoOrbit {
    pub sampling: SamplingSequence,
    /// Post-jump values at `t_0..t_J`.
    pub samples: Vec<f64>,
    /// Measured `max_t |y(t) - x(t)|`, the smallest `delta` this orbit certifies.
    pub delta: f64,
    pub perturbed: bool,
}

impl PseudoOrbit {
    pub fn from_run(approx: &Trajectory, reference: &Trajectory, perturbed: bool) -> Result<Self> {
        let err = error_trajectory(reference, approx)?;
        Ok(PseudoOrbit {
            sampling: SamplingSequence::new(approx.sampling_points())?,
            samples: approx.samples.clone(),
            delta: err.stats.max_abs,
            perturbed,
        })
    }
}

/// `max_t |y(t) - x(t)| <= delta` on the shared dense grid.
pub fn is_pseudo_orbit(approx: &Trajectory, reference: &Trajectory, delta: f64) -> Result<bool> {
    Ok(error_trajectory(reference, approx)?.stats.max_abs <= delta)
}

/// Members of the class of `delta`-pseudo `J`-orbits over sampling with gaps at most `h`.
pub fn pseudo_orbit_class(
    orbits: &[PseudoOrbit],
    j: usize,
    h: f64,
    delta: f64,
) -> Vec<&PseudoOrbit> {
    orbits
        .iter()
        .filter(|o| class_membership(&o.sampling, j, h) && o.delta <= delta)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowResult {
    pub found: bool,
    pub y0_star: f64,
    /// `phi(y0_star)`.
    pub achieved_error: f64,
    pub epsilon: f64,
    pub evaluations: usize,
    pub center: f64,
    pub halfwidth: f64,
    /// Set when the bracket was never refined because the budget ran out.
    pub budget_exhausted: bool,
}

/// `phi(y0) = max_t |y(t; y0) - x(t)|` on the dense grid of `approx`.
pub fn shadow_distance(
    problem: &OdeProblem,
    approx: &Trajectory,
    y0: f64,
    lambda: Option<&Lambda>,
    settings: &IntegratorSettings,
) -> Result<f64> {
    let seq = SamplingSequence::new(approx.sampling_points())?;
    let reference = integrate_reference(problem, y0, lambda, &seq, settings)?;
    Ok(error_trajectory(&reference, approx)?.stats.max_abs)
}

/// Deterministic search for `y0` minimizing `phi` on `[x(t_0) - w, x(t_0) + w]`.
///
/// A 33-point scan (evaluated in parallel, ties to the smaller `y0`) picks a
/// bracket that golden-section search refines to `1e-10`. Evaluations where
/// the reference solution fails numerically count as `phi = inf`. The result
/// is the best point evaluated, certified by its own `phi` value only.
pub fn shadowing_search(
    problem: &OdeProblem,
    approx: &Trajectory,
    epsilon: f64,
    halfwidth: f64,
    budget_evals: usize,
    lambda: Option<&Lambda>,
    settings: &IntegratorSettings,
) -> Result<ShadowResult> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon = {epsilon} must be positive"
        )));
    }
    if !(halfwidth >= 0.0 && halfwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "search halfwidth {halfwidth} must be finite and non-negative"
        )));
    }
    let tol = 1e-12 * problem.t0.abs().max(problem.t_end.abs()).max(1.0);
    let points = approx.sampling_points();
    if (points[0] - problem.t0).abs() > tol
        || (points[points.len() - 1] - problem.t_end).abs() > tol
    {
        return Err(Error::DomainMismatch(
            "approximate orbit does not cover the problem window".into(),
        ));
    }
    let phi = |y0: f64| -> Result<f64> {
        match shadow_distance(problem, approx, y0, lambda, settings) {
            Ok(v) => Ok(v),
            Err(e) if e.category() == ErrorCategory::Numerical => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };

    let center = approx.initial();
    let n_scan = SCAN_POINTS.min(budget_evals.max(1));
    let grid: Vec<f64> = if halfwidth == 0.0 {
        vec![center]
    } else {
        let span = SCAN_POINTS as f64 - 1.0;
        (0..n_scan)
            .map(|k| center - halfwidth + 2.0 * halfwidth * (k as f64 / span))
            .collect()
    };
    let values = grid
        .par_iter()
        .map(|&y| phi(y))
        .collect::<Result<Vec<f64>>>()?;
    let mut evaluations = grid.len();
    let (mut best_y, mut best_v) = (grid[0], values[0]);
    let mut best_k = 0;
    for (k, (&y, &v)) in grid.iter().zip(&values).enumerate() {
        if v < best_v {
            best_y = y;
            best_v = v;
            best_k = k;
        }
    }

    let scan_complete = grid.len() == SCAN_POINTS || halfwidth == 0.0;
    let mut budget_exhausted = !scan_complete;
    if scan_complete && halfwidth > 0.0 {
        let mut a = grid[best_k.saturating_sub(1)];
        let mut b = grid[(best_k + 1).min(grid.len() - 1)];
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let consider = |y: f64, v: f64, best_y: &mut f64, best_v: &mut f64| {
            if v < *best_v || (v == *best_v && y < *best_y) {
                *best_y = y;
                *best_v = v;
            }
        };
        let mut fc = f64::NAN;
        let mut fd = f64::NAN;
        while b - a > GOLDEN_TOL {
            if fc.is_nan() {
                if evaluations >= budget_evals {
                    budget_exhausted = true;
                    break;
                }
                fc = phi(c)?;
                evaluations += 1;
                consider(c, fc, &mut best_y, &mut best_v);
            }
            if fd.is_nan() {
                if evaluations >= budget_evals {
                    budget_exhausted = true;
                    break;
                }
                fd = phi(d)?;
                evaluations += 1;
                consider(d, fd, &mut best_y, &mut best_v);
            }
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = f64::NAN;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = f64::NAN;
            }
        }
    }

    Ok(ShadowResult {
        found: best_v <= epsilon,
        y0_star: best_y,
        achieved_error: best_v,
        epsilon,
        evaluations,
        center,
        halfwidth,
        budget_exhausted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintClause {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowConstraintReport {
    pub clauses: Vec<ConstraintClause>,
    pub holds: bool,
}

/// Initial-error constraints under which a certified run is shadowed within `epsilon`.
///
/// With `S = sum h_i lambda_i` (zero without forcing) and the cap `gbar`:
/// - `per_point`: `|e0| <= min(eps - rho - sum gbar_i, ((1 - S)/S) gbar)`
/// - `sufficient`: `|e0| <= min(eps - rho - J gbar, ((1 - S)/S) gbar)`
/// - `impulsive`: `|e0| <= eps - rho - J gbar`
/// - `perturbation_sum`: `sum gbar_i < eps`
///
/// The report holds when the certificate is feasible and every clause holds.
pub fn verify_shadow_constraints(
    cert: &ErrorCertificate,
    epsilon: f64,
    e0: f64,
) -> ShadowConstraintReport {
    let a0 = e0.abs();
    let rho = cert.rho;
    let j = cert.inputs.j as f64;
    let g_sum = cert.gbar_sum();
    let g_cap = cert.gbar_max();
    let s = cert.continuous.map_or(0.0, |c| c.sum_h_lambda);
    let ratio = if s == 0.0 {
        f64::INFINITY
    } else if s < 1.0 {
        (1.0 - s) / s * g_cap
    } else {
        f64::NEG_INFINITY
    };
    let clause = |name, lhs: f64, rhs: f64, strict: bool| ConstraintClause {
        name,
        lhs,
        rhs,
        holds: if strict { lhs < rhs } else { lhs <= rhs },
    };
    let clauses = vec![
        clause(
            "certificate_feasible",
            0.0,
            if cert.feasible() { 0.0 } else { -1.0 },
            false,
        ),
        clause("per_point", a0, (epsilon - rho - g_sum).min(ratio), false),
        clause(
            "sufficient",
            a0,
            (epsilon - rho - j * g_cap).min(ratio),
            false,
        ),
        clause("impulsive", a0, epsilon - rho - j * g_cap, false),
        clause("perturbation_sum", g_sum, epsilon, true),
    ];
    let holds = clauses.iter().all(|c| c.holds);
    ShadowConstraintReport { clauses, holds }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{certify_continuous, certify_impulsive, certify_unperturbed};
    use crate::integrator::integrate_truncated;
    use crate::problem::{BoundConstants, Field};

    fn settings() -> IntegratorSettings {
        IntegratorSettings {
            dense_points: 50,
            segment_substeps: 500,
            reference_substeps_per_unit: 2000,
        }
    }

    fn decay() -> OdeProblem {
        OdeProblem::new(Field::Affine { a: -1.0, b: 0.0 }, 2, 0.0, 1.0, 1.0, 0.5).unwrap()
    }

    #[test]
    fn threshold_test() {
        let p = decay();
        let seq = SamplingSequence::uniform(0.0, 1.0, 0.25).unwrap();
        let s = settings();
        let x = integrate_truncated(&p, &seq, 1, 1.05, None, &s).unwrap();
        let y = integrate_reference(&p, 1.0, None, &seq, &s).unwrap();
        assert!(is_pseudo_orbit(&x, &x, 0.0).unwrap());
        assert!(is_pseudo_orbit(&x, &y, 0.05 + 1e-9).unwrap());
        assert!(!is_pseudo_orbit(&x, &y, 0.049).unwrap());
    }

    #[test]
    fn class_filter() {
        let seq = SamplingSequence::new(vec![0.0, 0.1, 0.3]).unwrap();
        let orbit = PseudoOrbit {
            sampling: seq,
            samples: vec![0.0; 3],
            delta: 0.1,
            perturbed: false,
        };
        let orbits = vec![orbit];
        assert!(pseudo_orbit_class(&[], 2, 1.0, 1.0).is_empty());
        assert_eq!(pseudo_orbit_class(&orbits, 2, 0.2, 0.1).len(), 1);
        assert!(pseudo_orbit_class(&orbits, 2, 0.15, 0.1).is_empty());
        assert!(pseudo_orbit_class(&orbits, 2, 0.2, 0.05).is_empty());
    }

    #[test]
    fn exact_orbit_is_self_shadowed() {
        let p = decay();
        let seq = SamplingSequence::uniform(0.0, 1.0, 0.25).unwrap();
        let s = settings();
        let x = integrate_truncated(&p, &seq, 1, 1.1, None, &s).unwrap();
        let r = shadowing_search(&p, &x, 1e-3, 0.1, DEFAULT_EVAL_BUDGET, None, &s).unwrap();
        assert!(r.found);
        assert!((r.y0_star - 1.1).abs() < 1e-6);
        assert!(r.achieved_error <= 1e-8);
    }

    #[test]
    fn tiny_budget_reports_best_so_far() {
        let p = decay();
        let seq = SamplingSequence::uniform(0.0, 1.0, 0.25).unwrap();
        let s = settings();
        let x = integrate_truncated(&p, &seq, 1, 1.0, None, &s).unwrap();
        let r = shadowing_search(&p, &x, 1.0, 0.1, 5, None, &s).unwrap();
        assert!(r.budget_exhausted);
        assert_eq!(r.evaluations, 5);
    }

    #[test]
    fn constraint_examples() {
        let c = BoundConstants::new(0.5, 0.0, 1.0).unwrap();
        let plain = certify_unperturbed(&c, 1, 0.2, 5, 0.001, 0.0).unwrap();
        let r = verify_shadow_constraints(&plain, 0.5, 0.3);
        assert!(r.holds);
        assert!(!verify_shadow_constraints(&plain, 0.5, 0.31).holds);

        let imp = certify_impulsive(&c, 1, 0.2, 5, 0.001, &[0.04; 5], 0.0).unwrap();
        let r = verify_shadow_constraints(&imp, 0.5, 0.1);
        let rhs = r
            .clauses
            .iter()
            .find(|c| c.name == "impulsive")
            .unwrap()
            .rhs;
        assert!((rhs - 0.1).abs() < 1e-15);
        assert!(!verify_shadow_constraints(&imp, 0.2, 0.0).holds);

        let cont = certify_continuous(&c, 1, 0.2, &[0.001; 5], &[0.0; 5], &[0.0; 5], 0.0).unwrap();
        assert!(verify_shadow_constraints(&cont, 0.5, 0.3).holds);
    }
}
