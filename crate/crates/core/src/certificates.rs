//! A-priori error certificates for the truncated Taylor approximation:
//! unperturbed, impulsively perturbed, and continuously forced.
//!
//! Every certificate carries the bound values, the feasibility flags that
//! make them valid, and an echo of the inputs. Infeasible inputs still
//! produce the formal numbers with the relevant flag cleared.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{Trajectory, ORACLE_FLAG_TOL};
use crate::problem::{BoundConstants, OdeProblem};
use crate::sampler::{closed_form_h_bound, compute_aggregate, AggregateMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Unperturbed,
    Impulsive,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Feasibility {
    /// Every gap is within the closed-form step bound for `J`.
    pub h_admissible: bool,
    /// `J h lambda < 1` (trivially true without forcing).
    pub lambda_contraction: bool,
    /// The impulse cap dominates what the initial error requires.
    pub impulse_cap_ok: bool,
}

impl Feasibility {
    pub fn all(&self) -> bool {
        self.h_admissible && self.lambda_contraction && self.impulse_cap_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputsEcho {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "F0")]
    pub f0: f64,
    pub ell: usize,
    #[serde(rename = "J")]
    pub j: usize,
    /// Envelope `h = max h_i`.
    pub h: f64,
    pub steps: Vec<f64>,
    pub gbar: Vec<f64>,
    pub lambda: Vec<f64>,
    pub e0: f64,
    /// Step bound the gaps were checked against (`A` aggregate).
    pub h_bound: f64,
}

/// Uniform-form companion of the impulsive certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpulsiveBounds {
    /// `J h B(h)`.
    pub rho_bar: f64,
    pub epsilon1_bar: f64,
    pub epsilon_bar: f64,
    /// `J h B(h) <= rho`.
    pub step_budget_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundForm {
    PerPoint,
    Uniform,
}

/// Bounds of the continuously forced certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContinuousBounds {
    /// `sum_i h_i lambda_i`.
    pub sum_h_lambda: f64,
    /// `J h lambda`.
    pub j_h_lambda: f64,
    /// `sum_i h_i B(h_i)`.
    pub sum_h_bracket: f64,
    pub sup_per_point: f64,
    pub deviation_per_point: f64,
    pub sup_uniform: f64,
    pub deviation_uniform: f64,
    /// Deviation bounds as printed, reported for comparison only.
    pub deviation_per_point_printed: f64,
    pub deviation_uniform_printed: f64,
    pub tighter: BoundForm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorCertificate {
    pub kind: CertificateKind,
    pub rho: f64,
    pub epsilon1: f64,
    /// Certified bound on `max_t |e(t)|`.
    pub epsilon: f64,
    pub e0_bound: f64,
    /// Certified bound on `sup_{[t_i, t_{i+1}]} |e(t) - e(t_i)|`.
    pub interval_deviation_bound: f64,
    pub feasibility: Feasibility,
    pub inputs: InputsEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impulsive: Option<ImpulsiveBounds>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continuous: Option<ContinuousBounds>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ErrorCertificate {
    /// Equality of the bound values and flags, ignoring kind and inputs.
    pub fn bounds_match(&self, other: &ErrorCertificate) -> bool {
        self.rho == other.rho
            && self.epsilon1 == other.epsilon1
            && self.epsilon == other.epsilon
            && self.e0_bound == other.e0_bound
            && self.interval_deviation_bound == other.interval_deviation_bound
            && self.feasibility == other.feasibility
    }

    pub fn feasible(&self) -> bool {
        self.feasibility.all()
    }

    /// `sum_i gbar_i`.
    pub fn gbar_sum(&self) -> f64 {
        self.inputs.gbar.iter().sum()
    }

    pub fn gbar_max(&self) -> f64 {
        self.inputs.gbar.iter().fold(0.0, |m: f64, g| m.max(*g))
    }
}

/// Measured error against a certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Sound,
    Unsound,
    /// The certificate is not feasible, so nothing is claimed.
    NotCertified,
}

/// Resolution of a measured error: the reference oracle is only trusted to
/// [`ORACLE_FLAG_TOL`], so measured values within it of a bound count as meeting it.
pub const MEASUREMENT_TOL: f64 = ORACLE_FLAG_TOL;

pub fn verdict(cert: &ErrorCertificate, measured_max_error: f64) -> Verdict {
    if !cert.feasible() {
        Verdict::NotCertified
    } else if measured_max_error <= cert.epsilon + MEASUREMENT_TOL {
        Verdict::Sound
    } else {
        Verdict::Unsound
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "rho = {rho} must lie in (0, 1)"
        )))
    }
}

fn check_steps(steps: &[f64]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one step is required".into(),
        ));
    }
    if let Some(h) = steps.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "step {h} must be positive"
        )));
    }
    Ok(steps.iter().fold(0.0, |m: f64, h| m.max(*h)))
}

fn check_caps(name: &str, caps: &[f64], j: usize) -> Result<()> {
    if caps.len() != j {
        return Err(Error::InvalidParameter(format!(
            "{name} has {} entries, expected J = {j}",
            caps.len()
        )));
    }
    if let Some(v) = caps.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "{name} entry {v} must be finite and non-negative"
        )));
    }
    Ok(())
}

fn step_bound(constants: &BoundConstants, ell: usize, rho: f64, j: usize) -> Result<f64> {
    let a = compute_aggregate(constants, ell, AggregateMode::True)?;
    match closed_form_h_bound(a, ell, rho, j) {
        Ok(b) => Ok(b),
        Err(Error::InfeasibleBudget(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn echo(
    constants: &BoundConstants,
    ell: usize,
    steps: &[f64],
    gbar: Vec<f64>,
    lambda: Vec<f64>,
    e0: f64,
    h_bound: f64,
) -> InputsEcho {
    InputsEcho {
        k: constants.k,
        k1: constants.k1,
        f0: constants.f0,
        ell,
        j: steps.len(),
        h: steps.iter().fold(0.0, |m: f64, h| m.max(*h)),
        steps: steps.to_vec(),
        gbar,
        lambda,
        e0,
        h_bound,
    }
}

/// Bracketed per-step sum
/// `B(h) = sum_{k<=ell} (2^(k+1)/k!) [K^(k+1) rho/2 + K1 (1-K^k)/(1-K)] (rho/2)^k
///        + (h 2^ell / ell!) [K^(ell+2) rho/2 + K1 (1-K^(ell+1))/(1-K)] (rho/2)^ell`.
pub fn step_bracket(constants: &BoundConstants, ell: usize, rho: f64, h: f64) -> f64 {
    let r = rho / 2.0;
    let k = constants.k;
    let mut sum = 0.0;
    let mut fact = 1.0;
    for m in 0..=ell {
        if m > 0 {
            fact *= m as f64;
        }
        let inner = k.powi(m as i32 + 1) * r + constants.k1_series(m);
        sum += 2f64.powi(m as i32 + 1) / fact * inner * r.powi(m as i32);
    }
    let inner = k.powi(ell as i32 + 2) * r + constants.k1_series(ell + 1);
    sum + h * 2f64.powi(ell as i32) / fact * inner * r.powi(ell as i32)
}

/// Largest `h` with `J h B(h) <= rho`, by bisection.
pub fn largest_impulsive_step(
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    j: usize,
) -> Result<f64> {
    check_rho(rho)?;
    constants.validate()?;
    if j == 0 {
        return Err(Error::InvalidParameter("J must be at least 1".into()));
    }
    let jf = j as f64;
    let fits = |h: f64| jf * h * step_bracket(constants, ell, rho, h) <= rho;
    let mut hi = 1.0;
    let mut grow = 0;
    while fits(hi) {
        hi *= 2.0;
        grow += 1;
        if grow > 1100 {
            return Ok(f64::INFINITY);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Unperturbed certificate: `eps1 = rho`, `eps = |e0| + rho`, and every
/// interval deviation of `e` is at most `rho`.
pub fn certify_unperturbed(
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    j: usize,
    h: f64,
    e0: f64,
) -> Result<ErrorCertificate> {
    certify_unperturbed_steps(constants, ell, rho, &vec![h; j], e0)
}

/// [`certify_unperturbed`] for an explicit gap list.
pub fn certify_unperturbed_steps(
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    steps: &[f64],
    e0: f64,
) -> Result<ErrorCertificate> {
    check_rho(rho)?;
    let h = check_steps(steps)?;
    let bound = step_bound(constants, ell, rho, steps.len())?;
    let e0_bound = e0.abs();
    Ok(ErrorCertificate {
        kind: CertificateKind::Unperturbed,
        rho,
        epsilon1: rho,
        epsilon: e0_bound + rho,
        e0_bound,
        interval_deviation_bound: rho,
        feasibility: Feasibility {
            h_admissible: h <= bound,
            lambda_contraction: true,
            impulse_cap_ok: true,
        },
        inputs: echo(constants, ell, steps, Vec::new(), Vec::new(), e0, bound),
        impulsive: None,
        continuous: None,
        notes: Vec::new(),
    })
}

/// Largest `|y0|` for which the true deviation check holds without
/// integrating: `(rho/2)(1 - K (tJ - t0))`.
pub fn initial_condition_bound(k: f64, t0: f64, t_end: f64, rho: f64) -> Result<f64> {
    let product = k * (t_end - t0);
    if !(product < 1.0) {
        return Err(Error::InfeasibleBudget(format!(
            "K (tJ - t0) = {product} must be below 1"
        )));
    }
    Ok(rho / 2.0 * (1.0 - product))
}

/// Impulsive certificate with per-point caps `gbar_i` (one per gap).
///
/// Per-point form `eps1 = rho + sum gbar_i`, `eps = eps1 + |e0|`; the uniform
/// form `rho_bar = J h B(h)`, `eps1_bar = rho_bar + J gbar` is reported alongside.
pub fn certify_impulsive(
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    j: usize,
    h: f64,
    gbar: &[f64],
    e0: f64,
) -> Result<ErrorCertificate> {
    certify_impulsive_steps(constants, ell, rho, &vec![h; j], gbar, e0)
}

pub fn certify_impulsive_steps(
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    steps: &[f64],
    gbar: &[f64],
    e0: f64,
) -> Result<ErrorCertificate> {
    check_rho(rho)?;
    let h = check_steps(steps)?;
    let j = steps.len();
    check_caps("gbar", gbar, j)?;
    let cap = gbar.iter().fold(0.0, |m: f64, g| m.max(*g));
    if cap < e0.abs() {
        return Err(Error::CapTooSmall { cap, e0: e0.abs() });
    }
    let bound = step_bound(constants, ell, rho, j)?;
    let e0_bound = e0.abs();
    let epsilon1 = rho + gbar.iter().sum::<f64>();
    let jf = j as f64;
    let rho_bar = jf * h * step_bracket(constants, ell, rho, h);
    let epsilon1_bar = rho_bar + jf * cap;
    Ok(ErrorCertificate {
        kind: CertificateKind::Impulsive,
        rho,
        epsilon1,
        epsilon: epsilon1 + e0_bound,
        e0_bound,
        interval_deviation_bound: rho,
        feasibility: Feasibility {
            h_admissible: h <= bound,
            lambda_contraction: true,
            impulse_cap_ok: true,
        },
        inputs: echo(constants, ell, steps, gbar.to_vec(), Vec::new(), e0, bound),
        impulsive: Some(ImpulsiveBounds {
            rho_bar,
            epsilon1_bar,
            epsilon_bar: epsilon1_bar + e0_bound,
            step_budget_ok: rho_bar <= rho,
        }),
        continuous: None,
        notes: Vec::new(),
    })
}

/// Certificate under the forcing `lambda(t) e` with per-segment caps
/// `lambda_i` and impulse caps `gbar_i`.
///
/// The sup bounds are `(|e0| + sum h_i B(h_i) + sum gbar_i) / (1 - sum h_i lambda_i)`
/// and `(|e0| + J h B(h) + J gbar) / (1 - J h lambda)`; the deviation bounds
/// are the same quantities minus `|e0|`. Feasibility needs `J h lambda < 1`.
pub fn certify_continuous(
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    steps: &[f64],
    lambda: &[f64],
    gbar: &[f64],
    e0: f64,
) -> Result<ErrorCertificate> {
    check_rho(rho)?;
    let h = check_steps(steps)?;
    let j = steps.len();
    check_caps("lambda", lambda, j)?;
    check_caps("gbar", gbar, j)?;
    constants.validate()?;
    let bound = step_bound(constants, ell, rho, j)?;
    let jf = j as f64;
    let a0 = e0.abs();
    let lam = lambda.iter().fold(0.0, |m: f64, l| m.max(*l));
    let cap = gbar.iter().fold(0.0, |m: f64, g| m.max(*g));
    let g_sum: f64 = gbar.iter().sum();

    let s: f64 = steps.iter().zip(lambda).map(|(h, l)| h * l).sum();
    let u = jf * h * lam;
    let sum_hb: f64 = steps
        .iter()
        .map(|&hi| hi * step_bracket(constants, ell, rho, hi))
        .sum();
    let uniform_hb = jf * h * step_bracket(constants, ell, rho, h);

    let amplified = |contraction: f64, numerator: f64| {
        if contraction < 1.0 {
            numerator / (1.0 - contraction)
        } else {
            f64::INFINITY
        }
    };
    let sup_per_point = amplified(s, a0 + sum_hb + g_sum);
    let deviation_per_point = amplified(s, s * a0 + sum_hb + g_sum);
    let sup_uniform = amplified(u, a0 + uniform_hb + jf * cap);
    let deviation_uniform = amplified(u, u * a0 + uniform_hb + jf * cap);
    let deviation_per_point_printed = amplified(s, s * (a0 + sum_hb + g_sum));
    let deviation_uniform_printed = amplified(u, u * (uniform_hb + jf * cap));

    let tighter = if sup_per_point <= sup_uniform {
        BoundForm::PerPoint
    } else {
        BoundForm::Uniform
    };
    let (epsilon, epsilon1) = match tighter {
        BoundForm::PerPoint => (sup_per_point, deviation_per_point),
        BoundForm::Uniform => (sup_uniform, deviation_uniform),
    };
    let required_cap = amplified(s, s * a0);
    let mut notes = Vec::new();
    if lam > 0.0 {
        notes.push(
            "forcing term assumed to satisfy the same derivative-chain hypothesis as f".into(),
        );
    }
    Ok(ErrorCertificate {
        kind: CertificateKind::Continuous,
        rho,
        epsilon1,
        epsilon,
        e0_bound: a0,
        interval_deviation_bound: rho,
        feasibility: Feasibility {
            h_admissible: h <= bound,
            lambda_contraction: u < 1.0,
            impulse_cap_ok: cap >= required_cap,
        },
        inputs: echo(
            constants,
            ell,
            steps,
            gbar.to_vec(),
            lambda.to_vec(),
            e0,
            bound,
        ),
        impulsive: None,
        continuous: Some(ContinuousBounds {
            sum_h_lambda: s,
            j_h_lambda: u,
            sum_h_bracket: sum_hb,
            sup_per_point,
            deviation_per_point,
            sup_uniform,
            deviation_uniform,
            deviation_per_point_printed,
            deviation_uniform_printed,
            tighter,
        }),
        notes,
    })
}

/// Certified sups `M_ik` of `|f^(k)|` per segment, next to grid-sampled values
/// over the segment box `[x(t_i) - rho/2, x(t_i) + rho/2] x [t_i, t_{i+1}]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MikTable {
    /// `certified[i][k] = K^k F0 + K1 (1 - K^k)/(1 - K)`.
    pub certified: Vec<Vec<f64>>,
    pub measured: Vec<Vec<f64>>,
}

impl MikTable {
    pub fn build(
        problem: &OdeProblem,
        approx: &Trajectory,
        constants: &BoundConstants,
        ell: usize,
        rho: f64,
        grid: usize,
    ) -> Result<Self> {
        if grid < 1 {
            return Err(Error::InvalidParameter("grid must be positive".into()));
        }
        let row: Vec<f64> = (0..=ell).map(|k| constants.derivative_bound(k)).collect();
        let d = grid as f64;
        let mut measured = Vec::with_capacity(approx.segments.len());
        for (seg, &x_i) in approx.segments.iter().zip(&approx.samples) {
            let mut sups = vec![0.0_f64; ell + 1];
            for a in 0..=grid {
                let y = x_i - rho / 2.0 + rho * (a as f64 / d);
                for b in 0..=grid {
                    let t = seg.t_start + (seg.t_end - seg.t_start) * (b as f64 / d);
                    for (k, s) in sups.iter_mut().enumerate() {
                        *s = s.max(problem.field.partial(k, y, t).abs());
                    }
                }
            }
            measured.push(sups);
        }
        Ok(MikTable {
            certified: vec![row; approx.segments.len()],
            measured,
        })
    }

    /// `F0 + K1/(1 - K)`; infinite when `K >= 1`.
    pub fn terminal_bound(constants: &BoundConstants) -> f64 {
        if constants.k < 1.0 {
            constants.f0 + constants.k1 / (1.0 - constants.k)
        } else if constants.k == 1.0 && constants.k1 == 0.0 {
            constants.f0
        } else {
            f64::INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(k: f64, k1: f64, f0: f64) -> BoundConstants {
        BoundConstants::new(k, k1, f0).unwrap()
    }

    #[test]
    fn unperturbed_examples() {
        let c = consts(0.5, 0.0, 1.0);
        let cert = certify_unperturbed(&c, 1, 0.5, 4, 0.01, 0.0).unwrap();
        assert_eq!(cert.epsilon, 0.5);
        let cert = certify_unperturbed(&c, 1, 0.3, 4, 0.01, 0.1).unwrap();
        assert!((cert.epsilon - 0.4).abs() < 1e-15);
        assert_eq!(cert.epsilon1, 0.3);
        assert!(certify_unperturbed(&c, 1, 1.0, 4, 0.01, 0.0).is_err());
    }

    #[test]
    fn inadmissible_step_flagged() {
        let c = consts(0.5, 0.0, 1.0);
        let cert = certify_unperturbed(&c, 1, 0.5, 4, 10.0, 0.0).unwrap();
        assert!(!cert.feasibility.h_admissible);
        assert_eq!(cert.epsilon, 0.5);
    }

    #[test]
    fn initial_condition_examples() {
        assert_eq!(initial_condition_bound(0.0, 0.0, 1.0, 0.4).unwrap(), 0.2);
        assert!((initial_condition_bound(0.5, 0.0, 1.0, 0.2).unwrap() - 0.05).abs() < 1e-15);
        assert!(matches!(
            initial_condition_bound(0.99, 0.0, 1.1, 0.2),
            Err(Error::InfeasibleBudget(_))
        ));
    }

    #[test]
    fn impulsive_examples() {
        let c = consts(0.5, 0.0, 1.0);
        let cert = certify_impulsive(&c, 1, 0.2, 5, 0.01, &[0.01; 5], 0.01).unwrap();
        assert!((cert.epsilon1 - 0.25).abs() < 1e-15);
        assert!((cert.epsilon - 0.26).abs() < 1e-15);
        let zero = certify_impulsive(&c, 1, 0.2, 5, 0.01, &[0.0; 5], 0.0).unwrap();
        let plain = certify_unperturbed(&c, 1, 0.2, 5, 0.01, 0.0).unwrap();
        assert!(zero.bounds_match(&plain));
        assert!(matches!(
            certify_impulsive(&c, 1, 0.2, 5, 0.01, &[0.001; 5], 0.01),
            Err(Error::CapTooSmall { .. })
        ));
    }

    #[test]
    fn continuous_examples() {
        let c = consts(0.5, 0.0, 1.0);
        let ok = certify_continuous(&c, 1, 0.3, &[0.05; 10], &[1.0; 10], &[0.0; 10], 0.0).unwrap();
        let cb = ok.continuous.unwrap();
        assert!((cb.j_h_lambda - 0.5).abs() < 1e-15);
        assert!(ok.feasibility.lambda_contraction);
        assert!((cb.sup_uniform - 2.0 * cb.sum_h_bracket).abs() < 1e-12);
        let bad = certify_continuous(&c, 1, 0.3, &[0.2; 10], &[1.0; 10], &[0.0; 10], 0.0).unwrap();
        assert!(!bad.feasibility.lambda_contraction);
        assert!(!bad.feasible());
    }

    #[test]
    fn continuous_collapse_without_forcing() {
        let c = consts(0.3, 0.1, 2.0);
        let steps = [0.01, 0.02, 0.015];
        let cert = certify_continuous(&c, 2, 0.4, &steps, &[0.0; 3], &[0.0; 3], 0.05).unwrap();
        let sum: f64 = steps.iter().map(|&h| h * step_bracket(&c, 2, 0.4, h)).sum();
        assert!((cert.epsilon - (0.05 + sum)).abs() < 1e-15);
    }

    #[test]
    fn bracket_zero_order() {
        // ell = 0: 2 K rho/2 + h (K^2 rho/2 + K1).
        let c = consts(0.5, 0.2, 1.0);
        let b = step_bracket(&c, 0, 0.4, 0.1);
        let expect = 2.0 * 0.5 * 0.2 + 0.1 * (0.25 * 0.2 + 0.2);
        assert!((b - expect).abs() < 1e-15);
    }

    #[test]
    fn impulsive_step_never_grows_with_j() {
        let c = consts(0.4, 0.1, 1.0);
        let mut prev = f64::INFINITY;
        for j in [1, 2, 4, 8, 16, 32] {
            let h = largest_impulsive_step(&c, 2, 0.3, j).unwrap();
            assert!(h <= prev);
            assert!(j as f64 * h * step_bracket(&c, 2, 0.3, h) <= 0.3);
            prev = h;
        }
    }

    #[test]
    fn terminal_bound_dominates_chain() {
        let c = consts(0.7, 0.3, 1.5);
        let t = MikTable::terminal_bound(&c);
        assert!((0..40).all(|k| c.derivative_bound(k) <= t + 1e-12));
    }
}
