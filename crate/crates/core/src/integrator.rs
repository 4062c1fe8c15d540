//! Segment-wise integration of the truncated Taylor equation, its perturbed
//! variants, and the reference solution of the true equation.
//!
//! On `[t_i, t_{i+1}]` the truncated equation is
//! `x' = sum_{k<=ell} a_k (x - x(t_i))^k` with `a_k = f^(k)(x(t_i), t_i) / k!`,
//! solved as a self-consistent flow (closed form for `ell <= 1`, fixed-step
//! RK4 otherwise). Impulses are added at the right endpoint (`U(0) = 1`) and
//! seed the next segment; a continuous forcing `lambda(t) * x` is added to the
//! frozen field inside the RK4 sub-integration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{DerivativeStack, OdeProblem};
use crate::sampler::{JointSegment, SamplingSequence, SegmentRequest};

pub const DEFAULT_DENSE_POINTS: usize = 1000;
pub const DEFAULT_SEGMENT_SUBSTEPS: usize = 10_000;
pub const DEFAULT_REFERENCE_SUBSTEPS_PER_UNIT: usize = 100_000;
/// Below this `|a_1|` the linear closed form is replaced by RK4.
pub const DEGENERATE_LINEAR: f64 = 1e-14;
/// Oracle estimates above this are flagged.
pub const ORACLE_FLAG_TOL: f64 = 1e-9;
/// Oracle estimates above this are rejected.
pub const ORACLE_FAIL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorSettings {
    /// Dense output intervals per segment.
    pub dense_points: usize,
    /// RK4 substeps per segment for the truncated flow.
    pub segment_substeps: usize,
    /// RK4 steps per unit time for the reference oracle.
    pub reference_substeps_per_unit: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        IntegratorSettings {
            dense_points: DEFAULT_DENSE_POINTS,
            segment_substeps: DEFAULT_SEGMENT_SUBSTEPS,
            reference_substeps_per_unit: DEFAULT_REFERENCE_SUBSTEPS_PER_UNIT,
        }
    }
}

impl IntegratorSettings {
    fn validate(&self) -> Result<()> {
        if self.dense_points == 0
            || self.segment_substeps == 0
            || self.reference_substeps_per_unit == 0
        {
            return Err(Error::InvalidParameter(
                "integrator resolutions must be positive".into(),
            ));
        }
        Ok(())
    }

    fn substeps_per_interval(&self) -> usize {
        self.segment_substeps.div_ceil(self.dense_points).max(1)
    }
}

/// Jumps `g_i` applied to the truncated state at `t_i`, `i >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Impulses {
    #[default]
    None,
    /// The same jump at every sampling point after `t_0`.
    Uniform(f64),
    /// `g_1, g_2, ...`; missing entries are zero.
    Sequence(Vec<f64>),
}

impl Impulses {
    /// Jump at `t_i`; there is never one at `t_0`.
    pub fn at(&self, i: usize) -> f64 {
        if i == 0 {
            return 0.0;
        }
        match self {
            Impulses::None => 0.0,
            Impulses::Uniform(g) => *g,
            Impulses::Sequence(v) => v.get(i - 1).copied().unwrap_or(0.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Impulses::None => true,
            Impulses::Uniform(g) => *g == 0.0,
            Impulses::Sequence(v) => v.iter().all(|&g| g == 0.0),
        }
    }
}

/// Bounded piecewise-continuous forcing coefficient `lambda(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lambda {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `values[0]` before `breakpoints[0]`, `values[j]` on
    /// `[breakpoints[j-1], breakpoints[j])`, and the last value afterwards.
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Lambda {
    pub fn validate(&self) -> Result<()> {
        match self {
            Lambda::Zero => Ok(()),
            Lambda::Constant { value } if value.is_finite() => Ok(()),
            Lambda::Piecewise {
                breakpoints,
                values,
            } if values.len() == breakpoints.len() + 1
                && breakpoints.windows(2).all(|w| w[0] < w[1])
                && values.iter().chain(breakpoints).all(|v| v.is_finite()) =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!(
                "malformed lambda specification {self:?}"
            ))),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Lambda::Zero => 0.0,
            Lambda::Constant { value } => *value,
            Lambda::Piecewise {
                breakpoints,
                values,
            } => values[breakpoints.partition_point(|&b| b <= t)],
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Lambda::Zero => true,
            Lambda::Constant { value } => *value == 0.0,
            Lambda::Piecewise { values, .. } => values.iter().all(|&v| v == 0.0),
        }
    }

    /// `max |lambda(t)|` over `[a, b]`.
    pub fn max_abs_on(&self, a: f64, b: f64) -> f64 {
        match self {
            Lambda::Zero => 0.0,
            Lambda::Constant { value } => value.abs(),
            Lambda::Piecewise {
                breakpoints,
                values,
            } => {
                let first = breakpoints.partition_point(|&x| x <= a);
                let last = breakpoints.partition_point(|&x| x <= b);
                values[first..=last]
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs()))
            }
        }
    }

    /// Per-segment caps `lambda_i`.
    pub fn caps(&self, seq: &SamplingSequence) -> Vec<f64> {
        (0..seq.count())
            .map(|i| {
                let (a, b) = seq.segment(i);
                self.max_abs_on(a, b)
            })
            .collect()
    }
}

/// Impulsive and continuous perturbations of the truncated equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PerturbationSpec {
    pub impulses: Impulses,
    /// `g_bar`: every `|g_i|` must stay below it.
    pub impulse_cap: f64,
    pub lambda: Lambda,
}

impl PerturbationSpec {
    pub fn impulsive(g: f64) -> Self {
        PerturbationSpec {
            impulses: Impulses::Uniform(g),
            impulse_cap: g.abs(),
            lambda: Lambda::Zero,
        }
    }

    pub fn continuous(lambda: f64) -> Self {
        PerturbationSpec {
            impulses: Impulses::None,
            impulse_cap: 0.0,
            lambda: Lambda::Constant { value: lambda },
        }
    }

    pub fn validate(&self, j: usize) -> Result<()> {
        self.lambda.validate()?;
        if !(self.impulse_cap >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "impulse cap {} must be non-negative",
                self.impulse_cap
            )));
        }
        if let Some(i) = (1..=j).find(|&i| !(self.impulses.at(i).abs() <= self.impulse_cap)) {
            return Err(Error::InvalidParameter(format!(
                "impulse g_{i} = {} exceeds the cap {}",
                self.impulses.at(i),
                self.impulse_cap
            )));
        }
        Ok(())
    }

    /// Per-segment caps `g_bar_i` (all equal to the cap).
    pub fn impulse_caps(&self, j: usize) -> Vec<f64> {
        vec![self.impulse_cap; j]
    }

    pub fn lambda_caps(&self, seq: &SamplingSequence) -> Vec<f64> {
        self.lambda.caps(seq)
    }

    fn active_lambda(&self) -> Option<&Lambda> {
        (!self.lambda.is_zero()).then_some(&self.lambda)
    }
}

/// Dense samples of one segment with the local rates.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSegment {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub rates: Vec<f64>,
}

impl DenseSegment {
    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// `n + 1` nodes from `t_start` to `t_end`, last node exact.
pub fn node_times(t_start: f64, t_end: f64, n: usize) -> Vec<f64> {
    let span = t_end - t_start;
    let d = n as f64;
    let mut times: Vec<f64> = (0..n).map(|j| t_start + span * (j as f64 / d)).collect();
    times.push(t_end);
    times
}

fn rk4_step<F: Fn(f64, f64) -> f64>(rate: &F, t: f64, x: f64, dt: f64) -> f64 {
    let k1 = rate(t, x);
    let k2 = rate(t + 0.5 * dt, x + 0.5 * dt * k1);
    let k3 = rate(t + 0.5 * dt, x + 0.5 * dt * k2);
    let k4 = rate(t + dt, x + dt * k3);
    x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrates `rate` across the node grid with `per_interval` RK4 steps between nodes.
fn rk4_on_nodes<F: Fn(f64, f64) -> f64>(
    rate: &F,
    times: &[f64],
    x_start: f64,
    per_interval: impl Fn(f64) -> usize,
) -> std::result::Result<Vec<f64>, f64> {
    let mut values = Vec::with_capacity(times.len());
    values.push(x_start);
    let mut x = x_start;
    for w in times.windows(2) {
        let m = per_interval(w[1] - w[0]);
        let dt = (w[1] - w[0]) / m as f64;
        for s in 0..m {
            x = rk4_step(rate, w[0] + s as f64 * dt, x, dt);
        }
        if !x.is_finite() || x.abs() > 1e300 {
            return Err(w[1]);
        }
        values.push(x);
    }
    Ok(values)
}

/// Solves the frozen-coefficient truncated equation from `(t_i, x_i)` to `t_end`.
///
/// The truncation order is the order of `stack`. `lambda`, when given, adds
/// `lambda(t) * x` to the frozen field and forces the RK4 path.
pub fn local_flow(
    stack: &DerivativeStack,
    x_i: f64,
    t_i: f64,
    t_end: f64,
    lambda: Option<&Lambda>,
    settings: &IntegratorSettings,
) -> Result<DenseSegment> {
    settings.validate()?;
    if !(t_end > t_i) {
        return Err(Error::InvalidParameter(format!(
            "segment end {t_end} must exceed its start {t_i}"
        )));
    }
    let a = stack.taylor_coefficients();
    let poly = |u: f64| a.iter().rev().fold(0.0, |acc, c| acc * u + c);
    let times = node_times(t_i, t_end, settings.dense_points);

    let closed: Option<Box<dyn Fn(f64) -> f64>> = match (a.len(), lambda) {
        (1, None) => {
            let a0 = a[0];
            Some(Box::new(move |tau: f64| x_i + a0 * tau))
        }
        (2, None) if a[1].abs() >= DEGENERATE_LINEAR => {
            let (a0, a1) = (a[0], a[1]);
            Some(Box::new(move |tau: f64| {
                x_i + a0 / a1 * (a1 * tau).exp_m1()
            }))
        }
        _ => None,
    };

    let values = match closed {
        Some(flow) => {
            let values: Vec<f64> = times.iter().map(|&t| flow(t - t_i)).collect();
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::BlowUp { t: times[k] });
            }
            values
        }
        None => {
            let per = settings.substeps_per_interval();
            let result = match lambda {
                Some(l) => {
                    rk4_on_nodes(&|t, x| poly(x - x_i) + l.eval(t) * x, &times, x_i, |_| per)
                }
                None => rk4_on_nodes(&|_, x| poly(x - x_i), &times, x_i, |_| per),
            };
            result.map_err(|t| Error::BlowUp { t })?
        }
    };

    let rates = times
        .iter()
        .zip(&values)
        .map(|(&t, &x)| poly(x - x_i) + lambda.map_or(0.0, |l| l.eval(t) * x))
        .collect();
    Ok(DenseSegment {
        times,
        values,
        rates,
    })
}

/// What a trajectory represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Truncated,
    Reference,
    Error,
}

impl Origin {
    pub fn column(&self) -> &'static str {
        match self {
            Origin::Truncated => "x",
            Origin::Reference => "y",
            Origin::Error => "e",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySegment {
    pub t_start: f64,
    pub t_end: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Self-reported accuracy of the reference oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleQuality {
    /// Richardson estimate `max |y_h - y_{h/2}| / 15`, relative to `max(1, |y|)`.
    pub error_estimate: f64,
    /// Set when the estimate exceeds [`ORACLE_FLAG_TOL`].
    pub flagged: bool,
}

/// Piecewise dense solution with segment boundaries at the sampling points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub origin: Origin,
    pub segments: Vec<TrajectorySegment>,
    /// Values at `t_0..t_J`, post-jump.
    pub samples: Vec<f64>,
    /// Values at `t_0..t_J` before any jump.
    pub pre_jump: Vec<f64>,
    pub oracle: Option<OracleQuality>,
}

impl Trajectory {
    pub fn sampling_points(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self.segments.iter().map(|s| s.t_start).collect();
        if let Some(last) = self.segments.last() {
            pts.push(last.t_end);
        }
        pts
    }

    pub fn initial(&self) -> f64 {
        self.samples[0]
    }

    /// Largest `|v|` over the dense grid and the post-jump samples.
    pub fn sup_abs(&self) -> f64 {
        self.nodes()
            .map(|(_, v)| v)
            .chain(self.samples.iter().copied())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `sup_t |v(t) - v(t_i)|` on each segment, measured from its (post-jump) start.
    pub fn segment_deviations(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| {
                let v0 = s.values[0];
                s.values.iter().fold(0.0_f64, |m, v| m.max((v - v0).abs()))
            })
            .collect()
    }

    pub fn max_segment_deviation(&self) -> f64 {
        self.segment_deviations().into_iter().fold(0.0, f64::max)
    }

    /// `sup_t |v(t) - v(t_0)|`, post-jump samples included.
    pub fn max_drift(&self) -> f64 {
        let v0 = self.initial();
        self.nodes()
            .map(|(_, v)| v)
            .chain(self.samples.iter().copied())
            .fold(0.0, |m, v| m.max((v - v0).abs()))
    }

    /// All `(t, v)` dense nodes, segment by segment (boundary times repeat).
    pub fn nodes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.segments
            .iter()
            .flat_map(|s| s.times.iter().copied().zip(s.values.iter().copied()))
    }

    /// True when both trajectories live on bitwise identical grids.
    pub fn same_grid(&self, other: &Trajectory) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.times == b.times)
    }
}

fn check_window(problem: &OdeProblem, seq: &SamplingSequence) -> Result<()> {
    let tol = 1e-12 * problem.t0.abs().max(problem.t_end.abs()).max(1.0);
    if (seq.start() - problem.t0).abs() > tol || (seq.end() - problem.t_end).abs() > tol {
        return Err(Error::DomainMismatch(format!(
            "sampling covers [{}, {}] but the problem window is [{}, {}]",
            seq.start(),
            seq.end(),
            problem.t0,
            problem.t_end
        )));
    }
    Ok(())
}

/// Truncated solution over the whole sampling sequence, optionally perturbed.
pub fn integrate_truncated(
    problem: &OdeProblem,
    seq: &SamplingSequence,
    ell: usize,
    x0: f64,
    perturbation: Option<&PerturbationSpec>,
    settings: &IntegratorSettings,
) -> Result<Trajectory> {
    check_window(problem, seq)?;
    if let Some(p) = perturbation {
        p.validate(seq.count())?;
    }
    let lambda = perturbation.and_then(|p| p.active_lambda());
    let mut segments = Vec::with_capacity(seq.count());
    let mut samples = vec![x0];
    let mut pre_jump = vec![x0];
    let mut x = x0;
    for i in 0..seq.count() {
        let (t_i, t_next) = seq.segment(i);
        let stack = problem.eval_derivatives(x, t_i, ell)?;
        let dense = local_flow(&stack, x, t_i, t_next, lambda, settings)?;
        let end = dense.last();
        let jump = perturbation.map_or(0.0, |p| p.impulses.at(i + 1));
        x = end + jump;
        pre_jump.push(end);
        samples.push(x);
        segments.push(TrajectorySegment {
            t_start: t_i,
            t_end: t_next,
            times: dense.times,
            values: dense.values,
        });
    }
    Ok(Trajectory {
        origin: Origin::Truncated,
        segments,
        samples,
        pre_jump,
        oracle: None,
    })
}

fn reference_pass(
    problem: &OdeProblem,
    y0: f64,
    lambda: Option<&Lambda>,
    seq: &SamplingSequence,
    settings: &IntegratorSettings,
    refine: usize,
) -> Result<Vec<TrajectorySegment>> {
    let per_unit = settings.reference_substeps_per_unit as f64;
    let per = |dt: f64| ((dt * per_unit).ceil() as usize).max(1) * refine;
    let field = &problem.field;
    let mut y = y0;
    let mut segments = Vec::with_capacity(seq.count());
    for i in 0..seq.count() {
        let (a, b) = seq.segment(i);
        let times = node_times(a, b, settings.dense_points);
        let values = match lambda {
            Some(l) => rk4_on_nodes(
                &|t, v| field.partial(0, v, t) + l.eval(t) * v,
                &times,
                y,
                per,
            ),
            None => rk4_on_nodes(&|t, v| field.partial(0, v, t), &times, y, per),
        }
        .map_err(|t| Error::NumericalDomain(format!("reference solution non-finite at t = {t}")))?;
        y = values[values.len() - 1];
        segments.push(TrajectorySegment {
            t_start: a,
            t_end: b,
            times,
            values,
        });
    }
    Ok(segments)
}

/// High-accuracy RK4 solution of `y' = f(y, t) (+ lambda(t) y)` on the dense
/// grid of `seq`, with a step-doubling error estimate.
///
/// The returned values come from the finer of the two passes.
pub fn integrate_reference(
    problem: &OdeProblem,
    y0: f64,
    lambda: Option<&Lambda>,
    seq: &SamplingSequence,
    settings: &IntegratorSettings,
) -> Result<Trajectory> {
    settings.validate()?;
    check_window(problem, seq)?;
    if let Some(l) = lambda {
        l.validate()?;
    }
    let lambda = lambda.filter(|l| !l.is_zero());
    let coarse = reference_pass(problem, y0, lambda, seq, settings, 1)?;
    let fine = reference_pass(problem, y0, lambda, seq, settings, 2)?;
    let mut estimate = 0.0_f64;
    for (c, f) in coarse.iter().zip(&fine) {
        for (a, b) in c.values.iter().zip(&f.values) {
            estimate = estimate.max((a - b).abs() / 15.0 / b.abs().max(1.0));
        }
    }
    if estimate > ORACLE_FAIL_TOL {
        return Err(Error::OracleUnreliable { estimate });
    }
    let mut samples = vec![y0];
    samples.extend(fine.iter().map(|s| s.values[s.values.len() - 1]));
    Ok(Trajectory {
        origin: Origin::Reference,
        pre_jump: samples.clone(),
        samples,
        segments: fine,
        oracle: Some(OracleQuality {
            error_estimate: estimate,
            flagged: estimate > ORACLE_FLAG_TOL,
        }),
    })
}

/// Summary measurements of an error trajectory `e = y - x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    /// `e(t_0) = y_0 - x_0`.
    pub e0: f64,
    /// `max_t |e(t)|`, including post-jump values at the sampling points.
    pub max_abs: f64,
    /// `max_i |e(t_{i+1}) - e(t_i)|` on post-jump sample values.
    pub max_sample_increment: f64,
    /// `max_t |e(t) - e(t_0)|`.
    pub max_drift: f64,
    /// `max_i sup_{t in [t_i, t_{i+1}]} |e(t) - e(t_i)|`.
    pub max_interval_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTrajectory {
    pub trajectory: Trajectory,
    pub stats: ErrorStats,
}

/// Pointwise `e(t) = y(t) - x(t)` on a shared grid.
pub fn error_trajectory(truth: &Trajectory, approx: &Trajectory) -> Result<ErrorTrajectory> {
    if !truth.same_grid(approx) {
        return Err(Error::DomainMismatch(
            "error trajectory needs identical dense grids".into(),
        ));
    }
    let segments: Vec<TrajectorySegment> = truth
        .segments
        .iter()
        .zip(&approx.segments)
        .map(|(y, x)| TrajectorySegment {
            t_start: y.t_start,
            t_end: y.t_end,
            times: y.times.clone(),
            values: y.values.iter().zip(&x.values).map(|(a, b)| a - b).collect(),
        })
        .collect();
    let samples: Vec<f64> = truth
        .samples
        .iter()
        .zip(&approx.samples)
        .map(|(a, b)| a - b)
        .collect();
    let pre_jump: Vec<f64> = truth
        .pre_jump
        .iter()
        .zip(&approx.pre_jump)
        .map(|(a, b)| a - b)
        .collect();
    let trajectory = Trajectory {
        origin: Origin::Error,
        segments,
        samples,
        pre_jump,
        oracle: None,
    };
    let stats = ErrorStats {
        e0: trajectory.initial(),
        max_abs: trajectory.sup_abs(),
        max_sample_increment: trajectory
            .samples
            .windows(2)
            .fold(0.0, |m, w| m.max((w[1] - w[0]).abs())),
        max_drift: trajectory.max_drift(),
        max_interval_deviation: trajectory.max_segment_deviation(),
    };
    Ok(ErrorTrajectory { trajectory, stats })
}

/// Segment probe for [`crate::sampler::build_sampling`]: the truncated flow
/// (with the configured perturbations) and a single-pass reference solution
/// from the given joint start.
pub fn joint_probe<'a>(
    problem: &'a OdeProblem,
    ell: usize,
    perturbation: Option<&'a PerturbationSpec>,
    settings: &'a IntegratorSettings,
) -> impl FnMut(SegmentRequest) -> Result<JointSegment> + 'a {
    let lambda = perturbation.and_then(|p| p.active_lambda());
    move |req: SegmentRequest| {
        let stack = problem.eval_derivatives(req.x_start, req.t_start, ell)?;
        let x = local_flow(
            &stack,
            req.x_start,
            req.t_start,
            req.t_end,
            lambda,
            settings,
        )?;
        let per_unit = settings.reference_substeps_per_unit as f64;
        let field = &problem.field;
        let rate = |t: f64, v: f64| field.partial(0, v, t) + lambda.map_or(0.0, |l| l.eval(t) * v);
        let y = rk4_on_nodes(&rate, &x.times, req.y_start, |dt| {
            ((dt * per_unit).ceil() as usize).max(1)
        })
        .map_err(|t| Error::NumericalDomain(format!("reference solution non-finite at t = {t}")))?;
        let y_rate = x.times.iter().zip(&y).map(|(&t, &v)| rate(t, v)).collect();
        Ok(JointSegment {
            x_jump: perturbation.map_or(0.0, |p| p.impulses.at(req.index + 1)),
            times: x.times,
            x: x.values,
            x_rate: x.rates,
            y,
            y_rate,
        })
    }
}
