//! Admissible non-uniform sampling.
//!
//! A sampling sequence is admissible when every gap stays below the
//! closed-form step bound built from the aggregate constant `A` and when,
//! within each gap, both the truncated and the reference solution stay within
//! `rho / 2` of their value at the left endpoint. The latter cap is the
//! first-exit threshold of the joint deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{BoundConstants, OdeProblem};

/// Gaps below this are treated as a collapsed step.
pub const STEP_COLLAPSE: f64 = 1e-12;
/// Samples scanned by [`first_exit`] before bisecting.
pub const EXIT_SCAN_SAMPLES: usize = 10_000;
/// Absolute time tolerance of the first-exit bisection.
pub const EXIT_BISECTION_TOL: f64 = 1e-10;

/// Strictly increasing sampling instants `t_0 < t_1 < ... < t_J`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingSequence {
    points: Vec<f64>,
    gaps: Vec<f64>,
    envelope: f64,
}

impl SamplingSequence {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter(
                "a sampling sequence needs at least two points".into(),
            ));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter(
                "sampling points must be finite".into(),
            ));
        }
        let gaps: Vec<f64> = points.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(i) = gaps.iter().position(|&g| g <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling points not strictly increasing at index {i}"
            )));
        }
        let envelope = gaps.iter().copied().fold(0.0, f64::max);
        Ok(SamplingSequence {
            points,
            gaps,
            envelope,
        })
    }

    /// Points `t0 + i*h` closed by `t_end`; every gap is `h` except possibly the last.
    pub fn uniform(t0: f64, t_end: f64, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) || t_end <= t0 {
            return Err(Error::InvalidParameter(format!(
                "uniform sampling needs h > 0 and t_end > t0 (h = {h})"
            )));
        }
        let count = ((t_end - t0) / h).ceil().max(1.0) as usize;
        let mut points: Vec<f64> = (0..count).map(|i| t0 + i as f64 * h).collect();
        if points.len() > 1 && *points.last().unwrap() >= t_end {
            points.pop();
        }
        points.push(t_end);
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    /// `h = max_i h_i`.
    pub fn envelope(&self) -> f64 {
        self.envelope
    }

    /// Number of gaps `J`.
    pub fn count(&self) -> usize {
        self.gaps.len()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Segment `[t_i, t_{i+1}]`.
    pub fn segment(&self, i: usize) -> (f64, f64) {
        (self.points[i], self.points[i + 1])
    }
}

/// Membership in the class `C_{Jh}`: exactly `J` gaps, each at most `h`.
pub fn class_membership(seq: &SamplingSequence, j: usize, h: f64) -> bool {
    seq.count() == j && seq.gaps().iter().all(|&g| g <= h)
}

/// Which aggregate of the boundedness constants to form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// `A_x`, summed over `k = 0..=ell`.
    Approx,
    /// `A`, summed over `k = 0..=ell + 1`.
    True,
    /// `A_x0 = sum_k K^k F0 / k!` (the `K1 = 0` case).
    ApproxZeroK1,
}

/// `sum_k (K^k F0 + K1 (1 - K^k)/(1 - K)) / k!` over the range fixed by `mode`.
pub fn compute_aggregate(
    constants: &BoundConstants,
    ell: usize,
    mode: AggregateMode,
) -> Result<f64> {
    constants.validate()?;
    let top = match mode {
        AggregateMode::Approx | AggregateMode::ApproxZeroK1 => ell,
        AggregateMode::True => ell + 1,
    };
    let mut sum = 0.0;
    let mut fact = 1.0;
    for k in 0..=top {
        if k > 0 {
            fact *= k as f64;
        }
        let head = constants.k.powi(k as i32) * constants.f0;
        let tail = match mode {
            AggregateMode::ApproxZeroK1 => 0.0,
            _ => constants.k1_series(k),
        };
        sum += (head + tail) / fact;
    }
    Ok(sum)
}

/// The alternative form `F0 sum_k K^k/k! + K1 (1 - K^(ell+1))/(1 - K)` in which the
/// `K1` contribution is not spread over the factorial weights. Reported next
/// to [`compute_aggregate`] for comparison; it is not used for certification.
pub fn aggregate_lumped_variant(constants: &BoundConstants, ell: usize) -> Result<f64> {
    constants.validate()?;
    let mut series = 0.0;
    let mut fact = 1.0;
    for k in 0..=ell {
        if k > 0 {
            fact *= k as f64;
        }
        series += constants.k.powi(k as i32) / fact;
    }
    Ok(constants.f0 * series + constants.k1_series(ell + 1))
}

/// The pieces of the closed-form step bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepBoundDetail {
    /// `(1 - r) / (A S)` with `r = rho/2` and `S = sum_{k<=ell} r^k`.
    pub printed_first: f64,
    /// `r (1 - r) / (A (1 - r^(ell+1)) (J - 1 + r))`.
    pub printed_second: f64,
    /// Largest `h` satisfying the inductive drift inequality, found by bisection.
    pub solved: f64,
    /// `min` of the three.
    pub bound: f64,
}

/// Drift bound after the `J`-th gap when every gap is `h`:
/// `h A ((J-1) S + 1) / (1 - h A S')` with `S' = sum_{k=1..=ell} r^(k-1)`.
/// Returns `None` once the denominator is no longer positive.
pub fn inductive_drift(a_value: f64, ell: usize, rho: f64, j: usize, h: f64) -> Option<f64> {
    let r = rho / 2.0;
    let s: f64 = (0..=ell).map(|k| r.powi(k as i32)).sum();
    let s_inner: f64 = (1..=ell).map(|k| r.powi(k as i32 - 1)).sum();
    let denom = 1.0 - h * a_value * s_inner;
    if denom <= 0.0 {
        return None;
    }
    Some(h * a_value * ((j as f64 - 1.0) * s + 1.0) / denom)
}

pub fn closed_form_h_bound_detail(
    a_value: f64,
    ell: usize,
    rho: f64,
    j: usize,
) -> Result<StepBoundDetail> {
    if !(rho > 0.0 && rho < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "rho = {rho} must lie in (0, 2)"
        )));
    }
    if j == 0 {
        return Err(Error::InvalidParameter("J must be at least 1".into()));
    }
    if !(a_value >= 0.0) || !a_value.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "aggregate A = {a_value} must be finite and non-negative"
        )));
    }
    if a_value == 0.0 {
        return Ok(StepBoundDetail {
            printed_first: f64::INFINITY,
            printed_second: f64::INFINITY,
            solved: f64::INFINITY,
            bound: f64::INFINITY,
        });
    }
    let r = rho / 2.0;
    let tail = 1.0 - r.powi(ell as i32 + 1);
    let geometric = tail / (1.0 - r);
    let printed_first = (1.0 - r) / (a_value * geometric);
    let printed_second = r * (1.0 - r) / (a_value * tail * (j as f64 - 1.0 + r));

    let fits = |h: f64| inductive_drift(a_value, ell, rho, j, h).is_some_and(|d| d <= r);
    let s: f64 = (0..=ell).map(|k| r.powi(k as i32)).sum();
    let mut lo = 0.0;
    let mut hi = r / (a_value * ((j as f64 - 1.0) * s + 1.0));
    if fits(hi) {
        lo = hi;
    } else {
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
    }
    let solved = lo;
    let bound = printed_first.min(printed_second).min(solved);
    if !(bound > 0.0) {
        return Err(Error::InfeasibleBudget(format!(
            "closed-form step bound {bound:e} is not positive (A = {a_value}, ell = {ell}, rho = {rho}, J = {j})"
        )));
    }
    Ok(StepBoundDetail {
        printed_first,
        printed_second,
        solved,
        bound,
    })
}

/// Largest admissible uniform gap for `J` gaps; the smaller of the printed
/// closed forms and the numerically solved drift inequality.
pub fn closed_form_h_bound(a_value: f64, ell: usize, rho: f64, j: usize) -> Result<f64> {
    closed_form_h_bound_detail(a_value, ell, rho, j).map(|d| d.bound)
}

/// First time after `t_start` at which `deviation(t)` reaches `half_budget`,
/// or `t_max` if it never does. The returned time is the lower end of the
/// final bisection bracket, so the deviation there does not exceed the budget
/// by more than the bracket width allows.
pub fn first_exit_of_deviation<F>(
    deviation: F,
    t_start: f64,
    half_budget: f64,
    t_max: f64,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(half_budget > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "half budget {half_budget} must be positive"
        )));
    }
    if t_max <= t_start {
        return Ok(t_max);
    }
    let eval = |t: f64| {
        let v = deviation(t);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NumericalDomain(format!(
                "deviation at t = {t} is {v}"
            )))
        }
    };
    let span = t_max - t_start;
    let n = EXIT_SCAN_SAMPLES as f64;
    let mut prev = t_start;
    for i in 1..=EXIT_SCAN_SAMPLES {
        let t = if i == EXIT_SCAN_SAMPLES {
            t_max
        } else {
            t_start + span * (i as f64 / n)
        };
        if eval(t)? >= half_budget {
            let (mut lo, mut hi) = (prev, t);
            while hi - lo > EXIT_BISECTION_TOL {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if eval(mid)? >= half_budget {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(lo);
        }
        prev = t;
    }
    Ok(t_max)
}

/// First exit of `|traj(t) - traj(t_start)|` through `half_budget`.
pub fn first_exit<F>(trajectory: F, t_start: f64, half_budget: f64, t_max: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let origin = trajectory(t_start);
    if !origin.is_finite() {
        return Err(Error::NumericalDomain(format!(
            "trajectory at t = {t_start} is {origin}"
        )));
    }
    first_exit_of_deviation(
        |t| (trajectory(t) - origin).abs(),
        t_start,
        half_budget,
        t_max,
    )
}

/// Step budget for one sampling construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepBudget {
    pub rho: f64,
    pub rho_x: f64,
    pub ell: usize,
    /// The aggregate (`A` or `A_x`) the bound was built from.
    pub a_value: f64,
    /// Cap on every gap (closed-form bound, possibly tightened by a requested step).
    pub closed_form_bound: f64,
    /// First-exit thresholds `c_i` recorded during construction (absolute times).
    pub exit_thresholds: Vec<f64>,
}

/// Where a segment probe starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentRequest {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub x_start: f64,
    pub y_start: f64,
}

/// Dense truncated (`x`) and reference (`y`) solutions on one candidate
/// segment, with their rates for Hermite interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSegment {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub x_rate: Vec<f64>,
    pub y: Vec<f64>,
    pub y_rate: Vec<f64>,
    /// Jump added to `x` at the right end of the segment.
    pub x_jump: f64,
}

impl JointSegment {
    fn joint_deviation(&self, t: f64) -> f64 {
        let x0 = self.x[0];
        let y0 = self.y[0];
        let x = hermite(&self.times, &self.x, &self.x_rate, t);
        let y = hermite(&self.times, &self.y, &self.y_rate, t);
        (x - x0).abs().max((y - y0).abs())
    }
}

/// Cubic Hermite interpolation on a sorted grid.
pub fn hermite(times: &[f64], values: &[f64], rates: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let i = times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1;
    let (t0, t1) = (times[i], times[i + 1]);
    let dt = t1 - t0;
    let s = (t - t0) / dt;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * values[i] + h10 * dt * rates[i] + h01 * values[i + 1] + h11 * dt * rates[i + 1]
}

/// Greedy forward construction of a sampling sequence.
///
/// From `t_i` the joint flow is probed up to `min(t_i + bound, tJ)`, the
/// first-exit threshold `c_i` of the joint deviation is located, and the gap
/// is `min(bound, c_i - t_i, tJ - t_i)`. The recorded `c_i` land in
/// `budget.exit_thresholds`.
pub fn build_sampling<F>(
    problem: &OdeProblem,
    budget: &mut StepBudget,
    x0: f64,
    mut integrate_segment: F,
) -> Result<SamplingSequence>
where
    F: FnMut(SegmentRequest) -> Result<JointSegment>,
{
    if !(budget.closed_form_bound > 0.0) {
        return Err(Error::InfeasibleBudget(format!(
            "step cap {} is not positive",
            budget.closed_form_bound
        )));
    }
    let half = budget.rho / 2.0;
    let t_end = problem.t_end;
    let mut points = vec![problem.t0];
    let mut exits = Vec::new();
    let (mut t, mut x, mut y) = (problem.t0, x0, problem.y0);

    while t < t_end {
        let index = points.len() - 1;
        let remaining = t_end - t;
        let reach = budget.closed_form_bound.min(remaining);
        let probe_end = if reach == remaining { t_end } else { t + reach };
        let probe = integrate_segment(SegmentRequest {
            index,
            t_start: t,
            t_end: probe_end,
            x_start: x,
            y_start: y,
        })?;
        let exit = first_exit_of_deviation(|s| probe.joint_deviation(s), t, half, probe_end)?;
        exits.push(exit);

        let mut step = reach.min(exit - t);
        let leftover = remaining - step;
        if leftover > 0.0 && leftover < STEP_COLLAPSE {
            step = 0.5 * remaining;
        }
        if step < STEP_COLLAPSE {
            return Err(Error::StepCollapse { t, step });
        }
        let next = if step >= remaining {
            t_end
        } else {
            let mut next = t + step;
            while next - t > step {
                next = next.next_down();
            }
            next
        };

        let segment = if next == probe_end {
            probe
        } else {
            integrate_segment(SegmentRequest {
                index,
                t_start: t,
                t_end: next,
                x_start: x,
                y_start: y,
            })?
        };
        x = segment.x[segment.x.len() - 1] + segment.x_jump;
        y = segment.y[segment.y.len() - 1];
        t = next;
        points.push(t);
    }
    budget.exit_thresholds = exits;
    SamplingSequence::new(points)
}

/// Admissible sampling for the window of `problem`.
///
/// The closed-form bound depends on the number of gaps `J`, which is only
/// known once the sequence is built, so the construction is repeated with the
/// realised count until it no longer grows. `max_step`, when given, caps
/// every gap in addition to the bound.
pub fn plan_sampling<F>(
    problem: &OdeProblem,
    constants: &BoundConstants,
    ell: usize,
    rho: f64,
    x0: f64,
    max_step: Option<f64>,
    mut integrate_segment: F,
) -> Result<(SamplingSequence, StepBudget)>
where
    F: FnMut(SegmentRequest) -> Result<JointSegment>,
{
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rho = {rho} must lie in (0, 1)"
        )));
    }
    if let Some(h) = max_step {
        if !(h > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "requested step {h} must be positive"
            )));
        }
    }
    let a_value = compute_aggregate(constants, ell, AggregateMode::True)?;
    let span = problem.duration();

    const FAR: usize = 1 << 20;
    let reach = FAR as f64 * closed_form_h_bound(a_value, ell, rho, FAR)?;
    if span > reach {
        return Err(Error::InfeasibleBudget(format!(
            "window length {span} exceeds the admissible reach {reach} (A = {a_value}, ell = {ell}, rho = {rho})"
        )));
    }

    let mut j_guess = match max_step {
        Some(h) => ((span / h).ceil() as usize).max(1),
        None => 1,
    };
    for _ in 0..64 {
        let bound = closed_form_h_bound(a_value, ell, rho, j_guess)?;
        let mut budget = StepBudget {
            rho,
            rho_x: rho,
            ell,
            a_value,
            closed_form_bound: max_step.map_or(bound, |h| h.min(bound)),
            exit_thresholds: Vec::new(),
        };
        let seq = build_sampling(problem, &mut budget, x0, &mut integrate_segment)?;
        if seq.count() <= j_guess {
            // The bound is non-increasing in J, so gaps built for j_guess
            // also respect the bound of the realised count.
            let realised = closed_form_h_bound(a_value, ell, rho, seq.count())?;
            budget.closed_form_bound = max_step.map_or(realised, |h| h.min(realised));
            return Ok((seq, budget));
        }
        j_guess = seq.count().max(j_guess + 1);
    }
    Err(Error::InfeasibleBudget(format!(
        "sampling count did not settle (last J = {j_guess})"
    )))
}

/// Writes `index,t_i,h_i` rows; the last point has an empty gap.
pub fn write_sampling_csv<W: std::io::Write>(seq: &SamplingSequence, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "t_i", "h_i"])?;
    for (i, t) in seq.points().iter().enumerate() {
        let gap = seq.gaps().get(i).map(|g| g.to_string()).unwrap_or_default();
        w.write_record([i.to_string(), t.to_string(), gap])?;
    }
    w.flush()?;
    Ok(())
}
