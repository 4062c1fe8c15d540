//! Subcommand pipelines and report assembly.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use taylor_shadow::certificates::{
    certify_continuous, certify_impulsive_steps, certify_unperturbed_steps, verdict,
    ErrorCertificate, Verdict, MEASUREMENT_TOL,
};
use taylor_shadow::export::{write_json, write_pseudo_orbit_csv, write_trajectory_csv};
use taylor_shadow::integrator::{
    error_trajectory, integrate_reference, integrate_truncated, joint_probe, ErrorStats,
    OracleQuality, Trajectory,
};
use taylor_shadow::problem::estimate_constants;
use taylor_shadow::sampler::{plan_sampling, write_sampling_csv, SamplingSequence, StepBudget};
use taylor_shadow::shadowing::{
    shadowing_search, verify_shadow_constraints, PseudoOrbit, ShadowConstraintReport, ShadowResult,
};
use taylor_shadow::{BoundConstants, Error, Result};

use crate::config::{ConstantsSource, ExperimentConfig, Sampling, SweepPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Run,
    Certify,
    Shadow,
    Sweep,
}

impl Command {
    fn certifies(self) -> bool {
        self != Command::Run
    }

    fn shadows(self) -> bool {
        matches!(self, Command::Shadow | Command::Sweep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingReport {
    #[serde(rename = "J")]
    pub j: usize,
    pub envelope: f64,
    pub points: Vec<f64>,
    pub gaps: Vec<f64>,
    /// Present for the automatic construction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<StepBudget>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measured {
    pub e0: f64,
    pub max_abs_error: f64,
    pub max_interval_deviation: f64,
    /// `sup |e(t) - e(t_i)|` on each `[t_i, t_{i+1}]`.
    pub interval_deviations: Vec<f64>,
    /// `sup |x(t) - x(t_i)|` on each `[t_i, t_{i+1}]`.
    pub approx_interval_deviations: Vec<f64>,
    pub max_sample_increment: f64,
    pub max_drift: f64,
    pub oracle: Option<OracleQuality>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowReport {
    pub epsilon: f64,
    /// `config`, `certificate`, or `measurement_floor` when the certificate's bound is zero.
    pub epsilon_source: &'static str,
    pub result: ShadowResult,
    pub constraints: ShadowConstraintReport,
}

/// Everything one experiment produces; serialised as `run_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: Command,
    pub config: ExperimentConfig,
    pub constants: BoundConstants,
    pub x0: f64,
    pub sampling: SamplingReport,
    pub measured: Measured,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<ErrorCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shadow: Option<ShadowReport>,
}

/// Trajectories kept alongside a report for the CSV writers.
pub struct Outcome {
    pub report: Report,
    pub approx: Trajectory,
    pub reference: Trajectory,
    pub error: Trajectory,
    pub seq: SamplingSequence,
}

fn constants_for(cfg: &ExperimentConfig) -> Result<BoundConstants> {
    match cfg.constants {
        ConstantsSource::Estimate { grid_density } => {
            estimate_constants(&cfg.problem, cfg.ell + 1, grid_density)
        }
        ConstantsSource::Given { k, k1, f0 } => BoundConstants::new(k, k1, f0),
    }
}

fn build_sequence(
    cfg: &ExperimentConfig,
    constants: &BoundConstants,
) -> Result<(SamplingSequence, Option<StepBudget>)> {
    let p = &cfg.problem;
    let auto = |max_step: Option<f64>| {
        let probe = joint_probe(p, cfg.ell, cfg.perturbation_spec(), &cfg.oracle);
        plan_sampling(
            p,
            constants,
            cfg.ell,
            cfg.budget.rho,
            cfg.x0(),
            max_step,
            probe,
        )
        .map(|(seq, b)| (seq, Some(b)))
    };
    match &cfg.sampling {
        Sampling::Auto => auto(None),
        Sampling::AutoCapped { max_step } => auto(Some(*max_step)),
        Sampling::Uniform { h } => Ok((SamplingSequence::uniform(p.t0, p.t_end, *h)?, None)),
        Sampling::Explicit { points } => Ok((SamplingSequence::new(points.clone())?, None)),
    }
}

fn certify(
    cfg: &ExperimentConfig,
    constants: &BoundConstants,
    seq: &SamplingSequence,
    e0: f64,
) -> Result<ErrorCertificate> {
    let pert = &cfg.perturbation;
    let j = seq.count();
    if !pert.lambda.is_zero() {
        certify_continuous(
            constants,
            cfg.ell,
            cfg.budget.rho,
            seq.gaps(),
            &pert.lambda_caps(seq),
            &pert.impulse_caps(j),
            e0,
        )
    } else if cfg.has_perturbation() {
        certify_impulsive_steps(
            constants,
            cfg.ell,
            cfg.budget.rho,
            seq.gaps(),
            &pert.impulse_caps(j),
            e0,
        )
    } else {
        certify_unperturbed_steps(constants, cfg.ell, cfg.budget.rho, seq.gaps(), e0)
    }
}

fn shadow(
    cfg: &ExperimentConfig,
    cert: &ErrorCertificate,
    approx: &Trajectory,
    e0: f64,
) -> Result<ShadowReport> {
    let (epsilon, epsilon_source) = match cfg.shadow.epsilon {
        Some(e) => (e, "config"),
        None if cert.epsilon > 0.0 => (cert.epsilon, "certificate"),
        None => (MEASUREMENT_TOL, "measurement_floor"),
    };
    let lambda = (!cfg.perturbation.lambda.is_zero()).then_some(&cfg.perturbation.lambda);
    let result = shadowing_search(
        &cfg.problem,
        approx,
        epsilon,
        cfg.shadow.halfwidth,
        cfg.shadow.budget_evals,
        lambda,
        &cfg.oracle,
    )?;
    Ok(ShadowReport {
        epsilon,
        epsilon_source,
        constraints: verify_shadow_constraints(cert, epsilon, e0),
        result,
    })
}

/// Runs the pipeline of `command` on a resolved configuration.
pub fn evaluate(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let constants = constants_for(cfg)?;
    let (seq, budget) = build_sequence(cfg, &constants)?;
    let p = &cfg.problem;
    let x0 = cfg.x0();
    let pert = cfg.perturbation_spec();
    let approx = integrate_truncated(p, &seq, cfg.ell, x0, pert, &cfg.oracle)?;
    let lambda = pert.map(|q| &q.lambda);
    let reference = integrate_reference(p, p.y0, lambda, &seq, &cfg.oracle)?;
    let err = error_trajectory(&reference, &approx)?;
    let ErrorStats {
        e0,
        max_abs,
        max_sample_increment,
        max_drift,
        max_interval_deviation,
    } = err.stats;
    let measured = Measured {
        e0,
        max_abs_error: max_abs,
        max_interval_deviation,
        interval_deviations: err.trajectory.segment_deviations(),
        approx_interval_deviations: approx.segment_deviations(),
        max_sample_increment,
        max_drift,
        oracle: reference.oracle,
    };

    let certificate = if command.certifies() {
        Some(certify(cfg, &constants, &seq, e0)?)
    } else {
        None
    };
    let verdict = certificate.as_ref().map(|c| verdict(c, max_abs));
    let shadow = match (&certificate, command.shadows()) {
        (Some(c), true) => Some(shadow(cfg, c, &approx, e0)?),
        _ => None,
    };

    let report = Report {
        command,
        config: cfg.clone(),
        constants,
        x0,
        sampling: SamplingReport {
            j: seq.count(),
            envelope: seq.envelope(),
            points: seq.points().to_vec(),
            gaps: seq.gaps().to_vec(),
            budget,
        },
        measured,
        certificate,
        verdict,
        shadow,
    };
    Ok(Outcome {
        report,
        approx,
        reference,
        error: err.trajectory,
        seq,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

/// Writes `run_report.json`, `sampling.csv` and `trajectories/{x,y,e}.csv`
/// (plus `pseudo_orbit.csv` for shadow runs) under `out`.
pub fn write_outcome(outcome: &Outcome, out: &Path) -> Result<()> {
    let traj_dir = out.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    write_json(out.join("run_report.json"), &outcome.report)?;
    write_sampling_csv(&outcome.seq, create(&out.join("sampling.csv"))?)?;
    for t in [&outcome.approx, &outcome.reference, &outcome.error] {
        let name = format!("{}.csv", t.origin.column());
        write_trajectory_csv(t, create(&traj_dir.join(name))?)?;
    }
    if outcome.report.shadow.is_some() {
        let orbit = PseudoOrbit::from_run(
            &outcome.approx,
            &outcome.reference,
            outcome.report.config.perturbation_spec().is_some(),
        )?;
        write_pseudo_orbit_csv(&orbit, create(&out.join("pseudo_orbit.csv"))?)?;
    }
    Ok(())
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub ell: usize,
    pub rho: f64,
    pub h: Option<f64>,
    pub gbar: Option<f64>,
    pub lambda: Option<f64>,
    pub x0_offset: f64,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub envelope: Option<f64>,
    pub certificate_kind: Option<String>,
    pub feasible: Option<bool>,
    pub epsilon: Option<f64>,
    pub measured_max_error: Option<f64>,
    pub verdict: Option<String>,
    pub shadow_epsilon: Option<f64>,
    pub shadow_found: Option<bool>,
    pub shadow_error: Option<f64>,
    pub y0_star: Option<f64>,
    pub constraints_hold: Option<bool>,
    /// `ok`, or the error that stopped this point.
    pub status: String,
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl SweepRow {
    pub fn new(point: &SweepPoint, result: &Result<Report>) -> Self {
        let mut row = SweepRow {
            index: point.index,
            ell: point.ell,
            rho: point.rho,
            h: point.h,
            gbar: point.gbar,
            lambda: point.lambda,
            x0_offset: point.x0_offset,
            j: None,
            envelope: None,
            certificate_kind: None,
            feasible: None,
            epsilon: None,
            measured_max_error: None,
            verdict: None,
            shadow_epsilon: None,
            shadow_found: None,
            shadow_error: None,
            y0_star: None,
            constraints_hold: None,
            status: "ok".into(),
        };
        match result {
            Err(e) => row.status = e.to_string(),
            Ok(r) => {
                row.j = Some(r.sampling.j);
                row.envelope = Some(r.sampling.envelope);
                row.measured_max_error = Some(r.measured.max_abs_error);
                if let Some(c) = &r.certificate {
                    row.certificate_kind = Some(snake(&c.kind));
                    row.feasible = Some(c.feasible());
                    row.epsilon = Some(c.epsilon);
                }
                row.verdict = r.verdict.as_ref().map(snake);
                if let Some(s) = &r.shadow {
                    row.shadow_epsilon = Some(s.epsilon);
                    row.shadow_found = Some(s.result.found);
                    row.shadow_error = Some(s.result.achieved_error);
                    row.y0_star = Some(s.result.y0_star);
                    row.constraints_hold = Some(s.constraints.holds);
                }
            }
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub command: Command,
    pub config: ExperimentConfig,
    pub points: usize,
    pub failed: usize,
    pub rows: Vec<SweepRow>,
}

/// Per-point offsets `x0_offset` drawn from the configured seed, in grid order.
fn jitters(cfg: &ExperimentConfig, count: usize) -> Vec<f64> {
    let j = cfg.sweep.e0_jitter;
    if j == 0.0 {
        return vec![0.0; count];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..count).map(|_| rng.gen_range(-j..=j)).collect()
}

/// Evaluates every grid point (concurrently, up to `workers` threads) and
/// returns the rows in grid order.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let count = cfg.sweep_points(|_| 0.0).len();
    let offsets = jitters(cfg, count);
    let points = cfg.sweep_points(|i| offsets[i]);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let result = evaluate(Command::Sweep, &cfg.with_point(p)).map(|o| o.report);
                SweepRow::new(p, &result)
            })
            .collect()
    });
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    Ok(SweepReport {
        command: Command::Sweep,
        config: cfg.clone(),
        points: rows.len(),
        failed,
        rows,
    })
}

/// Writes `sweep_summary.csv` and `run_report.json` under `out`.
pub fn write_sweep(report: &SweepReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_writer(create(&out.join("sweep_summary.csv"))?);
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    write_json(out.join("run_report.json"), report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use taylor_shadow::integrator::{Impulses, Lambda};
    use taylor_shadow::Field;

    fn logistic() -> ExperimentConfig {
        ExperimentConfig::parse(
            r#"{
            "problem": {"field": "logistic", "n": 2, "t0": 0.0, "tJ": 0.5, "y0": 0.5, "theta": 0.5},
            "ell": 0,
            "budget": {"rho": 0.3},
            "sampling": {"mode": "uniform", "h": 0.1},
            "oracle": {"dense_points": 50, "segment_substeps": 500, "reference_substeps_per_unit": 20000}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn run_reports_euler_samples() {
        let o = evaluate(Command::Run, &logistic()).unwrap();
        let mut e = 0.5_f64;
        for (i, x) in o.approx.samples.iter().enumerate().skip(1) {
            e += 0.1 * e * (1.0 - e);
            assert!((x - e).abs() < 1e-14, "sample {i}");
        }
        assert!(o.report.certificate.is_none());
        assert_eq!(o.report.sampling.j, 5);
        assert_eq!(o.report.measured.interval_deviations.len(), 5);
    }

    #[test]
    fn certificate_kind_follows_perturbation() {
        let mut c = logistic();
        let kind = |c: &ExperimentConfig| {
            evaluate(Command::Certify, c)
                .unwrap()
                .report
                .certificate
                .unwrap()
                .kind
        };
        assert_eq!(snake(&kind(&c)), "unperturbed");
        c.perturbation.impulses = Impulses::Uniform(0.001);
        c.perturbation.impulse_cap = 0.001;
        assert_eq!(snake(&kind(&c)), "impulsive");
        c.perturbation.lambda = Lambda::Constant { value: 0.2 };
        assert_eq!(snake(&kind(&c)), "continuous");
    }

    #[test]
    fn zero_bound_uses_measurement_floor() {
        let mut c = logistic();
        c.problem.field = Field::Zero;
        c.perturbation.lambda = Lambda::Constant { value: 0.5 };
        let o = evaluate(Command::Shadow, &c).unwrap();
        assert_eq!(o.report.certificate.as_ref().unwrap().epsilon, 0.0);
        let s = o.report.shadow.unwrap();
        assert_eq!(s.epsilon_source, "measurement_floor");
        assert!(s.result.found);
    }

    #[test]
    fn sweep_rows_in_grid_order() {
        let mut c = logistic();
        c.sweep.rho = vec![0.2, 0.4];
        c.sweep.h = vec![0.25, 0.1];
        c.workers = Some(2);
        let r = sweep(&c).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows.iter().enumerate().all(|(i, row)| row.index == i));
        assert_eq!((r.rows[1].rho, r.rows[1].h), (0.2, Some(0.1)));
        assert_eq!(r.rows[1].j, Some(5));
    }

    #[test]
    fn jitter_is_seeded() {
        let mut c = logistic();
        c.sweep.e0_jitter = 0.01;
        let a = jitters(&c, 5);
        assert_eq!(a, jitters(&c, 5));
        assert!(a.iter().all(|v| v.abs() <= 0.01));
        c.seed = 1;
        assert_ne!(a, jitters(&c, 5));
    }

    #[test]
    fn point_errors_are_rows() {
        let mut c = logistic();
        c.sweep.ell = vec![0, 5];
        let r = sweep(&c).unwrap();
        assert_eq!(r.failed, 1);
        assert!(r.rows[1].status.contains("order"));
    }
}
