use taylor_shadow::certificates::{certify_unperturbed_steps, MikTable};
use taylor_shadow::integrator::{
    error_trajectory, integrate_reference, integrate_truncated, joint_probe, IntegratorSettings,
    PerturbationSpec,
};
use taylor_shadow::problem::{estimate_constants, DEFAULT_GRID_DENSITY};
use taylor_shadow::sampler::{
    build_sampling, compute_aggregate, plan_sampling, AggregateMode, SamplingSequence, StepBudget,
};
use taylor_shadow::shadowing::{is_pseudo_orbit, shadow_distance, shadowing_search};
use taylor_shadow::{Error, Field, OdeProblem};

fn decay(t_end: f64, y0: f64) -> OdeProblem {
    OdeProblem::new(Field::Affine { a: -1.0, b: 0.0 }, 3, 0.0, t_end, y0, 1.0).unwrap()
}

fn budget(rho: f64, cap: f64) -> StepBudget {
    StepBudget {
        rho,
        rho_x: rho,
        ell: 1,
        a_value: 0.0,
        closed_form_bound: cap,
        exit_thresholds: Vec::new(),
    }
}

#[test]
fn zero_field_steps_at_the_cap() {
    let p = OdeProblem::new(Field::Zero, 1, 0.0, 1.0, 0.3, 1.0).unwrap();
    let s = IntegratorSettings::default();
    let mut b = budget(0.5, 0.3);
    let seq = build_sampling(&p, &mut b, 0.3, joint_probe(&p, 1, None, &s)).unwrap();
    assert_eq!(seq.count(), 4);
    assert!(seq.gaps()[..3].iter().all(|&h| (h - 0.3).abs() < 1e-15));
    assert_eq!(seq.end(), 1.0);
}

#[test]
fn decay_steps_respect_exit_time() {
    let p = decay(2.0, 1.0);
    let s = IntegratorSettings::default();
    let mut b = budget(0.5, 10.0);
    let seq = build_sampling(&p, &mut b, 1.0, joint_probe(&p, 1, None, &s)).unwrap();
    // From x_i = e^{-t_i} the deviation reaches 0.25 after -ln(1 - 0.25 / x_i).
    let exits: Vec<f64> = seq.points()[..seq.count()]
        .iter()
        .map(|&t| -(1.0 - 0.25 / (-t).exp()).ln())
        .collect();
    assert!((seq.gaps()[0] + 0.75_f64.ln()).abs() < 1e-8);
    for (h, exit) in seq.gaps().iter().zip(&exits) {
        assert!(*h <= exit + 1e-9);
    }
    for (h, exit) in seq.gaps()[..seq.count() - 1].iter().zip(&exits) {
        assert!((h - exit).abs() < 1e-8);
    }
    assert_eq!(b.exit_thresholds.len(), seq.count());
}

#[test]
fn uniform_request_keeps_gaps() {
    let p = decay(1.0, 1.0);
    let s = IntegratorSettings::default();
    let mut b = budget(0.9, 0.15);
    let seq = build_sampling(&p, &mut b, 1.0, joint_probe(&p, 1, None, &s)).unwrap();
    let (last, body) = seq.gaps().split_last().unwrap();
    assert!(body.iter().all(|&h| (h - 0.15).abs() < 1e-15));
    assert!(*last <= 0.15);
}

#[test]
fn non_positive_cap_is_infeasible() {
    let p = decay(1.0, 1.0);
    let s = IntegratorSettings::default();
    let mut b = budget(0.5, 0.0);
    let r = build_sampling(&p, &mut b, 1.0, joint_probe(&p, 1, None, &s));
    assert!(matches!(r, Err(Error::InfeasibleBudget(_))));
}

#[test]
fn window_beyond_reach_rejected() {
    let p = decay(50.0, 1.0);
    let c = estimate_constants(&p, 2, DEFAULT_GRID_DENSITY).unwrap();
    let s = IntegratorSettings::default();
    let r = plan_sampling(&p, &c, 1, 0.3, 1.0, None, joint_probe(&p, 1, None, &s));
    assert!(matches!(r, Err(Error::InfeasibleBudget(_))));
}

#[test]
fn logistic_first_step_is_euler() {
    let p = OdeProblem::new(Field::Logistic, 1, 0.0, 1.0, 0.5, 0.5).unwrap();
    let seq = SamplingSequence::uniform(0.0, 1.0, 0.1).unwrap();
    let x = integrate_truncated(&p, &seq, 0, 0.5, None, &IntegratorSettings::default()).unwrap();
    assert_eq!(x.pre_jump[1], 0.525);
}

#[test]
fn affine_flow_is_exponential() {
    let p = decay(1.0, 1.0);
    let seq = SamplingSequence::new(vec![0.0, 0.13, 0.4, 0.41, 1.0]).unwrap();
    let x = integrate_truncated(&p, &seq, 1, 1.0, None, &IntegratorSettings::default()).unwrap();
    let worst = x
        .nodes()
        .fold(0.0_f64, |m, (t, v)| m.max((v - (-t).exp()).abs()));
    assert!(worst < 1e-14);
}

#[test]
fn reference_closed_forms() {
    let s = IntegratorSettings::default();
    let seq = SamplingSequence::uniform(0.0, 1.0, 0.25).unwrap();
    let y = integrate_reference(&decay(1.0, 1.0), 1.0, None, &seq, &s).unwrap();
    assert!((y.samples[4] - (-1.0_f64).exp()).abs() < 1e-10);
    assert!(!y.oracle.unwrap().flagged);

    let p = OdeProblem::new(Field::Logistic, 2, 0.0, 1.0, 0.5, 0.5).unwrap();
    let y = integrate_reference(&p, 0.5, None, &seq, &s).unwrap();
    let exact = 1.0 / (1.0 + (-1.0_f64).exp());
    assert!((y.samples[4] - exact).abs() < 1e-9);
}

#[test]
fn error_trajectory_basics() {
    let s = IntegratorSettings::default();
    let seq = SamplingSequence::uniform(0.0, 1.0, 0.25).unwrap();
    let p = decay(1.0, 1.0);
    let x = integrate_truncated(&p, &seq, 1, 1.1, None, &s).unwrap();
    let same = error_trajectory(&x, &x).unwrap();
    assert_eq!(same.stats.max_abs, 0.0);
    assert_eq!(same.stats.max_drift, 0.0);
    assert_eq!(same.stats.max_sample_increment, 0.0);

    let y = integrate_reference(&p, 1.0, None, &seq, &s).unwrap();
    let e = error_trajectory(&y, &x).unwrap();
    assert!((e.stats.e0 - (1.0 - 1.1)).abs() < 1e-15);
    let worst = e
        .trajectory
        .nodes()
        .fold(0.0_f64, |m, (t, v)| m.max((v + 0.1 * (-t).exp()).abs()));
    assert!(worst < 1e-10);
    assert!(is_pseudo_orbit(&x, &y, 0.1 + 1e-12).unwrap());
    assert!(!is_pseudo_orbit(&x, &y, 0.099).unwrap());
}

#[test]
fn raising_order_does_not_hurt_exact_fields() {
    let s = IntegratorSettings::default();
    let cases = [
        (decay(1.0, 1.0), 0.1),
        (
            OdeProblem::new(Field::square(), 3, 0.0, 0.5, 1.0, 1.0).unwrap(),
            0.05,
        ),
    ];
    for (p, h) in cases {
        let seq = SamplingSequence::uniform(p.t0, p.t_end, h).unwrap();
        let y = integrate_reference(&p, p.y0, None, &seq, &s).unwrap();
        let errs: Vec<f64> = (0..=3)
            .map(|ell| {
                let x = integrate_truncated(&p, &seq, ell, p.y0, None, &s).unwrap();
                error_trajectory(&y, &x).unwrap().stats.max_abs
            })
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{errs:?}");
        }
    }
}

#[test]
fn halving_the_substep_converges() {
    let p = OdeProblem::new(Field::BoundedSine { c: 1.0 }, 3, 0.0, 0.3, 1.0, 0.5).unwrap();
    let seq = SamplingSequence::uniform(0.0, 0.3, 0.05).unwrap();
    let coarse = IntegratorSettings::default();
    let fine = IntegratorSettings {
        segment_substeps: 2 * coarse.segment_substeps,
        reference_substeps_per_unit: 2 * coarse.reference_substeps_per_unit,
        ..coarse
    };
    for ell in [2, 3] {
        let a = integrate_truncated(&p, &seq, ell, 1.0, None, &coarse).unwrap();
        let b = integrate_truncated(&p, &seq, ell, 1.0, None, &fine).unwrap();
        let gap = a
            .nodes()
            .zip(b.nodes())
            .fold(0.0_f64, |m, ((_, u), (_, v))| m.max((u - v).abs()));
        assert!(gap < 1e-9);
    }
    let a = integrate_reference(&p, 1.0, None, &seq, &coarse).unwrap();
    let b = integrate_reference(&p, 1.0, None, &seq, &fine).unwrap();
    let gap = a
        .nodes()
        .zip(b.nodes())
        .fold(0.0_f64, |m, ((_, u), (_, v))| m.max((u - v).abs()));
    assert!(gap < 1e-9);
}

#[test]
fn exact_orbit_shadows_itself() {
    let s = IntegratorSettings::default();
    let p = decay(1.0, 1.0);
    let seq = SamplingSequence::uniform(0.0, 1.0, 0.25).unwrap();
    let x = integrate_truncated(&p, &seq, 1, 1.0, None, &s).unwrap();
    let r = shadowing_search(&p, &x, 1e-6, 0.1, 200, None, &s).unwrap();
    assert!(r.found);
    assert!((r.y0_star - 1.0).abs() < 1e-6);
    assert!(r.achieved_error < 1e-8);

    let x = integrate_truncated(&p, &seq, 1, 1.1, None, &s).unwrap();
    let r = shadowing_search(&p, &x, 1e-6, 0.1, 200, None, &s).unwrap();
    assert!(r.found && r.achieved_error <= 1e-8);
    assert!((r.y0_star - 1.1).abs() < 1e-6);
}

#[test]
fn coarse_orbit_is_not_shadowed_tightly() {
    let s = IntegratorSettings::default();
    let p = OdeProblem::new(Field::Logistic, 2, 0.0, 2.0, 0.2, 0.8).unwrap();
    let seq = SamplingSequence::uniform(0.0, 2.0, 0.5).unwrap();
    let x = integrate_truncated(&p, &seq, 0, 0.2, None, &s).unwrap();
    let tight = shadowing_search(&p, &x, 1e-4, 0.1, 200, None, &s).unwrap();
    assert!(!tight.found);
    assert!(tight.achieved_error > 1e-4);
    let again = shadow_distance(&p, &x, tight.y0_star, None, &s).unwrap();
    assert!((again - tight.achieved_error).abs() <= 1e-10);
    // Same search, weaker threshold.
    let loose = shadowing_search(&p, &x, 1.0, 0.1, 200, None, &s).unwrap();
    assert!(loose.found);
    assert_eq!(loose.y0_star, tight.y0_star);
}

#[test]
fn feasible_run_is_certified_and_confined() {
    let s = IntegratorSettings::default();
    let base = OdeProblem::new(Field::Logistic, 3, 0.0, 1.0, 0.5, 0.5).unwrap();
    let c = estimate_constants(&base, 3, DEFAULT_GRID_DENSITY).unwrap();
    let a = compute_aggregate(&c, 2, AggregateMode::True).unwrap();
    let rho = 0.4;
    let r = rho / 2.0;
    let span = 0.8 * r / (a * (1.0 + r + r * r));
    let p = base.with_window(0.0, span).unwrap();
    let g = PerturbationSpec::impulsive(0.01);
    let (seq, b) = plan_sampling(
        &p,
        &c,
        2,
        rho,
        0.5,
        Some(span / 5.0),
        joint_probe(&p, 2, Some(&g), &s),
    )
    .unwrap();
    assert!(seq.gaps().iter().all(|&h| h <= b.closed_form_bound));
    let x = integrate_truncated(&p, &seq, 2, 0.5, Some(&g), &s).unwrap();
    let y = integrate_reference(&p, 0.5, None, &seq, &s).unwrap();
    assert!(x.max_segment_deviation() <= r + 1e-8);
    assert!(y.max_segment_deviation() <= r + 1e-8);

    let plain = certify_unperturbed_steps(&c, 2, rho, seq.gaps(), 0.0).unwrap();
    assert!(plain.feasible());
    let table = MikTable::build(&p, &x, &c, 2, rho, 8).unwrap();
    assert_eq!(table.certified.len(), seq.count());
    assert!(table.measured.iter().flatten().all(|v| v.is_finite()));
}
