use hdsmc::stats::mean;
use hdsmc::*;
use proptest::prelude::*;

fn gaussian(phi0: f64) -> TemperedTarget {
    TemperedTarget::gaussian(phi0).unwrap()
}

#[test]
fn local_variance_under_perfect_kernel() {
    let t = gaussian(0.5);
    for (u, expected) in [(0.5, 2.0), (1.0, 0.5)] {
        let est = local_asymptotic_variance(&t, &KernelSpec::perfect(), u, 100_000, 1).unwrap();
        assert!((est.value - expected).abs() < 4.0 * est.std_error, "u = {u}: {est:?}");
        assert!(est.std_error < 0.1 * expected);
    }
}

#[test]
fn rwm_local_variance_exceeds_iid_value() {
    let est = local_asymptotic_variance(&gaussian(0.5), &KernelSpec::rwm(), 1.0, 100_000, 2).unwrap();
    assert!(est.value >= 0.5 - 3.0 * est.std_error, "{est:?}");
}

#[test]
fn estimated_profiles_match_closed_forms() {
    for (phi0, total) in [(0.5, 0.25), (0.2, 1.6)] {
        let p = build_variance_profile(&gaussian(phi0), &KernelSpec::perfect(), phi0, 64, 100_000, 3).unwrap();
        assert_eq!(p.cumulative()[0], 0.0);
        assert!((p.total() - total).abs() < 0.05 * total, "phi0 = {phi0}: {}", p.total());
        assert!(p.cumulative().windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn estimated_profile_nodes_agree_with_analytic() {
    let p = build_variance_profile(&gaussian(0.5), &KernelSpec::perfect(), 0.5, 8, 100_000, 4).unwrap();
    for ((u, v), se) in p.grid().iter().zip(p.local_variance()).zip(p.std_errors()) {
        let exact = 0.5 / (u * u);
        assert!((v - exact).abs() < 3.0 * se, "u = {u}: {v} vs {exact} (se {se})");
    }
}

#[test]
fn limiting_times_follow_the_reciprocal_recursion() {
    let p = analytic_profile_perfect_gaussian(0.1).unwrap();
    let times = limiting_resample_times(&p, &Thresholds::constant(0.5).unwrap(), None);
    assert_eq!(times.len(), 5);
    // σ²_{s:t} = 0.45 (1/s - 1/t), so each crossing lowers 1/t by ln 2 / 0.45
    let step = 2f64.ln() / 0.45;
    for (k, t) in times.iter().enumerate() {
        let exact = 1.0 / (10.0 - step * (k + 1) as f64);
        assert!((t.t - exact).abs() < 1e-6, "t_{} = {} vs {exact}", k + 1, t.t);
        assert!((t.criterion - 0.5).abs() < 1e-6);
    }
    for (t, expected) in times.iter().zip([0.1182, 0.1445, 0.1859]) {
        assert!((t.t - expected).abs() < 5e-5);
    }
}

#[test]
fn grid_limiting_times_sit_on_grid_points() {
    let p = analytic_profile_perfect_gaussian(0.1).unwrap();
    let grid = TestGrid::new(40).unwrap();
    let times = limiting_resample_times(&p, &Thresholds::constant(0.5).unwrap(), Some(grid));
    let points = grid.points(0.1);
    for t in &times {
        assert!(points.contains(&t.t));
        assert!(t.criterion < 0.5);
    }
    assert!(times.windows(2).all(|w| w[1].t > w[0].t));
}

proptest! {
    #[test]
    fn larger_thresholds_give_more_times(a in 0.3f64..0.95, b in 0.3f64..0.95) {
        let p = analytic_profile_perfect_gaussian(0.1).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let few = limiting_resample_times(&p, &Thresholds::constant(lo).unwrap(), None);
        let many = limiting_resample_times(&p, &Thresholds::constant(hi).unwrap(), None);
        prop_assert!(many.len() >= few.len());
        prop_assert!(many.windows(2).all(|w| w[1].t > w[0].t));
    }
}

#[test]
fn limiting_ess_draws_lie_in_range() {
    let draws = sample_limiting_ess(5, 40, 1.3, 5000).unwrap();
    assert!(draws.iter().all(|&e| (1.0..=40.0).contains(&e)));
}

#[test]
fn limiting_ess_mean_regression() {
    // brute-force oracle: 10^6 draws of ε_100 at σ² = 0.25 give 78.402 (sd 3.637)
    let draws = sample_limiting_ess(6, 100, 0.25, 1_000_000).unwrap();
    let m = mean(&draws);
    assert!((m - 78.402).abs() < 0.02, "{m}");
}

/// `log E[W]²/E[W²]` for the Gaussian target under the perfect kernel, where a
/// step from `φ` contributes `exp{-c χ²_d}` with `c = Δφ/(2φ)`.
fn exact_log_ratio(phis: &[f64], d: usize) -> f64 {
    phis.windows(2)
        .map(|w| {
            let c = (w[1] - w[0]) / (2.0 * w[0]);
            let d = d as f64;
            -d * (2.0 * c).ln_1p() + 0.5 * d * (4.0 * c).ln_1p()
        })
        .sum()
}

fn exact_crossings(schedule: &AnnealingSchedule, a: f64) -> Vec<usize> {
    let phis = schedule.values();
    let mut out = Vec::new();
    let mut start = 0;
    for n in 1..phis.len() {
        if exact_log_ratio(&phis[start..=n], schedule.dim()) < a.ln() {
            out.push(n);
            start = n;
        }
    }
    out
}

#[test]
fn finite_d_times_match_the_chi_square_oracle() {
    let a = (-0.1f64).exp();
    let schedule = AnnealingSchedule::linear(0.5, 64).unwrap();
    let exact = exact_crossings(&schedule, a);
    assert_eq!(exact.len(), 2);
    let est = theoretical_resample_times_d(
        &gaussian(0.5),
        &KernelSpec::perfect(),
        &schedule,
        &Thresholds::constant(a).unwrap(),
        20_000,
        7,
        None,
    )
    .unwrap();
    assert_eq!(est.len(), exact.len());
    for (e, x) in est.iter().zip(&exact) {
        assert!(e.step.unwrap().abs_diff(*x) <= 1, "{:?} vs step {x}", e);
    }
}

#[test]
fn finite_d_times_approach_the_limit() {
    let schedule = AnnealingSchedule::linear(0.5, 512).unwrap();
    let th = Thresholds::constant((-0.1f64).exp()).unwrap();
    let run = || theoretical_resample_times_d(&gaussian(0.5), &KernelSpec::perfect(), &schedule, &th, 4000, 8, None);
    let times = run().unwrap();
    assert_eq!(times.len(), 2);
    assert!((times[0].t - 0.625).abs() < 0.02);
    assert!((times[1].t - 1.0 / 1.2).abs() < 0.02);
    assert_eq!(run().unwrap(), times);
}

#[test]
fn finite_d_times_empty_when_threshold_is_never_reached() {
    let schedule = AnnealingSchedule::linear(0.5, 256).unwrap();
    let times = theoretical_resample_times_d(
        &gaussian(0.5),
        &KernelSpec::perfect(),
        &schedule,
        &Thresholds::constant(0.6).unwrap(),
        2000,
        9,
        None,
    )
    .unwrap();
    assert!(times.is_empty());
}

#[test]
fn degenerate_moment_estimate_is_a_precision_error() {
    let schedule = AnnealingSchedule::linear(0.01, 64).unwrap();
    let err = theoretical_resample_times_d(
        &gaussian(0.01),
        &KernelSpec::perfect(),
        &schedule,
        &Thresholds::constant(0.01).unwrap(),
        1000,
        10,
        None,
    )
    .unwrap_err();
    assert!(matches!(err, SmcError::Precision(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn too_few_trajectories_rejected() {
    let schedule = AnnealingSchedule::linear(0.5, 16).unwrap();
    let th = Thresholds::constant(0.5).unwrap();
    let err = theoretical_resample_times_d(&gaussian(0.5), &KernelSpec::perfect(), &schedule, &th, 999, 1, None);
    assert!(matches!(err, Err(SmcError::Parameter(_))));
}

#[test]
fn profile_csv_header() {
    let p = analytic_profile_perfect_gaussian(0.5).unwrap();
    let mut buf = Vec::new();
    p.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("u,v,sigma2_cum\n"));
}
