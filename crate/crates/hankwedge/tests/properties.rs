use std::path::{Path, PathBuf};

use proptest::prelude::*;

use hankwedge::calibration::{
    ar1_path, load_union, write_union, CountryCalibration, ShockScenario, Union,
};
use hankwedge::household::{
    fake_news_jacobian, solve_steady_state, HhInput, HhOutput, HouseholdSteadyState,
};
use hankwedge::solver::{solve_linear, Demand, Model};
use hankwedge::suffstats::{rwei, wedge, PriceChange};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn two_type() -> Union {
    load_union(&data("two_type")).unwrap()
}

/// Two groups with the first more exposed to essentials and resetting more often.
fn ordered_pair() -> impl Strategy<Value = CountryCalibration> {
    (
        0.05..0.95f64,
        (0.02..0.99f64, 0.01..0.99f64),
        (0.01..0.7f64, 0.01..0.99f64),
        (0.0..1.0f64, 0.0..1.0f64),
    )
        .prop_map(|(eta, (th_h, th_frac), (ae_h, ae_frac), (d_h, d_l))| {
            let mut c = two_type().countries.remove(0);
            let rows = [
                (eta, th_h, ae_h, d_h),
                (1.0 - eta, th_h * th_frac, ae_h * ae_frac, d_l),
            ];
            for (g, (share, theta, ae, split)) in c.groups.iter_mut().zip(rows) {
                g.eta = share;
                g.theta = theta;
                g.alpha_e = ae;
                g.alpha_d = split * (1.0 - ae);
                g.alpha_s = 1.0 - ae - g.alpha_d;
            }
            c
        })
}

fn price_change() -> impl Strategy<Value = PriceChange> {
    (-0.5..0.5f64, -0.3..0.3f64, -0.3..0.3f64).prop_map(|(e, d, s)| PriceChange { e, d, s })
}

proptest! {
    #[test]
    fn necessity_and_non_necessity_shocks_have_opposite_wedges(
        c in ordered_pair(), x in 0.01..0.5f64, lambda in 0.5..2.0f64,
    ) {
        prop_assert!(wedge(&c, PriceChange::essentials(x), lambda).unwrap() > 0.0);
        // the salience weight only touches essentials
        let others = PriceChange { e: 0.0, d: x, s: x };
        prop_assert!(wedge(&c, others, lambda).unwrap() < 0.0);
    }

    #[test]
    fn wedge_is_linear_in_price_changes(
        c in ordered_pair(), dp in price_change(), k in -3.0..3.0f64, lambda in 0.5..2.0f64,
    ) {
        let base = wedge(&c, dp, lambda).unwrap();
        let scaled = wedge(&c, dp.scale(k), lambda).unwrap();
        prop_assert!((scaled - k * base).abs() < 1e-12);
    }

    #[test]
    fn uniform_shock_passes_through(c in ordered_pair(), x in -0.5..0.5f64, lambda in 0.5..2.0f64) {
        prop_assert!((rwei(&c, PriceChange::uniform(x), 1.0) - x).abs() < 1e-12);
        prop_assert!(wedge(&c, PriceChange::uniform(x), 1.0).unwrap().abs() < 1e-12);
        let salient = PriceChange { e: x / lambda, d: x, s: x };
        prop_assert!(wedge(&c, salient, lambda).unwrap().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn calibration_round_trip(c in ordered_pair(), phi in 0.0..1.0f64, labor in 0.45..0.9f64) {
        let mut u = two_type();
        let mut c = c;
        c.groups[1].phi = phi;
        c.services.labor_share = labor;
        c.refresh_centrality();
        u.countries = vec![c];
        let dir = tempfile::tempdir().unwrap();
        write_union(&u, dir.path()).unwrap();
        let back = load_union(dir.path()).unwrap();
        prop_assert_eq!(back, u);
    }
}

fn small_model(scale: f64) -> Model {
    let mut u = two_type();
    u.common.horizon_t = 16;
    u.countries[0].groups.iter_mut().for_each(|g| g.phi = 0.35);
    let path: Vec<f64> = ar1_path(0.05, 0.7, 2, 16)
        .iter()
        .map(|v| scale * v)
        .collect();
    Model::new(
        u.clone(),
        ShockScenario::essentials(&u.common, path),
        Demand::Euler,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residuals_are_affine_in_the_unknowns(
        seed_a in prop::collection::vec(-0.05..0.05f64, 64),
        seed_b in prop::collection::vec(-0.05..0.05f64, 64),
    ) {
        let m = small_model(1.0);
        let n = m.n_unknowns();
        let a: Vec<f64> = seed_a.iter().cycle().take(n).copied().collect();
        let b: Vec<f64> = seed_b.iter().rev().cycle().take(n).copied().collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let r0 = m.residual(&vec![0.0; n], false).unwrap();
        let ra = m.residual(&a, false).unwrap() - &r0;
        let rb = m.residual(&b, false).unwrap() - &r0;
        let rs = m.residual(&sum, false).unwrap() - &r0;
        prop_assert!((rs - ra - rb).amax() < 1e-12);
    }

    #[test]
    fn linear_solution_scales_with_the_shock(k in -4.0..4.0f64) {
        let base = solve_linear(&small_model(1.0)).unwrap();
        let scaled = solve_linear(&small_model(k)).unwrap();
        for (x, y) in base.unknowns.iter().zip(&scaled.unknowns) {
            prop_assert!((k * x - y).abs() < 1e-10);
        }
    }
}

fn small_steady_state() -> HouseholdSteadyState {
    let mut common = two_type().common;
    common.n_a = 60;
    common.n_e = 3;
    common.a_max = 100.0;
    solve_steady_state(&common, common.r_ss, 1.0).unwrap()
}

#[test]
fn interpolated_quintiles_are_midpoints() {
    let u = load_union(&data("euroarea6")).unwrap();
    for c in &u.countries {
        let g = |l: &str| c.group(l).unwrap().1;
        for (mid, lo, hi) in [("Q2", "Q1", "Q3"), ("Q4", "Q3", "Q5")] {
            let (m, a, b) = (g(mid), g(lo), g(hi));
            assert!(
                (m.theta - 0.5 * (a.theta + b.theta)).abs() < 1e-12,
                "{} {mid}",
                c.code
            );
            assert!((m.alpha_e + m.alpha_d + m.alpha_s - 1.0).abs() < 1e-12);
            assert!(
                (m.alpha_e - 0.5 * (a.alpha_e + b.alpha_e)).abs() < 1e-9,
                "{} {mid}",
                c.code
            );
        }
    }
}

#[test]
fn lottery_splits_between_bracketing_points() {
    let ss = small_steady_state();
    let a = ss.household.grid.points();
    for (s, &ap) in ss.policy.a.iter().enumerate() {
        let (j, lo) = (ss.lottery.idx[s], ss.lottery.lo[s]);
        assert!(a[j] <= ap + 1e-12 && ap <= a[j + 1] + 1e-12);
        assert!((0.0..=1.0).contains(&lo));
        assert!((lo * a[j] + (1.0 - lo) * a[j + 1] - ap).abs() < 1e-10);
    }
}

/// Far from both ends the Jacobian is close to Toeplitz. News responses
/// decay slowly when β(1+r) is near one, so the bound is relative to the
/// largest entry.
#[test]
fn jacobians_are_asymptotically_time_invariant() {
    let ss = small_steady_state();
    let t = 300;
    for input in [HhInput::R, HhInput::W] {
        let j = fake_news_jacobian(&ss, input, HhOutput::C, t).unwrap();
        let scale = j.to_matrix().amax();
        let start = 2 * t / 3;
        for row in start..t - 1 {
            for col in start..t - 1 {
                let d = (j.get(row, col) - j.get(row + 1, col + 1)).abs();
                assert!(d < 1e-4 * scale, "{input:?} ({row}, {col}): {d}");
            }
        }
    }
}
