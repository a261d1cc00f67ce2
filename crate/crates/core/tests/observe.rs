use std::path::PathBuf;

use proptest::prelude::*;
use rsls_core::detect::{Metric, ProbingSignal};
use rsls_core::matnum::{self, Matrix, Vector, C64};
use rsls_core::observe::*;
use rsls_core::rsls::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/banks").join(name)
}

fn real_poles(v: &[f64]) -> Vec<C64> {
    v.iter().map(|&r| C64::new(r, 0.0)).collect()
}

fn sine() -> ProbingSignal {
    ProbingSignal::sinusoid(0.1, 1.0).unwrap()
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn two_bus_power_sensor() -> LtiSubsystem {
    let a = Matrix::from_row_slice(
        4,
        4,
        &[
            0.0, 1.0, 0.0, 0.0, //
            -197.7372, -0.2, 197.7372, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            131.8248, 0.0, -131.8248, -0.2067,
        ],
    );
    let b = Matrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0 / 1.5]);
    let g = 200.0 * 0.1506f64.cos();
    let c = Matrix::from_row_slice(1, 4, &[g, 0.0, -g, 0.0]);
    LtiSubsystem::new("power", a, b, c).unwrap()
}

fn check_structure(d: &Decomposition, sub: &LtiSubsystem) {
    assert!(d.block_residual() < 1e-8, "{}", d.block_residual());
    let back = &d.t * &d.t_inv;
    assert!(max_abs(&(back - Matrix::identity(sub.order(), sub.order()))) < 1e-12);
    if d.rank > 0 {
        let w = matnum::observability_stack(&d.a22, &d.c2).unwrap();
        assert_eq!(matnum::numerical_rank(&w, None), d.rank);
    }
}

#[test]
fn observable_subsystem_has_trivial_decomposition() {
    let bank = RslsBank::load(&fixture("bank5_printed.json")).unwrap();
    for sub in &bank.subsystems {
        let d = decompose(sub).unwrap();
        assert_eq!(d.rank, 4);
        assert_eq!(d.m.ncols(), 0);
        assert_eq!(d.t, Matrix::identity(4, 4));
        assert_eq!(d.a22, sub.a);
        assert!(d.is_observable());
        check_structure(&d, sub);
    }
}

#[test]
fn power_sensor_decomposition() {
    let sub = two_bus_power_sensor();
    let d = decompose(&sub).unwrap();
    assert_eq!(d.rank, 3);
    assert_eq!(d.m.ncols(), 1);
    assert!(max_abs(&(&d.w * &d.m)) < 1e-10 * max_abs(&d.w));
    // Common rotation of both angles is invisible to the power measurement.
    // W is badly scaled (σ₃/σ₁ ≈ 3e-8), so the basis is accurate to ~1e-8.
    let m = d.m.column(0);
    assert!((m[0] - m[2]).abs() < 1e-7 && m[1].abs() < 1e-7 && m[3].abs() < 1e-7);
    check_structure(&d, &sub);
}

#[test]
fn blind_and_partial_sensors_on_packet_bank() {
    let bank = RslsBank::load(&fixture("bank33_packet.json")).unwrap();
    let ranks: Vec<usize> = bank
        .subsystems
        .iter()
        .map(|s| {
            let d = decompose(s).unwrap();
            check_structure(&d, s);
            d.rank
        })
        .collect();
    assert_eq!(ranks, vec![4, 4, 4, 0]);
    let blind = decompose(&bank.subsystems[3]).unwrap();
    assert_eq!(blind.n.ncols(), 0);
    assert_eq!(blind.m.ncols(), 4);
}

#[test]
fn combined_matrix_stacks_every_mode() {
    let bank = RslsBank::load(&fixture("bank33_packet.json")).unwrap();
    let w = combined_observability(&bank);
    assert_eq!(w.shape(), (4 * 2 * 4, 4));
    assert_eq!(matnum::numerical_rank(&w, None), 4);
}

#[test]
fn scalar_gain_and_constants() {
    let sub = LtiSubsystem::new(
        "s",
        Matrix::from_element(1, 1, -1.0),
        Matrix::from_element(1, 1, 1.0),
        Matrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let bank = RslsBank::new("s", vec![sub], vec![1.0]).unwrap();
    let sched = ScheduleParams::new(2.0, 0.5, 0.05).unwrap();
    let obs = design_bank_observers(&bank, &[real_poles(&[-5.0])], &sched, 0.99, true).unwrap();
    let g = &obs.gains[0];
    assert!((g.l[(0, 0)] - 4.0).abs() < 1e-12);
    assert!((g.gammac - (-5.0f64 * 1.5).exp()).abs() < 1e-12);
    assert!((g.gamma0 - (-0.5f64).exp()).abs() < 1e-12);
    assert!((g.gamma1 - (-1.5f64).exp()).abs() < 1e-12);
    // p = 1: γ = γ_c γ₀.
    assert!((g.gamma - (-8.0f64).exp()).abs() < 1e-12);
    assert!(g.within_bound);
}

#[test]
fn gains_hit_requested_poles() {
    for (name, tau, tau0, poles) in [
        ("bank5_printed.json", 2.5, 0.05, [-4.8, -3.6, -4.0, -4.4]),
        ("bank33_printed.json", 4.5, 0.9, [-4.0, -3.2, -4.8, -4.4]),
        ("bank33_packet.json", 5.0, 1.0, [-1.0, -0.8, -1.2, -1.5]),
    ] {
        let bank = RslsBank::load(&fixture(name)).unwrap();
        let sched = ScheduleParams::with_default_sampling(tau, tau0).unwrap();
        let obs = design_bank_observers(&bank, &[real_poles(&poles)], &sched, 0.99, false).unwrap();
        for g in &obs.gains {
            let d = &obs.decomps[g.mode];
            let got = matnum::eigenvalues(&g.ac).unwrap().values();
            assert!(matnum::spectrum_distance(&got, &g.poles) < 1e-6, "{name} mode {}", g.mode);
            assert_eq!(g.poles.len(), d.rank);
            let full = &bank.subsystems[g.mode].a - &g.l_full * &bank.subsystems[g.mode].c;
            let got = matnum::eigenvalues(&full).unwrap().values();
            let mut want = g.poles.clone();
            if d.rank < 4 {
                want.extend(matnum::eigenvalues(&d.a11).unwrap().values());
            }
            assert!(matnum::spectrum_distance(&got, &want) < 1e-6);
        }
    }
}

// γ from independently computed matrix norms.
#[test]
fn contraction_factor_matches_definition() {
    let bank = RslsBank::load(&fixture("bank5_printed.json")).unwrap();
    let sched = ScheduleParams::with_default_sampling(2.5, 0.05).unwrap();
    let obs = design_bank_observers(&bank, &[real_poles(&[-4.8, -3.6, -4.0, -4.4])], &sched, 0.99, false).unwrap();
    for g in &obs.gains {
        let a = &bank.subsystems[g.mode].a;
        let norm = |m: Matrix| m.svd(false, false).singular_values.max();
        let g0 = norm(matnum::expm(a, 0.05).unwrap());
        let g1 = norm(matnum::expm(a, 2.45).unwrap());
        let gc = norm(matnum::expm(&g.ac, 2.45).unwrap());
        let p = bank.p[g.mode];
        let want = (gc * g0).powf(p) * (g1 * g0).powf(1.0 - p);
        assert!((g.gamma - want).abs() < 1e-9 * want);
        assert_eq!(g.within_bound, want <= 0.99);
    }
}

#[test]
fn strict_design_reports_offending_factor() {
    let bank = RslsBank::load(&fixture("bank33_printed.json")).unwrap();
    let sched = ScheduleParams::with_default_sampling(4.5, 0.9).unwrap();
    let poles = [real_poles(&[-4.0, -3.2, -4.8, -4.4])];
    let loose = design_bank_observers(&bank, &poles, &sched, 0.99, false).unwrap();
    assert!(!loose.all_within_bound());
    match design_bank_observers(&bank, &poles, &sched, 0.99, true) {
        Err(ObserveError::Contraction { mode, gamma, .. }) => {
            assert_eq!(gamma, loose.gains[mode.index()].gamma);
        }
        other => panic!("expected contraction error, got {other:?}"),
    }
}

#[test]
fn pole_request_errors() {
    let bank = RslsBank::load(&fixture("bank33_printed.json")).unwrap();
    let sched = ScheduleParams::with_default_sampling(4.5, 0.9).unwrap();
    let short = design_bank_observers(&bank, &[real_poles(&[-1.0, -2.0])], &sched, 0.99, false);
    assert!(matches!(short, Err(ObserveError::PoleRequest(_))));
    let unstable = design_bank_observers(&bank, &[real_poles(&[-1.0, -2.0, 0.5, -3.0])], &sched, 0.99, false);
    assert!(matches!(unstable, Err(ObserveError::PoleRequest(_))));
    let split = vec![C64::new(-1.0, 1.0), C64::new(-2.0, 0.0), C64::new(-3.0, 0.0), C64::new(-4.0, 0.0)];
    let r = design_bank_observers(&bank, &[split], &sched, 0.99, false);
    assert!(matches!(r, Err(ObserveError::Placement { .. })));
    let wrong_sets = design_bank_observers(&bank, &[real_poles(&[-1.0; 4]), real_poles(&[-1.0; 4])], &sched, 0.99, false);
    assert!(matches!(wrong_sets, Err(ObserveError::PoleRequest(_))));
}

#[test]
fn unobservable_pair_cannot_be_placed() {
    // Handing the full (A, C) of a partially observable mode to the placer fails.
    let sub = two_bus_power_sensor();
    let eig = matnum::eigenvalues(&sub.a).unwrap();
    let r = matnum::place_observer_gain(&sub.a, &sub.c, &eig);
    assert!(matches!(r, Err(matnum::MatnumError::Unobservable { rank: 3, n: 4 })));
}

#[test]
fn request_truncated_to_observable_order() {
    let sub = two_bus_power_sensor();
    let bank = RslsBank::new("p", vec![sub], vec![1.0]).unwrap();
    let sched = ScheduleParams::new(1.0, 0.1, 0.002).unwrap();
    let obs = design_bank_observers(&bank, &[real_poles(&[-5.0, -6.0, -7.0, -8.0])], &sched, 0.99, false).unwrap();
    assert_eq!(obs.gains[0].poles, real_poles(&[-5.0, -6.0, -7.0]));
    assert_eq!(obs.gains[0].l.shape(), (3, 1));
    assert_eq!(obs.gains[0].l_full.shape(), (4, 1));
}

#[test]
fn substate_check_flags_mode_dependent_dynamics() {
    let bank = RslsBank::load(&fixture("bank33_packet.json")).unwrap();
    let decomps: Vec<_> = bank.subsystems.iter().map(|s| decompose(s).unwrap()).collect();
    let dev = substate_independence(&bank, &decomps);
    assert_eq!(dev.len(), 1);
    assert_eq!(dev[0], (Mode(3), 0.0));

    let weak = two_bus_power_sensor();
    let mut strong = weak.clone();
    strong.a *= 2.0;
    let bank = RslsBank::new("pair", vec![weak, strong], vec![0.5, 0.5]).unwrap();
    let decomps: Vec<_> = bank.subsystems.iter().map(|s| decompose(s).unwrap()).collect();
    let dev = substate_independence(&bank, &decomps);
    assert_eq!(dev.len(), 2);
    assert!(dev.iter().all(|(_, d)| *d > 1.0));
}

fn five_bus_setup() -> (RslsBank, ObserverBank, ScheduleParams) {
    let bank = RslsBank::load(&fixture("bank5_printed.json")).unwrap();
    let sched = ScheduleParams::with_default_sampling(2.5, 0.05).unwrap();
    let obs = design_bank_observers(&bank, &[real_poles(&[-4.8, -3.6, -4.0, -4.4])], &sched, 0.99, false).unwrap();
    (bank, obs, sched)
}

#[test]
fn zero_initial_error_stays_zero() {
    let (bank, obs, sched) = five_bus_setup();
    let modes = sample_switching(&bank.p, 6, 5).unwrap();
    let x0 = Vector::from_row_slice(&[2.0, -1.0, 1.0, 2.0]);
    let run = JointRun {
        modes,
        x0,
        e0: Vector::zeros(4),
        noise: NoiseSpec::none(),
    };
    let tr = run_joint_estimation(&bank, &obs, &sine(), &sched, &run, Metric::Mae).unwrap();
    assert!(tr.segments.iter().all(|s| s.mu == Some(0.0)));
    assert_eq!(tr.mu_final, Some(0.0));
    assert_eq!(tr.detection_accuracy(), Some(1.0));
}

#[test]
fn nominal_five_bus_run_converges() {
    let (bank, obs, sched) = five_bus_setup();
    let modes = sample_switching(&bank.p, 10, 17).unwrap();
    let x0 = Vector::from_row_slice(&[2.0, -1.0, 1.0, 2.0]);
    let run = JointRun {
        modes,
        x0: x0.clone(),
        e0: x0,
        noise: NoiseSpec::none(),
    };
    let tr = run_joint_estimation(&bank, &obs, &sine(), &sched, &run, Metric::Mae).unwrap();
    assert_eq!(tr.detection_accuracy(), Some(1.0));
    let mu0 = tr.segments[0].mu.unwrap();
    assert!((mu0 - 10f64.sqrt()).abs() < 1e-12);
    assert!(tr.mu_final.unwrap() < 1e-3 * mu0);
    assert_eq!(tr.samples.len(), 10 * sched.per_segment() + 1);
    let s = &tr.samples[123];
    let e: f64 = s.x_true.iter().zip(s.x_hat.as_ref().unwrap()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!((e - s.err_norm.unwrap()).abs() <= 1e-9 * e.max(1.0));
}

#[test]
fn contraction_bound_holds_every_segment() {
    for (name, tau, tau0, poles) in [
        ("bank33_printed.json", 4.5, 0.9, [-4.0, -3.2, -4.8, -4.4]),
        ("bank33_packet.json", 5.0, 1.0, [-1.0, -0.8, -1.2, -1.5]),
    ] {
        let bank = RslsBank::load(&fixture(name)).unwrap();
        let sched = ScheduleParams::with_default_sampling(tau, tau0).unwrap();
        let obs = design_bank_observers(&bank, &[real_poles(&poles)], &sched, 0.99, false).unwrap();
        let est = JointEstimator::new(&bank, &obs, &sine(), &sched, Metric::Mae).unwrap();
        for seed in 0..3 {
            let modes = sample_switching(&bank.p, 100, seed).unwrap();
            let x0 = Vector::from_row_slice(&[-1.0, 2.0, 1.0, 2.0]);
            let run = JointRun {
                modes,
                x0: x0.clone(),
                e0: x0 * 1e100,
                noise: NoiseSpec::none(),
            };
            let tr = est.run(&run, false).unwrap();
            let mut mus = tr.mu_sequence();
            mus.push(tr.mu_final.unwrap());
            for (k, s) in tr.segments.iter().enumerate() {
                assert_eq!(s.alpha_hat, Some(s.alpha), "{name} segment {k}");
                let bound = s.gamma_bound.unwrap();
                assert!(mus[k + 1] <= bound * mus[k] * (1.0 + 1e-6), "{name} segment {k}: {} > {bound} * {}", mus[k + 1], mus[k]);
            }
        }
    }
}

#[test]
fn median_error_shrinks_with_horizon() {
    let (bank, obs, sched) = five_bus_setup();
    let est = JointEstimator::new(&bank, &obs, &sine(), &sched, Metric::Mae).unwrap();
    let mut medians = Vec::new();
    for k in [5, 10, 20] {
        let mut finals: Vec<f64> = (0..50)
            .map(|seed| {
                let x0 = Vector::from_row_slice(&[2.0, -1.0, 1.0, 2.0]);
                let run = JointRun {
                    modes: sample_switching(&bank.p, k, seed).unwrap(),
                    x0: x0.clone(),
                    e0: x0,
                    noise: NoiseSpec::none(),
                };
                est.run(&run, false).unwrap().mu_final.unwrap()
            })
            .collect();
        finals.sort_by(f64::total_cmp);
        medians.push((finals[24] + finals[25]) / 2.0);
    }
    assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
}

#[test]
fn joint_run_rejects_bad_dimensions() {
    let (bank, obs, sched) = five_bus_setup();
    let run = JointRun {
        modes: vec![Mode(0)],
        x0: Vector::zeros(3),
        e0: Vector::zeros(4),
        noise: NoiseSpec::none(),
    };
    let r = run_joint_estimation(&bank, &obs, &sine(), &sched, &run, Metric::Mae);
    assert!(matches!(r, Err(ObserveError::Dimension(_))));
}

// Step matrix of ż = M z over h via substepped Taylor series.
fn taylor_step(m: &Matrix, h: f64) -> Matrix {
    let sub = 8;
    let dt = h / sub as f64;
    let n = m.nrows();
    let mut sum = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for k in 1..30 {
        term = &term * m * dt / k as f64;
        sum += &term;
    }
    let mut out = Matrix::identity(n, n);
    for _ in 0..sub {
        out = &sum * out;
    }
    out
}

// Truth and estimate propagated side by side in original coordinates.
#[test]
fn error_trajectory_matches_direct_observer_simulation() {
    let (bank, obs, sched) = five_bus_setup();
    let u = sine();
    let exo = u.exosystem();
    let noise = NoiseSpec { sigma: 0.005, seed: 0 };
    let modes = vec![Mode(1), Mode(0), Mode(3)];
    let x0 = Vector::from_row_slice(&[2.0, -1.0, 1.0, 2.0]);
    let run = JointRun {
        modes: modes.clone(),
        x0: x0.clone(),
        e0: x0.clone(),
        noise,
    };
    let tr = run_joint_estimation(&bank, &obs, &u, &sched, &run, Metric::Mae).unwrap();
    assert!(tr.segments.iter().any(|s| s.alpha_hat != Some(s.alpha)), "want a wrong detection");

    let (n, q) = (4, 2);
    let per = sched.per_segment();
    let n0 = sched.n0();
    let mut x = x0.clone();
    let mut xh = Vector::zeros(4);
    for (k, s) in tr.segments.iter().enumerate() {
        let a = bank.get(s.alpha);
        let h = bank.get(s.alpha_hat.unwrap());
        let l = &obs.gains[s.alpha_hat.unwrap().index()].l_full;
        // Window: [x; x̂; w] driven by the same probing input.
        let mut m = Matrix::zeros(2 * n + q, 2 * n + q);
        m.view_mut((0, 0), (n, n)).copy_from(&a.a);
        m.view_mut((0, 2 * n), (n, q)).copy_from(&(&a.b1 * Matrix::from_element(2, 1, 1.0) * &exo.h));
        m.view_mut((n, n), (n, n)).copy_from(&h.a);
        m.view_mut((n, 2 * n), (n, q)).copy_from(&(&h.b1 * Matrix::from_element(2, 1, 1.0) * &exo.h));
        m.view_mut((2 * n, 2 * n), (q, q)).copy_from(&exo.s);
        let step = taylor_step(&m, sched.ts);
        let mut z = Vector::zeros(2 * n + q);
        z.rows_mut(0, n).copy_from(&x);
        z.rows_mut(n, n).copy_from(&xh);
        z.rows_mut(2 * n, q).copy_from(&exo.w0);
        for _ in 0..n0 {
            z = &step * z;
        }
        // Observer on measured output with held noise: [x; x̂; n].
        let p = 1;
        let mut m = Matrix::zeros(2 * n + p, 2 * n + p);
        m.view_mut((0, 0), (n, n)).copy_from(&a.a);
        m.view_mut((n, 0), (n, n)).copy_from(&(l * &a.c));
        m.view_mut((n, n), (n, n)).copy_from(&(&h.a - l * &h.c));
        m.view_mut((n, 2 * n), (n, p)).copy_from(l);
        let step = taylor_step(&m, sched.ts);
        let mut w = Vector::zeros(2 * n + p);
        w.rows_mut(0, 2 * n).copy_from(&z.rows(0, 2 * n));
        for l_idx in n0..per {
            w[2 * n] = noise.sample(0, (k * per + l_idx) as u64);
            w = &step * w;
        }
        x = w.rows(0, n).into_owned();
        xh = w.rows(n, n).into_owned();
        let e_direct = (&x - &xh).norm();
        let e_trace = tr.segments.get(k + 1).map(|s| s.mu.unwrap()).unwrap_or(tr.mu_final.unwrap());
        let scale = x.norm().max(1.0);
        assert!((e_direct - e_trace).abs() < 1e-8 * scale, "segment {k}: {e_direct} vs {e_trace}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn planted_unobservable_subspace_recovered(
        s_entries in prop::collection::vec(-1.0f64..1.0, 25),
        a11 in prop::collection::vec(-2.0f64..2.0, 4),
        a12 in prop::collection::vec(-2.0f64..2.0, 6),
        a22 in prop::collection::vec(-2.0f64..2.0, 9),
        c2 in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        // A = S [[A11, A12], [0, A22]] S⁻¹, C = [0, C2] S⁻¹ hides range(S[:, :2]).
        let s = Matrix::from_row_slice(5, 5, &s_entries) + Matrix::identity(5, 5) * 2.5;
        let s_inv = s.clone().try_inverse().unwrap();
        let mut blk = Matrix::zeros(5, 5);
        blk.view_mut((0, 0), (2, 2)).copy_from(&Matrix::from_row_slice(2, 2, &a11));
        blk.view_mut((0, 2), (2, 3)).copy_from(&Matrix::from_row_slice(2, 3, &a12));
        blk.view_mut((2, 2), (3, 3)).copy_from(&Matrix::from_row_slice(3, 3, &a22));
        let mut cb = Matrix::zeros(1, 5);
        cb.view_mut((0, 2), (1, 3)).copy_from(&Matrix::from_row_slice(1, 3, &c2));
        let a22m = Matrix::from_row_slice(3, 3, &a22);
        let c2m = Matrix::from_row_slice(1, 3, &c2);
        let w_small = matnum::observability_stack(&a22m, &c2m).unwrap();
        let sv = matnum::singular_values(&w_small);
        prop_assume!(sv[2] > 1e-2 * sv[0]);
        let a = &s * blk * &s_inv;
        let c = cb * &s_inv;
        let sub = LtiSubsystem::new("planted", a, Matrix::zeros(5, 1), c).unwrap();
        let d = decompose(&sub).unwrap();
        prop_assert_eq!(d.rank, 3);
        let scale = max_abs(&sub.a).max(1.0);
        prop_assert!(max_abs(&d.a21) < 1e-8 * scale);
        prop_assert!(max_abs(&d.c1) < 1e-8 * scale);
        // ker W equals the planted subspace.
        let planted = s.columns(0, 2).into_owned();
        let resid = &planted - &d.m * (d.m.transpose() * &planted);
        prop_assert!(max_abs(&resid) < 1e-8 * max_abs(&planted));
    }
}
