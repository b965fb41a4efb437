use causex::theory::{
    ensemble, gd_causal, gd_dense, make_linear_problem, summarize, verify_bounds, CausalMode,
};

#[test]
fn loss_never_increases_at_default_step() {
    for seed in 0..5 {
        let p = make_linear_problem(4, 2, 60, 0.5, seed).unwrap();
        let t = gd_dense(&p, 150, p.default_step()).unwrap();
        assert!(!t.diverged);
        let floor = 1e-24 * t.losses[0];
        for w in t.losses.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + floor);
        }
    }
}

#[test]
fn contraction_and_pythagoras_hold() {
    for seed in 0..10 {
        let p = make_linear_problem(5, 3, 100, [0.2, 0.5, 0.8][seed as usize % 3], seed).unwrap();
        let alpha = p.default_step();
        let dense = gd_dense(&p, 200, alpha).unwrap();
        let causal = gd_causal(&p, 200, alpha, CausalMode::MaskedTrajectory).unwrap();
        let r = verify_bounds(&p, &dense, &causal, CausalMode::MaskedTrajectory, alpha).unwrap();
        assert!(r.contraction_all);
        assert!(r.max_pythagoras_rel_error < 1e-10);
        assert!(r.steps.iter().all(|s| s.delta_k <= 1.0 + 1e-12));
        assert!(r.envelope_all);
    }
}

#[test]
fn full_mask_modes_match_dense() {
    let p = make_linear_problem(3, 2, 50, 1.0, 7).unwrap();
    let alpha = p.default_step();
    let dense = gd_dense(&p, 50, alpha).unwrap();
    for mode in [CausalMode::MaskedTrajectory, CausalMode::Projected] {
        let causal = gd_causal(&p, 50, alpha, mode).unwrap();
        assert_eq!(causal.weights, dense.weights);
        let r = verify_bounds(&p, &dense, &causal, mode, alpha).unwrap();
        assert!(r.steps.iter().all(|s| s.xi == 1.0));
    }
}

#[test]
fn projected_descent_reaches_optimum() {
    let p = make_linear_problem(4, 2, 80, 0.3, 3).unwrap();
    let t = gd_causal(&p, 2000, p.default_step(), CausalMode::Projected).unwrap();
    let last = t.weights.last().unwrap();
    assert!((last - &p.w_star).abs().max() < 1e-8);
    assert!(*t.losses.last().unwrap() < 1e-16);
}

#[test]
fn ensemble_has_requested_size_and_exact_identities() {
    let reports = ensemble(30, 100, 100, CausalMode::MaskedTrajectory, 5).unwrap();
    assert_eq!(reports.len(), 30);
    assert!(reports.iter().all(|r| r.n + r.c <= 20));
    let s = summarize(&reports);
    assert_eq!(s.contraction_all, 30);
    assert!(s.pythagoras_max_rel_error < 1e-10);
    assert!((0.0..=1.0).contains(&s.density_bound_fraction));
}

#[test]
fn ensemble_is_reproducible() {
    let a = ensemble(5, 60, 40, CausalMode::Projected, 9).unwrap();
    let b = ensemble(5, 60, 40, CausalMode::Projected, 9).unwrap();
    assert_eq!(a, b);
}
