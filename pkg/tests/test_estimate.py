from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracle
from modrenew import estimate as E
from modrenew.duration import CENSORED, from_arrays, to_duration
from modrenew.kernels import KernelSpec, kernel_l2
from modrenew.model import (
    CensoringLaw,
    CovariateLaw,
    Dist,
    ModelSpec,
    WeibullHazard,
    renewal_graph,
    simulate_cohort,
)


def _terms(data, spec, transitions=None):
    return [E.TransitionTerm(h, spec, None) for h in (transitions or data.transitions)]


def _oracle_terms(terms):
    return [(t.h, t.kernel, t.index_map) for t in terms]


def _two_subject(gaps, events, xs, z=(0.0, 0.0)):
    return from_arrays([0, 1], [0, 0], [0, 0], [0 if e else CENSORED for e in events], gaps, xs,
                       np.array(z)[:, None], ("0",), n=2)


# ---------------------------------------------------------------------------
# risk sums


def test_risk_eval_single_term_hand_value():
    spec = KernelSpec(1, 0.2, 1.0)
    data = _two_subject([1.0, 2.0], [True, True], [0.5, 0.5])
    r = E.risk_eval(data, 0, (0, 0), 1.5, [0.3], 0.5, spec)
    assert r.s0 == pytest.approx(0.75 / 0.2, rel=1e-14)
    assert r.s1[0] == 0.0
    assert r.s2[0, 0] == 0.0


def test_risk_eval_empty_risk_set_is_zero():
    spec = KernelSpec(2, 0.2, 1.0)
    data = _two_subject([1.0, 2.0], [True, True], [0.5, 0.4], z=(1.0, -2.0))
    r = E.risk_eval(data, None, (0, 0), 3.0, [0.3], 0.5, spec)
    assert r.s0 == 0.0 and np.all(r.s1 == 0.0) and np.all(r.s2 == 0.0)


def test_risk_eval_zero_beta_ignores_covariates():
    rng = np.random.default_rng(0)
    data = oracle.random_dataset(rng)
    spec = KernelSpec(2, 0.3, 1.0)
    r1 = E.risk_eval(data, None, (0, 1), 0.1, np.zeros(2), 0.5, spec)
    shifted = from_arrays(data.subject, data.epoch, data.from_state, data.to_state, data.gap, data.x,
                          rng.normal(size=data.z.shape), data.states, n=data.n)
    r2 = E.risk_eval(shifted, None, (0, 1), 0.1, np.zeros(2), 0.5, spec)
    assert r1.s0 == pytest.approx(r2.s0, rel=1e-14)


def test_risk_eval_matches_oracle_and_s2_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(20):
        data = oracle.random_dataset(rng)
        spec = oracle.kernel_for(rng)
        beta = rng.normal(size=2)
        u, x = float(rng.uniform(0, 1.5)), float(rng.uniform(0.05, 0.95))
        excl = int(rng.integers(0, data.n))
        r = E.risk_eval(data, excl, (0, 1), u, beta, x, spec)
        s0, s1, s2, _, _ = oracle.loo_sums(data, excl, (0, 1), u, beta, x, spec)
        np.testing.assert_allclose([r.s0, *r.s1, *r.s2.ravel()], [s0, *s1, *s2.ravel()], rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(r.s2, r.s2.T)


# ---------------------------------------------------------------------------
# scores and information against brute force


@pytest.mark.parametrize("seed", range(25))
def test_scores_and_info_match_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    data = oracle.random_dataset(rng, ties=seed % 3 == 0)
    spec = oracle.kernel_for(rng)
    beta = rng.normal(scale=0.7, size=2)
    terms = _terms(data, spec, [(0, 0), (0, 1), (1, 0), (1, 1)])
    for kind, score_fn, info_fn in (("m", E.score_m, E.info_m), ("pl", E.score_pl, E.info_pl)):
        ref_s, ref_i, ref_skip = oracle.score_info(data, beta, kind, _oracle_terms(terms))
        sys_ = E.ScoreSystem(data, terms, kind)
        ev = sys_.evaluate(beta, check_skips=False)
        np.testing.assert_allclose(ev.score, ref_s, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(ev.info, ref_i, rtol=1e-12, atol=1e-12)
        assert ev.skipped == ref_skip
        if ev.skip_fraction <= E.MAX_SKIP_FRACTION:
            np.testing.assert_allclose(score_fn(data, beta, terms).score, ref_s, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(info_fn(data, beta, terms), ref_i, rtol=1e-12, atol=1e-12)


def test_per_subject_event_sums_add_up_to_score():
    rng = np.random.default_rng(7)
    data = oracle.random_dataset(rng)
    terms = _terms(data, KernelSpec(2, 0.4, 1.0))
    ev = E.ScoreSystem(data, terms, "m").evaluate(np.array([0.2, -0.1]), check_skips=False)
    np.testing.assert_allclose(ev.per_subject.sum(axis=0) / data.n, ev.score, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["m", "pl"])
def test_info_is_negative_score_jacobian(seed, kind):
    rng = np.random.default_rng(300 + seed)
    data = oracle.random_dataset(rng, n_max=8, max_records=20)
    terms = _terms(data, oracle.kernel_for(rng))
    beta = rng.normal(scale=0.5, size=2)
    # the information is the Jacobian with the usable event set held fixed
    sys_ = E.ScoreSystem(data, terms, kind)
    sys_ = sys_.with_usable(sys_.usable_sets(beta))
    info = sys_.evaluate(beta, check_skips=False).info
    step = 1e-5
    jac = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        jac[:, k] = -(sys_.evaluate(beta + e, False).score - sys_.evaluate(beta - e, False).score) / (2 * step)
    scale = max(np.max(np.abs(info)), 1e-3)  # a degenerate (near-zero) info has no relative scale
    assert np.max(np.abs(jac - info)) / scale < 1e-6


def test_zero_covariates_give_zero_score_and_info():
    rng = np.random.default_rng(3)
    data = oracle.random_dataset(rng)
    data0 = from_arrays(data.subject, data.epoch, data.from_state, data.to_state, data.gap, data.x,
                        np.zeros_like(data.z), data.states, n=data.n)
    terms = _terms(data0, KernelSpec(2, 0.4, 1.0))
    for kind in ("m", "pl"):
        ev = E.ScoreSystem(data0, terms, kind).evaluate(np.array([0.4, 1.0]), check_skips=False)
        assert np.all(ev.score == 0.0)
        assert np.all(ev.info == 0.0)


def test_identical_covariates_give_zero_pl_score():
    rng = np.random.default_rng(4)
    data = oracle.random_dataset(rng)
    z = np.tile([0.3, -1.2], (len(data), 1))
    same = from_arrays(data.subject, data.epoch, data.from_state, data.to_state, data.gap, data.x, z,
                       data.states, n=data.n)
    ev = E.ScoreSystem(same, _terms(same, KernelSpec(2, 0.4, 1.0)), "pl").evaluate(np.array([0.5, 0.5]), False)
    np.testing.assert_allclose(ev.score, 0.0, atol=1e-14)


def test_info_pl_positive_with_mixed_risk_set():
    data = from_arrays([0, 1, 2], [0, 0, 0], [0, 0, 0], [0, 0, CENSORED], [1.0, 2.0, 3.0], [0.5, 0.52, 0.48],
                       np.array([[0.0], [1.0], [0.0]]), ("0",), n=3)
    info = E.info_pl(data, [0.2], KernelSpec(1, 0.2, 1.0))
    assert info[0, 0] > 0


def _shift(data, c):
    return from_arrays(data.subject, data.epoch, data.from_state, data.to_state, data.gap, data.x, data.z + c,
                       data.states, n=data.n)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10_000), c=st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_location_shift_pl_invariant_m_rescaled(seed, c):
    """Shifting every Z by c leaves the PL score and information unchanged.

    The M score scales by f = exp(beta'c) and its information becomes
    f (info - score c'), so both agree up to the factor f at a root.
    """
    rng = np.random.default_rng(seed)
    data = oracle.random_dataset(rng)
    spec = oracle.kernel_for(rng)
    beta = rng.normal(scale=0.5, size=2)
    c = np.array(c)
    terms = _terms(data, spec, [(0, 0), (0, 1), (1, 0), (1, 1)])
    shifted = _shift(data, c)
    a = E.ScoreSystem(data, terms, "pl").evaluate(beta, False)
    b = E.ScoreSystem(shifted, terms, "pl").evaluate(beta, False)
    np.testing.assert_allclose(b.score, a.score, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(b.info, a.info, rtol=1e-9, atol=1e-10)
    a = E.ScoreSystem(data, terms, "m").evaluate(beta, False)
    b = E.ScoreSystem(shifted, terms, "m").evaluate(beta, False)
    f = np.exp(beta @ c)
    np.testing.assert_allclose(b.score, f * a.score, rtol=1e-9, atol=1e-10 * f)
    np.testing.assert_allclose(b.info, f * (a.info - np.outer(a.score, c)), rtol=1e-9, atol=1e-10 * f)


# ---------------------------------------------------------------------------
# fitting


@pytest.fixture(scope="module")
def renewal_data():
    spec = ModelSpec(renewal_graph(), np.array([0.5]), {(0, 0): WeibullHazard(1, 2, 2.0)}, {(0, 0): 4 * np.e**2},
                     CovariateLaw((Dist("normal", (0, 1)),), x_loading=(1.0,)), tau0=2.0, tau=1.0,
                     censoring=CensoringLaw("horizon", Dist("uniform", (2, 4))))
    return to_duration(simulate_cohort(spec, 300, 11), tau0=2.0)


@pytest.mark.parametrize("kind", ["m", "pl"])
def test_solve_reaches_tolerance_and_fixed_point(renewal_data, kind):
    fit = E.solve(renewal_data, kind, tau=1.0, c=2.0)
    assert fit.final_score_norm < 1e-8
    again = E.solve(renewal_data, kind, tau=1.0, c=2.0, beta_init=fit.beta_hat)
    assert again.iterations <= 1
    np.testing.assert_allclose(again.beta_hat, fit.beta_hat, atol=1e-9)
    cov = fit.covariance
    np.testing.assert_array_equal(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) >= 0)


def test_location_shift_leaves_fitted_beta_unchanged(renewal_data):
    for kind in ("m", "pl"):
        a = E.solve(renewal_data, kind, tau=1.0, c=2.0).beta_hat
        b = E.solve(_shift(renewal_data, 2.5), kind, tau=1.0, c=2.0).beta_hat
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_zero_covariates_raise_no_contrast(renewal_data):
    data0 = from_arrays(renewal_data.subject, renewal_data.epoch, renewal_data.from_state, renewal_data.to_state,
                        renewal_data.gap, renewal_data.x, np.zeros_like(renewal_data.z), renewal_data.states,
                        n=renewal_data.n)
    for kind in ("m", "pl", "naive"):
        with pytest.raises(E.NoContrastError):
            E.solve(data0, kind, tau=1.0)


def test_tiny_bandwidth_raises_bandwidth_error(renewal_data):
    with pytest.raises(E.BandwidthError):
        E.solve(renewal_data, "pl", KernelSpec(2, 1e-5, 1.0))


def test_covariance_m_degenerate_meat_warns():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        cov = E.covariance_m(np.eye(1), np.zeros((5, 1)), 5)
    assert cov[0, 0] == 0.0


def test_covariance_pl_is_inverse_information_over_n():
    info = np.array([[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(E.covariance_pl(info, 10), np.linalg.inv(info) / 10, rtol=1e-14)


def test_wald_interval_brackets_estimate(renewal_data):
    fit = E.solve(renewal_data, "pl", tau=1.0, c=2.0)
    lo, hi = fit.wald_interval(0.95)
    assert lo[0] < fit.beta_hat[0] < hi[0]
    np.testing.assert_allclose(hi - lo, 2 * 1.959963984540054 * fit.stderr, rtol=1e-12)


def test_newton_failure_carries_trace(renewal_data):
    with pytest.raises(E.ConvergenceError) as exc:
        E.solve(renewal_data, "m", tau=1.0, max_iter=0, beta_init=[3.0])
    assert len(exc.value.trace) >= 1


# ---------------------------------------------------------------------------
# naive calendar-time comparator


def test_naive_cox_matches_textbook_cox_on_single_spells():
    sm = pytest.importorskip("statsmodels.duration.hazard_regression")
    rng = np.random.default_rng(5)
    n = 150
    z = rng.normal(size=(n, 2))
    t = rng.exponential(1 / np.exp(z @ [0.7, -0.4]))
    c = rng.exponential(2.0, n)
    ev = t <= c
    data = from_arrays(np.arange(n), np.zeros(n, int), np.zeros(n, int), np.where(ev, 1, CENSORED),
                       np.minimum(t, c), rng.uniform(0, 1, n), z, ("0", "1"), n=n)
    fit = E.solve(data, "naive")
    ref = sm.PHReg(np.minimum(t, c), z, status=ev.astype(int), ties="breslow").fit()
    np.testing.assert_allclose(fit.beta_hat, ref.params, atol=1e-7)
    ev0 = E.naive_cox_score(data, ref.params)
    np.testing.assert_allclose(ev0.score, 0.0, atol=1e-7)


def test_naive_cox_zero_covariates_zero_score(renewal_data):
    ev = E.naive_cox_score(_shift(renewal_data, -renewal_data.z), [0.3])
    assert np.all(ev.score == 0.0)


# ---------------------------------------------------------------------------
# conditional Aalen-Nelson estimator


def test_aalen_nelson_hand_example_with_guard():
    spec = KernelSpec(1, 0.2, 1.0)
    data = _two_subject([1.0, 0.5], [True, True], [0.5, 0.5])
    curve = E.aalen_nelson(data, (0, 0), [0.0], 0.5, spec, [0.25, 0.5, 1.0, 10.0], strict=False)
    np.testing.assert_allclose(curve.raw, [0.0, 0.5, 0.5, 0.5], rtol=1e-14)
    assert curve.skipped == 1


def test_aalen_nelson_no_events_is_zero():
    data = _two_subject([1.0, 0.5], [False, False], [0.5, 0.5])
    curve = E.aalen_nelson(data, (0, 0), [0.0], 0.5, KernelSpec(2, 0.2, 1.0), [0.0, 1.0, 2.0])
    assert np.all(curve.values == 0.0) and np.all(curve.stderr == 0.0)


@pytest.mark.parametrize("seed", range(25))
def test_aalen_nelson_matches_brute_force(seed):
    rng = np.random.default_rng(500 + seed)
    data = oracle.random_dataset(rng, ties=seed % 2 == 0)
    spec = oracle.kernel_for(rng)
    beta = rng.normal(scale=0.5, size=2)
    grid = np.linspace(0, 2.5, 11)
    for h in ((0, 0), (0, 1)):
        for x in (0.05, float(rng.uniform(0.05, 0.95)), 0.5, 0.97):
            curve = E.aalen_nelson(data, h, beta, x, spec, grid, strict=False)
            est, var, skipped = oracle.aalen_nelson(data, h, beta, x, spec, grid)
            np.testing.assert_allclose(curve.raw, est, rtol=1e-12, atol=1e-12)
            ref_se = np.sqrt(np.clip(curve.d_pq / (data.n * spec.bandwidth) * var, 0, None))
            np.testing.assert_allclose(curve.stderr, ref_se, rtol=1e-12, atol=1e-12)
            assert curve.skipped == skipped


def test_aalen_nelson_duplicated_sample_matches_brute_force():
    rng = np.random.default_rng(9)
    data = oracle.random_dataset(rng, n_max=4)
    m = data.n
    dup = from_arrays(np.concatenate([data.subject, data.subject + m]), np.tile(data.epoch, 2),
                      np.tile(data.from_state, 2), np.tile(data.to_state, 2), np.tile(data.gap, 2),
                      np.tile(data.x, 2), np.vstack([data.z, data.z]), data.states, n=2 * m)
    spec = KernelSpec(2, 0.3, 1.0)
    grid = np.linspace(0, 2.5, 6)
    beta = np.array([0.3, -0.2])
    a = E.aalen_nelson(dup, (0, 1), beta, 0.4, spec, grid, strict=False)
    est, _, _ = oracle.aalen_nelson(dup, (0, 1), beta, 0.4, spec, grid)
    np.testing.assert_allclose(a.raw, est, rtol=1e-12, atol=1e-12)


def test_interior_stderr_uses_epanechnikov_l2_constant():
    spec = KernelSpec(1, 0.2, 1.0)
    data = _two_subject([1.0, 0.5], [True, True], [0.5, 0.5])
    curve = E.aalen_nelson(data, (0, 0), [0.0], 0.5, spec, [1.0], strict=False)
    assert curve.d_pq == pytest.approx(0.6, abs=1e-12)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10_000), c=st.floats(0.1, 10.0))
def test_aalen_nelson_monotone_and_gap_scale_equivariant(seed, c):
    rng = np.random.default_rng(seed)
    data = oracle.random_dataset(rng, n_max=6)
    spec = oracle.kernel_for(rng)
    beta = rng.normal(scale=0.5, size=2)
    grid = np.linspace(0, 2.5, 9)
    x = float(rng.uniform(0.05, 0.95))
    curve = E.aalen_nelson(data, (0, 1), beta, x, spec, grid, strict=False)
    assert curve.values[0] == 0.0
    assert np.all(np.diff(curve.values) >= 0)
    scaled = from_arrays(data.subject, data.epoch, data.from_state, data.to_state, data.gap * c, data.x, data.z,
                         data.states, n=data.n)
    other = E.aalen_nelson(scaled, (0, 1), beta, x, spec, grid * c, strict=False)
    np.testing.assert_allclose(other.raw, curve.raw, rtol=1e-12, atol=1e-12)


def test_hazard_surface_shapes_and_grid_validation(renewal_data):
    spec = KernelSpec(2, 0.1, 1.0)
    surf = E.hazard_surface(renewal_data, (0, 0), [0.5], spec, np.linspace(0, 2, 5), [0.05, 0.5, 0.95])
    assert surf.values.shape == (5, 3)
    assert np.all(surf.values[0] == 0.0)
    assert surf.d_pq_used[0, 0] != surf.d_pq_used[0, 1]
    assert surf.d_pq_used[0, 1] == pytest.approx(kernel_l2(1, 1, 2), rel=1e-12)
    with pytest.raises(ValueError):
        E.hazard_surface(renewal_data, (0, 0), [0.5], spec, [0.0, 3.0], [0.5])
    with pytest.raises(ValueError):
        E.hazard_surface(renewal_data, (0, 0), [0.5], spec, [0.0, 1.0], [1.0])


# ---------------------------------------------------------------------------
# simulation oracle


def test_pl_estimator_in_simulation_small_bias_and_calibrated_se():
    """alpha = exp(x), n = 400: bias well below the sampling SD and SEs match the spread.

    The smoothed partial likelihood carries a ratio bias of order 1/(n a), so
    at this n the mean is close to, but not exactly on, beta_0.
    """
    spec = ModelSpec(renewal_graph(), np.array([0.5]), {(0, 0): WeibullHazard(1, 1, 1.0)}, {(0, 0): np.e},
                     CovariateLaw((Dist("normal", (0, 1)),)), tau0=3.0, tau=1.0,
                     censoring=CensoringLaw("horizon", Dist("uniform", (2, 4))))
    est, se = [], []
    for rep in range(200):
        data = to_duration(simulate_cohort(spec, 400, 10_000 + rep), tau0=3.0)
        fit = E.solve(data, "pl", tau=1.0, c=2.0, influence=False)
        est.append(fit.beta_hat[0])
        se.append(fit.stderr[0])
    est = np.array(est)
    sd = est.std(ddof=1)
    assert abs(est.mean() - 0.5) < 0.5 * sd
    assert abs(sd / np.mean(se) - 1.0) < 0.15


def test_pl_fit_recovers_when_initial_usable_set_has_a_pole():
    # with the set chosen at beta = 0, one event's risk sum changes sign near
    # beta = 0.97, beyond the root at 0.79 of the set usable there
    import configparser

    import test_cli
    from modrenew.config import model_spec
    from modrenew.multistate import MultiFitConfig, TransitionConfig, fit_multistate

    parser = configparser.ConfigParser()
    parser.read_string(test_cli.ILLNESS_DEATH)
    model = model_spec(parser)
    data = to_duration(simulate_cohort(model, 120, 5), tau0=3.0, states=model.graph.states)
    config = MultiFitConfig([TransitionConfig(h) for h in data.transitions], kind="pl", tau=1.0)
    terms = E.make_terms(data, "pl", transitions=data.transitions, tau=1.0)
    system = E.ScoreSystem(data, terms, "pl")
    with pytest.raises(E.ConvergenceError):
        E.newton(system.with_usable(system.usable_sets(np.zeros(1))), np.zeros(1))
    fit = fit_multistate(data, config)
    assert fit.final_score_norm < 1e-8
    settled = system.with_usable(system.usable_sets(fit.beta_hat))
    assert abs(settled.evaluate(fit.beta_hat, check_skips=False).score[0]) < 1e-8
