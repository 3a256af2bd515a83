import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rlsde.coefficients import CoefficientProcessSpec, DiffusionModel, PerturbationModel
from rlsde.errors import EmptyWindowError, EpsilonOneError, GateUnsatisfiedError
from rlsde.flows import H0Flow
from rlsde.stability import (
    CERTIFIED,
    D_FACTOR,
    INCONCLUSIVE,
    VIOLATED,
    certify_as_lyapunov,
    certify_averaged_flow,
    certify_contraction,
    certify_event_probability,
    certify_fluctuation,
    certify_lemma,
    certify_mean_log,
    certify_moment_boundedness,
    certify_moment_window,
    compute_eps_n_nu,
    compute_Tn,
    compute_Tn_eps,
    crude_moment_bound,
    declared_estimates,
    eps_2n_threshold,
    log_moment,
    normal_cdf,
    pathwise_log_norms,
    theorem_window,
    verdict_for,
    wilson,
)

C1 = math.sqrt(2.0 / math.pi)
SCALAR_EST = declared_estimates({1: C1, 2: 1.0, 4: 3**0.25}, 1.0, 1.0)


def scalar(eps, B=None):
    diff = DiffusionModel.zero(1) if B is None else DiffusionModel("constant-psd", [[B]])
    return CoefficientProcessSpec(H0Flow.constant([[-1.0]]), PerturbationModel("frozen-gaussian", 1.0), diff, eps)


# ---------------------------------------------------------------- closed forms


def test_eps_n_nu_examples():
    assert compute_eps_n_nu(1.0, 1.0, 1, 1.0, 1.0) == pytest.approx(0.25)
    assert compute_eps_n_nu(0.5, 0.01, 2, 1.0, 2.0) == pytest.approx(0.0125, rel=1e-12)
    vals = [compute_eps_n_nu(1.0, 0.5, 2, 1.0, c) for c in (1.0, 10.0, 1e6)]
    assert vals == sorted(vals, reverse=True) and vals[-1] < 1e-6


def test_Tn_examples():
    assert compute_Tn(3, 1.0, 0.0) == 0.0
    assert compute_Tn(2, 1.0, 1.0) == pytest.approx(4 * math.log(9), rel=1e-14)
    assert compute_Tn(1, 2.0, 1.0) == pytest.approx(2 * math.log(1 + 2 * math.sqrt(2)), rel=1e-14)


def test_Tn_eps_examples():
    res = compute_Tn_eps(2, 1e-3, 1.0, 0.1, 0.1)
    assert res.value == pytest.approx(math.log(1e6) / (2 * D_FACTOR * 0.1 + 1.0), rel=1e-12)
    assert res.value == pytest.approx(3.794, abs=1e-3)
    assert res.moment_term == pytest.approx(2.5e6, rel=1e-12)
    assert res.binding == "log"
    with pytest.raises(EpsilonOneError):
        compute_Tn_eps(2, 1.0, 1.0, 0.1, 0.1)
    assert compute_Tn_eps(2, 1e-200, 1.0, 0.1, 0.1).value > compute_Tn_eps(2, 1e-100, 1.0, 0.1, 0.1).value
    assert compute_Tn_eps(2, 0.1, 1.0, 0.1, 0.0).binding == "log"


def test_moment_term_binds():
    eps = math.exp(-0.5)
    res = compute_Tn_eps(100, eps, 0.1, 0.0, 1.0)
    assert res.binding == "moment" and res.value == pytest.approx(math.e / 200.0, rel=1e-12)


def test_threshold_self_consistency():
    thr = eps_2n_threshold(2, 1.0, 1.0, 0.1, 0.1)
    T = compute_Tn(2, 1.0, 1.0)
    assert compute_Tn_eps(2, thr / 2, 1.0, 0.1, 0.1).value > T
    assert compute_Tn_eps(2, min(1.0, thr * 1.001), 1.0, 0.1, 0.1).value <= T * (1 + 1e-5)
    assert eps_2n_threshold(2, 1.0, 0.0, 0.1, 0.1) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-8, 0.99), st.floats(1e-8, 0.99), st.integers(1, 8), st.floats(0.1, 3), st.floats(0.01, 3), st.floats(0.01, 3))
def test_Tn_eps_monotone(e1, e2, n, c0, d1, d2):
    lo, hi = sorted((e1, e2))
    assert compute_Tn_eps(n, lo, c0, d1, d2).value >= compute_Tn_eps(n, hi, c0, d1, d2).value
    assert compute_Tn_eps(n + 1, lo, c0, d1, d2).value <= compute_Tn_eps(n, lo, c0, d1, d2).value


def test_crude_bound_examples():
    assert crude_moment_bound(2, 1.5, 0.0, 0.3, 2.0).rhs == pytest.approx(0.5 * math.exp(2 * 0.3 * 2 * 1.5), rel=1e-14)
    assert crude_moment_bound(3, 0.0, 0.4, 1.0, 1.0).rhs == pytest.approx(0.5)
    lb = crude_moment_bound(1, 1.0, 0.1, 1.0, 1.0)
    x = 0.1
    ref = 0.5 * math.exp(2.0) + 0.5 * math.e * math.sqrt(math.e / math.pi) * (
        (1 + math.sqrt(2 * math.e) * x) * math.exp(4 * math.e * x * x) - 1
    )
    assert lb.rhs == pytest.approx(ref, rel=1e-14)
    assert lb.crude == pytest.approx(2 * math.exp(D_FACTOR), rel=1e-14)
    assert lb.crude_valid
    assert not crude_moment_bound(1, 1.0, 2.0, 1.0, 1.0).crude_valid


# ---------------------------------------------------------------- statistics


def test_verdict_rule():
    assert verdict_for(1.0, 0.1, 1.4)[0] == CERTIFIED
    assert verdict_for(1.0, 0.1, 1.2)[0] == INCONCLUSIVE
    assert verdict_for(1.0, 0.1, 0.6)[0] == VIOLATED
    assert verdict_for(1.0, 0.1, 0.6, "lower")[0] == CERTIFIED
    assert verdict_for(1.0, 0.1, 1.4, "lower")[0] == VIOLATED
    assert verdict_for(1.0, 0.1, 0.8, "trend")[0] == CERTIFIED
    assert verdict_for(1.0, 0.1, 0.6, "trend")[0] == VIOLATED
    assert verdict_for(math.nan, 0.1, 1.0)[0] == INCONCLUSIVE
    v, m = verdict_for(1.0, 0.1, 1.5)
    assert m == pytest.approx(0.2)


def test_log_moment_is_overflow_safe():
    logs = np.array([[900.0], [901.0]])
    val, se = log_moment(logs, 16)
    ref = 16 * 900 + math.log((1 + math.exp(16)) / 2)
    assert float(val[0]) == pytest.approx(ref, rel=1e-14)
    assert np.isfinite(se).all()


def test_wilson_interval():
    lo, hi = wilson(0.5, 100)
    assert lo < 0.5 < hi
    assert wilson(0.0, 50)[0] == 0.0 and wilson(1.0, 50)[1] == 1.0


# ---------------------------------------------------------------- scalar oracles


def test_mean_log_scalar_oracle():
    w = theorem_window(H0Flow.constant([[-1.0]]), SCALAR_EST, 1, 0.2, nu=0.5)
    rep = certify_mean_log(w, scalar(0.2), 0.0, 2.0, 4000)
    assert abs(rep.estimate + 2.0) <= 3 * rep.stderr
    assert rep.verdict == CERTIFIED
    again = certify_mean_log(w, scalar(0.2), 0.0, 2.0, 4000)
    assert again == rep


def test_averaged_flow_without_transient():
    w = theorem_window(H0Flow.constant(-2.0 * np.eye(2)), declared_estimates({1: 1.0, 2: 1.0, 4: 1.0}, 1.0, 1.0), 1, 0.1, nu=0.5)
    rep = certify_averaged_flow(w, H0Flow.constant(-2.0 * np.eye(2)), 0.0, 3.0)
    assert rep.verdict == CERTIFIED
    assert rep.margin == pytest.approx(0.5 * 2.0 * 3.0, rel=1e-8)


def test_mean_log_gates():
    flow = H0Flow(-np.eye(2), np.eye(2), 1.0, 1.0)
    spec = CoefficientProcessSpec(flow, PerturbationModel("entrywise-ou", 0.3), DiffusionModel.zero(2), 0.1)
    est = declared_estimates({1: 1.0, 2: 1.0, 4: 1.0}, 1.0, 1.0)
    w = theorem_window(flow, est, 1, 0.1, nu=0.5)
    with pytest.raises(GateUnsatisfiedError):
        certify_mean_log(w, spec, 0.0, 3.0, 10)
    big = theorem_window(flow, est, 1, 0.5, nu=0.5)
    with pytest.raises(GateUnsatisfiedError):
        certify_mean_log(big, spec.with_epsilon(0.5), 0.0, 5.0, 10)


def test_event_probability_scalar_oracle():
    eps = 0.3
    w = theorem_window(H0Flow.constant([[-1.0]]), SCALAR_EST, 1, eps, nu=1.0)
    rep = certify_event_probability(w, scalar(eps), 0.0, [1.0, 2.0], 10_000, nu=1.0)
    assert abs(rep.estimate - normal_cdf(1 / (2 * eps))) <= 3 * rep.stderr
    with pytest.raises(GateUnsatisfiedError):
        certify_event_probability(theorem_window(H0Flow.constant([[-1.0]]), SCALAR_EST, 1, 0.5, nu=1.0), scalar(0.5), 0.0, [1.0], 10)


def test_moment_scalar_oracle():
    eps, n = 0.3, 2
    logs = pathwise_log_norms(scalar(eps), 0.0, [1.0, 2.0], 20_000)
    val, se = log_moment(logs, n)
    for t, v, e in zip((1.0, 2.0), val, se):
        assert abs(v - (-n * t + n * n * eps * eps * t * t / 2)) <= 3 * e


def test_moment_window_constant_flow():
    flow = H0Flow.constant(-np.eye(2))
    spec = CoefficientProcessSpec(flow, PerturbationModel("entrywise-ou", 0.3), DiffusionModel.zero(2), 0.0)
    est = declared_estimates({1: 0.5, 2: 0.5, 4: 0.5}, 1.0, 0.5)
    w = theorem_window(flow, est, 2, 0.0)
    rows = certify_moment_window(w, spec, 0.0, 100, t_grid=[w.T_n, w.T_n + 1.0])
    for r in rows:
        assert r.verdict == CERTIFIED
        assert r.estimate == pytest.approx(-2.0, abs=1e-8)
    with pytest.raises(EmptyWindowError):
        certify_moment_window(theorem_window(flow, est, 2, 0.9), spec.with_epsilon(0.9), 0.0, 10)


def test_lemma_scalar_oracle():
    eps = 0.1
    rows = certify_lemma(scalar(eps), 1.0, 1.0, 0.0, 2, [0.5, 1.0, 2.0], 20_000)
    for r in rows:
        exact = -2 * r.t + 2 * eps * eps * r.t * r.t
        assert abs(r.estimate - exact) <= 3 * r.stderr
        assert r.verdict == CERTIFIED
    with pytest.raises(ValueError):
        certify_lemma(scalar(eps), 1.0, 1.0, 0.0, 2, [0.05], 10)


def test_fluctuation_scalar_oracle():
    # the window constants are declared small only to open [T_2n, T_2n^eps]
    est = declared_estimates({1: C1, 2: 1.0, 4: 0.01}, 0.01, 0.01)
    s, t = 0.5, 1.5
    rows = certify_fluctuation(scalar(0.1), est, s, t, 1, [0.1, 0.05, 0.0], 20_000)
    tau = t - s
    for r in rows[:2]:
        k = r.epsilon * tau
        exact = math.exp(-tau) / r.epsilon * math.exp(k * k / 2) * (2 * normal_cdf(k) - 1)
        assert abs(r.estimate - exact) <= 3 * r.stderr
    assert rows[2].estimate == 0.0
    assert rows[3].quantity == "fluctuation_ratio_gap"
    with pytest.raises(EmptyWindowError):
        certify_fluctuation(scalar(0.1), est, 0.0, 1.0, 1, [0.1], 10)


def test_contraction_examples():
    flow = H0Flow.constant(-np.eye(2))
    spec = CoefficientProcessSpec(flow, PerturbationModel("entrywise-ou", 0.3), DiffusionModel("constant-psd", np.eye(2)), 0.0)
    est = declared_estimates({1: 0.5, 2: 0.5, 4: 0.5}, 1.0, 0.5)
    w = theorem_window(flow, est, 2, 0.0)
    same = certify_contraction(spec, w, [1.0, 0.0], [1.0, 0.0], 10, t_grid=[7.0, 8.0])
    assert all(r.estimate == 0.0 and r.bound == 0.0 for r in same)
    rows = certify_contraction(spec, w, [1.0, 0.0], [0.0, 1.0], 10, t_grid=[7.0, 8.0])
    for r in rows:
        assert r.estimate == pytest.approx(math.exp(-r.t) * math.sqrt(2), rel=1e-6)
        assert r.verdict == CERTIFIED


def test_moment_boundedness_noiseless():
    flow = H0Flow.constant(-np.eye(2))
    spec = CoefficientProcessSpec(flow, PerturbationModel("entrywise-ou", 0.3), DiffusionModel.zero(2), 0.0)
    est = declared_estimates({1: 0.5, 2: 0.5, 4: 0.5, 8: 0.5}, 1.0, 0.5)
    rows = certify_moment_boundedness(spec, est, [1.0, 0.0], 2, 10, t_grid=[9.0, 10.0, 11.0])
    for r in rows:
        if r.quantity == "kappa_hat":
            assert r.estimate == pytest.approx(math.exp(-r.t) - math.exp(-r.t / 4), abs=1e-8)
    assert next(r for r in rows if r.quantity == "kappa_max").estimate == 0.0
    with pytest.raises(ValueError):
        certify_moment_boundedness(spec, est, [1.0, 0.0], 1, 10, t_grid=[5.0])


def test_moment_boundedness_scalar_stationary():
    est = declared_estimates({1: C1, 2: 1.0, 4: 0.01, 8: 0.01}, 0.01, 0.01)
    rows = certify_moment_boundedness(scalar(0.0, B=2.0), est, [0.0], 2, 4000, t_grid=[4.0, 6.0, 8.0])
    kmax = next(r for r in rows if r.quantity == "kappa_max")
    assert kmax.verdict == CERTIFIED and kmax.estimate <= 1.0 + 3 * kmax.stderr + 0.02
    assert next(r for r in rows if r.quantity == "kappa_trend").verdict == CERTIFIED


def test_as_lyapunov_scalar_oracle():
    rows = certify_as_lyapunov(scalar(0.2), SCALAR_EST, 0.0, [1.0, 2.0], [0.2, 0.1], 2, 10_000)
    for r in rows[:2]:
        exact = 1.0 - normal_cdf(1 / (2 * r.epsilon))
        assert abs(r.estimate - exact) <= 3 * r.stderr
    assert rows[2].quantity == "markov_slope"
    zero = certify_as_lyapunov(scalar(0.0), SCALAR_EST, 0.0, [1.0], [0.0], 2, 50)
    assert len(zero) == 1 and zero[0].estimate == 0.0
    flow = H0Flow(-np.eye(1), np.eye(1), 1.0, 1.0)
    with pytest.raises(GateUnsatisfiedError):
        certify_as_lyapunov(CoefficientProcessSpec(flow, PerturbationModel("frozen-gaussian", 1.0), DiffusionModel.zero(1), 0.1), SCALAR_EST, 0.0, [1.0], [0.1], 2, 10)
