import math
from dataclasses import replace

import numpy as np
import pytest

from rlsde.coefficients import CoefficientProcessSpec, DiffusionModel, PerturbationModel, sample_coefficient_path
from rlsde.errors import StepTooLargeError
from rlsde.flows import H0Flow
from rlsde.linalg import matrix_exp
from rlsde.propagator import propagate
from rlsde.sde import (
    OUSimConfig,
    conditional_covariance,
    conditional_mean,
    coupled_pair,
    empirical_covariance,
    simulate,
    simulate_em,
    simulate_formula,
)

A2 = np.array([[-1.0, 0.5], [0.0, -2.0]])


def spec(A=A2, B=None, eps=0.0, kind="entrywise-ou", sigma=0.3, flow=None):
    flow = flow or H0Flow.constant(A)
    r = flow.dim
    diff = DiffusionModel.zero(r) if B is None else DiffusionModel("constant-psd", np.asarray(B, dtype=float))
    return CoefficientProcessSpec(flow, PerturbationModel(kind, sigma), diff, eps)


def test_config_validation():
    s = spec()
    with pytest.raises(ValueError):
        OUSimConfig(s, [[1.0, 0.0]], 0.03, 1.0, 10)
    with pytest.raises(ValueError):
        OUSimConfig(s, [[1.0, 0.0, 0.0]], 0.1, 1.0, 10)
    with pytest.raises(ValueError):
        OUSimConfig(s, [[1.0, 0.0]], 0.1, 1.0, 10, method="milstein")


def test_em_noiseless_matches_matrix_exp():
    cfg = OUSimConfig(spec(), [[1.0, 1.0]], 1e-3, 1.0, 3)
    res = simulate_em(cfg)
    ref = matrix_exp(A2, 1.0) @ np.array([1.0, 1.0])
    for X in res.states[0, :, -1]:
        assert np.linalg.norm(X - ref) <= 0.01 * np.linalg.norm(ref)


def test_zero_start_without_noise_stays_zero():
    res = simulate(OUSimConfig(spec(eps=0.5), [[0.0, 0.0]], 0.01, 1.0, 20))
    assert np.all(res.states == 0.0)


def test_scalar_stationary_variance():
    s = spec(A=[[-1.0]], B=[[2.0]])
    res = simulate_em(OUSimConfig(s, [[0.0]], 0.01, 10.0, 10_000, record_stride=1000))
    x = res.states[0, :, -1, 0]
    v = x.var(ddof=1)
    se = math.sqrt(np.var(x**2, ddof=1) / x.size)
    assert abs(v - 1.0) <= 3 * se + 0.01


def test_formula_route_matches_propagator():
    s = spec(eps=0.4)
    cfg = OUSimConfig(s, [[1.0, -1.0]], 0.05, 2.0, 4, record_stride=40)
    res = simulate_formula(cfg)
    for out in res.trajectories():
        path = sample_coefficient_path(s, cfg.grid, cfg.seed, out.coefficient_stream_id[1])
        ref = propagate(path, 0.0, 2.0, cfg.tol).matrix() @ np.array([1.0, -1.0])
        np.testing.assert_allclose(out.states[-1], ref, atol=1e-9)


def test_formula_covariance():
    s = spec(A=-np.eye(2), B=2.0 * np.eye(2))
    cfg = OUSimConfig(s, [[0.0, 0.0]], 0.05, 2.0, 20_000, record_stride=40)
    cov, se = empirical_covariance(simulate_formula(cfg).states[0, :, -1])
    # the left-endpoint sum on the simulation grid is the exact target
    path = sample_coefficient_path(s, cfg.grid, 0, 0)
    target = conditional_covariance(path, np.zeros((2, 2)), 2.0, rule="left")
    assert np.all(np.abs(cov - target) <= 3 * se)
    q = 2 * 0.05 * math.exp(-0.1) * (1 - math.exp(-4.0)) / (1 - math.exp(-0.1))
    np.testing.assert_allclose(target, q * np.eye(2), atol=1e-12)


def test_conditional_covariance_examples():
    grid = np.linspace(0, 2, 201)
    quiet = sample_coefficient_path(spec(eps=0.3), grid, 0, 0)
    np.testing.assert_array_equal(conditional_covariance(quiet, np.zeros((2, 2)), 2.0), np.zeros((2, 2)))
    path = sample_coefficient_path(spec(A=-np.eye(2), B=2.0 * np.eye(2)), grid, 0, 0)
    got = conditional_covariance(path, np.zeros((2, 2)), 2.0, rule="trapezoid")
    np.testing.assert_allclose(got, (1.0 - math.exp(-4.0)) * np.eye(2), atol=1e-4)
    with pytest.raises(ValueError):
        conditional_covariance(path, np.zeros((2, 2)), 1.005)


def test_conditional_mean_noiseless_matches_simulation():
    s = spec(eps=0.5)
    cfg = OUSimConfig(s, [[0.3, 0.7]], 0.02, 1.0, 1, method="solution-formula", seed=4)
    res = simulate(cfg)
    path = sample_coefficient_path(s, cfg.grid, 4, 0)
    np.testing.assert_allclose(conditional_mean(path, [0.3, 0.7], 1.0, cfg.tol), res.states[0, 0, -1], atol=1e-12)


def test_coupled_pair_is_independent_of_diffusion():
    base = OUSimConfig(spec(eps=0.5, B=np.eye(2)), [[0.0, 0.0]], 0.01, 2.0, 16, record_stride=20)
    loud = replace(base, spec=replace(base.spec, diffusion=DiffusionModel("constant-psd", 100.0 * np.eye(2))))
    t1, n1 = coupled_pair(base, [1.0, 0.0], [0.0, 1.0])
    t2, n2 = coupled_pair(loud, [1.0, 0.0], [0.0, 1.0])
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(n1, n2)
    _, same = coupled_pair(base, [0.4, 0.2], [0.4, 0.2])
    assert np.all(same == 0.0)


def test_results_independent_of_workers_and_chunking():
    cfg = OUSimConfig(spec(eps=0.5, B=np.eye(2)), [[1.0, 0.0], [0.0, 1.0]], 0.01, 0.5, 2500, record_stride=10)
    a = simulate(cfg, workers=1)
    b = simulate(cfg, workers=4)
    np.testing.assert_array_equal(a.states, b.states)
    small = simulate(replace(cfg, num_traj=7), workers=1)
    np.testing.assert_array_equal(small.states, a.states[:, :7])


def test_shared_coefficient_stream():
    cfg = OUSimConfig(spec(eps=0.5, B=np.eye(2)), [[1.0, 0.0]], 0.01, 0.5, 5, coefficient_stream=5, seed=3)
    res = simulate(cfg)
    assert all(out.coefficient_stream_id[1] == 5 for out in res.trajectories())
    assert len({out.noise_stream_id for out in res.trajectories()}) == 5


def test_step_too_large():
    with pytest.raises(StepTooLargeError):
        simulate(OUSimConfig(spec(A=-100.0 * np.eye(2)), [[1.0, 0.0]], 0.01, 1.0, 2))
