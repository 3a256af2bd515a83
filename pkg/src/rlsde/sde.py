"""Simulation of ``dX = A^eps_t X dt + (B^eps_t)^{1/2} dW`` with random coefficients.

Two routes share the same coefficient path and the same Gaussian increments,
so they can be compared trajectory by trajectory:

* ``euler-maruyama``: ``X_{k+1} = X_k + A_k X_k dt + B_k^{1/2} sqrt(dt) xi_k``
* ``solution-formula``: ``X_{k+1} = E_{t_k, t_{k+1}} (X_k + B_k^{1/2} sqrt(dt) xi_k)``,
  which unrolls to ``E_{0,t} x0 + sum_k E_{t_k,t} B_k^{1/2} sqrt(dt) xi_k``.

Coefficients come from stream domain ``rng.COEFFICIENT``, increments from
``rng.NOISE`` and random initial states from ``rng.INITIAL``; the three are
independent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import rng
from .coefficients import CoefficientBatch, CoefficientProcessSpec, PathRealization, sample_coefficients
from .errors import StepTooLargeError
from .linalg import as_psd, principal_sqrt
from .propagator import DEFAULT_TOL, interval_propagators, propagate

METHODS = ("euler-maruyama", "solution-formula")
CHUNK = 1024


@dataclass(frozen=True)
class OUSimConfig:
    """Simulation request.

    Every trajectory is run once per entry of ``x0_list`` on identical
    coefficient and noise streams.  Trajectory ``i`` normally owns coefficient
    stream ``i``; with ``coefficient_stream`` set, all trajectories share that
    one coefficient path and differ only in their noise.  When ``initial_cov`` is given the initial
    state is ``x0 + initial_cov^{1/2} z`` with ``z`` from the initial-state
    stream (shared across ``x0_list`` entries).
    """

    spec: CoefficientProcessSpec
    x0_list: Sequence[Sequence[float]]
    dt: float
    horizon: float
    num_traj: int
    seed: int = 0
    method: str = "euler-maruyama"
    initial_cov: np.ndarray | None = None
    record_stride: int = 1
    tol: float = 1e-9
    record_steps: tuple[int, ...] | None = None
    coefficient_stream: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not (self.dt > 0 and self.horizon > 0 and self.num_traj >= 1):
            raise ValueError("dt, horizon and num_traj must be positive")
        steps = round(self.horizon / self.dt)
        if steps < 1 or abs(steps * self.dt - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise ValueError("horizon must be a multiple of dt")
        x0 = np.atleast_2d(np.asarray(self.x0_list, dtype=float))
        if x0.shape[1] != self.spec.dim:
            raise ValueError(f"initial states must have dimension {self.spec.dim}")
        object.__setattr__(self, "x0_list", x0)
        if self.initial_cov is not None:
            object.__setattr__(self, "initial_cov", as_psd(self.initial_cov, "initial_cov"))
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if self.record_steps is not None:
            steps = np.unique(np.asarray(self.record_steps, dtype=np.int64))
            if steps.size == 0 or steps[0] < 0 or steps[-1] > self.steps:
                raise ValueError("record_steps must lie in [0, steps]")
            object.__setattr__(self, "record_steps", tuple(int(k) for k in steps))

    @property
    def steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def record_index(self) -> np.ndarray:
        if self.record_steps is not None:
            return np.asarray(self.record_steps, dtype=np.int64)
        idx = np.arange(0, self.steps + 1, self.record_stride)
        return idx if idx[-1] == self.steps else np.append(idx, self.steps)


@dataclass(frozen=True)
class TrajectoryOutput:
    times: np.ndarray
    states: np.ndarray
    coefficient_stream_id: tuple[int, int]
    noise_stream_id: tuple[int, int]


@dataclass
class SimulationResult:
    """States of shape (len(x0_list), num_traj, len(times), r)."""

    times: np.ndarray
    states: np.ndarray
    seed: int
    stream_ids: np.ndarray = field(repr=False)
    coefficient_ids: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.coefficient_ids is None:
            self.coefficient_ids = self.stream_ids

    def trajectories(self, x0_index: int = 0) -> list[TrajectoryOutput]:
        return [
            TrajectoryOutput(self.times, self.states[x0_index, i], (rng.COEFFICIENT, int(cid)), (rng.NOISE, int(sid)))
            for i, (cid, sid) in enumerate(zip(self.coefficient_ids, self.stream_ids))
        ]


def drift_norm_estimate(spec: CoefficientProcessSpec) -> float:
    """Rough ceiling on ``||A^eps_t||``: flow bound plus a 3-sigma entrywise perturbation."""
    r = spec.dim
    return spec.flow.sup_norm(0.0) + spec.epsilon * 3.0 * spec.perturbation.entry_std * r


def check_step(cfg: OUSimConfig) -> None:
    bound = drift_norm_estimate(cfg.spec)
    if cfg.dt * bound > 0.5:
        raise StepTooLargeError(f"dt = {cfg.dt} exceeds 0.5 / max||A|| ~ {0.5 / bound:.4g}")


def _initial_states(cfg: OUSimConfig, ids: np.ndarray) -> np.ndarray:
    J, r = cfg.x0_list.shape
    X = np.broadcast_to(cfg.x0_list[:, None, :], (J, ids.size, r)).copy()
    if cfg.initial_cov is not None:
        z = rng.normals(cfg.seed, rng.INITIAL, ids, np.arange(r))
        X += (z @ principal_sqrt(cfg.initial_cov).T)[None]
    return X


def _diffusion_root(batch: CoefficientBatch, u: float, cache: dict) -> np.ndarray:
    diff = batch.spec.diffusion
    if diff.kind == "constant-psd":
        if "const" not in cache:
            cache["const"] = principal_sqrt(diff.B0)
        return cache["const"]
    return principal_sqrt(batch.diffusion_at(u))


def _simulate_chunk(cfg: OUSimConfig, ids: np.ndarray) -> np.ndarray:
    r = cfg.spec.dim
    grid = cfg.grid
    K = cfg.steps
    coef_ids = ids if cfg.coefficient_stream is None else np.full_like(ids, cfg.coefficient_stream)
    batch = sample_coefficients(cfg.spec, grid, cfg.seed, coef_ids)
    X = _initial_states(cfg, ids)
    rec = cfg.record_index
    out = np.empty((X.shape[0], ids.size, rec.size, r))
    slot = 0
    if rec[0] == 0:
        out[:, :, 0] = X
        slot = 1
    if slot == rec.size:
        return out
    noiseless = cfg.spec.diffusion.is_zero
    sqdt = math.sqrt(cfg.dt)
    cache: dict = {}
    phis = interval_propagators(batch, grid, cfg.tol) if cfg.method == "solution-formula" else None
    for k in range(K):
        t = float(grid[k])
        if noiseless:
            G = 0.0
        else:
            xi = rng.normals(cfg.seed, rng.NOISE, ids, k * r + np.arange(r))
            root = _diffusion_root(batch, t, cache)
            G = (root @ xi[..., None])[..., 0] * sqdt if root.ndim == 3 else xi @ root.T * sqdt
        if phis is None:
            A = batch.matrix_at(t)
            X = X + (A @ X[..., None])[..., 0] * cfg.dt + G
        else:
            _, phi = next(phis)
            X = (phi @ (X + G)[..., None])[..., 0]
        if rec[slot] == k + 1:
            out[:, :, slot] = X
            slot += 1
            if slot == rec.size:
                break
    return out


def simulate(cfg: OUSimConfig, workers: int | None = None) -> SimulationResult:
    """Run ``cfg.num_traj`` trajectories with ``cfg.method``.

    Raises:
        StepTooLargeError: ``dt`` is too coarse for the drift magnitude.
    """
    check_step(cfg)
    ids = np.arange(cfg.num_traj)
    parts = rng.map_chunks(lambda c: _simulate_chunk(cfg, c), ids, CHUNK, workers)
    states = np.concatenate(parts, axis=1)
    coef_ids = ids if cfg.coefficient_stream is None else np.full_like(ids, cfg.coefficient_stream)
    return SimulationResult(cfg.grid[cfg.record_index], states, cfg.seed, ids, coef_ids)


def simulate_em(cfg: OUSimConfig, workers: int | None = None) -> SimulationResult:
    return simulate(_with_method(cfg, "euler-maruyama"), workers)


def simulate_formula(cfg: OUSimConfig, workers: int | None = None) -> SimulationResult:
    return simulate(_with_method(cfg, "solution-formula"), workers)


def _with_method(cfg: OUSimConfig, method: str) -> OUSimConfig:
    return cfg if cfg.method == method else replace(cfg, method=method)


def coupled_pair(cfg: OUSimConfig, x1, x2, workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``||X^{x1}_t - X^{x2}_t||`` per trajectory and recorded time.

    Both trajectories share the coefficient path and the noise, so the
    additive noise cancels and the difference obeys the noiseless recursion
    of the chosen method started from ``x1 - x2``; that recursion is what is
    integrated here, which keeps the result exactly independent of ``B``.
    Returns ``(times, norms)`` with norms of shape (num_traj, len(times)).
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    check_step(cfg)
    r = cfg.spec.dim
    zero = cfg.spec.diffusion.zero(r)
    diff_cfg = replace(cfg, spec=replace(cfg.spec, diffusion=zero), x0_list=[x1 - x2], initial_cov=None)
    res = simulate(diff_cfg, workers)
    return res.times, np.linalg.norm(res.states[0], axis=-1)


def conditional_mean(path, x0, t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``E(X_t | F_t) = E_{0,t} x0`` for a given coefficient path (or batch)."""
    P = propagate(path, 0.0, t, tol)
    return (P.matrix() @ np.asarray(x0, dtype=float)[..., None])[..., 0]


def conditional_covariance(path, C0, t: float, rule: str = "left", tol: float = DEFAULT_TOL) -> np.ndarray:
    """``E_t C0 E_t' + sum_k E_{t_k,t} B_{t_k} E_{t_k,t}' dt_k`` on the path grid.

    ``rule='left'`` is the Ito left-endpoint sum, which is exactly the
    covariance produced by the solution-formula simulator on the same grid;
    ``rule='trapezoid'`` is second-order accurate for the time integral.
    """
    if rule not in ("left", "trapezoid"):
        raise ValueError("rule must be 'left' or 'trapezoid'")
    grid = np.asarray(path.grid, dtype=float)
    k_end = int(np.searchsorted(grid, t - 1e-12 * max(1.0, t)))
    if k_end >= grid.size or not math.isclose(grid[k_end], t, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError("t must be a grid point of the path")
    C0 = as_psd(C0, "C0")
    sub = grid[: k_end + 1]
    if isinstance(path, PathRealization):
        B_nodes = path.B_values[: k_end + 1][:, None]
        batched = False
    elif isinstance(path, CoefficientBatch):
        B_nodes = np.stack([path.diffusion_at(float(u)) for u in sub])
        batched = True
    else:
        raise TypeError("path must be a PathRealization or CoefficientBatch")
    P = np.broadcast_to(C0, B_nodes.shape[1:]).copy()
    dts = np.diff(sub)
    if k_end > 0:
        for k, phi in interval_propagators(path, sub, tol):
            if rule == "left":
                P = phi @ (P + B_nodes[k] * dts[k]) @ np.swapaxes(phi, -1, -2)
            else:
                P = phi @ (P + 0.5 * dts[k] * B_nodes[k]) @ np.swapaxes(phi, -1, -2) + 0.5 * dts[k] * B_nodes[k + 1]
    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    return P if batched else P[0]


def empirical_covariance(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariance of (N, r) states and the standard error of each entry."""
    N = states.shape[0]
    Xc = states - states.mean(axis=0)
    prod = Xc[:, :, None] * Xc[:, None, :]
    cov = prod.sum(axis=0) / (N - 1)
    se = prod.std(axis=0, ddof=1) / math.sqrt(N)
    return cov, se


__all__ = [
    "OUSimConfig",
    "TrajectoryOutput",
    "SimulationResult",
    "simulate",
    "simulate_em",
    "simulate_formula",
    "coupled_pair",
    "conditional_mean",
    "conditional_covariance",
    "empirical_covariance",
    "check_step",
]
