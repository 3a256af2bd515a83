"""State-transition matrices of time-varying linear flows.

``E_{s,t}`` solves ``d/dt E = A_t E`` with ``E_{s,s} = I``.  It is stored as
``exp(log_scale) * factor`` with ``||factor||`` kept in [1/2, 2], so
``log ||E_{s,t}||`` stays representable for arbitrarily long horizons.

Anything that yields drift matrices can be propagated: a constant matrix, a
deterministic flow, a materialized :class:`PathRealization`, or a
:class:`CoefficientBatch` of N trajectories (integrated together, but every
trajectory gets its own step count, so its result does not depend on the
rest of the batch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coefficients import CoefficientBatch, PathRealization
from .errors import GridExceededError, IntervalMismatchError, RegimeTooWideError
from .flows import H0Flow, TabulatedFlow, eval_flow, simpson
from .linalg import log_norm, spectral_norm

BAND_LO = 0.5
BAND_HI = 2.0
DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class Propagator:
    """``E_{s,t} = exp(log_scale) * factor``; may carry leading batch axes."""

    factor: np.ndarray
    log_scale: np.ndarray
    s: float
    t: float

    def matrix(self) -> np.ndarray:
        return np.exp(self.log_scale)[..., None, None] * self.factor

    def __getitem__(self, idx) -> "Propagator":
        return Propagator(self.factor[idx], np.asarray(self.log_scale)[idx], self.s, self.t)


@dataclass(frozen=True)
class FunctionFlow:
    """Arbitrary drift ``u -> A_u`` with a declared bound on ``||A_u||``."""

    fn: Callable[[float], np.ndarray]
    norm: float
    end_time: float = math.inf


@dataclass(frozen=True)
class BatchFlow:
    """N drifts at once: ``fn(u, left) -> (N, r, r)`` with per-member norm bounds.

    ``breakpoints`` are times where the drift may jump; integration never
    steps across them.
    """

    fn: Callable[[float, bool], np.ndarray]
    norms: np.ndarray
    size: int
    dim: int
    breakpoints: np.ndarray = field(default_factory=lambda: np.empty(0))
    end_time: float = math.inf


def stack_flows(flows: Sequence[H0Flow]) -> BatchFlow:
    """Batch several equal-dimension parametric flows for joint propagation."""
    A_inf = np.stack([f.A_inf for f in flows])
    M = np.stack([f.M for f in flows])
    a = np.array([f.a for f in flows])
    b = np.array([f.b for f in flows])
    norms = np.array([f.sup_norm(0.0) for f in flows])
    return BatchFlow(
        lambda u, left=False: A_inf + (a * np.exp(-b * u))[:, None, None] * M,
        norms,
        len(flows),
        A_inf.shape[-1],
    )


class _Coefficients:
    """Uniform view over the supported drift sources, always batched."""

    def __init__(self, source):
        self.source = source
        self.batched = False
        self.breakpoints = np.empty(0)
        self.end_time = math.inf
        if isinstance(source, CoefficientBatch):
            self.batched = True
            self.size = source.size
            self.r = source.dim
            self.end_time = source.end_time
            if not source.spec.perturbation.constant_in_time:
                self.breakpoints = source.grid
            self._at = source.matrix_at
            self._bound = source.norm_bound
        elif isinstance(source, PathRealization):
            self.size, self.r = 1, source.dim
            self.end_time = source.end_time
            self.breakpoints = source.grid
            self._at = lambda u, left=False: source.matrix_at(u, left)[None]
            self._bound = lambda s, t: np.array([source.norm_bound(s, t)])
        elif isinstance(source, (H0Flow, TabulatedFlow)):
            self.size, self.r = 1, source.dim
            if isinstance(source, TabulatedFlow):
                self.end_time = float(source.times[-1])
                self.breakpoints = source.times
            self._at = lambda u, left=False: eval_flow(source, u)[None]
            self._bound = lambda s, t: np.array([source.sup_norm(s, t)])
        elif isinstance(source, BatchFlow):
            self.batched = True
            self.size, self.r = source.size, source.dim
            self.end_time = source.end_time
            self.breakpoints = np.asarray(source.breakpoints, dtype=float)
            self._at = source.fn
            self._bound = lambda s, t: source.norms
        elif isinstance(source, FunctionFlow):
            self.size = 1
            A0 = np.asarray(source.fn(0.0), dtype=float)
            self.r = A0.shape[-1]
            self.end_time = source.end_time
            self._at = lambda u, left=False: np.asarray(source.fn(u), dtype=float)[None]
            self._bound = lambda s, t: np.array([source.norm])
        else:
            A = np.asarray(source, dtype=float)
            if A.ndim == 2:
                A = A[None]
            elif A.ndim == 3:
                self.batched = True
            else:
                raise TypeError(f"cannot propagate {type(source).__name__}")
            self.size, self.r = A.shape[0], A.shape[-1]
            norms = spectral_norm(A)
            self._at = lambda u, left=False: A
            self._bound = lambda s, t: norms

    def at(self, u: float, idx, left: bool = False) -> np.ndarray:
        A = self._at(u, left) if left else self._at(u)
        if A.shape[0] != self.size:
            A = np.broadcast_to(A, (self.size,) + A.shape[1:])
        return A if idx is None else A[idx]

    def norm_bound(self, s: float, t: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self._bound(s, t), dtype=float), (self.size,))


def _renormalize(E: np.ndarray, L: np.ndarray) -> None:
    """Rescale (in place) so every factor keeps its spectral norm in [1/2, 2]."""
    r = E.shape[-1]
    fro = np.sqrt(np.sum(E * E, axis=(-2, -1)))
    if r <= 16:
        # ||E|| <= ||E||_F <= sqrt(r) ||E||, so a Frobenius band [sqrt(r)/2, 2] suffices
        lo = 0.5 * math.sqrt(r)
        out = (fro > BAND_HI) | (fro < lo)
        if np.any(out):
            scale = fro[out] / math.sqrt(lo * BAND_HI)
            E[out] /= scale[:, None, None]
            L[out] += np.log(scale)
        return
    maybe = (fro > BAND_HI) | (fro < BAND_LO * math.sqrt(r))
    if not np.any(maybe):
        return
    idx = np.nonzero(maybe)[0]
    nrm = spectral_norm(E[idx])
    out = (nrm > BAND_HI) | (nrm < BAND_LO)
    idx, nrm = idx[out], nrm[out]
    if idx.size:
        E[idx] /= nrm[:, None, None]
        L[idx] += np.log(nrm)


def _rk4_segment(coef: _Coefficients, idx, u0: float, u1: float, steps: int, E, L):
    h = (u1 - u0) / steps
    for k in range(steps):
        a = u0 + k * h
        b = u1 if k == steps - 1 else u0 + (k + 1) * h
        hk = b - a
        A0 = coef.at(a, idx)
        Am = coef.at(a + 0.5 * hk, idx)
        A1 = coef.at(b, idx, left=True)
        k1 = A0 @ E
        k2 = Am @ (E + 0.5 * hk * k1)
        k3 = Am @ (E + 0.5 * hk * k2)
        k4 = A1 @ (E + hk * k3)
        E = E + (hk / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _renormalize(E, L)
    return E, L


def _advance(coef: _Coefficients, E, L, u: float, v: float, hmax: np.ndarray):
    """Integrate from ``u`` to ``v``, stopping at coefficient breakpoints."""
    bp = coef.breakpoints
    for w in np.append(bp[(bp > u) & (bp < v)], v):
        steps = np.maximum(np.ceil((w - u) / hmax).astype(np.int64), 1)
        groups = np.unique(steps)
        if groups.size == 1:
            E, L = _rk4_segment(coef, None, u, float(w), int(groups[0]), E, L)
        else:
            for g in groups:
                idx = np.nonzero(steps == g)[0]
                E[idx], L[idx] = _rk4_segment(coef, idx, u, float(w), int(g), E[idx], L[idx].copy())
        u = float(w)
    return E, L


def interval_propagators(source, grid, tol: float = DEFAULT_TOL):
    """Yield ``(k, E_{t_k, t_{k+1}})`` as plain (N, r, r) matrices along ``grid``."""
    coef = source if isinstance(source, _Coefficients) else _Coefficients(source)
    grid = np.asarray(grid, dtype=float)
    if grid[-1] > coef.end_time * (1 + 1e-12):
        raise GridExceededError(f"t = {grid[-1]} beyond coefficient horizon {coef.end_time}")
    hmax = step_limit(tol, coef.norm_bound(float(grid[0]), float(grid[-1])))
    eye = np.broadcast_to(np.eye(coef.r), (coef.size, coef.r, coef.r))
    for k in range(grid.size - 1):
        E, L = _advance(coef, eye.copy(), np.zeros(coef.size), float(grid[k]), float(grid[k + 1]), hmax)
        yield k, np.exp(L)[:, None, None] * E


def step_limit(tol: float, norm_bound) -> np.ndarray:
    """Largest RK4 step: ``min(tol^(1/4), 0.5 / max ||A||)``."""
    nb = np.maximum(np.asarray(norm_bound, dtype=float), 1e-300)
    return np.minimum(tol**0.25, 0.5 / nb)


def propagate_many(source, s: float, times: Sequence[float], tol: float = DEFAULT_TOL) -> list[Propagator]:
    """Propagators ``E_{s,t}`` for every ``t`` in ``times`` from one integration pass."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    coef = source if isinstance(source, _Coefficients) else _Coefficients(source)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) < 0) or (times.size and times[0] < s) or s < 0:
        raise ValueError("need 0 <= s <= t_1 <= t_2 <= ...")
    if times.size == 0:
        return []
    t_end = float(times[-1])
    if t_end > coef.end_time * (1 + 1e-12):
        raise GridExceededError(f"t = {t_end} beyond coefficient horizon {coef.end_time}")
    N, r = coef.size, coef.r
    E = np.broadcast_to(np.eye(r), (N, r, r)).copy()
    L = np.zeros(N)
    hmax = step_limit(tol, coef.norm_bound(s, t_end))
    results: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    u = s
    if np.any(times == s):
        results[s] = (E.copy(), L.copy())
    for v in np.unique(times[times > s]):
        E, L = _advance(coef, E, L, u, float(v), hmax)
        results[float(v)] = (E.copy(), L.copy())
        u = float(v)
    out = []
    for t in times:
        Et, Lt = results[float(t)]
        if not coef.batched:
            Et, Lt = Et[0], Lt[0]
        out.append(Propagator(Et, Lt, float(s), float(t)))
    return out


def propagate(source, s: float, t: float, tol: float = DEFAULT_TOL) -> Propagator:
    """``E_{s,t}`` by fixed-step RK4 with log-scale renormalization.

    Raises:
        GridExceededError: ``t`` lies beyond a realized coefficient path.
    """
    if t < s:
        raise ValueError("need s <= t")
    return propagate_many(source, s, [t], tol)[0]


def identity(r: int, s: float = 0.0) -> Propagator:
    return Propagator(np.eye(r), np.float64(0.0), s, s)


def compose(P1: Propagator, P2: Propagator) -> Propagator:
    """``E_{s,t} = E_{u,t} E_{s,u}`` for ``P1`` on [s, u] and ``P2`` on [u, t]."""
    if not math.isclose(P1.t, P2.s, rel_tol=1e-12, abs_tol=1e-12):
        raise IntervalMismatchError(f"P1 ends at {P1.t} but P2 starts at {P2.s}")
    F = np.array(P2.factor @ P1.factor)
    L = np.array(np.asarray(P1.log_scale, dtype=float) + np.asarray(P2.log_scale, dtype=float))
    batched = F.ndim > 2
    F3 = F.reshape((-1,) + F.shape[-2:])
    L1 = L.reshape(-1).copy()
    nrm = spectral_norm(F3)
    out = (nrm > BAND_HI) | (nrm < BAND_LO)
    F3[out] /= nrm[out, None, None]
    L1[out] += np.log(nrm[out])
    F = F3.reshape(F.shape)
    L = L1.reshape(L.shape) if batched else np.float64(L1[0])
    return Propagator(F, L, P1.s, P2.t)


def log_norm_of(P: Propagator) -> np.ndarray:
    """``log ||E_{s,t}||`` without forming the (possibly tiny or huge) matrix."""
    return np.asarray(P.log_scale) + np.log(spectral_norm(P.factor))


def _cumulative_integral(f: np.ndarray, h: float) -> np.ndarray:
    """Running integral on a uniform grid with 4th-order local cubic rules."""
    n = f.shape[0] - 1
    cell = np.empty((n,) + f.shape[1:])
    if n >= 3:
        cell[1 : n - 1] = (h / 24.0) * (-f[0 : n - 2] + 13.0 * f[1 : n - 1] + 13.0 * f[2:n] - f[3 : n + 1])
        cell[0] = (h / 24.0) * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3])
        cell[n - 1] = (h / 24.0) * (9.0 * f[n] + 19.0 * f[n - 1] - 5.0 * f[n - 2] + f[n - 3])
    else:
        cell[:] = 0.5 * h * (f[:-1] + f[1:])
    out = np.zeros_like(f)
    out[1:] = np.cumsum(cell, axis=0)
    return out


def peano_baker(source, s: float, t: float, order: int, panels: int = 2000) -> np.ndarray:
    """Truncated Peano-Baker series ``I + int A + int int A A + ...`` up to ``order``.

    Only intended as an independent cross-check of :func:`propagate`.

    Raises:
        RegimeTooWideError: ``(t - s) * sup ||A|| > 1``.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    coef = _Coefficients(source)
    if coef.batched:
        raise TypeError("peano_baker works on a single flow")
    if t == s:
        return np.eye(coef.r)
    sup = float(coef.norm_bound(s, t)[0])
    if (t - s) * sup > 1.0 + 1e-12:
        raise RegimeTooWideError(f"(t - s) sup||A|| = {(t - s) * sup:.4g} exceeds 1")
    us = np.linspace(s, t, panels + 1)
    A = np.stack([coef.at(u, None)[0] for u in us])
    h = (t - s) / panels
    term = np.broadcast_to(np.eye(coef.r), A.shape).copy()
    total = np.eye(coef.r)
    for _ in range(order):
        term = _cumulative_integral(A @ term, h)
        total = total + term[-1]
    return total


_NODE_BLOCK = 512


def lognorm_integral_of(source, s: float, t: float, panels_per_unit: int = 256) -> np.ndarray:
    """Composite Simpson value of the integral of ``mu(A_u)`` over [s, t] for any drift source.

    Segments between coefficient breakpoints are integrated separately, using
    left limits at segment ends so jumps never fall inside a panel.  Returns
    one value per batch member (a scalar for unbatched sources).
    """
    coef = source if isinstance(source, _Coefficients) else _Coefficients(source)
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    total = np.zeros(coef.size)
    bp = coef.breakpoints
    cuts = np.concatenate([[s], bp[(bp > s) & (bp < t)], [t]])
    for u, v in zip(cuts[:-1], cuts[1:]):
        panels = max(2, math.ceil(panels_per_unit * (v - u)))
        panels += panels % 2
        us = np.linspace(u, v, panels + 1)
        mats = [coef.at(float(w), None, left=(k == panels)) for k, w in enumerate(us)]
        # one eigen-solve per block of nodes; results do not depend on the block
        mus = np.concatenate([log_norm(np.stack(mats[i : i + _NODE_BLOCK])) for i in range(0, len(mats), _NODE_BLOCK)])
        total += simpson(mus, (v - u) / panels)
    return total if coef.batched else total[0]
