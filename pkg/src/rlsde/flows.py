"""Deterministic exponentially stable drift flows.

The canonical family is ``A_t = A_inf + a * exp(-b t) * M`` with ``||M|| = 1``
and ``mu(A_inf) < 0``; for it every stability constant has a closed form.
Tabulated flows (time grid + matrices) are accepted too and certified on
their grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DecayViolatedError, GridExceededError, NotStableError
from .linalg import as_square, log_norm, spectral_norm

DECAY_RTOL = 1e-9
SIMPSON_PANELS_PER_UNIT = 256


@dataclass(frozen=True)
class H0Flow:
    """``A_t = A_inf + a e^{-bt} M``; ``M`` is rescaled to unit spectral norm."""

    A_inf: np.ndarray
    M: np.ndarray
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        A_inf = as_square(self.A_inf, "A_inf")
        if A_inf.ndim != 2:
            raise ValueError("A_inf must be a single matrix")
        M = as_square(self.M, "M")
        if M.shape != A_inf.shape:
            raise ValueError(f"M has shape {M.shape}, expected {A_inf.shape}")
        if self.a < 0 or not math.isfinite(self.a):
            raise ValueError("transient amplitude a must be finite and nonnegative")
        if not self.b > 0 or not math.isfinite(self.b):
            raise ValueError("decay rate b must be positive")
        m_norm = float(spectral_norm(M))
        if m_norm == 0.0:
            if self.a > 0:
                raise ValueError("M must be nonzero when a > 0")
        else:
            M = M / m_norm
        mu = float(log_norm(A_inf))
        if not mu < 0:
            raise NotStableError(f"mu(A_inf) = {mu:.6g} is not negative")
        A_inf.setflags(write=False)
        M.setflags(write=False)
        object.__setattr__(self, "A_inf", A_inf)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.A_inf.shape[0]

    @property
    def mu_inf(self) -> float:
        return float(log_norm(self.A_inf))

    def __call__(self, t) -> np.ndarray:
        return eval_flow(self, t)

    def sup_norm(self, s: float = 0.0, t: float | None = None) -> float:
        """Upper bound on ``||A_u||`` for ``u >= s``."""
        return float(spectral_norm(self.A_inf)) + self.a * math.exp(-self.b * s)

    @classmethod
    def constant(cls, A_inf) -> "H0Flow":
        A_inf = as_square(A_inf, "A_inf")
        return cls(A_inf, np.zeros_like(A_inf), 0.0, 1.0)


@dataclass(frozen=True)
class TabulatedFlow:
    """User-supplied flow on a time grid, linearly interpolated.

    ``a``, ``b`` and ``A_inf`` are the declared decay constants; they are only
    trusted after :func:`certify_h0` has checked them on the grid.
    """

    times: np.ndarray
    matrices: np.ndarray
    A_inf: np.ndarray
    a: float
    b: float
    _norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        mats = as_square(self.matrices, "matrices")
        if times.ndim != 1 or times.size < 2 or np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing with at least two points")
        if times[0] != 0.0:
            raise ValueError("tabulated flows start at t = 0")
        if mats.shape[0] != times.size or mats.ndim != 3:
            raise ValueError("matrices must have shape (len(times), r, r)")
        A_inf = as_square(self.A_inf, "A_inf")
        mu = float(log_norm(A_inf))
        if not mu < 0:
            raise NotStableError(f"mu(A_inf) = {mu:.6g} is not negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "A_inf", A_inf)
        object.__setattr__(self, "_norms", spectral_norm(mats))

    @property
    def dim(self) -> int:
        return self.A_inf.shape[0]

    @property
    def mu_inf(self) -> float:
        return float(log_norm(self.A_inf))

    def __call__(self, t) -> np.ndarray:
        return eval_flow(self, t)

    def sup_norm(self, s: float = 0.0, t: float | None = None) -> float:
        hi = self.times[-1] if t is None else t
        lo_i = max(np.searchsorted(self.times, s, side="right") - 1, 0)
        hi_i = np.searchsorted(self.times, hi, side="left")
        return float(np.max(self._norms[lo_i : hi_i + 1]))


Flow = H0Flow | TabulatedFlow


@dataclass(frozen=True)
class H0Certificate:
    a: float
    b: float
    c0: float
    checked_horizon: float
    grid_points: int


class LognormIntegral(NamedTuple):
    value: float
    bound: float


def eval_flow(flow: Flow, t) -> np.ndarray:
    """Evaluate the flow at scalar or array times ``t >= 0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("flow times must be nonnegative")
    if isinstance(flow, TabulatedFlow):
        if np.any(t > flow.times[-1]):
            raise GridExceededError(f"t beyond tabulated horizon {flow.times[-1]}")
        idx = np.clip(np.searchsorted(flow.times, t, side="right") - 1, 0, flow.times.size - 2)
        t0 = flow.times[idx]
        w = ((t - t0) / (flow.times[idx + 1] - t0))[..., None, None]
        return (1.0 - w) * flow.matrices[idx] + w * flow.matrices[idx + 1]
    decay = (flow.a * np.exp(-flow.b * t))[..., None, None]
    return flow.A_inf + decay * flow.M


def certify_h0(flow: Flow, horizon: float, grid: int) -> H0Certificate:
    """Check the exponential-decay hypothesis for ``flow`` on ``grid`` equispaced points of ``[0, horizon]``.

    Raises:
        NotStableError: ``mu(A_inf) >= 0``.
        DecayViolatedError: a grid point has ``||A_t - A_inf|| > a e^{-bt}``.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if grid < 2:
        raise ValueError("grid must have at least two points")
    mu = float(log_norm(flow.A_inf))
    if not mu < 0:
        raise NotStableError(f"mu(A_inf) = {mu:.6g} is not negative")
    if isinstance(flow, TabulatedFlow):
        horizon = min(horizon, float(flow.times[-1]))
        ts = np.union1d(np.linspace(0.0, horizon, grid), flow.times[flow.times <= horizon])
    else:
        ts = np.linspace(0.0, horizon, grid)
    dev = spectral_norm(eval_flow(flow, ts) - flow.A_inf)
    # forming A_t - A_inf cancels, leaving rounding of order eps * ||A_inf||
    slack = 64.0 * np.finfo(float).eps * float(spectral_norm(flow.A_inf))
    allowed = flow.a * np.exp(-flow.b * ts) * (1.0 + DECAY_RTOL) + slack
    bad = np.nonzero(dev > allowed)[0]
    if bad.size:
        k = bad[0]
        raise DecayViolatedError(
            f"||A_t - A_inf|| = {dev[k]:.6g} exceeds a e^(-bt) = {allowed[k]:.6g} at t = {ts[k]:.6g}"
        )
    return H0Certificate(a=flow.a, b=flow.b, c0=-mu, checked_horizon=float(horizon), grid_points=int(ts.size))


def simpson(values: np.ndarray, h: float) -> np.ndarray:
    """Composite Simpson rule along axis 0 (odd number of samples)."""
    return h / 3.0 * (values[0] + values[-1] + 4.0 * values[1:-1:2].sum(axis=0) + 2.0 * values[2:-1:2].sum(axis=0))


def lognorm_integral(flow: Flow, s: float, t: float, grid: int = 0) -> LognormIntegral:
    """Simpson approximation of the integral of ``mu(A_u)`` over ``[s, t]``.

    Uses at least ``grid`` panels and at least 256 panels per unit time.  The
    second field is the closed-form ceiling ``mu(A_inf)(t-s) + (a/b) e^{-bs}``.
    """
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    bound = flow.mu_inf * (t - s) + flow.a / flow.b * math.exp(-flow.b * s)
    if t == s:
        return LognormIntegral(0.0, bound)
    panels = max(int(grid), math.ceil(SIMPSON_PANELS_PER_UNIT * (t - s)), 2)
    panels += panels % 2
    us = np.linspace(s, t, panels + 1)
    mus = log_norm(eval_flow(flow, us))
    return LognormIntegral(float(simpson(mus, (t - s) / panels)), bound)
