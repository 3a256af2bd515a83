"""Stability constants and Monte Carlo certificates.

Closed-form constants (``T_n``, ``T_n^eps``, ``eps_n(nu)``, the window
threshold, the moment-bound constants) are plain functions.  Each
``certify_*`` function estimates one quantity by Monte Carlo, compares it to
its bound with a 3-standard-error rule and returns :class:`BoundReport` rows.

Moments of propagator norms are always formed from pathwise log-norms with a
log-sum-exp, so nothing overflows for long horizons or high orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import rng
from .coefficients import (
    CoefficientProcessSpec,
    HypothesisEstimates,
    PerturbationModel,
    estimate_hypotheses,
    estimation_grid,
    sample_coefficients,
)
from .errors import EmptyWindowError, EpsilonOneError, GateUnsatisfiedError
from .flows import Flow, eval_flow
from .linalg import spectral_norm
from .propagator import BatchFlow, log_norm_of, propagate, propagate_many
from .sde import OUSimConfig, coupled_pair, simulate

Z = 3.0
D_FACTOR = 4.0 * math.e + math.sqrt(2.0 * math.e)
CHUNK = 1024
LEMMA_T_MIN = 0.1

CERTIFIED = "certified"
VIOLATED = "violated"
INCONCLUSIVE = "inconclusive"
GATE = "gate-unsatisfied"
EMPTY = "empty-window"


# ----------------------------------------------------------------------------
# closed-form constants


def compute_eps_n_nu(eps_n: float, nu: float, n: int, c0: float, c_n: float) -> float:
    """``eps_n(nu) = eps_n ^ [nu^{1/n} c0 / (4 c_n)]``."""
    if not 0 < nu <= 1:
        raise ValueError("nu must lie in (0, 1]")
    if c_n <= 0:
        return float(eps_n)
    return float(min(eps_n, nu ** (1.0 / n) * c0 / (4.0 * c_n)))


def compute_Tn(n: int, c0: float, c_2n: float) -> float:
    """``T_n = (4/c0) log(1 + (c_2n/c0) 2^{2 + n/2})``."""
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    return 4.0 / c0 * math.log1p(c_2n / c0 * 2.0 ** (2.0 + 0.5 * n))


def d_const(d1: float, d2: float) -> float:
    """``d = (4e + sqrt(2e)) (d1 v d2)``."""
    return D_FACTOR * max(d1, d2)


def cbar_n(c_n: float, c0: float) -> float:
    """``cbar_n = 4 c_n / c0``."""
    return 4.0 * c_n / c0


class TnEps(NamedTuple):
    value: float
    binding: str
    log_term: float
    moment_term: float


def compute_Tn_eps(n: int, epsilon: float, c0: float, d1: float, d2: float) -> TnEps:
    """``T_n^eps = log(1/eps^2) / (2d + c0)  ^  (1/eps^2) / (2 d2 n)``.

    ``binding`` names the smaller term (``log`` or ``moment``).  With
    ``d2 = 0`` the moment term is infinite.

    Raises:
        EpsilonOneError: ``epsilon == 1`` makes the log term vanish.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon == 1.0:
        raise EpsilonOneError("T_n^eps is zero at eps = 1")
    if epsilon == 0.0:
        return TnEps(math.inf, "none", math.inf, math.inf)
    log_term = -2.0 * math.log(epsilon) / (2.0 * d_const(d1, d2) + c0)
    moment_term = math.inf
    if d2 > 0:
        log_moment_term = -2.0 * math.log(epsilon) - math.log(2.0 * d2 * n)
        moment_term = math.exp(log_moment_term) if log_moment_term < 700 else math.inf
    if log_term <= moment_term:
        return TnEps(log_term, "log", log_term, moment_term)
    return TnEps(moment_term, "moment", log_term, moment_term)


def eps_2n_threshold(n: int, c0: float, c_2n: float, d1: float, d2: float, rtol: float = 1e-6) -> float:
    """Supremum of the eps keeping ``T_n < T_n^eps``, by bisection in log eps.

    ``T_n^eps`` decreases from +inf to 0 on (0, 1), so the crossing is unique.
    Returns 0 if no representable eps opens the window.
    """
    T = compute_Tn(n, c0, c_2n)
    if T == 0.0:
        return 1.0
    lo, hi = math.log(1e-300), 0.0
    if compute_Tn_eps(n, math.exp(lo), c0, d1, d2).value <= T:
        return 0.0
    while hi - lo > rtol:
        mid = 0.5 * (lo + hi)
        if compute_Tn_eps(n, math.exp(mid), c0, d1, d2).value > T:
            lo = mid
        else:
            hi = mid
    return math.exp(lo)


class LemmaBound(NamedTuple):
    rhs: float
    crude: float
    crude_valid: bool


def crude_moment_bound(n: int, t: float, epsilon: float, d1: float, d2: float) -> LemmaBound:
    """Moment bound on ``E ||E_{s,s+t}||^n`` and its crude form ``2 e^{d n t}``.

    ``rhs = e^{2 d1 n t}/2 + (e/2) sqrt(e/pi) ((1 + sqrt(2e) d2 n t eps) e^{(2 sqrt(e) d2 n t eps)^2} - 1)``;
    the crude form is only valid when ``d2 n t eps^2 <= 1``.
    """
    if min(n, t, epsilon, d1, d2) < 0:
        raise ValueError("all arguments must be nonnegative")
    x = d2 * n * t * epsilon
    rhs = 0.5 * math.exp(2.0 * d1 * n * t) + 0.5 * math.e * math.sqrt(math.e / math.pi) * (
        (1.0 + math.sqrt(2.0 * math.e) * x) * math.exp((2.0 * math.sqrt(math.e) * x) ** 2) - 1.0
    )
    crude = 2.0 * math.exp(d_const(d1, d2) * n * t)
    return LemmaBound(rhs, crude, d2 * n * t * epsilon * epsilon <= 1.0)


# ----------------------------------------------------------------------------
# hypothesis constants


def required_orders(n: int) -> list[int]:
    """Moment orders whose c_k enter the certificates for order ``n``."""
    return sorted({1, 2, n, 2 * n, 4 * n})


def declared_estimates(c: dict[int, float], d1: float, d2: float, eps_n: dict[int, float] | None = None) -> HypothesisEstimates:
    ns = sorted(int(k) for k in c)
    return HypothesisEstimates(
        n_list=ns,
        c_n_hat={int(k): float(v) for k, v in c.items()},
        c_n_se={k: 0.0 for k in ns},
        d1_hat=float(d1),
        d2_hat=float(d2),
        eps_n={int(k): float(v) for k, v in (eps_n or {}).items()},
    )


def estimate_constants(
    spec: CoefficientProcessSpec,
    n_list: Sequence[int],
    samples: int = 4000,
    horizon: float = 10.0,
    points: int = 21,
    seed: int = 0,
    reference_epsilon: float = 1.0,
) -> HypothesisEstimates:
    """Moment and diffusion hypothesis constants for the model of ``spec``, independent of its eps.

    ``c_n`` does not depend on eps; ``(d1, d2)`` are fitted at
    ``reference_epsilon`` and ``d1`` is raised to at least ``sup ||A_t||`` so
    the eps = 0 end is covered too.
    """
    grid = estimation_grid(horizon, points)
    est = estimate_hypotheses(spec.with_epsilon(reference_epsilon), n_list, samples, grid, seed)
    est.d1_hat = max(est.d1_hat, float(np.max(spectral_norm(eval_flow(spec.flow, grid)))))
    return est


# ----------------------------------------------------------------------------
# theorem window


@dataclass(frozen=True)
class TheoremWindow:
    """All explicit constants for order ``n`` at fluctuation level ``epsilon``."""

    n: int
    epsilon: float
    nu: float
    c0: float
    a: float
    b: float
    c: dict[int, float]
    eps_n: dict[int, float]
    d1: float
    d2: float
    T_n: float
    T_n_eps: float
    binding: str
    eps_n_nu: float
    eps_2n_threshold: float
    d_const: float
    cbar_n: float
    h: float

    @property
    def mu_inf(self) -> float:
        return -self.c0

    @property
    def nonempty(self) -> bool:
        return self.T_n < self.T_n_eps

    def grid(self, points: int = 5) -> np.ndarray:
        if not self.nonempty:
            raise EmptyWindowError(f"[T_n, T_n^eps] = [{self.T_n:.6g}, {self.T_n_eps:.6g}] is empty")
        if not math.isfinite(self.T_n_eps):
            raise EmptyWindowError("window is unbounded; pass an explicit t grid")
        return np.linspace(self.T_n, self.T_n_eps, points)


def _c(est: HypothesisEstimates, k: int) -> float:
    if k not in est.c_n_hat:
        raise ValueError(f"c_{k} is missing; estimate orders {sorted(set(est.c_n_hat) | {k})}")
    return est.c_n_hat[k]


def theorem_window(
    flow: Flow, est: HypothesisEstimates, n: int, epsilon: float, nu: float = 0.5, h: float | None = None
) -> TheoremWindow:
    c0 = -flow.mu_inf
    c_n, c_2n = _c(est, n), _c(est, 2 * n)
    eps_n = est.eps_n.get(n, 1.0)
    if epsilon < 1.0:
        tne = compute_Tn_eps(n, epsilon, c0, est.d1_hat, est.d2_hat)
        T_eps, binding = tne.value, tne.binding
    else:
        T_eps, binding = 0.0, "log"
    return TheoremWindow(
        n=n,
        epsilon=float(epsilon),
        nu=float(nu),
        c0=c0,
        a=flow.a,
        b=flow.b,
        c=dict(est.c_n_hat),
        eps_n=dict(est.eps_n),
        d1=est.d1_hat,
        d2=est.d2_hat,
        T_n=compute_Tn(n, c0, c_2n),
        T_n_eps=T_eps,
        binding=binding,
        eps_n_nu=compute_eps_n_nu(eps_n, nu, n, c0, c_n),
        eps_2n_threshold=eps_2n_threshold(n, c0, c_2n, est.d1_hat, est.d2_hat),
        d_const=d_const(est.d1_hat, est.d2_hat),
        cbar_n=cbar_n(c_n, c0),
        h=(4.0 * flow.a / (flow.b * c0)) if h is None else float(h),
    )


# ----------------------------------------------------------------------------
# reports and statistics


@dataclass(frozen=True)
class BoundReport:
    """One certificate point.

    ``sense`` is ``upper`` (estimate <= bound), ``lower`` (estimate >= bound),
    or ``trend`` (no upward trend: certified iff estimate - 3 SE <= bound).
    """

    quantity: str
    n: int
    epsilon: float
    t: float
    bound: float
    estimate: float
    stderr: float
    samples: int
    verdict: str
    margin: float
    sense: str = "upper"
    note: str = ""


def verdict_for(estimate: float, stderr: float, bound: float, sense: str = "upper") -> tuple[str, float]:
    """3-SE verdict and margin (positive margin = room left after 3 SE)."""
    if not (math.isfinite(estimate) and math.isfinite(stderr)):
        return INCONCLUSIVE, math.nan
    if sense == "upper":
        margin = bound - (estimate + Z * stderr)
        if margin >= 0:
            return CERTIFIED, margin
        return (VIOLATED if estimate - Z * stderr > bound else INCONCLUSIVE), margin
    if sense == "lower":
        margin = (estimate - Z * stderr) - bound
        if margin >= 0:
            return CERTIFIED, margin
        return (VIOLATED if estimate + Z * stderr < bound else INCONCLUSIVE), margin
    if sense == "trend":
        margin = bound - (estimate - Z * stderr)
        return (CERTIFIED if margin >= 0 else VIOLATED), margin
    raise ValueError(f"unknown sense {sense!r}")


def make_report(
    quantity: str,
    n: int,
    epsilon: float,
    t: float,
    bound: float,
    estimate: float,
    stderr: float,
    samples: int,
    sense: str = "upper",
    note: str = "",
) -> BoundReport:
    v, m = verdict_for(estimate, stderr, bound, sense)
    return BoundReport(quantity, int(n), float(epsilon), float(t), float(bound), float(estimate), float(stderr), int(samples), v, float(m), sense, note)


def blocked_report(quantity: str, n: int, epsilon: float, t: float, verdict: str, note: str) -> BoundReport:
    return BoundReport(quantity, int(n), float(epsilon), float(t), math.nan, math.nan, math.nan, 0, verdict, math.nan, "upper", note)


def mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2 or np.all(x == x.flat[0]):
        return float(x.flat[0]) if x.size else math.nan, 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def log_moment(logs: np.ndarray, n: float, weights: np.ndarray | None = None) -> tuple[float, float]:
    """``log E[exp(n * logs)]`` along axis 0 with its delta-method SE (overflow-free)."""
    logs = np.asarray(logs, dtype=float)
    y = n * logs
    top = np.max(y, axis=0)
    top = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(y - top)
    if weights is not None:
        w = w * weights.reshape((-1,) + (1,) * (w.ndim - 1))
    m = w.mean(axis=0)
    N = logs.shape[0]
    sd = w.std(axis=0, ddof=1) if N > 1 else np.zeros_like(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = top + np.log(m)
        se = np.where(m > 0, sd / (math.sqrt(N) * m), 0.0)
    return val, se


def wilson(p: float, N: int, z: float = Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    denom = 1.0 + z * z / N
    centre = (p + z * z / (2 * N)) / denom
    half = z * math.sqrt(p * (1 - p) / N + z * z / (4 * N * N)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def _coef_grid(spec: CoefficientProcessSpec, horizon: float, grid_dt: float) -> np.ndarray:
    if spec.perturbation.constant_in_time or spec.epsilon == 0.0:
        return np.array([0.0])
    K = max(1, math.ceil(horizon / grid_dt - 1e-9))
    return np.arange(K + 1) * grid_dt


def _batch(spec, horizon, grid_dt, seed, ids):
    if spec.epsilon == 0.0 and not spec.perturbation.constant_in_time:
        # eps = 0 makes the perturbation irrelevant; a frozen stand-in avoids a grid
        spec = replace(spec, perturbation=PerturbationModel("frozen-gaussian", spec.perturbation.entry_std))
    return sample_coefficients(spec, _coef_grid(spec, horizon, grid_dt), seed, ids)


def pathwise_log_norms(
    spec: CoefficientProcessSpec,
    s: float,
    durations: Sequence[float],
    samples: int,
    seed: int = 0,
    tol: float = 1e-9,
    grid_dt: float = 0.05,
    workers: int | None = None,
) -> np.ndarray:
    """``log ||E_{s,s+t}(A^eps)||`` for every sample path and duration; shape (samples, len(durations))."""
    durations = np.asarray(durations, dtype=float)
    horizon = s + float(durations.max())

    def run(ids):
        batch = _batch(spec, horizon, grid_dt, seed, ids)
        props = propagate_many(batch, s, s + durations, tol)
        return np.stack([log_norm_of(P) for P in props], axis=1)

    if spec.epsilon == 0.0:
        one = run(np.arange(1))
        return np.broadcast_to(one, (samples, durations.size)).copy()
    return np.concatenate(rng.map_chunks(run, np.arange(samples), CHUNK, workers))


# ----------------------------------------------------------------------------
# theorem part 1: mean log-norm


def part1_gate(window: TheoremWindow, t: float, nu: float) -> None:
    t_min = 2.0 / nu * window.a / (window.b * window.c0)
    c2 = window.c.get(2)
    if c2 is None:
        raise ValueError("c_2 is required for the mean-log gate")
    eps_max = min(window.eps_n.get(2, 1.0), math.inf if c2 == 0 else 0.5 * nu * window.c0 / c2)
    if t < t_min * (1 - 1e-12):
        raise GateUnsatisfiedError(f"t = {t:.6g} below the time gate {t_min:.6g}")
    if window.epsilon > eps_max * (1 + 1e-12):
        raise GateUnsatisfiedError(f"eps = {window.epsilon:.6g} above the gate {eps_max:.6g}")


def certify_averaged_flow(window: TheoremWindow, flow: Flow, s: float, t: float, nu: float | None = None, tol: float = 1e-10) -> BoundReport:
    """``log ||E_{s,s+t}(mean A^eps)|| <= (1 - nu) mu(A_inf) t``.

    The built-in perturbations have zero mean, so the averaged drift is the
    deterministic flow itself.
    """
    nu = window.nu if nu is None else nu
    part1_gate(window, t, nu)
    est = float(log_norm_of(propagate(flow, s, s + t, tol)))
    return make_report("averaged_flow_log_norm", 1, window.epsilon, t, (1 - nu) * flow.mu_inf * t, est, 0.0, 1)


def certify_mean_log(
    window: TheoremWindow,
    spec: CoefficientProcessSpec,
    s: float,
    t: float,
    samples: int,
    nu: float | None = None,
    seed: int = 0,
    tol: float = 1e-9,
    workers: int | None = None,
) -> BoundReport:
    """``E log ||E_{s,s+t}(A^eps)|| <= (1 - nu) mu(A_inf) t``."""
    nu = window.nu if nu is None else nu
    part1_gate(window, t, nu)
    logs = pathwise_log_norms(spec, s, [t], samples, seed, tol, workers=workers)[:, 0]
    est, se = mean_se(logs)
    return make_report("mean_log_norm", 1, spec.epsilon, t, (1 - nu) * spec.flow.mu_inf * t, est, se, samples)


# ----------------------------------------------------------------------------
# theorem part 2: event probability


def event_indicator(logs: np.ndarray, durations: np.ndarray, mu_inf: float) -> np.ndarray:
    """Per path: ``max_k (1/t_k) log ||E_{s,s+t_k}|| < mu(A_inf)/2``."""
    return np.max(logs / durations[None, :], axis=1) < 0.5 * mu_inf


def certify_event_probability(
    window: TheoremWindow,
    spec: CoefficientProcessSpec,
    s: float,
    t_list: Sequence[float],
    samples: int,
    nu: float | None = None,
    seed: int = 0,
    tol: float = 1e-9,
    workers: int | None = None,
) -> BoundReport:
    """Frequency of the rate event over ``t_list`` versus ``1 - nu`` (Wilson interval).

    Raises:
        GateUnsatisfiedError: ``eps`` exceeds ``eps_n(nu)``.
    """
    nu = window.nu if nu is None else nu
    durations = np.asarray(t_list, dtype=float)
    if durations.ndim != 1 or np.any(durations <= 0) or np.any(np.diff(durations) <= 0):
        raise ValueError("t_list must be positive and increasing")
    gate = compute_eps_n_nu(window.eps_n.get(window.n, 1.0), nu, window.n, window.c0, window.c[window.n])
    if spec.epsilon > gate * (1 + 1e-12):
        raise GateUnsatisfiedError(f"eps = {spec.epsilon:.6g} above eps_n(nu) = {gate:.6g}")
    logs = pathwise_log_norms(spec, s, durations, samples, seed, tol, workers=workers)
    p = float(np.mean(event_indicator(logs, durations, spec.flow.mu_inf)))
    lo, hi = wilson(p, samples)
    se = math.sqrt(p * (1 - p) / samples)
    bound = 1.0 - nu
    margin = lo - bound
    verdict = CERTIFIED if lo >= bound else (VIOLATED if hi < bound else INCONCLUSIVE)
    return BoundReport("event_probability", window.n, spec.epsilon, float(durations[-1]), bound, p, se, samples, verdict, margin, "lower", f"wilson=[{lo:.6g},{hi:.6g}]")


# ----------------------------------------------------------------------------
# theorem part 3: moment window


def _window_points(window: TheoremWindow, t_grid, points: int) -> np.ndarray:
    if not window.nonempty:
        raise EmptyWindowError(f"[T_{window.n}, T_{window.n}^eps] = [{window.T_n:.6g}, {window.T_n_eps:.6g}] is empty")
    ts = window.grid(points) if t_grid is None else np.asarray(t_grid, dtype=float)
    slack = 1e-9 * max(1.0, window.T_n_eps if math.isfinite(window.T_n_eps) else 1.0)
    if np.any(ts < window.T_n - slack) or np.any(ts > window.T_n_eps + slack):
        raise EmptyWindowError("t grid leaves the window")
    return ts


def certify_moment_window(
    window: TheoremWindow,
    spec: CoefficientProcessSpec,
    s: float,
    samples: int,
    t_grid=None,
    points: int = 5,
    seed: int = 0,
    tol: float = 1e-9,
    workers: int | None = None,
) -> list[BoundReport]:
    """``(1/t) log E ||E_{s,s+t}||^n <= (n/4) mu(A_inf)`` for t in the window."""
    ts = _window_points(window, t_grid, points)
    if np.any(ts <= 0):
        raise ValueError("window times must be positive")
    logs = pathwise_log_norms(spec, s, ts, samples, seed, tol, workers=workers)
    val, se = log_moment(logs, window.n)
    bound = window.n / 4.0 * spec.flow.mu_inf
    return [
        make_report("moment_lyapunov_rate", window.n, spec.epsilon, t, bound, v / t, e / t, samples)
        for t, v, e in zip(ts, val, se)
    ]


def certify_lemma(
    spec: CoefficientProcessSpec,
    d1: float,
    d2: float,
    s: float,
    n: int,
    t_grid: Sequence[float],
    samples: int,
    seed: int = 0,
    tol: float = 1e-9,
    workers: int | None = None,
) -> list[BoundReport]:
    """``log E ||E_{s,s+t}||^n`` against the log of the moment-bound right side.

    Grid times must be at least 0.1: at t = 0 the right side equals 1/2
    while the left side is 1.
    """
    ts = np.asarray(t_grid, dtype=float)
    if np.any(ts < LEMMA_T_MIN):
        raise ValueError(f"lemma grid must start at t >= {LEMMA_T_MIN}")
    logs = pathwise_log_norms(spec, s, ts, samples, seed, tol, workers=workers)
    val, se = log_moment(logs, n)
    rows = []
    for t, v, e in zip(ts, val, se):
        lb = crude_moment_bound(n, t, spec.epsilon, d1, d2)
        rows.append(make_report("lemma_log_moment", n, spec.epsilon, t, math.log(lb.rhs), v, e, samples, note=f"crude_valid={lb.crude_valid}"))
    return rows


# ----------------------------------------------------------------------------
# fluctuation corollary


def _difference_logs(spec: CoefficientProcessSpec, s: float, t: float, seed: int, ids: np.ndarray, tol: float, grid_dt: float) -> np.ndarray:
    """``log ||E_{s,t}(A^eps) - E_{s,t}(A)||`` per path, without cancellation.

    The difference is the upper-right block of the propagator of
    ``[[A, A^eps - A], [0, A^eps]]``.
    """
    batch = _batch(spec, t, grid_dt, seed, ids)
    r, N = spec.dim, ids.size
    flow = spec.flow

    def fn(u, left=False):
        A = np.broadcast_to(eval_flow(flow, u), (N, r, r))
        Ae = batch.matrix_at(u, left)
        out = np.zeros((N, 2 * r, 2 * r))
        out[:, :r, :r] = A
        out[:, :r, r:] = Ae - A
        out[:, r:, r:] = Ae
        return out

    norms = flow.sup_norm(s) + 2.0 * batch.norm_bound(s, t)
    bp = batch.grid if not spec.perturbation.constant_in_time else np.empty(0)
    P = propagate(BatchFlow(fn, norms, N, 2 * r, bp, batch.end_time), s, t, tol)
    with np.errstate(divide="ignore"):
        return P.log_scale + np.log(spectral_norm(P.factor[:, :r, r:]))


def certify_fluctuation(
    spec: CoefficientProcessSpec,
    est: HypothesisEstimates,
    s: float,
    t: float,
    n: int,
    eps_list: Sequence[float],
    samples: int,
    seed: int = 0,
    tol: float = 1e-10,
    grid_dt: float = 0.05,
    workers: int | None = None,
) -> list[BoundReport]:
    """``eps^{-1} E(||E_{s,t}(A^eps) - E_{s,t}(A)||^n)^{1/n} <= c_n + 4 e^{a/b} c_2n / c0``.

    All eps values reuse the same perturbation draws.  A final
    ``fluctuation_ratio_gap`` row checks that the ratios agree within 3
    paired standard errors.

    Raises:
        EmptyWindowError: some eps violates ``T_2n <= s <= t <= T_2n^eps``.
    """
    flow = spec.flow
    c0 = -flow.mu_inf
    T2n = compute_Tn(2 * n, c0, _c(est, 4 * n))
    bound = _c(est, n) + 4.0 * math.exp(flow.a / flow.b) * _c(est, 2 * n) / c0
    if not s <= t:
        raise ValueError("need s <= t")
    for eps in eps_list:
        T_eps = compute_Tn_eps(2 * n, eps, c0, est.d1_hat, est.d2_hat).value
        if not (T2n <= s and t <= T_eps):
            raise EmptyWindowError(f"eps = {eps:g}: need {T2n:.6g} <= s <= t <= {T_eps:.6g}")
    rows, per_eps = [], []
    for eps in eps_list:
        if eps == 0.0:
            rows.append(make_report("fluctuation_ratio", n, 0.0, t, bound, 0.0, 0.0, samples, note="eps=0 limit"))
            per_eps.append(None)
            continue
        sp = spec.with_epsilon(eps)
        logs = np.concatenate(
            rng.map_chunks(lambda ids: _difference_logs(sp, s, t, seed, ids, tol, grid_dt), np.arange(samples), CHUNK, workers)
        ) - math.log(eps)
        lm, lse = log_moment(logs, n)
        ratio = math.exp(lm / n)
        rows.append(make_report("fluctuation_ratio", n, eps, t, bound, ratio, ratio * lse / n, samples))
        per_eps.append((ratio, logs))
    live = [(e, v) for e, v in zip(eps_list, per_eps) if v is not None]
    if len(live) >= 2:
        rows.append(_ratio_gap(live, n, t, samples))
    return rows


def _ratio_gap(live, n: int, t: float, samples: int) -> BoundReport:
    """Largest paired discrepancy between normalized fluctuation ratios."""
    worst = None
    for i in range(len(live)):
        for j in range(i + 1, len(live)):
            (ei, (ri, li)), (ej, (rj, lj)) = live[i], live[j]
            top = max(np.max(n * li), np.max(n * lj))
            wi, wj = np.exp(n * li - top), np.exp(n * lj - top)
            # d ratio / d mean for ratio = mean^{1/n}
            gi, gj = ri / (n * wi.mean()), rj / (n * wj.mean())
            lin = gi * wi - gj * wj
            se = float(lin.std(ddof=1) / math.sqrt(lin.size))
            gap = abs(ri - rj)
            score = gap / se if se > 0 else (math.inf if gap > 0 else 0.0)
            if worst is None or score > worst[0]:
                worst = (score, gap, se, ei, ej)
    _, gap, se, ei, ej = worst
    verdict = CERTIFIED if gap <= Z * se else VIOLATED
    return BoundReport("fluctuation_ratio_gap", n, ei, t, 0.0, gap, se, samples, verdict, Z * se - gap, "consistency", f"pair=({ei:g},{ej:g})")


# ----------------------------------------------------------------------------
# contraction and moment corollary


def _snap_inside(ts: np.ndarray, lo: float, hi: float, dt: float) -> np.ndarray:
    k = np.round(ts / dt)
    k = np.maximum(k, np.ceil(lo / dt - 1e-9))
    k = np.minimum(k, np.floor(hi / dt + 1e-9))
    if np.any(k * dt < lo - 1e-9) or np.any(k * dt > hi + 1e-9):
        raise EmptyWindowError(f"window [{lo:.6g}, {hi:.6g}] holds no multiple of dt = {dt:g}")
    return np.unique(k).astype(np.int64)


def certify_contraction(
    spec: CoefficientProcessSpec,
    window: TheoremWindow,
    x1,
    x2,
    samples: int,
    t_grid=None,
    points: int = 5,
    seed: int = 0,
    dt: float = 0.01,
    tol: float = 1e-9,
    workers: int | None = None,
) -> list[BoundReport]:
    """``E(||X^{x1}_t - X^{x2}_t||^n)^{1/n} <= e^{mu(A_inf) t / 4} ||x1 - x2||`` on the window.

    Grid times are snapped inward to multiples of ``dt``.
    """
    ts = _window_points(window, t_grid, points)
    steps = _snap_inside(ts, window.T_n, window.T_n_eps, dt)
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    gap = float(np.linalg.norm(x1 - x2))
    n = window.n
    mu = spec.flow.mu_inf
    if gap == 0.0:
        return [make_report("contraction_moment", n, spec.epsilon, k * dt, 0.0, 0.0, 0.0, samples) for k in steps]
    cfg = OUSimConfig(spec, [x1], dt, float(steps[-1] * dt), samples, seed, "solution-formula", record_steps=tuple(int(k) for k in steps), tol=tol)
    times, norms = coupled_pair(cfg, x1, x2, workers)
    with np.errstate(divide="ignore"):
        lm, lse = log_moment(np.log(norms), n)
    rows = []
    for t, v, e in zip(times, lm, lse):
        m = math.exp(v / n)
        rows.append(make_report("contraction_moment", n, spec.epsilon, t, math.exp(mu * t / 4.0) * gap, m, m * e / n, samples))
    return rows


def certify_moment_boundedness(
    spec: CoefficientProcessSpec,
    est: HypothesisEstimates,
    x0,
    n: int,
    samples: int,
    t_grid=None,
    points: int = 5,
    seed: int = 0,
    dt: float = 0.01,
    tol: float = 1e-9,
    workers: int | None = None,
) -> list[BoundReport]:
    """Empirical ``kappa_n`` for ``E(||X_t||^n)^{1/n} <= e^{mu t/4} ||x|| + kappa_n``.

    The window is ``[T_n v T_2n, T_2n^eps]``.  One ``kappa_hat`` row per
    grid time, a ``kappa_max`` row (certified iff finite) and a
    ``kappa_trend`` row: the slope over the window of the moment of the
    state started at 0 on the same streams, which is the part ``kappa_n``
    has to bound; certified unless it rises by more than 3 SE.
    """
    if n < 2:
        raise ValueError("moment corollary needs n >= 2")
    flow = spec.flow
    c0 = -flow.mu_inf
    eps = spec.epsilon
    eps_cap = min(est.eps_n.get(2 * n, 1.0), eps_2n_threshold(n, c0, _c(est, 2 * n), est.d1_hat, est.d2_hat))
    if eps > eps_cap:
        raise GateUnsatisfiedError(f"eps = {eps:.6g} above eps_2n ^ eps_1,2n = {eps_cap:.6g}")
    lo = max(compute_Tn(n, c0, _c(est, 2 * n)), compute_Tn(2 * n, c0, _c(est, 4 * n)))
    hi = compute_Tn_eps(2 * n, eps, c0, est.d1_hat, est.d2_hat).value if eps < 1 else 0.0
    if not lo < hi:
        raise EmptyWindowError(f"[T_n v T_2n, T_2n^eps] = [{lo:.6g}, {hi:.6g}] is empty")
    if t_grid is None:
        if not math.isfinite(hi):
            raise EmptyWindowError("window is unbounded; pass an explicit t grid")
        t_grid = np.linspace(lo, hi, points)
    ts = np.asarray(t_grid, dtype=float)
    if np.any(ts < lo - 1e-9) or np.any(ts > hi + 1e-9):
        raise EmptyWindowError("t grid leaves the window")
    steps = _snap_inside(ts, lo, hi, dt)
    x0 = np.asarray(x0, dtype=float)
    xnorm = float(np.linalg.norm(x0))
    cfg = OUSimConfig(spec, [x0, np.zeros_like(x0)], dt, float(steps[-1] * dt), samples, seed, "solution-formula", record_steps=tuple(int(k) for k in steps), tol=tol)
    res = simulate(cfg, workers)
    times = res.times
    rows = []
    kappas, kappa_se = [], []
    for j, t in enumerate(times):
        with np.errstate(divide="ignore"):
            v, e = log_moment(np.log(np.linalg.norm(res.states[0, :, j], axis=-1)), n)
        m = math.exp(v / n)
        k = m - math.exp(flow.mu_inf * t / 4.0) * xnorm
        kappas.append(k)
        kappa_se.append(m * e / n)
        rows.append(make_report("kappa_hat", n, eps, t, math.inf, k, m * e / n, samples))
    j = int(np.argmax(kappas))
    rows.append(make_report("kappa_max", n, eps, times[j], math.inf, max(kappas[j], 0.0), kappa_se[j], samples))
    # trend of E(||X^0_t||^n)^{1/n}: slope as a linear functional of per-path values
    P = np.linalg.norm(res.states[1], axis=-1) ** n
    means = P.mean(axis=0)
    roots = means ** (1.0 / n)
    if times.size >= 2 and np.all(means > 0):
        c = (times - times.mean()) / np.sum((times - times.mean()) ** 2)
        slope = float(c @ roots)
        lin = P @ (c * roots / (n * means))
        se = float(lin.std(ddof=1) / math.sqrt(samples))
        rows.append(make_report("kappa_trend", n, eps, times[-1], 0.0, slope, se, samples, sense="trend"))
    return rows


# ----------------------------------------------------------------------------
# Lyapunov surrogate and Markov scaling


def _failure_weights(spec: CoefficientProcessSpec, s: float, durations, samples, seed, tol, inflation, workers):
    """Indicator of the failure event times its importance weight, per path."""
    pert = spec.perturbation
    r = spec.dim
    lam = 1.0
    if pert.kind == "frozen-gaussian" and spec.epsilon > 0:
        lam = (
            max(1.0, -spec.flow.mu_inf / (2.0 * spec.epsilon * pert.sigma * math.sqrt(r)))
            if inflation is None
            else float(inflation)
        )
    prop_spec = replace(spec, perturbation=replace(pert, sigma=pert.sigma * lam)) if lam != 1.0 else spec

    def run(ids):
        batch = _batch(prop_spec, s + float(durations[-1]), 0.05, seed, ids)
        props = propagate_many(batch, s, s + durations, tol)
        logs = np.stack([log_norm_of(P) for P in props], axis=1)
        fail = ~event_indicator(logs, durations, spec.flow.mu_inf)
        if lam == 1.0:
            return fail.astype(float)
        w = batch.dA[:, 0] / pert.sigma
        q = np.sum(w * w, axis=(-2, -1))
        logw = r * r * math.log(lam) - 0.5 * (1.0 - 1.0 / lam**2) * q
        return np.where(fail, np.exp(logw), 0.0)

    if spec.epsilon == 0.0:
        return np.zeros(samples), lam
    return np.concatenate(rng.map_chunks(run, np.arange(samples), CHUNK, workers)), lam


def certify_as_lyapunov(
    spec: CoefficientProcessSpec,
    est: HypothesisEstimates,
    s: float,
    t_list: Sequence[float],
    eps_list: Sequence[float],
    n: int,
    samples: int,
    seed: int = 0,
    tol: float = 1e-9,
    h: float | None = None,
    importance: bool = True,
    workers: int | None = None,
) -> list[BoundReport]:
    """Failure frequency ``1 - P(rate event)`` versus ``(eps cbar_n)^n`` per eps.

    For frozen Gaussian perturbations the draws are importance-sampled with
    inflated entry variance, so rare failures are still resolved.  A final
    ``markov_slope`` row regresses log failure frequency on log eps
    (weighted by the delta-method variances) and certifies slope >= n - 1/2.
    """
    flow = spec.flow
    c0 = -flow.mu_inf
    durations = np.asarray(t_list, dtype=float)
    h = 4.0 * flow.a / (flow.b * c0) if h is None else h
    if max(s, float(durations[0])) < h:
        raise GateUnsatisfiedError(f"s v t_1 = {max(s, float(durations[0])):.6g} below h = {h:.6g}")
    cb = cbar_n(_c(est, n), c0)
    rows, pts = [], []
    for eps in eps_list:
        sp = spec.with_epsilon(eps)
        vals, lam = _failure_weights(sp, s, durations, samples, seed, tol, None if importance else 1.0, workers)
        p, se = mean_se(vals)
        rows.append(make_report("failure_frequency", n, eps, float(durations[-1]), min(1.0, (eps * cb) ** n), p, se, samples, note=f"inflation={lam:.6g}"))
        if p > 0 and eps > 0:
            pts.append((math.log(eps), math.log(p), se / p))
    if len(pts) >= 2:
        x, y, sy = (np.array(v) for v in zip(*pts))
        w = 1.0 / np.maximum(sy, 1e-12) ** 2
        xb = np.sum(w * x) / np.sum(w)
        sxx = np.sum(w * (x - xb) ** 2)
        slope = float(np.sum(w * (x - xb) * (y - np.sum(w * y) / np.sum(w))) / sxx)
        slope_se = float(math.sqrt(1.0 / sxx))
        rows.append(make_report("markov_slope", n, min(eps_list), float(durations[-1]), n - 0.5, slope, slope_se, samples, sense="lower"))
    elif any(e > 0 for e in eps_list):
        rows.append(blocked_report("markov_slope", n, min(eps_list), float(durations[-1]), INCONCLUSIVE, "fewer than two eps with observed failures"))
    return rows


def normal_cdf(x: float) -> float:
    return float(0.5 * math.erfc(-x / math.sqrt(2.0)))


__all__ = [
    "BoundReport",
    "TheoremWindow",
    "TnEps",
    "LemmaBound",
    "compute_eps_n_nu",
    "compute_Tn",
    "compute_Tn_eps",
    "eps_2n_threshold",
    "d_const",
    "cbar_n",
    "crude_moment_bound",
    "required_orders",
    "declared_estimates",
    "estimate_constants",
    "theorem_window",
    "verdict_for",
    "make_report",
    "log_moment",
    "wilson",
    "pathwise_log_norms",
    "event_indicator",
    "normal_cdf",
    "mean_se",
    "blocked_report",
    "certify_averaged_flow",
    "certify_mean_log",
    "certify_event_probability",
    "certify_moment_window",
    "certify_lemma",
    "certify_fluctuation",
    "certify_contraction",
    "certify_moment_boundedness",
    "certify_as_lyapunov",
]
