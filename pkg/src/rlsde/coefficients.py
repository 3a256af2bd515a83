"""Random drift/diffusion coefficient processes.

``A^eps_t = A_t + eps * dA_t`` where ``A_t`` is a deterministic decaying flow and
``dA`` is one of three zero-mean, time-stationary perturbation models.  The
diffusion matrix ``B^eps_t`` is either a constant PSD matrix or a polynomial
of the realized drift.  Samplers are pure functions of
``(spec, grid, seed, stream_id)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

from . import rng
from .errors import FitDegenerateError, GridExceededError
from .flows import Flow, eval_flow
from .linalg import as_psd, spectral_norm, sym_part

KINDS = ("entrywise-ou", "piecewise-constant-jump", "frozen-gaussian")
DIFFUSION_KINDS = ("constant-psd", "drift-coupled")


@dataclass(frozen=True)
class PerturbationModel:
    """Zero-mean entrywise perturbation ``dA``.

    ``sigma`` is the OU volatility for ``entrywise-ou`` (stationary entry std
    ``sigma / sqrt(2 theta)``), and the entry std for the other two kinds.
    ``rate`` is the jump intensity of ``piecewise-constant-jump``.
    """

    kind: str
    sigma: float
    theta: float = 1.0
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        for name in ("sigma", "theta", "rate"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v}")

    @property
    def entry_std(self) -> float:
        if self.kind == "entrywise-ou":
            return self.sigma / math.sqrt(2.0 * self.theta)
        return self.sigma

    @property
    def constant_in_time(self) -> bool:
        return self.kind == "frozen-gaussian"

    @property
    def interpolation(self) -> str:
        return "previous" if self.kind == "piecewise-constant-jump" else "linear"


@dataclass(frozen=True)
class DiffusionModel:
    """``constant-psd``: ``B = B0``; ``drift-coupled``: ``B = beta (I + gamma sym(A^eps)^2)``."""

    kind: str = "constant-psd"
    B0: np.ndarray | None = None
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in DIFFUSION_KINDS:
            raise ValueError(f"unknown diffusion kind {self.kind!r}")
        if self.kind == "constant-psd":
            if self.B0 is None:
                raise ValueError("constant-psd diffusion needs B0")
            B0 = as_psd(self.B0, "B0")
            B0.setflags(write=False)
            object.__setattr__(self, "B0", B0)
        elif self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")

    @classmethod
    def zero(cls, r: int) -> "DiffusionModel":
        return cls("constant-psd", np.zeros((r, r)))

    def evaluate(self, A_eps: np.ndarray) -> np.ndarray:
        """B for a stack of realized drift matrices."""
        if self.kind == "constant-psd":
            return np.broadcast_to(self.B0, A_eps.shape)
        S = sym_part(A_eps)
        eye = np.eye(A_eps.shape[-1])
        return self.beta * (eye + self.gamma * (S @ S))

    @property
    def is_zero(self) -> bool:
        if self.kind == "constant-psd":
            return not np.any(self.B0)
        return self.beta == 0.0


@dataclass(frozen=True)
class CoefficientProcessSpec:
    flow: Flow
    perturbation: PerturbationModel
    diffusion: DiffusionModel
    epsilon: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.diffusion.kind == "constant-psd" and self.diffusion.B0.shape[-1] != self.flow.dim:
            raise ValueError("B0 dimension does not match the flow")

    @property
    def dim(self) -> int:
        return self.flow.dim

    def with_epsilon(self, epsilon: float) -> "CoefficientProcessSpec":
        return replace(self, epsilon=float(epsilon))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at 0")
    return grid


def sample_perturbation(pert: PerturbationModel, r: int, grid, seed: int, stream_ids) -> np.ndarray:
    """Realizations of ``dA`` at the grid nodes, shape (N, K+1, r, r)."""
    grid = _check_grid(grid)
    streams = np.atleast_1d(np.asarray(stream_ids))
    n, nodes, rr = streams.size, grid.size, r * r
    if pert.kind == "frozen-gaussian":
        z = rng.normals(seed, rng.COEFFICIENT, streams, np.arange(rr)) * pert.sigma
        return np.broadcast_to(z.reshape(n, 1, r, r), (n, nodes, r, r))
    if pert.kind == "entrywise-ou":
        z = rng.normals(seed, rng.COEFFICIENT, streams, np.arange(nodes * rr)).reshape(n, nodes, rr)
        out = np.empty((n, nodes, rr))
        out[:, 0] = z[:, 0] * pert.entry_std
        dts = np.diff(grid)
        decay = np.exp(-pert.theta * dts)
        sd = pert.sigma * np.sqrt(-np.expm1(-2.0 * pert.theta * dts) / (2.0 * pert.theta))
        for k in range(1, nodes):
            out[:, k] = decay[k - 1] * out[:, k - 1] + sd[k - 1] * z[:, k]
        return out.reshape(n, nodes, r, r)
    # piecewise-constant-jump: a fresh iid draw replaces dA at each jump; at most
    # the last jump inside a grid cell is observable, so a Bernoulli per cell is exact.
    z = rng.normals(seed, rng.COEFFICIENT, streams, np.arange(nodes * rr)).reshape(n, nodes, rr) * pert.sigma
    u = rng.uniforms(seed, rng.JUMP_CLOCK, streams, np.arange(1, nodes))
    p_jump = -np.expm1(-pert.rate * np.diff(grid))
    jumped = np.concatenate([np.ones((n, 1), dtype=bool), u < p_jump], axis=1)
    last = np.maximum.accumulate(np.where(jumped, np.arange(nodes), 0), axis=1)
    return np.take_along_axis(z, last[:, :, None], axis=1).reshape(n, nodes, r, r)


@dataclass
class CoefficientBatch:
    """Realized coefficients of N trajectories.

    The deterministic flow is evaluated exactly at any time; only the
    perturbation is interpolated between grid nodes (linearly, or by the left
    limit for jump paths).  Frozen perturbations need no grid at all.
    """

    spec: CoefficientProcessSpec
    grid: np.ndarray
    dA: np.ndarray
    seed: int
    stream_ids: np.ndarray
    _dA_norm_max: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.dA.shape[0]

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def end_time(self) -> float:
        return math.inf if self.spec.perturbation.constant_in_time else float(self.grid[-1])

    def perturbation_at(self, u: float) -> np.ndarray:
        if self.spec.perturbation.constant_in_time:
            return self.dA[:, 0]
        if u > self.grid[-1] * (1 + 1e-12) or u < 0:
            raise GridExceededError(f"t = {u} outside realized grid [0, {self.grid[-1]}]")
        k = int(np.clip(np.searchsorted(self.grid, u, side="right") - 1, 0, self.grid.size - 1))
        if k == self.grid.size - 1 or u == self.grid[k]:
            return self.dA[:, k]
        if self.spec.perturbation.interpolation == "previous":
            return self.dA[:, k]
        w = (u - self.grid[k]) / (self.grid[k + 1] - self.grid[k])
        return (1.0 - w) * self.dA[:, k] + w * self.dA[:, k + 1]

    def left_limit_at(self, u: float) -> np.ndarray:
        """Perturbation just before ``u`` (differs from the value only at jumps)."""
        if self.spec.perturbation.interpolation != "previous" or self.spec.perturbation.constant_in_time:
            return self.perturbation_at(u)
        k = int(np.searchsorted(self.grid, u, side="left") - 1)
        return self.dA[:, max(k, 0)]

    def matrix_at(self, u: float, left: bool = False) -> np.ndarray:
        dA = self.left_limit_at(u) if left else self.perturbation_at(u)
        return eval_flow(self.spec.flow, u) + self.spec.epsilon * dA

    def diffusion_at(self, u: float) -> np.ndarray:
        return self.spec.diffusion.evaluate(self.matrix_at(u))

    def norm_bound(self, s: float, t: float) -> np.ndarray:
        """Per-trajectory upper bound on ``||A^eps_u||`` for ``u`` in [s, t]."""
        flow_part = self.spec.flow.sup_norm(s, t)
        if self.spec.epsilon == 0.0:
            return np.full(self.size, flow_part)
        if self.spec.perturbation.constant_in_time:
            if self._dA_norm_max is None:
                self._dA_norm_max = spectral_norm(self.dA[:, 0])
            return flow_part + self.spec.epsilon * self._dA_norm_max
        lo = max(int(np.searchsorted(self.grid, s, side="right")) - 1, 0)
        hi = min(int(np.searchsorted(self.grid, t, side="left")), self.grid.size - 1)
        norms = spectral_norm(self.dA[:, lo : hi + 1])
        return flow_part + self.spec.epsilon * norms.max(axis=1)

    def subset(self, idx) -> "CoefficientBatch":
        return CoefficientBatch(self.spec, self.grid, self.dA[idx], self.seed, self.stream_ids[idx])

    def realization(self, i: int) -> "PathRealization":
        A = eval_flow(self.spec.flow, self.grid) + self.spec.epsilon * self.dA[i]
        B = self.spec.diffusion.evaluate(A)
        return PathRealization(
            self.grid, A, np.array(B), self.seed, int(self.stream_ids[i]), self.spec.perturbation.interpolation
        )


def sample_coefficients(spec: CoefficientProcessSpec, grid, seed: int, stream_ids) -> CoefficientBatch:
    grid = _check_grid(grid)
    streams = np.atleast_1d(np.asarray(stream_ids))
    dA = sample_perturbation(spec.perturbation, spec.dim, grid, seed, streams)
    return CoefficientBatch(spec, grid, dA, int(seed), streams)


@dataclass(frozen=True)
class PathRealization:
    """Coefficient path materialized on a grid; linearly interpolated in between."""

    grid: np.ndarray
    A_values: np.ndarray
    B_values: np.ndarray
    seed: int = 0
    stream_id: int = 0
    interpolation: str = "linear"

    @property
    def dim(self) -> int:
        return self.A_values.shape[-1]

    @property
    def end_time(self) -> float:
        return float(self.grid[-1])

    def _locate(self, u: float):
        if u < 0 or u > self.grid[-1] * (1 + 1e-12):
            raise GridExceededError(f"t = {u} outside path grid [0, {self.grid[-1]}]")
        k = int(np.clip(np.searchsorted(self.grid, u, side="right") - 1, 0, self.grid.size - 1))
        return k

    def matrix_at(self, u: float, left: bool = False) -> np.ndarray:
        k = self._locate(u)
        if self.interpolation == "previous":
            if left and k > 0 and u == self.grid[k]:
                k -= 1
            return self.A_values[k]
        if k == self.grid.size - 1:
            return self.A_values[k]
        w = (u - self.grid[k]) / (self.grid[k + 1] - self.grid[k])
        return (1.0 - w) * self.A_values[k] + w * self.A_values[k + 1]

    def diffusion_at(self, u: float) -> np.ndarray:
        return self.B_values[self._locate(u)]

    def norm_bound(self, s: float, t: float) -> float:
        lo = max(int(np.searchsorted(self.grid, s, side="right")) - 1, 0)
        hi = min(int(np.searchsorted(self.grid, t, side="left")), self.grid.size - 1)
        return float(np.max(spectral_norm(self.A_values[lo : hi + 1])))


def sample_coefficient_path(spec: CoefficientProcessSpec, grid, seed: int, stream_id: int) -> PathRealization:
    """One reproducible grid realization of ``(A^eps, B^eps)``."""
    return sample_coefficients(spec, grid, seed, [stream_id]).realization(0)


def write_path_file(path: str | Path, realization: PathRealization, states: np.ndarray | None = None) -> None:
    """Columnar little-endian dump: r, K, grid, A values, B values[, states]."""
    grid = np.asarray(realization.grid, dtype="<f8")
    r = realization.dim
    K = grid.size - 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", r, K))
        fh.write(grid.tobytes())
        fh.write(np.ascontiguousarray(realization.A_values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(realization.B_values, dtype="<f8").tobytes())
        if states is not None:
            fh.write(np.ascontiguousarray(states, dtype="<f8").reshape(K + 1, r).tobytes())


def read_path_file(path: str | Path) -> tuple[PathRealization, np.ndarray | None]:
    data = Path(path).read_bytes()
    r, K = struct.unpack_from("<qq", data, 0)
    off = 16
    n = K + 1

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return arr

    grid = take(n)
    A = take(n * r * r).reshape(n, r, r)
    B = take(n * r * r).reshape(n, r, r)
    states = take(n * r).reshape(n, r) if len(data) - off >= 8 * n * r else None
    return PathRealization(grid, A, B), states


@dataclass
class HypothesisEstimates:
    """Empirical moment and diffusion hypothesis constants; sup over t is a max over the grid."""

    n_list: list[int]
    c_n_hat: dict[int, float]
    c_n_se: dict[int, float]
    d1_hat: float = 0.0
    d2_hat: float = 0.0
    h2_raw: dict[int, float] = field(default_factory=dict)
    rho_n_hat: dict[int, float] = field(default_factory=dict)
    eps_n: dict[int, float] = field(default_factory=dict)
    sample_count: int = 0
    grid_horizon: float = 0.0

    def c(self, n: int) -> float:
        return self.c_n_hat[n]


def _moment_over_grid(values: np.ndarray, n_list: Sequence[int]) -> tuple[dict, dict]:
    """max over nodes of mean(values**n)**(1/n), with a delta-method SE at the argmax.

    ``values`` has shape (samples, nodes) and is nonnegative.
    """
    N = values.shape[0]
    est, se = {}, {}
    scale = max(float(values.max()), 1e-300)
    v = values / scale
    for n in n_list:
        p = v**n
        m = p.mean(axis=0)
        k = int(np.argmax(m))
        moment = m[k]
        if moment <= 0:
            est[n], se[n] = 0.0, 0.0
            continue
        sd = p[:, k].std(ddof=1) if N > 1 else 0.0
        est[n] = scale * moment ** (1.0 / n)
        se[n] = scale * moment ** (1.0 / n - 1.0) / n * sd / math.sqrt(N)
    return est, se


def _isotonic(n_list: Sequence[int], values: dict[int, float]) -> dict[int, float]:
    ordered = sorted(n_list)
    out, running = {}, 0.0
    for n in ordered:
        running = max(running, values[n])
        out[n] = running
    return out


def estimation_grid(horizon: float, points: int) -> np.ndarray:
    return np.linspace(0.0, horizon, max(int(points), 2))


def _chunked_dA(spec, grid, samples, seed, chunk=512):
    """Yield perturbation chunks; frozen models only need one node."""
    g = grid[:1] if spec.perturbation.constant_in_time else grid
    for lo in range(0, samples, chunk):
        ids = np.arange(lo, min(lo + chunk, samples))
        yield ids, g, sample_perturbation(spec.perturbation, spec.dim, g, seed, ids)


def estimate_h1_constants(
    spec: CoefficientProcessSpec, n_list: Sequence[int], samples: int, grid, seed: int = 0
) -> HypothesisEstimates:
    """c_n estimates: max over grid of the empirical n-th moment of ``||dA_t||``.

    Uses ``A_t - A^eps_t = -eps dA_t`` so the estimate does not depend on eps.
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    if not spec.epsilon > 0:
        raise ValueError("epsilon must be positive to define c_n")
    grid = _check_grid(grid)
    norms = np.concatenate([spectral_norm(dA) for _, _, dA in _chunked_dA(spec, grid, samples, seed)])
    est, se = _moment_over_grid(norms, n_list)
    return HypothesisEstimates(
        n_list=sorted(int(n) for n in n_list),
        c_n_hat=_isotonic(n_list, est),
        c_n_se=se,
        eps_n={int(n): 1.0 for n in n_list},
        sample_count=samples,
        grid_horizon=float(grid[-1]),
    )


def h2_raw_moments(
    spec: CoefficientProcessSpec, n_list: Sequence[int], samples: int, grid, seed: int = 0
) -> tuple[dict, dict]:
    """max over grid of ``E(||A^eps_t||^n)^{1/n}`` and its SE, per n."""
    grid = _check_grid(grid)
    flow_vals = eval_flow(spec.flow, grid)
    chunks = []
    for lo in range(0, samples, 512):
        ids = np.arange(lo, min(lo + 512, samples))
        dA = sample_perturbation(spec.perturbation, spec.dim, grid, seed, ids)
        chunks.append(spectral_norm(flow_vals + spec.epsilon * dA))
    return _moment_over_grid(np.concatenate(chunks), n_list)


def fit_h2(n_list: Sequence[int], raw: dict[int, float], epsilon: float) -> tuple[float, float]:
    """Nonnegative least squares of raw[n] against d1 + eps d2 sqrt(n)."""
    ns = sorted(set(int(n) for n in n_list))
    if len(ns) < 2:
        raise FitDegenerateError("need at least two moment orders to fit (d1, d2)")
    y = np.array([raw[n] for n in ns])
    if epsilon == 0.0:
        return float(y.mean()), 0.0
    X = np.column_stack([np.ones(len(ns)), epsilon * np.sqrt(ns)])
    coef, _ = nnls(X, y)
    return float(coef[0]), float(coef[1])


def estimate_h2_constants(
    spec: CoefficientProcessSpec, n_list: Sequence[int], samples: int, grid, seed: int = 0
) -> HypothesisEstimates:
    """(d1, d2) fit plus c_n (when eps > 0) on a shared sample."""
    if len(set(n_list)) < 2:
        raise FitDegenerateError("need at least two moment orders to fit (d1, d2)")
    if samples < 100:
        raise ValueError("need at least 100 samples")
    raw, _ = h2_raw_moments(spec, n_list, samples, grid, seed)
    d1, d2 = fit_h2(n_list, raw, spec.epsilon)
    if spec.epsilon > 0:
        est = estimate_h1_constants(spec, n_list, samples, grid, seed)
    else:
        grid = _check_grid(grid)
        est = HypothesisEstimates(sorted(int(n) for n in n_list), {}, {}, sample_count=samples, grid_horizon=float(grid[-1]))
    est.d1_hat, est.d2_hat, est.h2_raw = d1, d2, raw
    return est


def estimate_rho_n(
    spec: CoefficientProcessSpec, n_list: Sequence[int], samples: int, grid, seed: int = 0
) -> dict[int, float]:
    """rho_n estimates: max over grid of ``E[tr(B^eps_t)^n]^{1/n}``."""
    grid = _check_grid(grid)
    if spec.diffusion.kind == "constant-psd":
        tr = float(np.trace(spec.diffusion.B0))
        return {int(n): tr for n in n_list}
    flow_vals = eval_flow(spec.flow, grid)
    traces = []
    for lo in range(0, samples, 512):
        ids = np.arange(lo, min(lo + 512, samples))
        dA = sample_perturbation(spec.perturbation, spec.dim, grid, seed, ids)
        B = spec.diffusion.evaluate(flow_vals + spec.epsilon * dA)
        traces.append(np.trace(B, axis1=-2, axis2=-1))
    est, _ = _moment_over_grid(np.concatenate(traces), n_list)
    return est


def estimate_hypotheses(
    spec: CoefficientProcessSpec,
    n_list: Sequence[int],
    samples: int,
    grid,
    seed: int = 0,
) -> HypothesisEstimates:
    """All constants (c_n, d1, d2, rho_n) for ``spec`` at its own epsilon."""
    est = estimate_h2_constants(spec, n_list, samples, grid, seed)
    est.rho_n_hat = estimate_rho_n(spec, n_list, samples, grid, seed)
    return est

