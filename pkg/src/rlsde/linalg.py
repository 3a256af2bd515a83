"""Dense real matrix kernels.

Matrices are plain ``numpy`` arrays of shape ``(..., r, r)``; every kernel
broadcasts over leading batch dimensions so Monte Carlo code can evaluate
thousands of small matrices in one call.  Symmetric eigenvalues come from
LAPACK's tridiagonal reduction followed by QL/QR iteration; eigenvectors come
from a cyclic Jacobi sweep.  Both are deterministic, and each element of a
batch is solved on its own, so its answer does not depend on the rest of the
batch.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NotHurwitzError, NotPsdError

SYM_RTOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


def as_square(A, name: str = "A") -> np.ndarray:
    """Validate and return ``A`` as a float array of shape (..., r, r)."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or A.shape[-1] < 1:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def sym_tol(B: np.ndarray) -> np.ndarray:
    """Symmetry/PSD tolerance 1e-12 * (1 + ||B||), per batch element."""
    return SYM_RTOL * (1.0 + spectral_norm(B))


def as_psd(B, name: str = "B") -> np.ndarray:
    """Validate that ``B`` is symmetric PSD within tolerance; return it symmetrized."""
    B = as_square(B, name)
    tol = sym_tol(B)
    asym = np.max(np.abs(B - np.swapaxes(B, -1, -2)), axis=(-2, -1))
    if np.any(asym > tol):
        raise NotPsdError(f"{name} is not symmetric (max asymmetry {np.max(asym):.3e})")
    S = sym_part(B)
    lam_min = eigvalsh(S)[..., 0]
    if np.any(lam_min < -tol):
        raise NotPsdError(f"{name} has negative eigenvalue {np.min(lam_min):.3e}")
    return S


def sym_part(A) -> np.ndarray:
    """Symmetric part (A + A^T)/2."""
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _jacobi(S: np.ndarray, want_vectors: bool):
    """Cyclic Jacobi on a stack of symmetric matrices.

    Returns eigenvalues in ascending order and, optionally, the matching
    orthonormal eigenvectors as columns.  Each batch element stops rotating
    once its own off-diagonal mass is negligible, so converged elements are
    left untouched by later sweeps.
    """
    S = np.array(S, dtype=float, copy=True)
    batch = S.shape[:-2]
    r = S.shape[-1]
    S = S.reshape((-1, r, r))
    V = np.broadcast_to(np.eye(r), S.shape).copy() if want_vectors else None
    if r > 1:
        iu = np.triu_indices(r, 1)
        for _ in range(_JACOBI_MAX_SWEEPS):
            off = np.sum(S[:, iu[0], iu[1]] ** 2, axis=1)
            diag = np.sum(np.diagonal(S, axis1=1, axis2=2) ** 2, axis=1)
            active = off > (1e-32 * diag)
            if not np.any(active):
                break
            for p in range(r - 1):
                for q in range(p + 1, r):
                    apq = S[:, p, q]
                    rotate = active & (apq != 0.0)
                    if not np.any(rotate):
                        continue
                    app = S[:, p, p]
                    aqq = S[:, q, q]
                    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                        theta = np.where(rotate, (aqq - app) / (2.0 * np.where(rotate, apq, 1.0)), 0.0)
                        t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                    t = np.where(theta == 0.0, 1.0, t)
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    c = np.where(rotate, c, 1.0)
                    s = np.where(rotate, s, 0.0)
                    cc = c[:, None]
                    ss = s[:, None]
                    col_p = S[:, :, p].copy()
                    col_q = S[:, :, q].copy()
                    S[:, :, p] = cc * col_p - ss * col_q
                    S[:, :, q] = ss * col_p + cc * col_q
                    row_p = S[:, p, :].copy()
                    row_q = S[:, q, :].copy()
                    S[:, p, :] = cc * row_p - ss * row_q
                    S[:, q, :] = ss * row_p + cc * row_q
                    S[:, p, q] = np.where(rotate, 0.0, S[:, p, q])
                    S[:, q, p] = np.where(rotate, 0.0, S[:, q, p])
                    if want_vectors:
                        v_p = V[:, :, p].copy()
                        v_q = V[:, :, q].copy()
                        V[:, :, p] = cc * v_p - ss * v_q
                        V[:, :, q] = ss * v_p + cc * v_q
    w = np.diagonal(S, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    w = w.reshape(batch + (r,))
    if not want_vectors:
        return w
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return w, V.reshape(batch + (r, r))


def eigvalsh(S) -> np.ndarray:
    """Ascending eigenvalues of symmetric matrices (input is symmetrized)."""
    return np.linalg.eigvalsh(sym_part(S))


def eigh(S) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition ``S = V diag(w) V^T`` of symmetric matrices."""
    return _jacobi(sym_part(S), want_vectors=True)


def spectral_norm(A) -> np.ndarray:
    """Largest singular value sqrt(lambda_1(A A^T))."""
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 1:
        return np.abs(A[..., 0, 0])
    # Scaling keeps A A^T away from overflow/underflow for extreme inputs.
    scale = np.max(np.abs(A), axis=(-2, -1))
    safe = np.where(scale > 0.0, scale, 1.0)
    As = A / safe[..., None, None]
    lam = eigvalsh(As @ np.swapaxes(As, -1, -2))[..., -1]
    return np.where(scale > 0.0, safe * np.sqrt(np.maximum(lam, 0.0)), 0.0)


def log_norm(A) -> np.ndarray:
    """Logarithmic norm mu(A) = lambda_1(sym_part(A))."""
    return eigvalsh(sym_part(A))[..., -1]


def principal_sqrt(B) -> np.ndarray:
    """Principal symmetric square root of a PSD matrix.

    Raises:
        NotPsdError: if ``B`` has an eigenvalue below ``-tol_sym``.
    """
    B = as_square(B, "B")
    tol = sym_tol(B)
    w, V = eigh(B)
    if np.any(w[..., 0] < -tol):
        raise NotPsdError(f"B has negative eigenvalue {np.min(w[..., 0]):.3e}")
    root = np.sqrt(np.clip(w, 0.0, None))
    S = (V * root[..., None, :]) @ np.swapaxes(V, -1, -2)
    return sym_part(S)


def matrix_exp(A, t: float = 1.0) -> np.ndarray:
    """exp(A t) by scaling and squaring of a degree-18 Taylor polynomial."""
    X = np.asarray(A, dtype=float) * float(t)
    r = X.shape[-1]
    norm = np.max(np.sum(np.abs(X), axis=-2), axis=-1)
    n_sq = int(np.max(np.ceil(np.log2(np.maximum(norm, 1e-300) / 0.25)).clip(0))) if X.size else 0
    X = X / 2.0**n_sq
    eye = np.broadcast_to(np.eye(r), X.shape)
    # Horner evaluation of sum_k X^k / k!
    E = eye.copy()
    for k in range(18, 0, -1):
        E = eye + (X @ E) / k
    for _ in range(n_sq):
        E = E @ E
    return E


def is_hurwitz(A) -> bool:
    """True when every eigenvalue of ``A`` has strictly negative real part."""
    return bool(np.all(np.linalg.eigvals(np.asarray(A, dtype=float)).real < 0.0))


def solve_lyapunov(A, B) -> np.ndarray:
    """Solve ``A P + P A^T + B = 0`` for a Hurwitz ``A`` and PSD ``B``."""
    A = as_square(A, "A")
    B = as_psd(B, "B")
    if A.ndim != 2:
        raise ValueError("solve_lyapunov takes a single matrix, not a batch")
    if not is_hurwitz(A):
        raise NotHurwitzError("A has an eigenvalue with nonnegative real part")
    P = scipy.linalg.solve_continuous_lyapunov(A, -B)
    return sym_part(P)
