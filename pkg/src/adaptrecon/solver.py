"""BiCGSTAB and the locally preconditioned vertex update."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

LAMBDA_MIN = 16.0
LAMBDA_MAX = 64.0


class SolverError(RuntimeError):
    """Breakdown or iteration exhaustion; ``residual`` is the relative residual reached."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iter: int | None = None  # None -> 10 * n
    step_size: float = 2e-3

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")


@dataclass
class LambdaField:
    """Per-vertex smoothing strengths and the normalized epoch they belong to."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("lambda values must be finite and nonnegative")

    @classmethod
    def constant(cls, n: int, value: float, t: float = 0.0) -> "LambdaField":
        return cls(np.full(n, float(value)), t)

    def __len__(self):
        return len(self.values)


class SmoothingOperator:
    """Matrix-free ``A = I + diag(lam) L``."""

    def __init__(self, L: sp.spmatrix, lam):
        self.L = sp.csr_matrix(L)
        n = self.L.shape[0]
        self.lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
        if self.lam.shape[0] != n:
            raise ValueError("lambda size does not match the Laplacian")
        self.shape = (n, n)

    def __matmul__(self, x):
        Lx = self.L @ x
        lam = self.lam if x.ndim == 1 else self.lam[:, None]
        return x + lam * Lx

    def to_dense(self) -> np.ndarray:
        return np.eye(self.shape[0]) + self.lam[:, None] * self.L.toarray()


def _apply(A, x):
    return A(x) if callable(A) and not hasattr(A, "__matmul__") else A @ x


def _bicgstab_vec(A, b, tol, max_iter, max_restarts=10):
    n = b.shape[0]
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    if bnorm == 0:
        return x, 0
    eps = np.finfo(float).eps
    total = 0
    r = b.copy()
    res = 1.0
    reason = "did not converge"
    # near-breakdown or residual drift restarts with a fresh shadow residual
    for _restart in range(max_restarts + 1):
        r_hat = r.copy()
        rho_prev = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        progressed = False
        while total < max_iter:
            rho = np.dot(r_hat, r)
            if abs(rho) <= eps * np.linalg.norm(r_hat) * np.linalg.norm(r):
                reason = "breakdown (rho ~ 0)"
                break
            total += 1
            progressed = True
            beta = (rho / rho_prev) * (alpha / omega)
            p = r + beta * (p - omega * v)
            v = _apply(A, p)
            denom = np.dot(r_hat, v)
            if denom == 0:
                reason = "breakdown (r_hat . v = 0)"
                break
            alpha = rho / denom
            s = r - alpha * v
            if np.linalg.norm(s) <= 0.5 * tol * bnorm:
                x = x + alpha * p
                break
            t = _apply(A, s)
            tt = np.dot(t, t)
            if tt == 0:
                x = x + alpha * p
                reason = "breakdown (omega undefined)"
                break
            omega = np.dot(t, s) / tt
            x = x + alpha * p + omega * s
            r = s - omega * t
            if np.linalg.norm(r) <= 0.5 * tol * bnorm:
                break
            if omega == 0:
                reason = "breakdown (omega = 0)"
                break
            rho_prev = rho
        r = b - _apply(A, x)
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return x, total
        if total >= max_iter or not progressed:
            break
        log.debug("BiCGSTAB restart after %d iterations (%s, residual %.3g)", total, reason, res)
    raise SolverError(f"BiCGSTAB {reason}", res, total)


def bicgstab_solve(A, b, cfg: SolverConfig | None = None) -> np.ndarray:
    """Solve ``A x = b`` with unpreconditioned BiCGSTAB from ``x0 = 0``.

    ``A`` may be anything supporting ``A @ x`` (sparse matrix, dense array,
    :class:`SmoothingOperator`) or a callable. ``b`` may be ``(n,)`` or
    ``(n, k)``; columns are solved independently. On success
    ``||A x - b|| <= tol * ||b||`` holds for every column.
    """
    cfg = cfg or SolverConfig()
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side is not finite")
    n = b.shape[0]
    max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * n
    if b.ndim == 1:
        return _bicgstab_vec(A, b, cfg.tol, max_iter)[0]
    out = np.empty_like(b)
    for k in range(b.shape[1]):
        out[:, k] = _bicgstab_vec(A, np.ascontiguousarray(b[:, k]), cfg.tol, max_iter)[0]
    return out


def preconditioned_direction(grad: np.ndarray, lam: LambdaField, L: sp.spmatrix,
                             cfg: SolverConfig | None = None) -> np.ndarray:
    """``(I + diag(lam) L)^-2 grad`` via two sequential solves per axis."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains NaN or inf")
    if len(lam) != grad.shape[0]:
        raise ValueError("lambda field size does not match the gradient")
    A = SmoothingOperator(L, lam.values)
    y = bicgstab_solve(A, grad, cfg)
    return bicgstab_solve(A, y, cfg)


def preconditioned_step(mesh, grad: np.ndarray, lam: LambdaField, L: sp.spmatrix,
                        cfg: SolverConfig | None = None) -> np.ndarray:
    """Return updated vertex positions ``v - tau (I + Lambda L)^-2 grad``."""
    cfg = cfg or SolverConfig()
    if grad.shape != mesh.vertices.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match vertices {mesh.vertices.shape}")
    x = preconditioned_direction(grad, lam, L, cfg)
    return mesh.vertices - cfg.step_size * x
