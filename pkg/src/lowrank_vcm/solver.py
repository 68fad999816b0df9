"""Nuclear-norm penalized least squares over the coordinate matrix.

Minimizes ``(1/n) sum_i (y_i - <X_i, A>)^2 + lam ||A||_*`` with accelerated
proximal gradient (FISTA), function-value restart and singular value
thresholding as the proximal map.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .basis import Dictionary
from .model import Dataset, ShapeError, design_values

__all__ = [
    "SolverError",
    "DivergenceError",
    "SolverConfig",
    "SolverReport",
    "nuclear_norm",
    "numerical_rank",
    "objective",
    "smooth_loss",
    "gradient",
    "svt",
    "lipschitz_bound",
    "crude_lipschitz_bound",
    "zero_threshold",
    "solve",
]

RANK_RTOL = 1e-8
STALL_ITERS = 3


class SolverError(ArithmeticError):
    """Numerical failure inside the solver (SVD or non-finite values)."""


class DivergenceError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.0
    max_iter: int = 5000
    rel_tol: float = 1e-9
    step: float | str = "auto_lipschitz"
    accelerate: bool = True
    restart: bool = True

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be a finite nonnegative number")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.step != "auto_lipschitz":
            if isinstance(self.step, str) or not float(self.step) > 0:
                raise ValueError("fixed step must be a positive number")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class SolverReport:
    iterations: int
    objective_trace: list[float] = field(repr=False)
    final_objective: float
    rank_hat: int
    nuclear_norm_hat: float
    converged: bool
    step: float = 0.0
    restarts: int = 0

    def to_dict(self, include_trace: bool = False) -> dict:
        d = asdict(self)
        if not include_trace:
            d.pop("objective_trace")
        return d

    def to_json(self, include_trace: bool = False) -> str:
        return json.dumps(self.to_dict(include_trace), indent=2, sort_keys=True)

    def trace_csv(self) -> str:
        lines = ["iteration,objective"]
        lines += [f"{k},{v:.17g}" for k, v in enumerate(self.objective_trace)]
        return "\n".join(lines) + "\n"


def _svd(Z: np.ndarray):
    try:
        return np.linalg.svd(Z, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        finite = bool(np.all(np.isfinite(Z)))
        raise SolverError(
            f"SVD failed on {Z.shape} matrix (finite={finite}, "
            f"fro={np.linalg.norm(Z) if finite else float('nan'):.3e})"
        ) from exc


def nuclear_norm(A) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)))


def numerical_rank(A, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def svt(Z, tau: float) -> np.ndarray:
    """Singular value soft-thresholding, the prox of ``tau ||.||_*``."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise SolverError("svt input contains non-finite entries")
    if tau == 0:
        return Z.copy()
    U, s, Vt = _svd(Z)
    s = np.maximum(s - tau, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep]


def smooth_loss(A, data: Dataset, dictionary: Dictionary) -> float:
    r = data.y - design_values(A, data, dictionary)
    return float(r @ r) / data.n


def objective(A, data: Dataset, dictionary: Dictionary, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return smooth_loss(A, data, dictionary) + lam * nuclear_norm(A)


def _adjoint(weights: np.ndarray, data: Dataset, phi: np.ndarray) -> np.ndarray:
    # sum_i weights_i w_i phi_i^T
    return (data.W * weights[:, None]).T @ phi


def gradient(A, data: Dataset, dictionary: Dictionary) -> np.ndarray:
    """Gradient of the squared-loss term, ``(2/n) sum_i (<X_i,A> - y_i) X_i``."""
    phi = data.phi(dictionary)
    r = design_values(A, data, dictionary) - data.y
    return _adjoint(2.0 * r / data.n, data, phi)


def crude_lipschitz_bound(data: Dataset, dictionary: Dictionary) -> float:
    phi = data.phi(dictionary)
    return 2.0 * float(np.sum(np.sum(data.W ** 2, axis=1) * np.sum(phi ** 2, axis=1))) / data.n


def lipschitz_bound(data: Dataset, dictionary: Dictionary, max_iter: int = 2000,
                    tol: float = 1e-12) -> float:
    """Lipschitz constant of the loss gradient, ``2 lambda_max((1/n) sum X_i X_i^T)``.

    Krylov (Lanczos) iteration on the matrix-free normal operator, started
    from a fixed vector so the result is reproducible.  Falls back to the
    crude ``(2/n) sum ||w_i||^2 ||phi(t_i)||^2`` if the iteration fails to
    converge.
    """
    phi = data.phi(dictionary)
    crude = crude_lipschitz_bound(data, dictionary)
    if crude == 0.0:
        return 0.0
    p, l, n = data.p, dictionary.l, data.n
    dim = p * l

    def matvec(v):
        V = np.asarray(v, dtype=float).reshape(p, l)
        u = np.einsum("ij,ij->i", data.W @ V, phi)
        return _adjoint(u / n, data, phi).ravel()

    if dim <= 2:
        H = np.column_stack([matvec(e) for e in np.eye(dim)])
        return min(2.0 * float(np.linalg.eigvalsh(0.5 * (H + H.T))[-1]), crude)
    op = LinearOperator((dim, dim), matvec=matvec, dtype=float)
    v0 = np.random.default_rng(12345).standard_normal(dim)
    try:
        top = eigsh(op, k=1, which="LA", v0=v0, tol=tol, maxiter=max_iter,
                    return_eigenvectors=False)
    except ArpackNoConvergence:
        return crude
    return min(2.0 * float(top[0]), crude)


def zero_threshold(data: Dataset, dictionary: Dictionary) -> float:
    """Smallest ``lam`` for which ``A = 0`` solves the problem."""
    B = _adjoint(2.0 * data.y / data.n, data, data.phi(dictionary))
    if not np.any(B):
        return 0.0
    return float(np.linalg.norm(B, 2))


def solve(data: Dataset, dictionary: Dictionary, config: SolverConfig,
          init=None) -> tuple[np.ndarray, SolverReport]:
    """Minimize the penalized objective; returns ``(A_hat, report)``.

    Iteration stops once the relative objective change stays below
    ``config.rel_tol`` for three consecutive iterations.  With restart
    enabled an iterate that raises the objective is replaced by a plain
    proximal-gradient step from the previous point, so the trace never
    increases.
    """
    p, l = data.p, dictionary.l
    phi = data.phi(dictionary)
    W, y, n = data.W, data.y, data.n
    lam = config.lam

    if init is None:
        X = np.zeros((p, l))
    else:
        X = np.array(init, dtype=float)
        if X.shape != (p, l):
            raise ShapeError(f"init has shape {X.shape}, expected {(p, l)}")

    if config.step == "auto_lipschitz":
        L = lipschitz_bound(data, dictionary)
        if L == 0.0:
            L = 1.0
        # power iteration approaches lambda_max from below
        L *= 1.0 + 1e-9
    else:
        L = 1.0 / float(config.step)

    def f_and_grad(A):
        r = np.einsum("ij,ij->i", W @ A, phi) - y
        return float(r @ r) / n, _adjoint(2.0 * r / n, data, phi)

    def loss(A):
        r = np.einsum("ij,ij->i", W @ A, phi) - y
        return float(r @ r) / n

    def prox(Z, tau):
        U, s, Vt = _svd(Z)
        s = np.maximum(s - tau, 0.0)
        keep = s > 0
        return (U[:, keep] * s[keep]) @ Vt[keep], float(np.sum(s))

    F = loss(X) + lam * nuclear_norm(X)
    if not math.isfinite(F):
        raise DivergenceError("objective is not finite at the starting point")
    trace = [F]
    Y = X.copy()
    t_mom = 1.0
    stall = 0
    restarts = 0
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        fy, gy = f_and_grad(Y)
        X_new, nuc = prox(Y - gy / L, lam / L)
        F_new = loss(X_new) + lam * nuc
        if config.restart and F_new > F:
            restarts += 1
            t_mom = 1.0
            fx, gx = f_and_grad(X)
            X_new, nuc = prox(X - gx / L, lam / L)
            F_new = loss(X_new) + lam * nuc
            for _ in range(60):
                # only reached when the step is too long for the local curvature
                if not F_new > F + 1e-15 * abs(F):
                    break
                L *= 2.0
                X_new, nuc = prox(X - gx / L, lam / L)
                F_new = loss(X_new) + lam * nuc
            if F_new > F:
                X_new, F_new = X, F
        if not math.isfinite(F_new):
            raise DivergenceError(
                f"objective became non-finite at iteration {it}; step 1/L = {1.0 / L:.3e}")
        if config.accelerate:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
            Y = X_new + ((t_mom - 1.0) / t_next) * (X_new - X)
            t_mom = t_next
        else:
            Y = X_new
        change = abs(F - F_new) / max(abs(F), np.finfo(float).tiny)
        X, F = X_new, F_new
        trace.append(F)
        stall = stall + 1 if change < config.rel_tol else 0
        if stall >= STALL_ITERS:
            converged = True
            break

    s = np.linalg.svd(X, compute_uv=False)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    report = SolverReport(
        iterations=it,
        objective_trace=trace,
        final_objective=F,
        rank_hat=rank,
        nuclear_norm_hat=float(np.sum(s)),
        converged=converged,
        step=1.0 / L,
        restarts=restarts,
    )
    return X, report
