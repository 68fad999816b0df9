"""Theory-driven tuning: design moments, regularization level, sample-size
thresholds, dictionary size selection and error-bound scales.

Generic numerical constants that the theory leaves unspecified are exposed
as the ``C`` argument (default 1) and echoed in every report.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import ApproxSpec, Dictionary, expand_function

__all__ = [
    "SingularDesignWarning",
    "DesignMoments",
    "NoiseSpec",
    "TuningParams",
    "design_moments",
    "lambda_general",
    "lambda_orthonormal",
    "sample_thresholds",
    "l_hat_dense",
    "l_hat_mid",
    "l_hat_smooth",
    "l_hat_minimax",
    "LSelection",
    "select_l",
    "beta_bound",
    "beta_branch",
    "noise_norm_bound",
    "rademacher_norm_bound",
    "fit_approx_spec",
    "tune_report",
]

GAUSSIAN_C_STAR = 6.5
GAUSSIAN_K = 1.0
LAMBDA_FACTOR = 4.25
RADEMACHER_MEAN_FACTOR = 4.6


class SingularDesignWarning(UserWarning):
    """The design second-moment matrix is singular."""


@dataclass(frozen=True)
class DesignMoments:
    omega: np.ndarray = field(repr=False)
    omega_min: float
    omega_max: float
    trace_omega: float
    M: float
    l: int
    kind: str = "empirical"
    positive_definite: bool = True

    def with_l(self, l: int) -> "DesignMoments":
        return replace(self, l=l, M=max(self.trace_omega, l * self.omega_max))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "omega_min": self.omega_min, "omega_max": self.omega_max,
                "trace_omega": self.trace_omega, "M": self.M, "l": self.l,
                "positive_definite": self.positive_definite}


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 1.0
    K: float = GAUSSIAN_K
    c_star: float = GAUSSIAN_C_STAR

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.K <= 0 or self.c_star <= 0:
            raise ValueError("K and c_star must be positive")


@dataclass(frozen=True)
class TuningParams:
    noise: NoiseSpec
    approx: ApproxSpec
    s: int
    moments: DesignMoments
    p: int
    l: int
    n: int
    c_phi: float = math.sqrt(2.0)

    def __post_init__(self):
        if not 1 <= self.s <= self.p + 1:
            raise ValueError("need 1 <= s <= p + 1")
        if self.moments.l != self.l:
            object.__setattr__(self, "moments", self.moments.with_l(self.l))

    @property
    def d(self) -> int:
        return self.p + self.l

    @property
    def M(self) -> float:
        return self.moments.M

    def to_dict(self) -> dict:
        return {
            "noise": asdict(self.noise),
            "approx": asdict(self.approx),
            "s": self.s, "p": self.p, "l": self.l, "n": self.n, "d": self.d,
            "c_phi": self.c_phi,
            "moments": self.moments.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def design_moments(samples: Sequence | np.ndarray | str, l: int, p: int | None = None) -> DesignMoments:
    """Second-moment matrix of the covariates and the derived scale ``M``.

    ``samples`` is either an ``(m, p)`` array of draws or the name of an
    analytic design: ``"canonical_uniform"`` (uniform over the standard basis)
    or ``"sphere_uniform"`` (uniform on the unit sphere); both give
    ``Omega = I / p`` exactly.
    """
    if isinstance(samples, str):
        if samples not in ("canonical_uniform", "sphere_uniform"):
            raise ValueError(f"unknown analytic design {samples!r}")
        if p is None:
            raise ValueError("analytic designs need p")
        omega = np.eye(p) / p
        w = 1.0 / p
        return DesignMoments(omega, w, w, 1.0, max(1.0, l * w), l, samples, True)
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    if S.shape[0] == 0:
        raise ValueError("need at least one sample")
    omega = S.T @ S / S.shape[0]
    eig = np.linalg.eigvalsh(omega)
    wmin = max(float(eig[0]), 0.0)
    wmax = float(eig[-1])
    tr = float(np.trace(omega))
    pd = wmin > 1e-12 * max(wmax, 1e-300)
    if not pd:
        warnings.warn("design second-moment matrix is singular",
                      SingularDesignWarning, stacklevel=2)
        wmin = 0.0
    return DesignMoments(omega, wmin, wmax, tr, max(tr, l * wmax), l, "empirical", pd)


def _approx_term(tp: TuningParams) -> float:
    if tp.s <= 1 or tp.approx.b == 0:
        return 0.0
    return 2.0 * tp.approx.b * math.sqrt(tp.s - 1) / tp.l ** tp.approx.gamma


def lambda_general(tp: TuningParams) -> float:
    """``4.25 (c* sigma + 2 b sqrt(s-1) / l^gamma) sqrt(M log d / n)``."""
    if tp.n <= 0:
        raise ValueError("n must be positive")
    scale = tp.noise.c_star * tp.noise.sigma + _approx_term(tp)
    return LAMBDA_FACTOR * scale * math.sqrt(tp.M * math.log(tp.d) / tp.n)


def lambda_orthonormal(tp: TuningParams) -> float:
    """Regularization level for the canonical design, ``M = (l v p) / p``."""
    if tp.n <= 0:
        raise ValueError("n must be positive")
    scale = tp.noise.c_star * tp.noise.sigma + _approx_term(tp)
    return LAMBDA_FACTOR * scale * math.sqrt(max(tp.l, tp.p) * math.log(tp.d) / (tp.p * tp.n))


def _guard(tp: TuningParams) -> float:
    K = tp.noise.K
    if tp.moments.omega_max <= 0:
        raise ValueError("omega_max must be positive")
    return max(K * math.log(K * tp.c_phi / tp.moments.omega_max), 1.0)


def sample_thresholds(tp: TuningParams, C: float = 1.0) -> tuple[float, float]:
    """``(n_star, n_star_star)``: where the second Bernstein term becomes
    negligible, and where the sharp error bound takes over."""
    if C <= 0:
        raise ValueError("C must be positive")
    logd = math.log(tp.d)
    n_star = 2.0 * tp.c_phi ** 2 * tp.l * _guard(tp) ** 2 * logd / tp.M
    wmin = tp.moments.omega_min
    if wmin <= 0:
        n_star_star = math.inf
    else:
        n_star_star = C * tp.c_phi ** 2 * tp.l * logd * max(tp.M * tp.s, 1.0) / wmin ** 2
    return n_star, n_star_star


def noise_norm_bound(tp: TuningParams, t: float | None = None) -> float:
    """High-probability bound on the spectral norm of the noise matrix.

    ``t`` defaults to ``log d``; uses ``c_star`` from the noise spec.
    """
    logd = math.log(tp.d)
    t = logd if t is None else t
    scale = tp.noise.sigma * tp.noise.c_star + _approx_term(tp)
    first = math.sqrt(tp.M * (t + logd) / tp.n)
    second = tp.c_phi * math.sqrt(tp.l) * (t + logd) * _guard(tp) / tp.n
    return scale * max(first, second)


def rademacher_norm_bound(M: float, d: int, n: int) -> float:
    """Bound on the mean spectral norm of the Rademacher design average."""
    return RADEMACHER_MEAN_FACTOR * math.sqrt(M * math.log(d) / n)


def beta_branch(tp: TuningParams, C: float = 1.0) -> str:
    return "sharp" if tp.n >= sample_thresholds(tp, C)[1] else "general"


def beta_bound(tp: TuningParams, nuclear_norm_A0: float, C: float = 1.0) -> float:
    """Scale ``beta`` of the coefficient-function error bounds.

    Uses the sharp form when ``n >= n**`` and the max-form otherwise.
    """
    wmin = tp.moments.omega_min
    logd = math.log(tp.d)
    s, l, p, M = tp.s, tp.l, tp.p, tp.M
    approx = 0.0 if s <= 1 else tp.approx.b ** 2 * (s - 1) / l ** (2 * tp.approx.gamma)
    base = tp.noise.sigma ** 2 + approx
    if wmin <= 0:
        return math.inf
    if beta_branch(tp, C) == "sharp":
        return base * M * s * logd / (p * wmin ** 2)
    first = (base + l * nuclear_norm_A0 ** 2) * M * s * logd / (p * wmin ** 2)
    second = tp.c_phi * nuclear_norm_A0 ** 2 * math.sqrt(logd * l * tp.n) / (wmin * p)
    return max(first, second)


def l_hat_dense(n, p, s, c_phi, d, C=1.0) -> int:
    return int(math.floor(n / (C * c_phi ** 2 * s * p ** 2 * math.log(d))))


def l_hat_mid(n, p, s, c_phi, d, C=1.0) -> int:
    return int(math.floor(math.sqrt(n / (C * c_phi ** 2 * s * p * math.log(d)))))


def l_hat_smooth(n, p, gamma, sigma, d, C=1.0) -> int:
    if sigma <= 0:
        raise ValueError("the smooth-regime choice needs sigma > 0")
    return int(round((C * n / (sigma ** 2 * p * math.log(d))) ** (1.0 / (2 * gamma + 2))))


def l_hat_minimax(n, gamma, sigma, b, d) -> int:
    if sigma <= 0:
        raise ValueError("the minimax choice needs sigma > 0")
    val = 2.0 * (2.0 * gamma + 1.0) * b ** 2 * n / (sigma ** 2 * math.log(d))
    return int(round(val ** (1.0 / (2 * gamma + 2))))


@dataclass(frozen=True)
class LSelection:
    l_hat: int
    regime: str
    d: int
    extrapolated: bool = False
    iterations: int = 0
    thresholds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def select_l(n: float, p: int, s: int, gamma: float, sigma: float, c_phi: float,
             C: float = 1.0, b: float = 1.0, max_iter: int = 50) -> LSelection:
    """Dictionary size minimizing the mean-squared error bound.

    ``d = p + l`` enters through ``log d``; the choice is iterated to a fixed
    point.  Regime boundaries are ``s p^2 log d``, ``s p^3 log d`` and
    ``p^(3 + 2 gamma) log d`` compared with ``>=`` so ties go to the larger-n
    regime.  For ``p = 1`` the closed-form minimax choice is returned.
    """
    if min(n, p, s, gamma, c_phi, C) <= 0:
        raise ValueError("all inputs must be positive")
    if p > 1 and gamma < 0.5:
        raise ValueError("the regime logic requires gamma >= 1/2")
    l = max(p, 1)
    seen = []
    regime = "dense_l1"
    extrapolated = False
    thresholds = {}
    for it in range(1, max_iter + 1):
        d = p + l
        logd = math.log(d)
        if p == 1:
            regime = "minimax_p1"
            cand = l_hat_minimax(n, gamma, sigma, b, d)
            thresholds = {}
        else:
            t_dense = s * p ** 2 * logd
            t_mid = s * p ** 3 * logd
            t_smooth = p ** (3 + 2 * gamma) * logd
            thresholds = {"dense": t_dense, "mid": t_mid, "smooth": t_smooth}
            extrapolated = False
            if n >= t_smooth:
                regime = "smooth_l3"
                cand = l_hat_smooth(n, p, gamma, sigma, d, C)
            elif n >= t_mid:
                regime = "mid_l2"
                cand = l_hat_mid(n, p, s, c_phi, d, C)
            else:
                regime = "dense_l1"
                extrapolated = n < t_dense
                cand = l_hat_dense(n, p, s, c_phi, d, C)
        cand = max(cand, 1)
        if cand == l:
            return LSelection(l, regime, p + l, extrapolated, it, thresholds)
        if cand in seen:
            # two-cycle from rounding: keep the larger size
            l = max(cand, l)
            return LSelection(l, regime, p + l, extrapolated, it, thresholds)
        seen.append(l)
        l = cand
    return LSelection(l, regime, p + l, extrapolated, max_iter, thresholds)


def fit_approx_spec(functions: Sequence, dictionary: Dictionary, ls: Sequence[int],
                    gamma: float | None = None) -> ApproxSpec:
    """Estimate ``(b, b1, gamma)`` from residual norms over dictionary sizes ``ls``.

    ``gamma`` comes from a log-log regression of the sup-norm residual on l
    unless given.  ``b`` and ``b1`` are then the smallest constants for which
    the power laws dominate every observed residual.  Residuals are maxima
    over the supplied functions; the result is flagged as empirical.
    """
    ls = sorted(set(int(v) for v in ls))
    if len(ls) < 2:
        raise ValueError("need at least two dictionary sizes")
    sups, l2s = [], []
    for l in ls:
        dct = dictionary.with_l(l)
        exps = [expand_function(f, dct) for f in functions]
        sups.append(max(e.residual_sup for e in exps))
        l2s.append(max(e.residual_l2 for e in exps))
    sups = np.asarray(sups)
    l2s = np.asarray(l2s)
    if np.all(sups < 1e-12):
        return ApproxSpec(0.0, 0.0, 1.0, empirical=True)
    if gamma is None:
        x = np.log(ls)
        mask = sups > 1e-14
        slope, _ = np.polyfit(x[mask], np.log(sups[mask]), 1)
        gamma = max(-slope, 1e-3)
    b = float(np.max(sups * np.asarray(ls, float) ** gamma))
    b1 = float(np.max(l2s * np.asarray(ls, float) ** (gamma + 0.5)))
    return ApproxSpec(b, b1, float(gamma), empirical=True)


def tune_report(tp: TuningParams, C: float = 1.0, nuclear_norm_A0: float | None = None,
                canonical: bool | None = None) -> dict:
    """Every tuning quantity as a JSON-ready dict."""
    if canonical is None:
        canonical = tp.moments.kind == "canonical_uniform"
    n_star, n_ss = sample_thresholds(tp, C)
    lam = lambda_orthonormal(tp) if canonical else lambda_general(tp)
    out = {
        "C": C,
        "params": tp.to_dict(),
        "lambda": lam,
        "lambda_rule": "orthonormal" if canonical else "general",
        "lambda_general": lambda_general(tp),
        "n_star": n_star,
        "n_star_star": n_ss if math.isfinite(n_ss) else None,
        "beta_branch": beta_branch(tp, C),
        "noise_norm_bound": noise_norm_bound(tp),
        "rademacher_norm_bound": rademacher_norm_bound(tp.M, tp.d, tp.n),
    }
    if nuclear_norm_A0 is not None:
        out["nuclear_norm_A0"] = nuclear_norm_A0
        out["beta"] = beta_bound(tp, nuclear_norm_A0, C)
    if tp.moments.omega_min > 0 and (tp.p > 1 and tp.approx.gamma >= 0.5 or tp.p == 1):
        try:
            sel = select_l(tp.n, tp.p, tp.s, tp.approx.gamma, tp.noise.sigma, tp.c_phi,
                           C, tp.approx.b)
            out["l_hat"] = sel.to_dict()
        except ValueError as exc:
            out["l_hat"] = {"error": str(exc)}
    return out
