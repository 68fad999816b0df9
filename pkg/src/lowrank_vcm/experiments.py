"""Error metrics and Monte Carlo studies of the estimator.

Every study is a set of independent ``(n, replicate)`` units seeded from the
scenario, so the outcome does not depend on execution order or on the number
of worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .basis import Dictionary, DomainError
from .model import VCFunction, design_values
from .simulate import (
    Scenario,
    evaluate_functions,
    ground_truth_matrix,
    make_coefficients,
    noise_spec,
    sample_dataset,
    scenario_approx,
    scenario_moments,
    substream,
)
from .solver import SolverConfig, nuclear_norm, solve
from .tuning import (
    TuningParams,
    beta_bound,
    lambda_general,
    lambda_orthonormal,
    noise_norm_bound,
    rademacher_norm_bound,
    sample_thresholds,
    select_l,
)

__all__ = [
    "ExperimentReport",
    "spectral_norm",
    "frobenius_error",
    "mse_l2",
    "pointwise_error",
    "tuning_params",
    "theory_lambda",
    "noise_matrices",
    "mc_sigma_norms",
    "sigma_norm_slope",
    "bound_check",
    "rate_study",
    "lambda_grid_compare",
    "fit_loglog",
    "parse_grid",
]

ORACLE_LAMBDA_FACTOR = 3.01
NUCLEAR_RATIO_BOUND = 5.0


@dataclass
class ExperimentReport:
    metric: str
    grid: list[dict]
    fitted_slope: float | None = None
    slope_stderr: float | None = None
    expected_slope: float | None = None
    bound_values: list[float] = field(default_factory=list)
    coverage: float | None = None
    C: float = 1.0
    runtime_seconds: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def ns(self) -> list[int]:
        return [g["n"] for g in self.grid]

    @property
    def medians(self) -> list[float]:
        return [float(np.median(g["errors"])) for g in self.grid]

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "metric": self.metric,
            "C": self.C,
            "grid": [{"n": g["n"], "errors": list(g["errors"]),
                      "median": float(np.median(g["errors"]))} for g in self.grid],
            "fitted_slope": self.fitted_slope,
            "slope_stderr": self.slope_stderr,
            "expected_slope": self.expected_slope,
            "bound_values": self.bound_values,
            "coverage": self.coverage,
            "extras": self.extras,
        }
        if include_runtime:
            d["runtime_seconds"] = self.runtime_seconds
        return d

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(_jsonable(self.to_dict(include_runtime)), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Long format: ``n, trial, metric, value, bound``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "trial", "metric", "value", "bound"])
        for k, g in enumerate(self.grid):
            bound = self.bound_values[k] if k < len(self.bound_values) else None
            for trial, v in enumerate(g["errors"]):
                w.writerow([g["n"], trial, self.metric, repr(float(v)),
                            "" if bound is None else repr(float(bound))])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def spectral_norm(Z, rtol: float = 1e-10, max_iter: int = 500) -> float:
    """Largest singular value by power iteration on ``Z^T Z``.

    Falls back to a full SVD when the iteration has not settled.
    """
    Z = np.asarray(Z, dtype=float)
    if not np.any(Z):
        return 0.0
    v = np.ones(Z.shape[1]) / math.sqrt(Z.shape[1])
    prev = 0.0
    for _ in range(max_iter):
        u = Z @ v
        est = float(np.linalg.norm(u))
        w = Z.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        if abs(est - prev) <= rtol * est:
            return max(est, float(np.linalg.norm(Z @ v)))
        prev = est
    return float(np.linalg.norm(Z, 2))


def frobenius_error(A_hat, A_0) -> float:
    """Squared Frobenius distance."""
    A_hat = np.asarray(A_hat, dtype=float)
    A_0 = np.asarray(A_0, dtype=float)
    if A_hat.shape != A_0.shape:
        raise ValueError(f"shape mismatch {A_hat.shape} vs {A_0.shape}")
    return float(np.sum((A_hat - A_0) ** 2))


def mse_l2(fhat: VCFunction, f_true: Sequence[Callable]) -> float:
    """``(1/p) sum_i ||fhat_i - f_i||^2`` in ``L2(dmu)`` by quadrature."""
    if len(f_true) != fhat.p:
        raise ValueError("number of true functions must equal p")
    m = fhat.dictionary.measure
    nodes = m.quadrature.nodes
    diff = fhat(nodes) - evaluate_functions(f_true, nodes)
    return float(m.mu_weights @ np.sum(diff ** 2, axis=1)) / fhat.p


def pointwise_error(fhat: VCFunction, f_true: Sequence[Callable], t: float) -> float:
    """``(1/p) sum_i |fhat_i(t) - f_i(t)|``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError("t must lie in [0, 1]")
    if fhat.dictionary.measure.kind == "weighted" and fhat.dictionary.measure.density([t])[0] <= 0:
        raise DomainError("t outside the support of mu")
    diff = fhat([t])[0] - evaluate_functions(f_true, [t])[0]
    return float(np.mean(np.abs(diff)))


def tuning_params(sc: Scenario, dictionary: Dictionary, n: int, fs=None, approx=None) -> TuningParams:
    approx = scenario_approx(sc, dictionary, fs) if approx is None else approx
    return TuningParams(noise=noise_spec(sc), approx=approx, s=sc.s,
                        moments=scenario_moments(sc, dictionary.l), p=sc.p,
                        l=dictionary.l, n=n, c_phi=dictionary.c_phi)


def theory_lambda(tp: TuningParams) -> float:
    """Orthonormal-design formula for the canonical design, general formula otherwise."""
    if tp.moments.kind == "canonical_uniform":
        return lambda_orthonormal(tp)
    return lambda_general(tp)


def noise_matrices(data, dictionary: Dictionary, A0, eps) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma_R, Sigma)``: Rademacher- and residual-weighted design averages.

    The residual at the truth, ``y_i - <X_i, A0>``, equals the remainder term
    plus the noise, so ``Sigma`` needs no access to the noise draws.
    """
    phi = data.phi(dictionary)
    r = data.y - design_values(A0, data, dictionary)
    n = data.n
    sigma_R = (data.W * (eps / n)[:, None]).T @ phi
    sigma = (data.W * (r / n)[:, None]).T @ phi
    return sigma_R, sigma


def _rademacher(seed: int, trial: int, n: int) -> np.ndarray:
    return 2.0 * substream(seed, 2, trial).integers(0, 2, size=n) - 1.0


def _sigma_task(args):
    sc, dictionary, n, trial, fs, A0 = args
    data = sample_dataset(sc, n, replicate=trial, fs=fs)
    sR, s = noise_matrices(data, dictionary, A0, _rademacher(sc.seed, trial, n))
    return spectral_norm(sR), spectral_norm(s)


def _map(fn, tasks, jobs: int):
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def mc_sigma_norms(sc: Scenario, dictionary: Dictionary, n: int, trials: int,
                   jobs: int = 1, approx=None) -> dict:
    """Monte Carlo means of the stochastic-term spectral norms against their bounds."""
    if trials < 30:
        raise ValueError("trials must be at least 30")
    fs = make_coefficients(sc)
    A0 = ground_truth_matrix(sc, dictionary, fs)
    tp = tuning_params(sc, dictionary, n, fs, approx)
    res = _map(_sigma_task, [(sc, dictionary, n, k, fs, A0) for k in range(trials)], jobs)
    nR = np.array([r[0] for r in res])
    nS = np.array([r[1] for r in res])
    bR = rademacher_norm_bound(tp.M, tp.d, n)
    bS = noise_norm_bound(tp)
    return {
        "n": n, "trials": trials, "M": tp.M, "d": tp.d,
        "mean_sigma_R": float(nR.mean()),
        "mean_sigma": float(nS.mean()),
        "bound_sigma_R": bR,
        "bound_sigma": bS,
        "violation_rate": float(np.mean(nR > bR)),
        "violation_rate_sigma": float(np.mean(nS > bS)),
        "sigma_R": nR.tolist(),
        "sigma": nS.tolist(),
    }


def fit_loglog(ns, values) -> tuple[float, float, bool]:
    """OLS slope of ``log value`` on ``log n``; returns ``(slope, stderr, degenerate)``."""
    x = np.log(np.asarray(ns, dtype=float))
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0) or not np.all(np.isfinite(v)) or np.ptp(x) == 0 or v.size < 2:
        return float("nan"), float("nan"), True
    y = np.log(v)
    if np.ptp(y) == 0:
        return 0.0, 0.0, True
    fit = stats.linregress(x, y)
    stderr = float(fit.stderr) if v.size > 2 else 0.0
    return float(fit.slope), stderr, False


def sigma_norm_slope(sc: Scenario, dictionary: Dictionary, ns: Sequence[int], trials: int,
                     jobs: int = 1) -> dict:
    runs = [mc_sigma_norms(sc, dictionary, int(n), trials, jobs) for n in ns]
    means = [r["mean_sigma_R"] for r in runs]
    slope, se, degenerate = fit_loglog(ns, means)
    return {"ns": list(map(int, ns)), "mean_sigma_R": means, "slope": slope,
            "slope_stderr": se, "degenerate": degenerate,
            "bounds": [r["bound_sigma_R"] for r in runs]}


def _frob_bound(tp: TuningParams, nuc0: float, C: float) -> float:
    return C * tp.p * beta_bound(tp, nuc0, C) / tp.n


def _mse_bound(tp: TuningParams, nuc0: float, C: float) -> float:
    a = tp.approx
    tail = 2.0 * a.b1 ** 2 * tp.s / (tp.p * tp.l ** (2 * a.gamma + 1))
    return C * beta_bound(tp, nuc0, C) / tp.n + tail


def _covered(err: float, bound: float, scale: float) -> bool:
    # round-off slack so that exact recovery meets a zero bound
    return err <= bound + 1e-12 * max(scale, 1.0)


def _solver_config(lam: float, opts: dict | None) -> SolverConfig:
    opts = dict(opts or {})
    return SolverConfig(lam=lam, **opts)


def _bound_task(args):
    sc, dictionary, n, trial, fs, A0, lam_formula, lambda_mode, solver_opts = args
    data = sample_dataset(sc, n, replicate=trial, fs=fs)
    _, sigma = noise_matrices(data, dictionary, A0, np.zeros(n))
    sig_norm = spectral_norm(sigma)
    lam = ORACLE_LAMBDA_FACTOR * sig_norm if lambda_mode == "oracle" else lam_formula
    A_hat, rep = solve(data, dictionary, _solver_config(lam, solver_opts))
    fhat = VCFunction(A_hat, dictionary)
    return {
        "frobenius": frobenius_error(A_hat, A0),
        "mse_l2": mse_l2(fhat, fs),
        "nuclear_hat": rep.nuclear_norm_hat,
        "sigma_norm": sig_norm,
        "lambda": lam,
        "converged": rep.converged,
    }


def bound_check(sc: Scenario, dictionary: Dictionary, n: int | Sequence[int], trials: int,
                lambda_mode: str = "formula", C: float = 1.0, jobs: int = 1,
                solver_opts: dict | None = None, approx=None) -> ExperimentReport:
    """Run the full pipeline per trial and compare errors with the theoretical bounds.

    ``lambda_mode="oracle"`` sets ``lambda = 3.01 ||Sigma||`` from the known
    truth, which makes the nuclear-norm inequality checkable exactly.
    """
    if lambda_mode not in ("formula", "oracle"):
        raise ValueError("lambda_mode must be 'formula' or 'oracle'")
    t0 = time.perf_counter()
    ns = [int(n)] if np.isscalar(n) else [int(v) for v in n]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n grid must be strictly increasing")
    fs = make_coefficients(sc)
    A0 = ground_truth_matrix(sc, dictionary, fs)
    nuc0 = nuclear_norm(A0)
    grid, bounds, extras_rows = [], [], []
    covered = total = 0
    nuc_ok = lam_ok = mse_cov = 0
    below_nstar = []
    for nn in ns:
        tp = tuning_params(sc, dictionary, nn, fs, approx)
        n_star, n_ss = sample_thresholds(tp, C)
        if nn < n_star:
            below_nstar.append(nn)
        lam = theory_lambda(tp)
        tasks = [(sc, dictionary, nn, k, fs, A0, lam, lambda_mode, solver_opts)
                 for k in range(trials)]
        res = _map(_bound_task, tasks, jobs)
        fb = _frob_bound(tp, nuc0, C)
        mb = _mse_bound(tp, nuc0, C)
        errs = [r["frobenius"] for r in res]
        grid.append({"n": nn, "errors": errs})
        bounds.append(fb)
        covered += sum(_covered(e, fb, nuc0 ** 2) for e in errs)
        mse_cov += sum(_covered(r["mse_l2"], mb, nuc0 ** 2) for r in res)
        total += len(res)
        nuc_ok += sum(r["nuclear_hat"] <= NUCLEAR_RATIO_BOUND * nuc0 * (1 + 1e-9) for r in res)
        lam_ok += sum(r["lambda"] >= 3.0 * r["sigma_norm"] for r in res)
        extras_rows.append({
            "n": nn, "lambda_formula": lam, "n_star": n_star,
            "n_star_star": n_ss if math.isfinite(n_ss) else None,
            "mse_l2": [r["mse_l2"] for r in res], "mse_bound": mb,
            "nuclear_hat": [r["nuclear_hat"] for r in res],
            "sigma_norm": [r["sigma_norm"] for r in res],
            "lambda": [r["lambda"] for r in res],
            "converged": [r["converged"] for r in res],
        })
    report = ExperimentReport(metric="frobenius", grid=grid, bound_values=bounds,
                              coverage=covered / total, C=C)
    report.extras = {
        "lambda_mode": lambda_mode,
        "nuclear_norm_A0": nuc0,
        "nuclear_ratio_coverage": nuc_ok / total,
        "lambda_ge_3sigma_fraction": lam_ok / total,
        "mse_coverage": mse_cov / total,
        "below_n_star": below_nstar,
        "per_n": extras_rows,
    }
    if len(ns) >= 3:
        rho = stats.spearmanr(ns, report.medians).statistic
        report.extras["spearman_rho"] = float(rho)
    if len(ns) >= 2:
        slope, se, deg = fit_loglog(ns, report.medians)
        report.fitted_slope, report.slope_stderr = slope, se
        report.extras["degenerate_fit"] = deg
    report.runtime_seconds = time.perf_counter() - t0
    return report


def _rate_task(args):
    sc, dictionary, n, rep, fs, approx, metric, solver_opts = args
    A0 = ground_truth_matrix(sc, dictionary, fs)
    tp = tuning_params(sc, dictionary, n, fs, approx)
    lam = theory_lambda(tp)
    data = sample_dataset(sc, n, replicate=rep, fs=fs)
    A_hat, _ = solve(data, dictionary, _solver_config(lam, solver_opts))
    if metric == "frobenius":
        return frobenius_error(A_hat, A0)
    if metric == "mse_l2":
        return mse_l2(VCFunction(A_hat, dictionary), fs)
    raise ValueError(f"unknown metric {metric!r}")


def rate_study(sc: Scenario, policy: Dictionary | str, n_grid: Sequence[int], replicates: int,
               metric: str | None = None, C: float = 1.0, jobs: int = 1,
               base_kind: str = "fourier", solver_opts: dict | None = None,
               approx=None) -> ExperimentReport:
    """Median error against n with a log-log slope fit.

    ``policy`` is a fixed ``Dictionary`` or ``"select_l"``, which sizes a
    ``base_kind`` dictionary per n with the theory-optimal ``l``.  The
    reference slope is -1 for a fixed dictionary that reproduces the truth
    exactly, and ``-(2 gamma + 1)/(2 gamma + 2)`` for ``p = 1`` with size
    selection.
    """
    t0 = time.perf_counter()
    ns = sorted(int(v) for v in n_grid)
    if len(ns) < 4 or ns[-1] < 10 * ns[0] * (1 - 1e-12):
        raise ValueError("n grid needs at least 4 points spanning a decade")
    if len(set(ns)) != len(ns):
        raise ValueError("n grid values must be distinct")
    fs = make_coefficients(sc)
    fixed = isinstance(policy, Dictionary)
    if not fixed and policy != "select_l":
        raise ValueError("policy must be a Dictionary or 'select_l'")
    if metric is None:
        metric = "frobenius" if fixed else "mse_l2"
    if not fixed and metric == "frobenius":
        raise ValueError("frobenius error is undefined when l varies with n")

    dicts, selections = [], []
    if fixed:
        approx = scenario_approx(sc, policy, fs) if approx is None else approx
        dicts = [policy] * len(ns)
    else:
        ref = Dictionary(base_kind, 65 if base_kind == "fourier" else 64, sc.measure)
        approx = scenario_approx(sc, ref, fs) if approx is None else approx
        for nn in ns:
            sel = select_l(nn, sc.p, sc.s, approx.gamma, sc.sigma, ref.c_phi, C, approx.b)
            selections.append(sel.to_dict())
            dicts.append(Dictionary(base_kind, sel.l_hat, sc.measure))

    tasks = [(sc, dicts[k], nn, r, fs, approx, metric, solver_opts)
             for k, nn in enumerate(ns) for r in range(replicates)]
    errs = _map(_rate_task, tasks, jobs)
    grid = [{"n": nn, "errors": errs[k * replicates:(k + 1) * replicates]}
            for k, nn in enumerate(ns)]

    report = ExperimentReport(metric=metric, grid=grid, C=C)
    slope, se, degenerate = fit_loglog(ns, report.medians)
    report.fitted_slope, report.slope_stderr = slope, se
    if fixed and approx.b == 0:
        report.expected_slope = -1.0
    elif not fixed and sc.p == 1:
        g = approx.gamma
        report.expected_slope = -(2 * g + 1) / (2 * g + 2)

    bounds, covered = [], 0
    for k, nn in enumerate(ns):
        tp = tuning_params(sc, dicts[k], nn, fs, approx)
        nuc0 = nuclear_norm(ground_truth_matrix(sc, dicts[k], fs))
        b = _frob_bound(tp, nuc0, C) if metric == "frobenius" else _mse_bound(tp, nuc0, C)
        bounds.append(b)
        covered += sum(_covered(e, b, nuc0 ** 2) for e in grid[k]["errors"])
    report.bound_values = bounds
    report.coverage = covered / (len(ns) * replicates)
    report.extras = {
        "policy": "fixed" if fixed else "select_l",
        "l": [d.l for d in dicts],
        "approx": {"b": approx.b, "b1": approx.b1, "gamma": approx.gamma,
                   "empirical": approx.empirical},
        "degenerate_fit": degenerate,
        "sigma": sc.sigma,
    }
    if selections:
        report.extras["selections"] = selections
    report.runtime_seconds = time.perf_counter() - t0
    return report


def lambda_grid_compare(sc: Scenario, dictionary: Dictionary, n: int,
                        lambda_grid: Sequence[float], replicate: int = 0,
                        solver_opts: dict | None = None) -> dict:
    """Errors along a lambda grid next to the theory-driven lambda.

    ``ratio`` is the theoretical-lambda error over the best error among the
    grid and the theoretical value itself, hence always at least 1.
    """
    if len(lambda_grid) == 0:
        raise ValueError("lambda grid must be nonempty")
    fs = make_coefficients(sc)
    A0 = ground_truth_matrix(sc, dictionary, fs)
    data = sample_dataset(sc, n, replicate=replicate, fs=fs)
    lam_t = theory_lambda(tuning_params(sc, dictionary, n, fs))
    rows = []
    for lam in sorted(float(v) for v in lambda_grid):
        A_hat, rep = solve(data, dictionary, _solver_config(lam, solver_opts))
        rows.append({"lambda": lam, "frobenius": frobenius_error(A_hat, A0),
                     "nuclear_norm": rep.nuclear_norm_hat, "rank": rep.rank_hat,
                     "A_hat": A_hat})
    A_t, rep_t = solve(data, dictionary, _solver_config(lam_t, solver_opts))
    err_t = frobenius_error(A_t, A0)
    best = min([r["frobenius"] for r in rows] + [err_t])
    lams = [r["lambda"] for r in rows]
    return {
        "rows": rows,
        "lambda_theory": lam_t,
        "error_theory": err_t,
        "theory_position": int(np.searchsorted(lams, lam_t)),
        "best_error": best,
        "ratio": err_t / best if best > 0 else (1.0 if err_t == 0 else math.inf),
    }


def parse_grid(spec: str) -> list[int]:
    """``lo:hi:k`` -> ``k`` log-spaced integers from ``lo`` to ``hi``."""
    try:
        lo, hi, k = spec.split(":")
        lo, hi, k = float(lo), float(hi), int(k)
    except ValueError:
        raise ValueError(f"grid must look like lo:hi:k, got {spec!r}") from None
    if lo <= 0 or hi <= lo or k < 2:
        raise ValueError("grid needs 0 < lo < hi and k >= 2")
    vals = np.geomspace(lo, hi, k)
    out = [int(round(v)) for v in vals]
    if len(set(out)) != len(out):
        raise ValueError("grid points collide after rounding")
    return out
