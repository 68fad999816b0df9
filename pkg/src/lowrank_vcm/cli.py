"""Command-line front end: ``vcm <command> [options]``.

Every command reads JSON/CSV inputs, calls the library once and writes its
outputs atomically into ``--out`` together with a ``run.json`` manifest.
Validation problems exit with status 1, numerical failures with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .basis import ApproxSpec, Dictionary, gram_matrix, max_offdiag, sup_norm_constant
from .experiments import (
    bound_check,
    mc_sigma_norms,
    parse_grid,
    rate_study,
    _jsonable,
)
from .model import DataFormatError, Dataset, VCFunction, matrix_to_csv
from .simulate import (
    Scenario,
    default_dictionary,
    ground_truth_matrix,
    make_coefficients,
    noise_spec,
    sample_dataset,
    scenario_approx,
    scenario_moments,
)
from .solver import SolverConfig, SolverError, nuclear_norm, solve
from .tuning import (
    NoiseSpec,
    TuningParams,
    design_moments,
    lambda_general,
    lambda_orthonormal,
    tune_report,
)

log = logging.getLogger("lowrank_vcm")

GRID_POINTS = 201
# execution-only options that must not change any output byte
_UNRECORDED = {"jobs", "out", "verbose", "func"}


class ValidationError(ValueError):
    pass


# ----------------------------------------------------------------- file I/O

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _matrix_csv(A) -> str:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in A)


def _load_json(ref: str, what: str) -> dict:
    """Parse a JSON blob given inline or as a file path."""
    text, src = ref, "<inline>"
    if not ref.lstrip().startswith("{"):
        path = Path(ref)
        if not path.is_file():
            raise ValidationError(f"{what} file not found: {ref}")
        text, src = path.read_text(encoding="utf-8"), ref
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{src}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ValidationError(f"{src}: line 1: {what} must be a JSON object")
    return obj


def _scenario(args) -> Scenario:
    sc = Scenario.from_dict(_load_json(args.scenario, "scenario"))
    if getattr(args, "seed", None) is not None:
        sc = sc.with_(seed=args.seed)
    return sc


def _dictionary(args, sc: Scenario | None = None) -> Dictionary:
    if getattr(args, "dict", None):
        return Dictionary.from_dict(_load_json(args.dict, "dictionary"))
    if sc is None:
        raise ValidationError("--dict is required without --scenario")
    return default_dictionary(sc)


def _solver_opts(args) -> dict:
    if not getattr(args, "solver", None):
        return {}
    opts = _load_json(args.solver, "solver config")
    opts.pop("lambda", None)
    opts.pop("lam", None)
    SolverConfig(**opts)
    return opts


def _manifest(args, seeds: dict, extra: dict | None = None) -> str:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}
    out = {
        "command": args.command,
        "config": config,
        "seeds": seeds,
        "versions": {
            "lowrank_vcm": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "env": {"VCM_QUAD_NODES": os.environ.get("VCM_QUAD_NODES")},
    }
    if extra:
        out.update(extra)
    return _dump(out)


def _write_all(out: Path, files: dict[str, str]) -> None:
    for name, text in files.items():
        _atomic_write(out / name, text)
        log.info("wrote %s", out / name)


# ----------------------------------------------------------------- commands

def resolve_lambda(args, data: Dataset, dictionary: Dictionary) -> tuple[float, dict]:
    """Value of ``--lambda`` plus a record of how it was obtained.

    ``auto`` uses the orthonormal rule for a canonical design and the general
    rule with the empirical design moments of ``data`` otherwise.  Noise,
    rank and remainder constants come from the scenario, then ``--tuning``.
    """
    if args.lam != "auto":
        try:
            lam = float(args.lam)
        except ValueError:
            raise ValidationError(f"--lambda must be 'auto' or a number, got {args.lam!r}") from None
        return lam, {"rule": "given", "lambda": lam}
    sc = _scenario(args) if args.scenario else None
    tun = _load_json(args.tuning, "tuning") if args.tuning else {}
    if sc is not None:
        if sc.p != data.p:
            raise ValidationError(f"scenario has p = {sc.p} but data has p = {data.p}")
        noise, s, approx = noise_spec(sc), sc.s, scenario_approx(sc, dictionary)
        canonical = sc.design_kind == "canonical_uniform"
    else:
        noise, s, approx = NoiseSpec(), data.p + 1, ApproxSpec(0.0, 0.0, 1.0)
        canonical = False
    if tun:
        noise = NoiseSpec(sigma=tun.get("sigma", noise.sigma), K=tun.get("K", noise.K),
                          c_star=tun.get("c_star", noise.c_star))
        s = int(tun.get("s", s))
        if {"b", "b1", "gamma"} & set(tun):
            approx = ApproxSpec(tun.get("b", approx.b), tun.get("b1", approx.b1),
                                tun.get("gamma", approx.gamma))
    if canonical:
        moments = scenario_moments(sc, dictionary.l)
    else:
        moments = design_moments(data.W, dictionary.l)
    tp = TuningParams(noise=noise, approx=approx, s=s, moments=moments, p=data.p,
                      l=dictionary.l, n=data.n, c_phi=dictionary.c_phi)
    lam = lambda_orthonormal(tp) if canonical else lambda_general(tp)
    rule = "orthonormal" if canonical else "general"
    log.info("resolved lambda = %.17g (%s rule)", lam, rule)
    return lam, {"rule": rule, "lambda": lam, "params": tp.to_dict()}


def cmd_estimate(args) -> None:
    data = Dataset.from_csv(args.data)
    sc = _scenario(args) if args.scenario else None
    dictionary = _dictionary(args, sc)
    lam, lam_info = resolve_lambda(args, data, dictionary)
    config = SolverConfig(lam=lam, **_solver_opts(args))
    A_hat, rep = solve(data, dictionary, config)
    fhat = VCFunction(A_hat, dictionary)
    t = np.linspace(0.0, 1.0, GRID_POINTS)
    vals = fhat(t)
    header = ",".join(["t"] + [f"f_{k + 1}" for k in range(data.p)])
    grid = header + "\n" + "".join(
        ",".join(f"{v:.17g}" for v in [ti, *row]) + "\n" for ti, row in zip(t, vals))
    report = {
        "n": data.n, "p": data.p, "l": dictionary.l,
        "dictionary": dictionary.to_dict(),
        "lambda": lam_info,
        "solver": {"config": config.to_dict(), **rep.to_dict()},
    }
    files = {"A_hat.csv": _matrix_csv(A_hat), "report.json": _dump(report),
             "f_hat_grid.csv": grid}
    if args.trace:
        files["trace.csv"] = rep.trace_csv()
    files["run.json"] = _manifest(args, {"scenario_seed": sc.seed if sc else None})
    _write_all(Path(args.out), files)


def cmd_simulate(args) -> None:
    sc = _scenario(args)
    dictionary = _dictionary(args, sc)
    fs = make_coefficients(sc)
    data = sample_dataset(sc, args.n, replicate=args.replicate, fs=fs)
    A0 = ground_truth_matrix(sc, dictionary, fs)
    truth = {
        "scenario": sc.to_dict(),
        "dictionary": dictionary.to_dict(),
        "n": args.n,
        "replicate": args.replicate,
        "A0_path": "A0.csv",
        "rank_A0_bound": sc.s,
        "nuclear_norm_A0": nuclear_norm(A0),
    }
    files = {
        "data.csv": data.to_csv_string(),
        "truth.json": _dump(truth),
        "A0.csv": _matrix_csv(A0),
        "run.json": _manifest(args, {"scenario_seed": sc.seed, "replicate": args.replicate}),
    }
    _write_all(Path(args.out), files)


def cmd_tune(args) -> None:
    sc = _scenario(args)
    dictionary = _dictionary(args, sc)
    fs = make_coefficients(sc)
    A0 = ground_truth_matrix(sc, dictionary, fs)
    tp = TuningParams(noise=noise_spec(sc), approx=scenario_approx(sc, dictionary, fs),
                      s=sc.s, moments=scenario_moments(sc, dictionary.l), p=sc.p,
                      l=dictionary.l, n=args.n, c_phi=dictionary.c_phi)
    rep = tune_report(tp, args.C, nuclear_norm(A0))
    log.info("lambda = %.17g (%s rule)", rep["lambda"], rep["lambda_rule"])
    _write_all(Path(args.out), {"tune.json": _dump(rep),
                                "run.json": _manifest(args, {"scenario_seed": sc.seed})})


def cmd_rates(args) -> None:
    sc = _scenario(args)
    ns = parse_grid(args.n_grid)
    policy = "select_l" if args.select_l else _dictionary(args, sc)
    report = rate_study(sc, policy, ns, args.replicates, metric=args.metric, C=args.C,
                        jobs=args.jobs, base_kind=args.base_kind,
                        solver_opts=_solver_opts(args))
    log.info("fitted slope %.4f +/- %.4f (expected %s)", report.fitted_slope,
             report.slope_stderr, report.expected_slope)
    _write_all(Path(args.out), {
        "report.json": report.to_json() + "\n",
        "rates.csv": report.to_csv(),
        "run.json": _manifest(args, {"scenario_seed": sc.seed}, {"n_grid": ns}),
    })


def cmd_verify_bounds(args) -> None:
    sc = _scenario(args)
    dictionary = _dictionary(args, sc)
    ns = parse_grid(args.n) if ":" in args.n else [int(float(args.n))]
    report = bound_check(sc, dictionary, ns, args.trials, lambda_mode=args.lambda_mode,
                         C=args.C, jobs=args.jobs, solver_opts=_solver_opts(args))
    out = {"bound_check": report.to_dict()}
    if args.trials >= 30:
        out["sigma_norms"] = [mc_sigma_norms(sc, dictionary, nn, args.trials, args.jobs)
                              for nn in ns]
    log.info("coverage %.3f, nuclear-norm ratio coverage %.3f", report.coverage,
             report.extras["nuclear_ratio_coverage"])
    _write_all(Path(args.out), {
        "bounds.json": _dump(out),
        "bounds.csv": report.to_csv(),
        "run.json": _manifest(args, {"scenario_seed": sc.seed}),
    })


def cmd_basis_info(args) -> None:
    dictionary = Dictionary.from_dict(_load_json(args.dict, "dictionary"))
    G = gram_matrix(dictionary)
    info = {
        "dictionary": dictionary.to_dict(),
        "c_phi": dictionary.c_phi,
        "sup_norm": sup_norm_constant(dictionary),
        "gram_max_deviation": max_offdiag(G, identity=True),
        "quadrature_nodes": int(dictionary.measure.quadrature.nodes.size),
    }
    if args.t:
        ts = [float(v) for v in args.t.split(",")]
        info["values"] = {repr(t): dictionary.evaluate([t])[0].tolist() for t in ts}
    _write_all(Path(args.out), {"basis.json": _dump(info),
                                "run.json": _manifest(args, {})})


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vcm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True, dict_opt=True):
        p.add_argument("--out", default=".", help="output directory")
        if scenario_required is not None:
            p.add_argument("--scenario", required=scenario_required,
                           help="scenario JSON file or inline JSON")
            p.add_argument("--seed", type=int, help="override the scenario seed")
        if dict_opt:
            p.add_argument("--dict", help="dictionary JSON file or inline JSON")

    p = sub.add_parser("estimate", help="fit the coordinate matrix to a dataset")
    common(p, scenario_required=False)
    p.add_argument("--data", required=True, help="CSV with header t,y,w_1..w_p")
    p.add_argument("--lambda", dest="lam", default="auto", help="'auto' or a number")
    p.add_argument("--tuning", help="JSON with sigma, K, c_star, s, b, b1, gamma")
    p.add_argument("--solver", help="JSON solver options (max_iter, rel_tol, step, ...)")
    p.add_argument("--trace", action="store_true", help="also write trace.csv")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="draw a dataset and its ground truth")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--replicate", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="report the theory-driven tuning quantities")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--C", type=float, default=1.0, help="constant for the C-dependent bounds")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("rates", help="median error against n with a log-log slope")
    common(p)
    p.add_argument("--n-grid", required=True, help="lo:hi:k log-spaced sample sizes")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--select-l", action="store_true", help="size the dictionary per n")
    p.add_argument("--base-kind", default="fourier", help="dictionary family for --select-l")
    p.add_argument("--metric", choices=["frobenius", "mse_l2"])
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--solver", help="JSON solver options")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("verify-bounds", help="Monte Carlo checks of the error bounds")
    common(p)
    p.add_argument("--n", required=True, help="sample size or lo:hi:k grid")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--lambda-mode", choices=["formula", "oracle"], default="formula")
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--solver", help="JSON solver options")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("basis-info", help="orthonormality and sup-norm of a dictionary")
    p.add_argument("--out", default=".")
    p.add_argument("--dict", required=True)
    p.add_argument("--t", help="comma-separated points to evaluate the basis at")
    p.set_defaults(func=cmd_basis_info)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except DataFormatError as exc:
        src = getattr(args, "data", "")
        print(f"error: {src}: {exc}", file=sys.stderr)
        return 1
    except (SolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
