"""Synthetic varying-coefficient scenarios with known ground truth.

Randomness comes from Philox streams keyed by ``SeedSequence(seed,
spawn_key=...)``:

* ``(0,)`` draws the coefficient functions;
* ``(1, replicate, block)`` draws observations in fixed blocks of
  ``BLOCK_SIZE`` rows, so a dataset is identical whether blocks are generated
  serially, in parallel or as a prefix of a larger sample;
* ``(2, trial)`` and above are reserved for experiment-level draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import eval_legendre

from .basis import ApproxSpec, DensityMeasure, Dictionary, expand_function
from .model import Dataset
from .tuning import DesignMoments, NoiseSpec, design_moments, fit_approx_spec

__all__ = [
    "Scenario",
    "Constant",
    "TrigPolynomial",
    "LegendreSeries",
    "PeriodicSpline",
    "make_coefficients",
    "ground_truth_matrix",
    "sample_dataset",
    "evaluate_functions",
    "substream",
    "noise_spec",
    "scenario_moments",
    "scenario_approx",
    "default_dictionary",
    "BLOCK_SIZE",
]

BLOCK_SIZE = 4096
NOISE_KINDS = ("gaussian", "rademacher_bounded", "laplace")
DESIGN_KINDS = ("canonical_uniform", "sphere_uniform", "custom")
LAPLACE_SCALE = 1.0 / math.sqrt(2.0)


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) % 2 ** 64, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class Constant:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, t):
        return np.full(np.shape(t), self.value, dtype=float)

    def __repr__(self):
        return f"Constant({self.value:.6g})"


class TrigPolynomial:
    """``c0 + sum_k sqrt(2) (a_k cos 2 pi k t + b_k sin 2 pi k t)``."""

    def __init__(self, c0: float, a, b):
        self.c0 = float(c0)
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.arange(1, self.a.size + 1)
        arg = 2.0 * np.pi * np.multiply.outer(t, k)
        return self.c0 + math.sqrt(2.0) * (np.cos(arg) @ self.a + np.sin(arg) @ self.b)

    def fourier_coefficients(self, l: int) -> np.ndarray:
        """Coordinates in the real trigonometric dictionary of size ``l``."""
        out = np.zeros(l)
        out[0] = self.c0
        for k in range(1, self.a.size + 1):
            if 2 * k - 1 < l:
                out[2 * k - 1] = self.a[k - 1]
            if 2 * k < l:
                out[2 * k] = self.b[k - 1]
        return out


class LegendreSeries:
    """``sum_k c_k sqrt(2k+1) P_k(2t - 1)``."""

    def __init__(self, coefs):
        self.coefs = np.asarray(coefs, dtype=float)

    def __call__(self, t):
        x = 2.0 * np.asarray(t, dtype=float) - 1.0
        out = np.zeros_like(x)
        for k, c in enumerate(self.coefs):
            out = out + c * math.sqrt(2 * k + 1) * eval_legendre(k, x)
        return out


class PeriodicSpline:
    """Periodic interpolating spline of degree 1 or 3 through ``(knots, values)``.

    A degree-``q`` periodic spline has Fourier coefficients decaying like
    ``k^-(q+1)``, i.e. smoothness exponent ``gamma = q`` in the sup norm.
    """

    def __init__(self, knots, values, degree: int = 1):
        if degree not in (1, 3):
            raise ValueError("spline degree must be 1 or 3")
        self.knots = np.asarray(knots, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.degree = degree
        if degree == 3:
            x = np.concatenate([self.knots, [self.knots[0] + 1.0]])
            y = np.concatenate([self.values, [self.values[0]]])
            self._cs = CubicSpline(x, y, bc_type="periodic")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.degree == 1:
            return np.interp(t, self.knots, self.values, period=1.0)
        x0 = self.knots[0]
        return self._cs(x0 + np.mod(t - x0, 1.0))


@dataclass(frozen=True, eq=False)
class Scenario:
    """A complete generative description of a simulation.

    ``coeff_spec`` is a dict with ``kind`` in ``trig`` (``k_max``), ``poly``
    (``degree``), ``spline_free`` (``degree``, ``knots``) or ``explicit``
    (``functions``: a list of ``p`` vectorized callables, not serializable).
    ``design`` is ``canonical_uniform``, ``sphere_uniform`` or a custom table
    of covariate rows sampled uniformly.
    """

    p: int
    s: int
    coeff_spec: dict = field(default_factory=lambda: {"kind": "trig", "k_max": 2})
    design: str | dict = "canonical_uniform"
    noise: str = "gaussian"
    sigma: float = 1.0
    measure: DensityMeasure = field(default_factory=DensityMeasure)
    seed: int = 0
    amplitude: float = 1.0
    approx: ApproxSpec | None = None
    dictionary: dict | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be positive")
        if self.s < 1 or self.s - 1 > self.p:
            raise ValueError(f"invalid scenario: s - 1 = {self.s - 1} exceeds p = {self.p}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise!r}")
        kind = self.design_kind
        if kind not in DESIGN_KINDS:
            raise ValueError(f"unknown design {kind!r}")
        if kind == "custom":
            table = np.asarray(self.design["table"], dtype=float)
            if table.ndim != 2 or table.shape[1] != self.p:
                raise ValueError("custom design table must have p columns")
            if np.any(np.linalg.norm(table, axis=1) > 1.0 + 1e-12):
                raise ValueError("custom design rows must have norm <= 1")
        ck = self.coeff_spec.get("kind")
        if ck not in ("trig", "poly", "spline_free", "explicit"):
            raise ValueError(f"unknown coeff_spec kind {ck!r}")
        if ck == "explicit" and len(self.coeff_spec["functions"]) != self.p:
            raise ValueError("explicit coeff_spec needs p functions")

    @property
    def design_kind(self) -> str:
        return self.design if isinstance(self.design, str) else self.design.get("kind", "custom")

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        if self.coeff_spec.get("kind") == "explicit":
            raise ValueError("explicit coefficient functions are not serializable")
        d = {
            "p": self.p, "s": self.s, "coeff_spec": dict(self.coeff_spec),
            "design": self.design if isinstance(self.design, str) else
            {"kind": "custom", "table": np.asarray(self.design["table"], float).tolist()},
            "noise": self.noise, "sigma": self.sigma, "measure": self.measure.to_dict(),
            "seed": self.seed, "amplitude": self.amplitude,
        }
        if self.approx is not None:
            d["approx"] = {"b": self.approx.b, "b1": self.approx.b1, "gamma": self.approx.gamma}
        if self.dictionary is not None:
            d["dictionary"] = self.dictionary
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = {"p", "s", "coeff_spec", "design", "noise", "sigma", "measure", "seed",
                 "amplitude", "approx", "dictionary"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario fields: {sorted(extra)}")
        if "measure" in d:
            d["measure"] = DensityMeasure.from_dict(d["measure"])
        if d.get("approx") is not None:
            d["approx"] = ApproxSpec(**d["approx"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


def _varying_indices(sc: Scenario, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(sc.p, size=sc.s - 1, replace=False))


def make_coefficients(sc: Scenario) -> list[Callable]:
    """The ``p`` true coefficient functions; ``s - 1`` of them vary in t."""
    spec = sc.coeff_spec
    if spec["kind"] == "explicit":
        return list(spec["functions"])
    rng = substream(sc.seed, 0)
    varying = set(_varying_indices(sc, rng).tolist())
    amp = sc.amplitude
    out: list[Callable] = []
    for k in range(sc.p):
        c0 = amp * rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        if k not in varying:
            out.append(Constant(c0))
            continue
        if spec["kind"] == "trig":
            kmax = int(spec.get("k_max", 2))
            a = amp * rng.standard_normal(kmax)
            b = amp * rng.standard_normal(kmax)
            out.append(TrigPolynomial(c0, a, b))
        elif spec["kind"] == "poly":
            deg = int(spec.get("degree", 3))
            coefs = np.concatenate([[c0], amp * rng.standard_normal(deg)])
            out.append(LegendreSeries(coefs))
        else:
            nk = int(spec.get("knots", 6))
            deg = int(spec.get("degree", 1))
            knots = np.sort(rng.uniform(0.0, 1.0, nk))
            values = c0 + amp * rng.standard_normal(nk)
            out.append(PeriodicSpline(knots, values, deg))
    return out


def evaluate_functions(fs: Sequence[Callable], t) -> np.ndarray:
    """Stack vectorized scalar functions into an ``(m, p)`` array."""
    t = np.asarray(t, dtype=float)
    return np.column_stack([np.broadcast_to(np.asarray(f(t), dtype=float), t.shape) for f in fs])


def ground_truth_matrix(sc: Scenario, dictionary: Dictionary, fs=None) -> np.ndarray:
    """Coordinate matrix of the true coefficient functions in ``dictionary``."""
    if dictionary.measure is not sc.measure and dictionary.measure.kind != sc.measure.kind:
        raise ValueError("dictionary measure does not match the scenario measure")
    fs = make_coefficients(sc) if fs is None else fs
    return np.vstack([expand_function(f, dictionary).coeffs for f in fs])


def _design_block(sc: Scenario, rng: np.random.Generator, m: int) -> np.ndarray:
    kind = sc.design_kind
    if kind == "canonical_uniform":
        W = np.zeros((m, sc.p))
        W[np.arange(m), rng.integers(0, sc.p, size=m)] = 1.0
        return W
    if kind == "sphere_uniform":
        Z = rng.standard_normal((m, sc.p))
        return Z / np.linalg.norm(Z, axis=1)[:, None]
    table = np.asarray(sc.design["table"], dtype=float)
    return table[rng.integers(0, table.shape[0], size=m)]


def _noise_block(kind: str, rng: np.random.Generator, m: int) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal(m)
    if kind == "rademacher_bounded":
        return 2.0 * rng.integers(0, 2, size=m) - 1.0
    return rng.laplace(0.0, LAPLACE_SCALE, size=m)


def sample_blocks(sc: Scenario, n: int, replicate: int = 0, fs=None):
    """Yield ``(W, t, y)`` blocks; concatenation gives ``sample_dataset``."""
    fs = make_coefficients(sc) if fs is None else fs
    for b in range(-(-n // BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n - b * BLOCK_SIZE)
        rng = substream(sc.seed, 1, replicate, b)
        u = rng.random(BLOCK_SIZE)[:m]
        W = _design_block(sc, rng, BLOCK_SIZE)[:m]
        xi = _noise_block(sc.noise, rng, BLOCK_SIZE)[:m]
        t = sc.measure.sample(u)
        y = np.einsum("ij,ij->i", W, evaluate_functions(fs, t)) + sc.sigma * xi
        yield W, t, y


def sample_dataset(sc: Scenario, n: int, replicate: int = 0, fs=None) -> Dataset:
    """Draw ``n`` observations; byte-identical for identical ``(sc, n, replicate)``."""
    if n < 1:
        raise ValueError("n must be positive")
    blocks = list(sample_blocks(sc, n, replicate, fs))
    W = np.vstack([b[0] for b in blocks])
    t = np.concatenate([b[1] for b in blocks])
    y = np.concatenate([b[2] for b in blocks])
    return Dataset(W, t, y)


def noise_spec(sc: Scenario) -> NoiseSpec:
    """Orlicz constant K from ``E exp(|xi|/K) <= e``; c* stays at the Gaussian value."""
    if sc.noise == "laplace":
        K = LAPLACE_SCALE / (1.0 - math.exp(-1.0))
    else:
        K = 1.0
    return NoiseSpec(sigma=sc.sigma, K=K)


def scenario_moments(sc: Scenario, l: int) -> DesignMoments:
    kind = sc.design_kind
    if kind in ("canonical_uniform", "sphere_uniform"):
        return design_moments(kind, l, sc.p)
    return design_moments(np.asarray(sc.design["table"], dtype=float), l)


def scenario_approx(sc: Scenario, dictionary: Dictionary, fs=None) -> ApproxSpec:
    """Declared residual constants, or a fit from expansion residuals.

    A truth that the dictionary reproduces exactly gets ``b = b1 = 0``.
    """
    if sc.approx is not None:
        return sc.approx
    fs = make_coefficients(sc) if fs is None else fs
    exps = [expand_function(f, dictionary) for f in fs]
    if max(e.residual_sup for e in exps) < 1e-9:
        return ApproxSpec(0.0, 0.0, 1.0, empirical=True)
    if dictionary.kind == "fourier":
        ls = [5, 9, 17, 33, 65]
    else:
        ls = [4, 8, 16, 32, 64]
    return fit_approx_spec(fs, dictionary, ls)


def default_dictionary(sc: Scenario) -> Dictionary:
    """Scenario-embedded dictionary, else one sized to the coefficient family."""
    if sc.dictionary is not None:
        d = dict(sc.dictionary)
        d.setdefault("measure", sc.measure.to_dict())
        dct = Dictionary.from_dict(d)
        return Dictionary(dct.kind, dct.l, sc.measure, dct.c_phi)
    spec = sc.coeff_spec
    if spec["kind"] == "trig":
        return Dictionary("fourier", 2 * int(spec.get("k_max", 2)) + 1, sc.measure)
    if spec["kind"] == "poly":
        return Dictionary("polynomial", int(spec.get("degree", 3)) + 1, sc.measure)
    return Dictionary("fourier", 15, sc.measure)
