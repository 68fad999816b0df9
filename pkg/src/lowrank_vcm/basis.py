"""Orthonormal dictionaries on (0, 1) and expansion diagnostics.

A dictionary is a finite family ``phi_1, ..., phi_l`` orthonormal in
``L2((0,1), dmu)`` where ``dmu = g(t) dt``.  Shipped kinds are the real
trigonometric system, the periodic Haar system and normalized Legendre
polynomials; under a weighted measure every element is divided by
``sqrt(g)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import eval_legendre

__all__ = [
    "DomainError",
    "MeasureError",
    "InvariantViolation",
    "Quadrature",
    "composite_gauss_legendre",
    "TableDensity",
    "DensityMeasure",
    "Dictionary",
    "ApproxSpec",
    "Expansion",
    "eval_basis",
    "gram_matrix",
    "max_offdiag",
    "sup_norm_constant",
    "expand_function",
    "default_c_phi",
]

DEFAULT_QUAD_NODES = 1024
GL_ORDER = 16
RESIDUAL_GRID = 4097
CUSTOM_GRAM_TOL = 1e-6


class DomainError(ValueError):
    """Index variable outside [0, 1]."""


class MeasureError(ValueError):
    """Density is non-positive or violates its declared bounds."""


class InvariantViolation(ValueError):
    """A declared dictionary constant does not hold."""


def _quad_nodes_default() -> int:
    env = os.environ.get("VCM_QUAD_NODES")
    if env:
        return int(env)
    return DEFAULT_QUAD_NODES


@dataclass(frozen=True)
class Quadrature:
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate along axis 0."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def composite_gauss_legendre(n_nodes: int, order: int = GL_ORDER) -> Quadrature:
    """Composite Gauss-Legendre rule on [0, 1].

    The panel count is ``ceil(n_nodes / order)``; with the default order and a
    power-of-two node count the panel edges are dyadic, so Haar products are
    integrated exactly.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be positive")
    panels = -(-n_nodes // order)
    x, w = np.polynomial.legendre.leggauss(order)
    h = 1.0 / panels
    left = np.arange(panels) * h
    nodes = (left[:, None] + 0.5 * h * (x[None, :] + 1.0)).ravel()
    weights = np.tile(0.5 * h * w, panels)
    return Quadrature(nodes, weights)


class TableDensity:
    """Piecewise-linear density from a ``(t, g)`` table, normalized to unit mass."""

    def __init__(self, table):
        arr = np.asarray(table, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
            raise MeasureError("g_table must be a list of (t, g) pairs")
        order = np.argsort(arr[:, 0])
        ts, gs = arr[order, 0], arr[order, 1]
        if ts[0] > 0.0 or ts[-1] < 1.0:
            raise MeasureError("g_table must cover [0, 1]")
        if np.any(gs <= 0):
            raise MeasureError("g_table contains non-positive density values")
        mass = np.trapezoid(gs, ts) if hasattr(np, "trapezoid") else np.trapz(gs, ts)
        self.ts = ts
        self.gs = gs / mass

    def __call__(self, t):
        return np.interp(t, self.ts, self.gs)

    def table(self) -> list[list[float]]:
        return [[float(a), float(b)] for a, b in zip(self.ts, self.gs)]


@dataclass(frozen=True, eq=False)
class DensityMeasure:
    """The measure ``dmu = g(t) dt`` on [0, 1] with its quadrature rule."""

    kind: str = "lebesgue"
    g: Callable[[np.ndarray], np.ndarray] | None = None
    g1: float = 1.0
    g2: float = 1.0
    quad_nodes: int = field(default_factory=_quad_nodes_default)
    quadrature: Quadrature = field(init=False, repr=False)
    mu_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("lebesgue", "weighted"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        quad = composite_gauss_legendre(self.quad_nodes)
        object.__setattr__(self, "quadrature", quad)
        if self.kind == "lebesgue":
            object.__setattr__(self, "mu_weights", quad.weights)
            return
        if self.g is None:
            raise MeasureError("weighted measure requires a density g")
        gv = np.asarray(self.g(quad.nodes), dtype=float)
        if np.any(gv <= 0):
            raise MeasureError("density must be positive on [0, 1]")
        if not (0 < self.g1 < self.g2 < math.inf):
            raise MeasureError("need 0 < g1 < g2 < inf")
        if gv.min() < self.g1 * (1 - 1e-12) or gv.max() > self.g2 * (1 + 1e-12):
            raise MeasureError(
                f"density range [{gv.min():.6g}, {gv.max():.6g}] outside "
                f"declared [{self.g1}, {self.g2}]"
            )
        mass = float(quad.weights @ gv)
        if abs(mass - 1.0) > 1e-6:
            raise MeasureError(f"density integrates to {mass:.8g}, expected 1")
        object.__setattr__(self, "mu_weights", quad.weights * gv)

    @classmethod
    def weighted(cls, g, g1=None, g2=None, quad_nodes=None, grid_size=4097):
        """Build a weighted measure, taking the density bounds from a grid if omitted."""
        if isinstance(g, (list, tuple, np.ndarray)):
            g = TableDensity(g)
        if g1 is None or g2 is None:
            grid = np.linspace(0.0, 1.0, grid_size)
            gv = np.asarray(g(grid), dtype=float)
            g1 = float(gv.min()) if g1 is None else g1
            g2 = float(gv.max()) if g2 is None else g2
            if g1 == g2:
                g2 = g1 * (1 + 1e-12)
        kwargs = {} if quad_nodes is None else {"quad_nodes": quad_nodes}
        return cls(kind="weighted", g=g, g1=g1, g2=g2, **kwargs)

    def density(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "lebesgue":
            return np.ones_like(t)
        gv = np.asarray(self.g(t), dtype=float)
        if np.any(gv <= 0):
            raise MeasureError("density is non-positive at a requested point")
        return gv

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms on [0, 1) to draws from mu by inverse-CDF interpolation."""
        u = np.asarray(u, dtype=float)
        if self.kind == "lebesgue":
            return u
        grid = np.linspace(0.0, 1.0, 8193)
        gv = self.density(grid)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (gv[1:] + gv[:-1]) * np.diff(grid))])
        cdf /= cdf[-1]
        return np.interp(u, cdf, grid)

    def to_dict(self) -> dict:
        if self.kind == "lebesgue":
            return {"kind": "lebesgue"}
        if isinstance(self.g, TableDensity):
            return {"kind": "weighted", "g_table": self.g.table(),
                    "g1": self.g1, "g2": self.g2}
        grid = np.linspace(0.0, 1.0, 257)
        table = [[float(a), float(b)] for a, b in zip(grid, self.g(grid))]
        return {"kind": "weighted", "g_table": table, "g1": self.g1, "g2": self.g2}

    @classmethod
    def from_dict(cls, d: dict, quad_nodes: int | None = None) -> "DensityMeasure":
        kind = d.get("kind", "lebesgue")
        kwargs = {} if quad_nodes is None else {"quad_nodes": quad_nodes}
        if kind == "lebesgue":
            return cls(**kwargs)
        if "g_table" not in d:
            raise MeasureError("weighted measure needs g_table")
        return cls.weighted(TableDensity(d["g_table"]), d.get("g1"), d.get("g2"), quad_nodes)


@dataclass(frozen=True)
class ApproxSpec:
    """Residual decay constants: sup-norm ``b l^-gamma``, L2 ``b1 l^-(gamma+1/2)``.

    ``b = b1 = 0`` encodes an exactly representable truth (zero remainder).
    """

    b: float = 1.0
    b1: float = 1.0
    gamma: float = 1.0
    empirical: bool = False

    def __post_init__(self):
        if self.b < 0 or self.b1 < 0:
            raise ValueError("b and b1 must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


def _haar_c_phi(l: int) -> float:
    if l == 1:
        return 1.0
    H = int(math.floor(math.log2(l)))
    full = 2 ** H
    peak = full if l == full else 2 * full
    return math.sqrt(peak / l)


def default_c_phi(kind: str, l: int, measure: DensityMeasure | None = None) -> float:
    """Declared sup-norm constant for a shipped kind.

    fourier: sqrt(2); haar: exact peak of sum(phi^2)/l; polynomial: sqrt(l)
    (Legendre peaks at the endpoints).  Weighted measures divide by sqrt(g1).
    """
    if kind == "fourier":
        c = math.sqrt(2.0) if l > 1 else 1.0
    elif kind == "haar_wavelet":
        c = _haar_c_phi(l)
    elif kind == "polynomial":
        c = math.sqrt(l)
    else:
        raise ValueError(f"no default c_phi for kind {kind!r}")
    if measure is not None and measure.kind == "weighted":
        c /= math.sqrt(measure.g1)
    return c


def _fourier(t: np.ndarray, l: int) -> np.ndarray:
    out = np.empty((t.size, l))
    out[:, 0] = 1.0
    k = np.arange(1, (l - 1) // 2 + 2)
    arg = 2.0 * np.pi * np.outer(t, k)
    cos = math.sqrt(2.0) * np.cos(arg)
    sin = math.sqrt(2.0) * np.sin(arg)
    for j in range(1, l):
        kk = (j + 1) // 2
        out[:, j] = cos[:, kk - 1] if j % 2 == 1 else sin[:, kk - 1]
    return out


def _haar(t: np.ndarray, l: int) -> np.ndarray:
    out = np.empty((t.size, l))
    out[:, 0] = 1.0
    tt = np.mod(t, 1.0)
    j = 1
    h = 0
    while j < l:
        scaled = (2.0 ** h) * tt
        pos = np.floor(scaled)
        frac = scaled - pos
        val = (2.0 ** (h / 2.0)) * np.where(frac < 0.5, 1.0, -1.0)
        for i in range(2 ** h):
            if j >= l:
                break
            out[:, j] = np.where(pos == i, val, 0.0)
            j += 1
        h += 1
    return out


def _legendre(t: np.ndarray, l: int) -> np.ndarray:
    x = 2.0 * t - 1.0
    out = np.empty((t.size, l))
    for k in range(l):
        out[:, k] = math.sqrt(2 * k + 1) * eval_legendre(k, x)
    return out


_KINDS = {"fourier": _fourier, "haar_wavelet": _haar, "polynomial": _legendre}


class Dictionary:
    """An immutable orthonormal dictionary of ``l`` functions under ``measure``.

    Parameters
    ----------
    kind : {"fourier", "haar_wavelet", "polynomial", "custom"}
    l : int
        Number of basis functions.
    measure : DensityMeasure, optional
        Defaults to Lebesgue measure.
    c_phi : float, optional
        Declared sup-norm constant; per-kind default when omitted.  Checked on
        a grid at construction.
    evaluator : callable, optional
        For ``kind="custom"``: maps a 1-d array of t to an ``(m, l)`` array.
        Must already be orthonormal under ``measure`` (checked to 1e-6).
    """

    __slots__ = ("kind", "l", "measure", "c_phi", "_evaluator")

    def __init__(self, kind: str, l: int, measure: DensityMeasure | None = None,
                 c_phi: float | None = None, evaluator=None):
        if l < 1:
            raise ValueError("l must be a positive integer")
        measure = measure if measure is not None else DensityMeasure()
        if kind == "custom":
            if evaluator is None or c_phi is None:
                raise ValueError("custom dictionaries need an evaluator and c_phi")
        elif kind not in _KINDS:
            raise ValueError(f"unknown dictionary kind {kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "l", int(l))
        object.__setattr__(self, "measure", measure)
        object.__setattr__(self, "_evaluator", evaluator)
        if c_phi is None:
            c_phi = default_c_phi(kind, l, measure)
        object.__setattr__(self, "c_phi", float(c_phi))
        if kind == "custom":
            dev = max_offdiag(gram_matrix(self), identity=True)
            if dev > CUSTOM_GRAM_TOL:
                raise InvariantViolation(
                    f"custom dictionary is not orthonormal: max |G - I| = {dev:.3e}")
        sup_norm_constant(self, 1025)

    def __setattr__(self, name, value):
        raise AttributeError("Dictionary is immutable")

    def __reduce__(self):
        return (Dictionary, (self.kind, self.l, self.measure, self.c_phi, self._evaluator))

    def __repr__(self):
        return f"Dictionary(kind={self.kind!r}, l={self.l}, measure={self.measure.kind!r}, c_phi={self.c_phi:.6g})"

    def evaluate(self, t) -> np.ndarray:
        """Evaluate all ``l`` elements at the points ``t``; returns ``(m, l)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
            raise DomainError("t must lie in [0, 1]")
        if self.kind == "custom":
            return np.asarray(self._evaluator(t), dtype=float).reshape(t.size, self.l)
        vals = _KINDS[self.kind](t, self.l)
        if self.measure.kind == "weighted":
            vals /= np.sqrt(self.measure.density(t))[:, None]
        return vals

    def with_l(self, l: int) -> "Dictionary":
        if self.kind == "custom":
            raise ValueError("cannot resize a custom dictionary")
        return Dictionary(self.kind, l, self.measure)

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise ValueError("custom dictionaries are not serializable")
        return {"kind": self.kind, "l": self.l, "measure": self.measure.to_dict(),
                "c_phi": self.c_phi}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict, quad_nodes: int | None = None) -> "Dictionary":
        measure = DensityMeasure.from_dict(d.get("measure", {"kind": "lebesgue"}), quad_nodes)
        return cls(d["kind"], int(d["l"]), measure, d.get("c_phi"))


def eval_basis(dictionary: Dictionary, t: float) -> np.ndarray:
    """Return ``phi(t)`` as a length-``l`` vector."""
    return dictionary.evaluate(np.array([t], dtype=float))[0]


def gram_matrix(dictionary: Dictionary) -> np.ndarray:
    """Quadrature approximation of ``<phi_i, phi_j>`` in ``L2(dmu)``."""
    m = dictionary.measure
    if m.quadrature.nodes.size < 2 * dictionary.l:
        raise ValueError("quadrature needs at least 2l nodes")
    vals = dictionary.evaluate(m.quadrature.nodes)
    return (vals * m.mu_weights[:, None]).T @ vals


def max_offdiag(G: np.ndarray, identity: bool = False) -> float:
    """Largest off-diagonal magnitude, or ``max |G - I|`` when ``identity``."""
    if identity:
        return float(np.max(np.abs(G - np.eye(G.shape[0]))))
    off = G - np.diag(np.diag(G))
    return float(np.max(np.abs(off))) if G.size > 1 else 0.0


def sup_norm_constant(dictionary: Dictionary, grid_size: int = 4097) -> float:
    """Grid maximum of ``sqrt(sum_j phi_j(t)^2 / l)``; must not exceed ``c_phi``."""
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    grid = np.linspace(0.0, 1.0, grid_size)
    vals = dictionary.evaluate(grid)
    c = float(np.sqrt(np.max(np.sum(vals ** 2, axis=1)) / dictionary.l))
    if c > dictionary.c_phi * (1 + 1e-12) + 1e-12:
        raise InvariantViolation(
            f"sup-norm constant {c:.6g} exceeds declared c_phi {dictionary.c_phi:.6g}")
    return c


class Expansion(NamedTuple):
    coeffs: np.ndarray
    residual_sup: float
    residual_l2: float


def expand_function(f: Callable, dictionary: Dictionary,
                    grid_size: int = RESIDUAL_GRID) -> Expansion:
    """Project ``f`` on the dictionary and measure the truncation remainder.

    ``f`` must accept an array of t.  ``residual_sup`` is taken over a uniform
    grid, ``residual_l2`` by quadrature in ``L2(dmu)``.
    """
    m = dictionary.measure
    nodes = m.quadrature.nodes
    fv = np.asarray(f(nodes), dtype=float)
    vals = dictionary.evaluate(nodes)
    coeffs = (vals * m.mu_weights[:, None]).T @ fv
    resid = fv - vals @ coeffs
    l2 = math.sqrt(max(float(m.mu_weights @ resid ** 2), 0.0))
    grid = np.linspace(0.0, 1.0, grid_size)
    sup = float(np.max(np.abs(np.asarray(f(grid), dtype=float) - dictionary.evaluate(grid) @ coeffs)))
    return Expansion(coeffs, sup, l2)
