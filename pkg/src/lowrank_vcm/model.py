"""Observations, coordinate matrices and the rank-one design operators.

Observation ``i`` pairs with the design matrix ``X_i = w_i phi(t_i)^T``.  The
matrices are never formed: ``<X_i, A> = w_i^T A phi(t_i)`` and every
accumulation over observations goes through the ``(n, p)`` covariate array and
the ``(n, l)`` array of basis values.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import Dictionary, DomainError

__all__ = [
    "ShapeError",
    "DataFormatError",
    "Observation",
    "Dataset",
    "VCFunction",
    "normalize_covariates",
    "design_inner",
    "design_values",
    "predict",
    "residuals",
    "matrix_to_csv",
    "matrix_from_csv",
    "matrix_to_json",
    "matrix_from_json",
]

W_NORM_TOL = 1e-12


class ShapeError(ValueError):
    pass


class DataFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Observation:
    w: np.ndarray
    t: float
    y: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).ravel()
        object.__setattr__(self, "w", w)
        if np.linalg.norm(w) > 1.0 + W_NORM_TOL:
            raise ValueError("covariate norm exceeds 1; rescale with normalize_covariates")
        if not 0.0 <= self.t <= 1.0:
            raise DomainError("t must lie in [0, 1]")


class Dataset:
    """``n`` observations stored column-wise.

    Basis values ``phi(t_i)`` are cached per dictionary object; the solver asks
    for them on every iteration.
    """

    def __init__(self, W, t, y):
        W = np.array(W, dtype=float, ndmin=2)
        t = np.array(t, dtype=float).ravel()
        y = np.array(y, dtype=float).ravel()
        if W.shape[0] != t.size or t.size != y.size:
            raise ShapeError("W, t and y must have the same number of rows")
        if t.size < 1:
            raise ShapeError("a dataset needs at least one observation")
        if np.any(np.linalg.norm(W, axis=1) > 1.0 + W_NORM_TOL):
            raise ValueError("covariate norm exceeds 1; rescale with normalize_covariates")
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError("t must lie in [0, 1]")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite covariates or responses")
        for arr in (W, t, y):
            arr.setflags(write=False)
        self.W, self.t, self.y = W, t, y
        self._cache: dict[int, tuple[Dictionary, np.ndarray]] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Dataset":
        if not observations:
            raise ShapeError("a dataset needs at least one observation")
        p = observations[0].w.size
        if any(o.w.size != p for o in observations):
            raise ShapeError("observations must share the covariate dimension")
        return cls(np.vstack([o.w for o in observations]),
                   [o.t for o in observations], [o.y for o in observations])

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.W.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i: int) -> Observation:
        return Observation(self.W[i], float(self.t[i]), float(self.y[i]))

    @property
    def observations(self) -> list[Observation]:
        return [self[i] for i in range(self.n)]

    def phi(self, dictionary: Dictionary) -> np.ndarray:
        key = id(dictionary)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is dictionary:
            return hit[1]
        vals = dictionary.evaluate(self.t)
        vals.setflags(write=False)
        with self._lock:
            self._cache[key] = (dictionary, vals)
        return vals

    def __getstate__(self):
        return {"W": self.W, "t": self.t, "y": self.y}

    def __setstate__(self, state):
        self.__init__(state["W"], state["t"], state["y"])

    def to_csv(self, path) -> None:
        """Write the ``t,y,w_1,...,w_p`` CSV format."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_string())

    def to_csv_string(self) -> str:
        header = ",".join(["t", "y"] + [f"w_{k + 1}" for k in range(self.p)])
        buf = io.StringIO()
        buf.write(header + "\n")
        data = np.column_stack([self.t, self.y, self.W])
        np.savetxt(buf, data, delimiter=",", fmt="%.17g")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, encoding="utf-8", newline="") as fh:
            return cls.from_csv_string(fh.read())

    @classmethod
    def from_csv_string(cls, text: str) -> "Dataset":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", 1) from None
        header = [h.strip() for h in header]
        if header[:2] != ["t", "y"] or len(header) < 3:
            raise DataFormatError("header must be t,y,w_1,...,w_p", 1)
        p = len(header) - 2
        expected = [f"w_{k + 1}" for k in range(p)]
        if header[2:] != expected:
            raise DataFormatError("covariate columns must be named w_1..w_p in order", 1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != p + 2:
                raise DataFormatError(f"expected {p + 2} fields, found {len(row)}", lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataFormatError("non-numeric field", lineno) from None
            tv = vals[0]
            if not 0.0 <= tv <= 1.0:
                raise DataFormatError(f"t = {tv} outside [0, 1]", lineno)
            if np.linalg.norm(vals[2:]) > 1.0 + W_NORM_TOL:
                raise DataFormatError("covariate norm exceeds 1", lineno)
            rows.append(vals)
        if not rows:
            raise DataFormatError("no observations", 2)
        arr = np.asarray(rows)
        return cls(arr[:, 2:], arr[:, 0], arr[:, 1])


def normalize_covariates(W) -> tuple[np.ndarray, float]:
    """Scale covariates so the largest row norm is 1; returns ``(W_scaled, scale)``.

    Coefficient functions fitted on the scaled covariates must be divided by
    ``scale`` to recover the original units.
    """
    W = np.asarray(W, dtype=float)
    scale = float(np.max(np.linalg.norm(W, axis=1)))
    if scale == 0.0:
        return W.copy(), 1.0
    return W / scale, scale


def _check_dims(A: np.ndarray, p: int, l: int) -> None:
    if A.ndim != 2 or A.shape != (p, l):
        raise ShapeError(f"coordinate matrix has shape {A.shape}, expected {(p, l)}")


def design_inner(A, obs: Observation, dictionary: Dictionary) -> float:
    """``<X, A> = w^T A phi(t)`` for a single observation."""
    A = np.asarray(A, dtype=float)
    _check_dims(A, obs.w.size, dictionary.l)
    phi = dictionary.evaluate([obs.t])[0]
    return float(obs.w @ (A @ phi))


def design_values(A, data: Dataset, dictionary: Dictionary) -> np.ndarray:
    """Vector of ``<X_i, A>`` over the dataset."""
    A = np.asarray(A, dtype=float)
    _check_dims(A, data.p, dictionary.l)
    phi = data.phi(dictionary)
    return np.einsum("ij,ij->i", data.W @ A, phi)


def residuals(A, data: Dataset, dictionary: Dictionary) -> np.ndarray:
    return data.y - design_values(A, data, dictionary)


@dataclass(frozen=True, eq=False)
class VCFunction:
    """The coefficient function ``t -> A phi(t)``."""

    coeffs: np.ndarray
    dictionary: Dictionary

    def __post_init__(self):
        A = np.asarray(self.coeffs, dtype=float)
        if A.ndim != 2 or A.shape[1] != self.dictionary.l:
            raise ShapeError("coefficient columns must equal the dictionary size")
        if not np.all(np.isfinite(A)):
            raise ValueError("non-finite coefficients")
        object.__setattr__(self, "coeffs", A)

    @property
    def p(self) -> int:
        return self.coeffs.shape[0]

    def __call__(self, t) -> np.ndarray:
        """Values at an array of t as ``(m, p)``."""
        return self.dictionary.evaluate(t) @ self.coeffs.T


def predict(fhat: VCFunction, t: float) -> np.ndarray:
    return fhat.coeffs @ fhat.dictionary.evaluate([t])[0]


def matrix_to_csv(A, path) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        np.savetxt(fh, A, delimiter=",", fmt="%.17g")


def matrix_from_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def matrix_to_json(A) -> str:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return json.dumps({"rows": A.shape[0], "cols": A.shape[1], "entries": A.tolist()})


def matrix_from_json(text: str) -> np.ndarray:
    d = json.loads(text)
    A = np.asarray(d["entries"], dtype=float).reshape(d["rows"], d["cols"])
    return A
