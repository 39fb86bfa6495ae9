"""Probability measures on the real line.

Bin densities (piecewise-constant densities on a uniform partition of an
interval), quantized measures and empirical samples, together with their
random generation, exact inverse-CDF sampling and histogram estimation.

Batched helpers (``*_batch``) work on 2-D arrays where each row is one
measure; they are what the training loops use.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "BinGrid",
    "BinDensity",
    "QuantizedMeasure",
    "EmpiricalSample",
    "make_grid",
    "random_bin_density",
    "random_bin_densities",
    "random_quantized",
    "inverse_cdf",
    "sample",
    "sample_batch",
    "estimate_bins",
    "estimate_bins_batch",
    "moments",
    "moments_batch",
    "rebin",
    "save_bin_density",
    "load_bin_density",
    "save_sample",
    "load_sample",
]

NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class BinGrid:
    lo: float
    hi: float
    K: int

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or self.hi <= self.lo:
            raise ValueError(f"invalid domain: need lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"invalid domain: bin count must be >= 1, got {self.K}")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.K

    @property
    def edges(self) -> np.ndarray:
        e = self.lo + np.arange(self.K + 1) * self.h
        e[-1] = self.hi
        return e

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.K) + 0.5) * self.h

    def to_dict(self) -> dict:
        return {"lo": float(self.lo), "hi": float(self.hi), "K": int(self.K)}


def make_grid(lo: float, hi: float, K: int) -> BinGrid:
    return BinGrid(float(lo), float(hi), int(K))


@dataclass(frozen=True)
class BinDensity:
    """Piecewise-constant density with level ``p[k]`` on bin ``k`` of ``grid``."""

    grid: BinGrid
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (self.grid.K,):
            raise ValueError(f"expected {self.grid.K} density levels, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("density levels must be finite and non-negative")
        mass = p.sum() * self.grid.h
        if abs(mass - 1.0) > 1e-9:
            raise ValueError(f"density integrates to {mass}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def mass(self) -> float:
        return float(self.p.sum() * self.grid.h)

    def cdf(self, x) -> np.ndarray:
        return _cdf_rows(self.grid, self.p[None, :], np.atleast_1d(np.asarray(x, float))[None, :])[0]


@dataclass(frozen=True)
class QuantizedMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if pts.shape != w.shape or pts.ndim != 1:
            raise ValueError("points and weights must be 1-D arrays of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must lie in the simplex")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def mean(self) -> float:
        return float(self.weights @ self.points)


@dataclass(frozen=True)
class EmpiricalSample:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size < 1:
            raise ValueError("an empirical sample needs at least one value")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @property
    def mean(self) -> float:
        return float(self.values.mean())


# --------------------------------------------------------------------------
# random generation


def random_bin_densities(grid: BinGrid, M: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``M`` bin-density level vectors by normalizing i.i.d. exponentials.

    Returns an ``(M, K)`` array whose rows each satisfy ``sum(p) * h == 1``.
    """
    e = rng.standard_exponential((M, grid.K))
    return e / (e.sum(axis=1, keepdims=True) * grid.h)


def random_bin_density(grid: BinGrid, rng: np.random.Generator) -> BinDensity:
    return BinDensity(grid, random_bin_densities(grid, 1, rng)[0])


def random_quantized(
    K: int,
    rng: np.random.Generator,
    point_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
    grid: BinGrid | None = None,
) -> QuantizedMeasure:
    """Random discrete measure on ``K`` random atoms with exponential-normalized weights.

    ``point_sampler(K, rng)`` draws the atoms; by default they are i.i.d.
    uniform on ``grid`` (or on [0, 1] without a grid).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if point_sampler is None:
        lo, hi = (grid.lo, grid.hi) if grid is not None else (0.0, 1.0)
        points = rng.uniform(lo, hi, size=K)
    else:
        points = np.asarray(point_sampler(K, rng), dtype=float)
    e = rng.standard_exponential(K)
    return QuantizedMeasure(points, e / e.sum())


# --------------------------------------------------------------------------
# inverse CDF sampling


def _inverse_cdf_row(grid: BinGrid, p: np.ndarray, u: np.ndarray) -> np.ndarray:
    h = grid.h
    edges = grid.edges
    cum = np.cumsum(p * h)
    k = np.searchsorted(cum, u, side="left")
    np.clip(k, 0, grid.K - 1, out=k)
    prev = np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)
    pk = p[k]
    left = edges[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(pk > 0, left + (u - prev) / np.where(pk > 0, pk, 1.0), left)
    # keeping each value inside its own bin makes the map monotone under rounding
    return np.clip(x, left, edges[k + 1])


def inverse_cdf(bd: BinDensity, u):
    """Generalized inverse of the piecewise-linear CDF of ``bd``.

    Zero-mass bins map to their left edge.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0) or np.any(u_arr > 1):
        raise ValueError("u must lie in [0, 1]")
    out = _inverse_cdf_row(bd.grid, bd.p, np.atleast_1d(u_arr))
    return float(out[0]) if u_arr.ndim == 0 else out.reshape(u_arr.shape)


def sample(bd: BinDensity, N: int, rng: np.random.Generator) -> EmpiricalSample:
    return EmpiricalSample(_inverse_cdf_row(bd.grid, bd.p, rng.random(N)))


def sample_batch(grid: BinGrid, P: np.ndarray, N: int, rng: np.random.Generator) -> np.ndarray:
    """``N`` draws from each row of ``P``; returns an ``(M, N)`` array."""
    U = rng.random((P.shape[0], N))
    return np.stack([_inverse_cdf_row(grid, P[m], U[m]) for m in range(P.shape[0])])


# --------------------------------------------------------------------------
# estimation


def _bin_index(grid: BinGrid, x: np.ndarray) -> np.ndarray:
    xc = np.clip(x, grid.lo, grid.hi)
    idx = np.searchsorted(grid.edges, xc, side="right") - 1
    return np.clip(idx, 0, grid.K - 1)


def estimate_bins_batch(grid: BinGrid, X: np.ndarray) -> np.ndarray:
    """Histogram density estimate of each row of ``X`` after clamping to the grid.

    Bins are half-open ``[x_{k-1}, x_k)`` except the last, which is closed.
    """
    X = np.atleast_2d(X)
    M, N = X.shape
    idx = _bin_index(grid, X) + grid.K * np.arange(M)[:, None]
    counts = np.bincount(idx.ravel(), minlength=M * grid.K).reshape(M, grid.K)
    return counts / (N * grid.h)


def estimate_bins(grid: BinGrid, xs) -> BinDensity:
    values = xs.values if isinstance(xs, EmpiricalSample) else np.asarray(xs, float).ravel()
    if values.size < 1:
        raise ValueError("need at least one sample")
    return BinDensity(grid, estimate_bins_batch(grid, values[None, :])[0])


# --------------------------------------------------------------------------
# closed forms


def moments_batch(grid: BinGrid, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and second moment of each row of ``P``."""
    h, c = grid.h, grid.centers
    mean = (P * h) @ c
    second = P @ (h * c**2 + h**3 / 12.0)
    return mean, second


def moments(bd: BinDensity) -> tuple[float, float]:
    m, s = moments_batch(bd.grid, bd.p[None, :])
    return float(m[0]), float(s[0])


def _cdf_rows(grid: BinGrid, P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """F_p(x) for each row: ``P`` is (M, K), ``X`` is (M, n)."""
    h = grid.h
    cum = np.concatenate([np.zeros((P.shape[0], 1)), np.cumsum(P * h, axis=1)], axis=1)
    k = _bin_index(grid, X)
    rows = np.arange(P.shape[0])[:, None]
    F = cum[rows, k] + P[rows, k] * (X - grid.edges[k])
    F = np.where(X < grid.lo, 0.0, F)
    return np.where(X >= grid.hi, 1.0, F)


def rebin(src: BinGrid, P: np.ndarray, dst: BinGrid) -> np.ndarray:
    """Exact density bins on ``dst`` of the bin densities ``P`` given on ``src``.

    Mass outside ``dst`` is moved into its first or last bin, as clamping does.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    inner = dst.edges[1:-1]
    F = _cdf_rows(src, P, np.broadcast_to(inner, (P.shape[0], inner.size)))
    F = np.concatenate([np.zeros((P.shape[0], 1)), F, np.ones((P.shape[0], 1))], axis=1)
    return np.diff(F, axis=1) / dst.h


def _partial_first_moment_rows(grid: BinGrid, P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """int_{lo}^{x} y p(y) dy for each row."""
    e = grid.edges
    per_bin = P * (e[1:] ** 2 - e[:-1] ** 2) / 2.0
    cum = np.concatenate([np.zeros((P.shape[0], 1)), np.cumsum(per_bin, axis=1)], axis=1)
    k = _bin_index(grid, X)
    rows = np.arange(P.shape[0])[:, None]
    Xc = np.clip(X, grid.lo, grid.hi)
    return cum[rows, k] + P[rows, k] * (Xc**2 - e[k] ** 2) / 2.0


# --------------------------------------------------------------------------
# serialization


def save_bin_density(path, bd: BinDensity) -> None:
    payload = {**bd.grid.to_dict(), "p": [float(v) for v in bd.p]}
    Path(path).write_text(json.dumps(payload))


def load_bin_density(path) -> BinDensity:
    d = json.loads(Path(path).read_text())
    return BinDensity(make_grid(d["lo"], d["hi"], d["K"]), np.asarray(d["p"], dtype=float))


def save_sample(path, xs: EmpiricalSample) -> None:
    """CSV (header ``x``, 17 significant digits) for ``.csv`` paths, raw little-endian float64 otherwise."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write("x\n")
            for v in xs.values:
                fh.write(f"{v:.17g}\n")
    else:
        xs.values.astype("<f8").tofile(path)


def load_sample(path) -> EmpiricalSample:
    path = Path(path)
    if path.suffix == ".csv":
        return EmpiricalSample(np.loadtxt(path, skiprows=1, ndmin=1))
    return EmpiricalSample(np.fromfile(path, dtype="<f8"))
