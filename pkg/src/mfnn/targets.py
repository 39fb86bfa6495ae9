"""Benchmark mean-field functions and the Gaussian-mixture test laws.

Cases::

    A  x + mean + 2 Var
    B  E (x - X)^2            = x^2 - 2 x mean + E X^2
    C  E (x - Y - Z)^2        = x^2 - 4 x mean + 2 E X^2 + 2 mean^2
    D  E |x - X|
    E  P(X <= x)

Every case can be evaluated against a bin density (closed form), a sample
(empirical expectation) or a :class:`GaussianMixture` (closed form).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .measures import (
    BinDensity,
    BinGrid,
    EmpiricalSample,
    _cdf_rows,
    _partial_first_moment_rows,
    moments_batch,
)

CASES = ("A", "B", "C", "D", "E")

__all__ = [
    "CASES",
    "eval_target",
    "target_from_moments",
    "target_on_bins",
    "target_on_samples",
    "GaussianMixture",
    "make_test_distribution",
]


def _check_case(case: str) -> str:
    case = str(case).upper()
    if case not in CASES:
        raise ValueError(f"unknown target case {case!r}; expected one of {CASES}")
    return case


def target_from_moments(case: str, x, mean, second):
    """Cases A-C written in terms of the first two moments (broadcasting)."""
    if case == "A":
        return x + mean + 2.0 * (second - mean**2)
    if case == "B":
        return x**2 - 2.0 * x * mean + second
    if case == "C":
        return x**2 - 4.0 * x * mean + 2.0 * second + 2.0 * mean**2
    raise ValueError(f"case {case!r} is not a moment function")


def target_on_bins(case: str, grid: BinGrid, P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """V(X[m, n], L_D(P[m])) for an (M, K) batch of densities and (M, N) points."""
    case = _check_case(case)
    P = np.atleast_2d(P)
    X = np.asarray(X, dtype=float).reshape(P.shape[0], -1)
    mean, second = moments_batch(grid, P)
    if case in "ABC":
        return target_from_moments(case, X, mean[:, None], second[:, None])
    F = _cdf_rows(grid, P, X)
    if case == "E":
        return F
    G = _partial_first_moment_rows(grid, P, X)
    return X * (2.0 * F - 1.0) + mean[:, None] - 2.0 * G


def target_on_samples(case: str, x, xs) -> np.ndarray:
    """V(x, empirical law of ``xs``) for an array of points ``x``."""
    case = _check_case(case)
    values = np.asarray(xs.values if isinstance(xs, EmpiricalSample) else xs, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if case in "ABC":
        return target_from_moments(case, x, values.mean(), np.mean(values**2))
    s = np.sort(values)
    n = s.size
    k = np.searchsorted(s, x, side="right")
    if case == "E":
        return k / n
    prefix = np.concatenate([[0.0], np.cumsum(s)])
    below = prefix[k]
    return (x * k - below + (prefix[-1] - below) - x * (n - k)) / n


def eval_target(case: str, x, mu):
    """Evaluate case ``case`` at point(s) ``x`` against a measure.

    ``mu`` may be a :class:`BinDensity`, an :class:`EmpiricalSample` (or raw
    array of samples) or a :class:`GaussianMixture`.
    """
    scalar = np.ndim(x) == 0
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    if isinstance(mu, BinDensity):
        out = target_on_bins(case, mu.grid, mu.p[None, :], x_arr[None, :])[0]
    elif isinstance(mu, GaussianMixture):
        out = mu.target(case, x_arr)
    else:
        out = target_on_samples(case, x_arr, mu)
    return float(out[0]) if scalar else out


# --------------------------------------------------------------------------
# test distributions


@dataclass(frozen=True)
class GaussianMixture:
    """Finite Gaussian mixture with an explicit sampling construction.

    ``construction`` names the recipe :meth:`sample` follows so draws match
    the documented random-variable formula rather than a generic mixture
    sampler.
    """

    weights: tuple
    means: tuple
    stds: tuple
    construction: str
    a: float = 0.0
    b: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    @property
    def second_moment(self) -> float:
        w, m, s = map(np.asarray, (self.weights, self.means, self.stds))
        return float(np.dot(w, m**2 + s**2))

    @property
    def std(self) -> float:
        return float(np.sqrt(self.second_moment - self.mean**2))

    def sample(self, N: int, rng: np.random.Generator) -> np.ndarray:
        a, b = self.a, self.b
        if self.construction == "gaussian":
            return self.means[0] + self.stds[0] * rng.standard_normal(N)
        if self.construction in ("two_literal", "two_bimodal"):
            P = rng.random(N) < 0.5
            Y = rng.standard_normal(N)
            Ybar = rng.standard_normal(N)
            shift = -a if self.construction == "two_literal" else a
            return np.where(P, -a + b * Y, shift + b * Ybar)
        if self.construction == "three":
            j = np.floor(3.0 * rng.random(N))
            Y = rng.standard_normal(N)
            return a * (-(j == 0).astype(float) + (j == 1).astype(float)) + b * Y
        raise ValueError(f"unknown construction {self.construction!r}")

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(np.asarray(self.weights) * ndtr((x - np.asarray(self.means)) / np.asarray(self.stds)), axis=-1)

    def mean_abs(self, x) -> np.ndarray:
        """E|x - X| using E|x - N(m, s^2)| = d (2 Phi(d/s) - 1) + 2 s phi(d/s), d = x - m."""
        x = np.asarray(x, dtype=float)[..., None]
        m, s, w = map(np.asarray, (self.means, self.stds, self.weights))
        d = x - m
        z = d / s
        phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        return np.sum(w * (d * (2.0 * ndtr(z) - 1.0) + 2.0 * s * phi), axis=-1)

    def target(self, case: str, x) -> np.ndarray:
        case = _check_case(case)
        if case in "ABC":
            return target_from_moments(case, np.asarray(x, float), self.mean, self.second_moment)
        return self.cdf(x) if case == "E" else self.mean_abs(x)


def make_test_distribution(which: int, test2_variant: str = "bimodal") -> GaussianMixture:
    """Test laws 1-3.

    1: N(0.3, 0.05^2).
    2: X = P(-a + bY) + (1 - P)(s + bY'), P ~ Bernoulli(1/2), a = 0.25, b = 0.1,
       with s = +a for ``test2_variant="bimodal"`` and s = -a for ``"literal"``
       (the latter collapses to the single Gaussian N(-a, b^2)).
    3: X = a(-1{floor(3U) = 0} + 1{floor(3U) = 1}) + bY, a = 0.3, b = 0.07.
    """
    if which == 1:
        return GaussianMixture((1.0,), (0.3,), (0.05,), "gaussian")
    if which == 2:
        a, b = 0.25, 0.1
        if test2_variant == "bimodal":
            return GaussianMixture((0.5, 0.5), (-a, a), (b, b), "two_bimodal", a, b)
        if test2_variant == "literal":
            return GaussianMixture((0.5, 0.5), (-a, -a), (b, b), "two_literal", a, b)
        raise ValueError(f"unknown test2 variant {test2_variant!r}")
    if which == 3:
        a, b = 0.3, 0.07
        third = 1.0 / 3.0
        return GaussianMixture((third, third, third), (-a, a, 0.0), (b, b, b), "three", a, b)
    raise ValueError(f"test distribution must be 1, 2 or 3, got {which!r}")
