"""A semi-linear PDE on Wasserstein space and four neural solvers for it.

The state follows the mean-reverting McKean-Vlasov SDE::

    dX_t = kappa (E[X_t] - X_t) dt + sigma dW_t

and the value function ``v(t, x, mu) = exp(T - t) E_{xi ~ mu}[w(x - xi)]``
solves ``L v + f(t, x, mu, v) = 0`` with terminal value
``g(x, mu) = E[w(x - xi)]`` when the generator is::

    f(t, x, mu, y) = exp(T - t) E[(w - sigma^2 w'')(x - xi) + kappa (x - xi) w'(x - xi)]
                     - a (exp(T - t) E[w(x - xi)])^2 + a y^2

Along the particles, ``Y_t = v(t, X_t, law(X_t))`` and ``Z_t = sigma d_x v``
solve ``dY = -f dt + Z dW``. The solvers below learn ``v`` with mean-field
networks, either backward one date at a time (local) or over whole
trajectories (global), with a plain regression target or the discretized
backward equation.

Expectations over ``mu`` always use an empirical cloud. For ``w = c cos``
they reduce to four trigonometric moments of the cloud, so evaluating on
``N`` points against ``N`` particles costs ``O(N)`` instead of ``O(N^2)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable

import numpy as np

from .autodiff import DivergenceError, Tensor, adam_init, adam_step, square, value_and_grad, value_of
from .measures import BinGrid, EmpiricalSample, estimate_bins_batch, make_grid, random_bin_densities, sample_batch
from .networks import build_net, point_inputs
from .targets import make_test_distribution

log = logging.getLogger(__name__)

MODES = ("local_regression", "local_bsde", "global_regression", "global_bsde")

__all__ = [
    "MODES",
    "CosKernel",
    "Kernel",
    "PdeProblem",
    "ParticleCloud",
    "euler_step",
    "euler_batch",
    "generator_f",
    "terminal_g",
    "exact_solution",
    "exact_z",
    "field_terms",
    "SolverConfig",
    "PdeSolution",
    "ExactSolution",
    "solve",
    "solve_local_regression",
    "solve_local_bsde",
    "solve_global_regression",
    "solve_global_bsde",
    "local_loss",
    "global_regression_loss",
    "global_bsde_loss",
    "evaluate_pde_mse",
    "martingale_residual",
    "residual_order",
]


# --------------------------------------------------------------------------
# interaction kernels


@dataclass(frozen=True)
class CosKernel:
    """``w(z) = scale * cos(z)``."""

    scale: float = 1.0

    def w(self, z):
        return self.scale * np.cos(z)

    def dw(self, z):
        return -self.scale * np.sin(z)

    def d2w(self, z):
        return -self.scale * np.cos(z)

    def to_dict(self):
        return {"kind": "cos", "scale": self.scale}


@dataclass(frozen=True)
class Kernel:
    """Any C^2 kernel given by ``w`` and its first two derivatives.

    Expectations are computed pairwise, in chunks, so this is meant for
    small clouds and for checking the cosine fast path.
    """

    w: Callable
    dw: Callable
    d2w: Callable
    name: str = "custom"

    def to_dict(self):
        return {"kind": self.name}


def _pair_means(kernel, X: np.ndarray, clouds: np.ndarray, kappa: float, sigma: float):
    """Row-wise ``E w(x - xi)``, ``E w'(x - xi)`` and the linear part of ``f`` (without ``exp(T - t)``)."""
    M, n = X.shape
    Ew, Edw, lin = (np.empty((M, n)) for _ in range(3))
    step = max(1, 2_000_000 // max(clouds.shape[1], 1))
    for m in range(M):
        xi = clouds[m]
        for s in range(0, n, step):
            d = X[m, s:s + step, None] - xi[None, :]
            w, dw = kernel.w(d), kernel.dw(d)
            Ew[m, s:s + step] = w.mean(axis=1)
            Edw[m, s:s + step] = dw.mean(axis=1)
            lin[m, s:s + step] = (w - sigma**2 * kernel.d2w(d) + kappa * d * dw).mean(axis=1)
    return Ew, Edw, lin


def _cos_means(kernel: CosKernel, X: np.ndarray, clouds: np.ndarray, kappa: float, sigma: float):
    c = kernel.scale
    cc, ss = np.cos(clouds), np.sin(clouds)
    n = clouds.shape[1]
    Cc, Ss = cc.sum(axis=1)[:, None] / n, ss.sum(axis=1)[:, None] / n
    Cx = np.einsum("ij,ij->i", clouds, cc)[:, None] / n
    Sx = np.einsum("ij,ij->i", clouds, ss)[:, None] / n
    if X is clouds:
        cx, sx = cc, ss
    else:
        cx, sx = np.cos(X), np.sin(X)
    e_cos = cx * Cc + sx * Ss  # E cos(x - xi)
    e_sin = sx * Cc - cx * Ss  # E sin(x - xi)
    e_zsin = X * e_sin - (sx * Cx - cx * Sx)  # E (x - xi) sin(x - xi)
    lin = c * ((1.0 + sigma**2) * e_cos - kappa * e_zsin)
    return c * e_cos, -c * e_sin, lin


# --------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class PdeProblem:
    T: float = 0.1
    kappa: float = 0.2
    sigma: float = 0.5
    a: float = 0.1
    n_steps: int = 10
    grid: BinGrid = field(default_factory=lambda: make_grid(-1.3, 1.3, 200))
    kernel: object = field(default_factory=CosKernel)

    def __post_init__(self):
        if isinstance(self.grid, dict):
            object.__setattr__(self, "grid", make_grid(self.grid["lo"], self.grid["hi"], self.grid["K"]))
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be an integer >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def to_dict(self) -> dict:
        return {"T": self.T, "kappa": self.kappa, "sigma": self.sigma, "a": self.a,
                "n_steps": self.n_steps, "grid": self.grid.to_dict(), "kernel": self.kernel.to_dict()}


def field_terms(problem: PdeProblem, t, X, clouds):
    """Pieces of the generator on a batch.

    ``X`` is (M, n) evaluation points, ``clouds`` is (M, N) particles and
    ``t`` a scalar or an (M,) array. Returns ``(lin, v, z)`` where ``v`` is
    the exact solution, ``z = sigma d_x v`` and ``f(y) = lin - a v^2 + a y^2``.
    """
    same = X is clouds
    X = np.atleast_2d(np.asarray(X, dtype=float))
    clouds = X if same else np.atleast_2d(np.asarray(clouds, dtype=float))
    means = _cos_means if isinstance(problem.kernel, CosKernel) else _pair_means
    Ew, Edw, lin = means(problem.kernel, X, clouds, problem.kappa, problem.sigma)
    t = np.asarray(t, dtype=float)
    decay = np.exp(problem.T - t)
    if decay.ndim == 1:
        decay = decay[:, None]
    return decay * lin, decay * Ew, problem.sigma * decay * Edw


def _cloud_values(xs) -> np.ndarray:
    if isinstance(xs, EmpiricalSample):
        return xs.values
    if isinstance(xs, ParticleCloud):
        return xs.values
    v = np.asarray(xs, dtype=float).ravel()
    if v.size < 1:
        raise ValueError("need at least one particle")
    return v


def _pointwise(fun, x, xs):
    scalar = np.ndim(x) == 0
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = fun(x_arr[None, :], _cloud_values(xs)[None, :])[0]
    return float(out[0]) if scalar else out


def generator_f(t, x, xs, y, problem: PdeProblem):
    """``f(t, x, mu, y)`` with ``mu`` the empirical law of ``xs``."""
    def fun(X, C):
        lin, v, _ = field_terms(problem, t, X, C)
        return lin - problem.a * v**2 + problem.a * np.asarray(y, dtype=float) ** 2
    return _pointwise(fun, x, xs)


def terminal_g(x, xs, problem: PdeProblem):
    return _pointwise(lambda X, C: field_terms(problem, problem.T, X, C)[1], x, xs)


def exact_solution(t, x, xs, problem: PdeProblem):
    if not 0.0 <= t <= problem.T:
        raise ValueError("t must lie in [0, T]")
    return _pointwise(lambda X, C: field_terms(problem, t, X, C)[1], x, xs)


def exact_z(t, x, xs, problem: PdeProblem):
    """``sigma d_x v(t, x, mu)``."""
    return _pointwise(lambda X, C: field_terms(problem, t, X, C)[2], x, xs)


# --------------------------------------------------------------------------
# particles


class ParticleCloud:
    """Samples of ``X_{t_i}`` with a lazily estimated bin density."""

    def __init__(self, index: int, values, grid: BinGrid):
        self.index = int(index)
        self.values = _cloud_values(values).copy()
        self.values.setflags(write=False)
        self.grid = grid

    def __len__(self):
        return self.values.size

    @cached_property
    def bins(self) -> np.ndarray:
        return estimate_bins_batch(self.grid, self.values[None, :])[0]


def euler_batch(X: np.ndarray, problem: PdeProblem, rng: np.random.Generator):
    """One Euler step for each row of ``X`` (each row is one population).

    Returns the new particles and the Brownian increments used.
    """
    dt = problem.dt
    dW = np.sqrt(dt) * rng.standard_normal(X.shape)
    mean = X.mean(axis=-1, keepdims=True)
    return X + problem.kappa * (mean - X) * dt + problem.sigma * dW, dW


def euler_step(cloud: ParticleCloud, problem: PdeProblem, rng: np.random.Generator) -> ParticleCloud:
    if cloud.index >= problem.n_steps:
        raise ValueError("cloud is already at the terminal date")
    nxt, _ = euler_batch(cloud.values, problem, rng)
    return ParticleCloud(cloud.index + 1, nxt, cloud.grid)


# --------------------------------------------------------------------------
# networks for U and Z


class _Model:
    """One or two mean-field nets behind a single flat parameter vector.

    ``heads`` lists which output each net provides: ``("u", "z")`` for a
    shared net with two outputs, ``("u",), ("z",)`` for separate nets.
    """

    def __init__(self, nets, heads, time_input: bool):
        self.nets = nets
        self.heads = heads
        self.time_input = time_input
        self.sizes = [n.n_params for n in nets]

    @property
    def n_params(self):
        return sum(self.sizes)

    def init(self, rng, dtype):
        return np.concatenate([n.init(rng).astype(dtype) for n in self.nets])

    def split(self, theta):
        out, off = [], 0
        for s in self.sizes:
            out.append(theta[off:off + s])
            off += s
        return out

    def outputs(self, theta, X, clouds, bins=None, t=None):
        """Dict of head name -> (M, N) output."""
        res = {}
        for net, th, heads in zip(self.nets, self.split(theta), self.heads):
            feats = net.features(th, clouds, bins if net.needs_bins else None)
            pts = point_inputs(np.asarray(X, dtype=value_of(th).dtype), t, net.n_point)
            out = net.apply(th, pts, feats)
            for j, h in enumerate(heads):
                res[h] = out[..., j]
        return res

    def header(self, theta):
        return {"heads": [list(h) for h in self.heads], "nets": [n.header() for n in self.nets]}


def _make_model(arch, grid, hyper, heads, time_input):
    """A model whose nets produce ``heads``; two heads share one net unless the architecture is DeepONet."""
    n_point = 2 if time_input else 1
    if len(heads) == 2 and arch != "deeponet":
        return _Model([build_net(arch, grid, n_point=n_point, output_dim=2, **hyper)], [tuple(heads)], time_input)
    nets = [build_net(arch, grid, n_point=n_point, **hyper) for _ in heads]
    return _Model(nets, [(h,) for h in heads], time_input)


def _local_model(config, grid, bsde):
    if not bsde:
        return _make_model(config.arch, grid, config.hyper, ("u",), False)
    if config.shared_uz:
        return _make_model(config.arch, grid, config.hyper, ("u", "z"), False)
    return _Model([build_net(config.arch, grid, **config.hyper) for _ in range(2)], [("u",), ("z",)], False)


# --------------------------------------------------------------------------
# configuration and solutions


@dataclass
class SolverConfig:
    mode: str = "local_bsde"
    arch: str = "cylindrical"
    batch_size: int = 10
    n_samples: int = 10000
    iterations: int = 1000
    lr: float = 1e-3
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    warm_start: bool = True
    shared_uz: bool = True
    dtype: str = "float32"
    log_every: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.arch not in ("bin", "cylindrical", "deeponet"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        for name in ("batch_size", "n_samples", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("iterations must be >= 0 and lr > 0")

    def to_dict(self):
        return asdict(self)


class PdeSolution:
    """Trained networks with a uniform way to read ``U`` at any date."""

    def __init__(self, mode: str, problem: PdeProblem, config: SolverConfig | None = None):
        self.mode = mode
        self.problem = problem
        self.config = config
        self.models: dict = {}  # name -> (_Model, params)
        self.loss_history: list = []  # (step index or -1, iteration, loss)

    def _u(self, name, X, clouds, bins=None, t=None):
        model, theta = self.models[name]
        return value_of(model.outputs(theta, X, clouds, bins, t)["u"]).astype(float)

    def value(self, i: int, X, clouds=None, bins=None) -> np.ndarray:
        """``U`` at date ``t_i`` for points ``X`` (M, n) and clouds (M, N)."""
        X = np.atleast_2d(X)
        clouds = X if clouds is None else np.atleast_2d(clouds)
        p = self.problem
        if not 0 <= i <= p.n_steps:
            raise ValueError(f"time index {i} outside 0..{p.n_steps}")
        if self.mode.startswith("local"):
            if i == p.n_steps:
                return field_terms(p, p.T, X, clouds)[1]
            return self._u(i, X, clouds, bins)
        if self.mode == "global_regression":
            return self._u("u", X, clouds, bins, t=p.times[i] / p.T)
        if i != 0:
            raise ValueError("global BSDE exposes U at time 0 only; use rollout_values for later dates")
        return self._u("u0", X, clouds, bins)

    def rollout_values(self, path, increments) -> list:
        """``Y`` along a simulated path (global BSDE): ``Y_0 = U_0``, ``Y_{i+1} = Y_i - f dt + Z dW``."""
        p = self.problem
        model, theta = self.models["z"]
        Y = self.value(0, path[0])
        out = [Y]
        for i in range(len(increments)):
            X = np.atleast_2d(path[i])
            lin, v, _ = field_terms(p, p.times[i], X, X)
            f = lin - p.a * v**2 + p.a * Y**2
            Z = value_of(model.outputs(theta, X, X, None, t=p.times[i] / p.T)["z"]).astype(float)
            Y = Y - f * p.dt + Z * np.atleast_2d(increments[i])
            out.append(Y)
        return out


class ExactSolution(PdeSolution):
    """The closed-form solution behind the :class:`PdeSolution` interface."""

    def __init__(self, problem: PdeProblem):
        super().__init__("exact", problem)

    def value(self, i, X, clouds=None, bins=None):
        X = np.atleast_2d(X)
        clouds = X if clouds is None else np.atleast_2d(clouds)
        return field_terms(self.problem, self.problem.times[i], X, clouds)[1]


# --------------------------------------------------------------------------
# losses


@dataclass
class LocalBatch:
    """Data for one step of a local solver at date ``t_i``."""

    P: np.ndarray  # (M, K) initial bin densities
    X: np.ndarray  # (M, N) particles at t_i
    dW: np.ndarray  # (M, N) Brownian increments
    target: np.ndarray  # (M, N) frozen U_{i+1} at the propagated particles
    lin: np.ndarray  # (M, N) linear part of f at t_i
    v: np.ndarray  # (M, N) exact value at t_i (enters f through -a v^2)


def local_loss(model: _Model, theta, batch: LocalBatch, problem: PdeProblem, bsde: bool):
    """Local regression or local BSDE loss at one date."""
    out = model.outputs(theta, batch.X, batch.X, batch.P)
    U = out["u"]
    dt, a = problem.dt, problem.a
    resid = U * (-1.0) + square(U) * (a * dt) + (batch.target + (batch.lin - a * batch.v**2) * dt)
    if bsde:
        resid = resid - out["z"] * batch.dW
    return square(resid).mean()


@dataclass
class PathBatch:
    """Whole trajectories for the global solvers."""

    P: np.ndarray  # (M, K) initial bin densities
    path: np.ndarray  # (N_T + 1, M, N)
    dW: np.ndarray  # (N_T, M, N)
    lin: np.ndarray  # (N_T, M, N)
    v: np.ndarray  # (N_T + 1, M, N); v[N_T] is g


def _group_inputs(problem: PdeProblem, batch: PathBatch, steps, dtype):
    """Flatten dates into groups: clouds (G, N), bins (G, K), times (G,)."""
    n_dates = len(steps)
    M, N = batch.path.shape[1:]
    clouds = batch.path[steps].reshape(n_dates * M, N)
    bins = estimate_bins_batch(problem.grid, clouds)
    if steps[0] == 0:
        bins[:M] = batch.P  # the initial law is known exactly
    t = np.repeat(problem.times[steps] / problem.T, M)
    return clouds.astype(dtype), bins.astype(dtype), t.astype(dtype)


def global_regression_loss(model: _Model, theta, batch: PathBatch, problem: PdeProblem, inputs=None):
    n = problem.n_steps
    M, N = batch.path.shape[1:]
    dtype = value_of(theta).dtype
    clouds, bins, t = inputs or _group_inputs(problem, batch, list(range(n + 1)), dtype)
    U = model.outputs(theta, clouds, clouds, bins, t)["u"].reshape(n + 1, M, N)
    now, nxt = U[:-1], U[1:]
    dt, a = problem.dt, problem.a
    step = nxt - now + square(now) * (a * dt) + (batch.lin - a * batch.v[:-1] ** 2) * dt
    terminal = U[n] * (-1.0) + batch.v[n]
    return square(terminal).mean() + square(step).sum(axis=0).mean()


def global_bsde_loss(model_u: _Model, model_z: _Model, theta, batch: PathBatch, problem: PdeProblem, inputs=None):
    n = problem.n_steps
    M, N = batch.path.shape[1:]
    nu = model_u.n_params
    dtype = value_of(theta).dtype
    clouds, bins, t = inputs or _group_inputs(problem, batch, list(range(n)), dtype)
    Y = model_u.outputs(theta[:nu], clouds[:M], clouds[:M], bins[:M])["u"]
    Z = model_z.outputs(theta[nu:], clouds, clouds, bins, t)["z"].reshape(n, M, N)
    dt, a = problem.dt, problem.a
    for i in range(n):
        f = square(Y) * a + (batch.lin[i] - a * batch.v[i] ** 2)
        Y = Y - f * dt + Z[i] * batch.dW[i]
    return square(Y - batch.v[n]).mean()


# --------------------------------------------------------------------------
# data generation


def _initial(problem, M, N, rng):
    P = random_bin_densities(problem.grid, M, rng)
    return P, sample_batch(problem.grid, P, N, rng)


def make_local_batch(problem: PdeProblem, i: int, frozen, M: int, N: int, rng, dtype=np.float64) -> LocalBatch:
    """Sample a batch at date ``t_i``; ``frozen(X, clouds)`` evaluates ``U_{i+1}``."""
    P, X = _initial(problem, M, N, rng)
    Xn, dW = euler_batch(X, problem, rng)
    target = frozen(Xn)
    lin, v, _ = field_terms(problem, problem.times[i], X, X)
    cast = lambda a: np.asarray(a).astype(dtype)
    return LocalBatch(cast(P), cast(X), cast(dW), cast(target), cast(lin), cast(v))


def make_path_batch(problem: PdeProblem, M: int, N: int, rng, dtype=np.float64) -> PathBatch:
    P, X = _initial(problem, M, N, rng)
    path, dWs = [X], []
    for _ in range(problem.n_steps):
        X, dW = euler_batch(X, problem, rng)
        path.append(X)
        dWs.append(dW)
    lin, v = [], []
    for i, Xi in enumerate(path):
        li, vi, _ = field_terms(problem, problem.times[i], Xi, Xi)
        lin.append(li)
        v.append(vi)
    cast = lambda a: np.asarray(a).astype(dtype)
    return PathBatch(cast(P), cast(np.stack(path)), cast(np.stack(dWs)), cast(np.stack(lin[:-1])), cast(np.stack(v)))


# --------------------------------------------------------------------------
# solvers


def _adam_loop(loss_of, params, iterations, lr, dtype, on_step, label):
    state = adam_init(params.size, lr=lr, dtype=dtype)
    for it in range(iterations):
        val, g = value_and_grad(lambda th: loss_of(it, th), params)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite loss or gradient at iteration {it} ({label})")
        on_step(it, val)
        params, state = adam_step(state, params, g)
    return params


def _local(problem: PdeProblem, config: SolverConfig, bsde: bool) -> PdeSolution:
    dtype = np.dtype(config.dtype)
    sol = PdeSolution(config.mode, problem, config)
    init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(init_ss)
    data_rngs = [np.random.default_rng(s) for s in data_ss.spawn(problem.n_steps)]
    params = None
    for i in range(problem.n_steps - 1, -1, -1):
        model = _local_model(config, problem.grid, bsde)
        fresh = model.init(init_rng, dtype)
        if params is None or not config.warm_start:
            params = fresh
        rng = data_rngs[i]

        def frozen(Xn, i=i):
            return sol.value(i + 1, Xn)

        def loss_of(it, th, model=model, i=i, rng=rng):
            batch = make_local_batch(problem, i, frozen, config.batch_size, config.n_samples, rng, dtype)
            return local_loss(model, th, batch, problem, bsde)

        def on_step(it, val, i=i):
            sol.loss_history.append((i, it, val))
            if (it + 1) % config.log_every == 0:
                log.info("step %d iteration %d loss %.3e", i, it + 1, val)

        try:
            params = _adam_loop(loss_of, params, config.iterations, config.lr, dtype, on_step, f"time index {i}")
        except DivergenceError as err:
            err.partial = sol
            raise
        sol.models[i] = (model, params.copy())
    return sol


def solve_local_regression(problem: PdeProblem, config: SolverConfig) -> PdeSolution:
    return _local(problem, replace(config, mode="local_regression"), bsde=False)


def solve_local_bsde(problem: PdeProblem, config: SolverConfig) -> PdeSolution:
    return _local(problem, replace(config, mode="local_bsde"), bsde=True)


def solve_global_regression(problem: PdeProblem, config: SolverConfig) -> PdeSolution:
    config = replace(config, mode="global_regression")
    dtype = np.dtype(config.dtype)
    sol = PdeSolution(config.mode, problem, config)
    init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
    model = _make_model(config.arch, problem.grid, config.hyper, ("u",), True)
    params = model.init(np.random.default_rng(init_ss), dtype)
    rng = np.random.default_rng(data_ss)

    def loss_of(it, th):
        batch = make_path_batch(problem, config.batch_size, config.n_samples, rng, dtype)
        return global_regression_loss(model, th, batch, problem)

    def on_step(it, val):
        sol.loss_history.append((-1, it, val))

    try:
        params = _adam_loop(loss_of, params, config.iterations, config.lr, dtype, on_step, "global regression")
    except DivergenceError as err:
        err.partial = sol
        raise
    sol.models["u"] = (model, params)
    return sol


def solve_global_bsde(problem: PdeProblem, config: SolverConfig) -> PdeSolution:
    config = replace(config, mode="global_bsde")
    dtype = np.dtype(config.dtype)
    sol = PdeSolution(config.mode, problem, config)
    init_ss, data_ss = np.random.SeedSequence(config.seed).spawn(2)
    model_u = _make_model(config.arch, problem.grid, config.hyper, ("u",), False)
    model_z = _Model([build_net(config.arch, problem.grid, n_point=2, **config.hyper)], [("z",)], True)
    init_rng = np.random.default_rng(init_ss)
    params = np.concatenate([model_u.init(init_rng, dtype), model_z.init(init_rng, dtype)])
    rng = np.random.default_rng(data_ss)

    def loss_of(it, th):
        batch = make_path_batch(problem, config.batch_size, config.n_samples, rng, dtype)
        return global_bsde_loss(model_u, model_z, th, batch, problem)

    def on_step(it, val):
        sol.loss_history.append((-1, it, val))

    try:
        params = _adam_loop(loss_of, params, config.iterations, config.lr, dtype, on_step, "global BSDE")
    except DivergenceError as err:
        err.partial = sol
        raise
    nu = model_u.n_params
    sol.models["u0"] = (model_u, params[:nu].copy())
    sol.models["z"] = (model_z, params[nu:].copy())
    return sol


_SOLVERS = {
    "local_regression": solve_local_regression,
    "local_bsde": solve_local_bsde,
    "global_regression": solve_global_regression,
    "global_bsde": solve_global_bsde,
}


def solve(problem: PdeProblem, config: SolverConfig) -> PdeSolution:
    return _SOLVERS[config.mode](problem, config)


# --------------------------------------------------------------------------
# evaluation


def evaluate_pde_mse(solution: PdeSolution, which_test: int, times, N: int, seed: int,
                     test2_variant: str = "bimodal") -> list[tuple[float, float]]:
    """MSE of ``U(t_i)`` against the exact solution on a propagated test cloud.

    The test cloud is drawn from test law ``which_test`` at time 0 and moved
    forward with the Euler scheme. Global BSDE solutions are read through
    their ``Y`` rollout after time 0.
    """
    p = solution.problem
    times = sorted(int(i) for i in times)
    if times and not 0 <= times[-1] <= p.n_steps:
        raise ValueError(f"time indices must lie in 0..{p.n_steps}")
    rng = np.random.default_rng(seed)
    X = make_test_distribution(which_test, test2_variant).sample(N, rng)[None, :]
    path, dWs = [X], []
    for _ in range(times[-1] if times else 0):
        X, dW = euler_batch(X, p, rng)
        path.append(X)
        dWs.append(dW)
    dtype = np.float64
    if solution.models:
        dtype = next(iter(solution.models.values()))[1].dtype
    rolled = None
    if solution.mode == "global_bsde" and times and times[-1] > 0:
        rolled = solution.rollout_values([x.astype(dtype) for x in path], dWs)
    out = []
    for i in times:
        Xi = path[i]
        exact = field_terms(p, p.times[i], Xi, Xi)[1]
        pred = rolled[i] if rolled is not None else solution.value(i, Xi.astype(dtype))
        out.append((float(p.times[i]), float(np.mean((np.asarray(pred, float) - exact) ** 2))))
    return out


def martingale_residual(problem: PdeProblem, X0, rng: np.random.Generator) -> float:
    """Accumulated one-step residual of the exact solution along one particle path.

    At each date ``r_i = E_i[v(t_{i+1}, X_{i+1})] - v(t_i, X_i) + f(t_i, X_i, v) dt``
    where ``E_i`` conditions on the particles at ``t_i`` and ``mu_{i+1}`` is
    the propagated cloud. For the cosine kernel this conditional mean is
    closed form: two particles move by independent Gaussian increments, so
    ``E cos(X^n_{i+1} - X^j_{i+1}) = cos(m_n - m_j) exp(-sigma^2 dt)`` with
    ``m`` the drifted positions. Returns the root mean square over particles
    of ``sum_i r_i``, which is ``O(dt)`` when the generator and the
    dynamics agree.
    """
    if not isinstance(problem.kernel, CosKernel):
        raise ValueError("the closed-form conditional expectation needs the cosine kernel")
    p = problem
    X = np.atleast_2d(np.asarray(X0, dtype=float))
    total = np.zeros_like(X)
    damp = np.exp(-p.sigma**2 * p.dt)
    for i in range(p.n_steps):
        lin, v, _ = field_terms(p, p.times[i], X, X)
        f = lin  # y = v makes the quadratic terms cancel
        drifted = X + p.kappa * (X.mean(axis=1, keepdims=True) - X) * p.dt
        nxt = damp * field_terms(p, p.times[i + 1], drifted, drifted)[1]
        total += nxt - v + f * p.dt
        X, _ = euler_batch(X, p, rng)
    return float(np.sqrt(np.mean(total**2)))


def residual_order(problem: PdeProblem, X0, step_counts=(5, 10, 20, 40), seed: int = 0):
    """Residuals for several step counts and the fitted order in ``dt``."""
    res = []
    for n in step_counts:
        res.append(martingale_residual(replace(problem, n_steps=n), X0, np.random.default_rng(seed)))
    dts = problem.T / np.asarray(step_counts, dtype=float)
    slope = np.polyfit(np.log(dts), np.log(res), 1)[0]
    return res, float(slope)
