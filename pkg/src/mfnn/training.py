"""Static learning of a mean-field function with Adam.

Each iteration draws ``batch_size`` random bin densities, ``n_samples``
points from each, evaluates the exact target on them and takes one Adam
step on the mean squared error. A fixed held-out set of random bin
densities is scored every ``eval_every`` iterations.

The densities live on ``law_grid`` (default: the net grid). When a bin
net uses a coarser or shifted grid it sees the exact projection of each
density onto its own bins.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import DivergenceError, adam_init, adam_step, square, value_and_grad, value_of
from .measures import BinGrid, make_grid, random_bin_densities, rebin, sample_batch
from .networks import build_net, point_inputs
from .targets import make_test_distribution, target_on_bins

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "Batch",
    "make_batch",
    "loss_bin",
    "loss_cyl",
    "static_loss",
    "heldout_mse",
    "train",
    "generalization_error",
]


@dataclass
class TrainConfig:
    case: str = "A"
    arch: str = "bin"
    batch_size: int = 20
    n_samples: int = 50000
    iterations: int = 1000
    lr: float = 1e-3
    seed: int = 0
    grid: BinGrid = field(default_factory=lambda: make_grid(-1.3, 1.3, 100))
    law_grid: BinGrid | None = None
    hyper: dict = field(default_factory=dict)
    eval_every: int = 100
    M_test: int = 1000
    N_test: int | None = None
    fixed_pool: int | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = make_grid(self.grid["lo"], self.grid["hi"], self.grid["K"])
        if isinstance(self.law_grid, dict):
            self.law_grid = make_grid(self.law_grid["lo"], self.law_grid["hi"], self.law_grid["K"])
        for name in ("batch_size", "n_samples", "eval_every", "M_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("iterations must be >= 0 and lr > 0")
        if self.fixed_pool is not None and self.fixed_pool < self.batch_size:
            raise ValueError("fixed_pool must hold at least batch_size densities")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["law_grid"] = None if self.law_grid is None else self.law_grid.to_dict()
        return d


@dataclass
class TrainResult:
    net: object
    config: TrainConfig
    loss_history: list = field(default_factory=list)
    test_history: list = field(default_factory=list)
    best: tuple | None = None  # (iteration, held-out MSE, its standard error)

    def record_test(self, it: int, mse: float, per: np.ndarray):
        self.test_history.append((it, mse))
        if self.best is None or mse < self.best[1]:
            se = float(per.std(ddof=1) / np.sqrt(per.size)) if per.size > 1 else float("nan")
            self.best = (it, mse, se)


@dataclass
class Batch:
    """``M`` bin densities ``P`` (M, K) on ``grid``, points ``X`` (M, N) and targets ``V`` (M, N)."""

    P: np.ndarray
    X: np.ndarray
    V: np.ndarray
    grid: BinGrid | None = None

    def bins_for(self, net):
        """Density bins as seen by ``net``, or None for nets that use samples only."""
        if not net.needs_bins:
            return None
        if self.grid is None or self.grid == net.grid:
            return self.P
        return rebin(self.grid, self.P, net.grid).astype(self.P.dtype)


def make_batch(grid: BinGrid, case: str, M: int, N: int, rng: np.random.Generator,
               P: np.ndarray | None = None, dtype=np.float64) -> Batch:
    if P is None:
        P = random_bin_densities(grid, M, rng)
    X = sample_batch(grid, P, N, rng)
    V = target_on_bins(case, grid, P, X)
    return Batch(P.astype(dtype), X.astype(dtype), V.astype(dtype), grid)


def static_loss(net, theta, batch: Batch):
    """Mean over distributions and points of the squared residual."""
    feats = net.features(theta, batch.X, batch.bins_for(net))
    out = net.apply(theta, point_inputs(batch.X), feats)
    M, N = batch.X.shape
    return square(out.reshape(M, N) - batch.V).mean()


def loss_bin(net, batch: Batch, theta=None):
    if not net.needs_bins:
        raise TypeError("loss_bin needs a bin-based network")
    return static_loss(net, net.params if theta is None else theta, batch)


def loss_cyl(net, batch: Batch, theta=None):
    if net.needs_bins:
        raise TypeError("loss_cyl needs a cylindrical network")
    return static_loss(net, net.params if theta is None else theta, batch)


def heldout_mse(net, batch: Batch, theta=None, chunk: int = 20) -> tuple[float, np.ndarray]:
    """Average and per-distribution MSE of ``net`` on a held-out batch."""
    theta = net.params if theta is None else theta
    per = np.empty(batch.X.shape[0])
    for s in range(0, batch.X.shape[0], chunk):
        sub = Batch(batch.P[s:s + chunk], batch.X[s:s + chunk], batch.V[s:s + chunk], batch.grid)
        feats = net.features(theta, sub.X, sub.bins_for(net))
        out = value_of(net.apply(theta, point_inputs(sub.X), feats))[..., 0]
        per[s:s + chunk] = np.mean((out.astype(float) - sub.V) ** 2, axis=1)
    return float(per.mean()), per


def train(config: TrainConfig, case: str | None = None) -> TrainResult:
    case = (case or config.case).upper()
    dtype = np.dtype(config.dtype)
    init_ss, data_ss, test_ss, pool_ss = np.random.SeedSequence(config.seed).spawn(4)
    net = build_net(config.arch, config.grid, **config.hyper)
    net.initialize(np.random.default_rng(init_ss), dtype)
    result = TrainResult(net, config)
    if config.iterations == 0:
        return result

    law = config.law_grid or config.grid
    test = make_batch(law, case, config.M_test, config.N_test or config.n_samples,
                      np.random.default_rng(test_ss), dtype=dtype)
    rng = np.random.default_rng(data_ss)
    pool = None
    if config.fixed_pool:
        pool = random_bin_densities(law, config.fixed_pool, np.random.default_rng(pool_ss))

    params = net.params
    state = adam_init(params.size, lr=config.lr, dtype=dtype)
    for it in range(config.iterations):
        if it % config.eval_every == 0:
            result.record_test(it, *heldout_mse(net, test, params))
        P = None if pool is None else pool[rng.choice(pool.shape[0], config.batch_size, replace=False)]
        batch = make_batch(law, case, config.batch_size, config.n_samples, rng, P, dtype)
        val, g = value_and_grad(lambda th: static_loss(net, th, batch), params)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            err = DivergenceError(f"non-finite training loss at iteration {it}")
            err.partial = result
            raise err
        result.loss_history.append((it, val))
        params, state = adam_step(state, params, g)
        if (it + 1) % config.eval_every == 0:
            log.debug("iteration %d loss %.3e", it + 1, val)
    net.params = params
    result.record_test(config.iterations, *heldout_mse(net, test, params))
    return result


def generalization_error(net, case: str, which_test: int, N: int, seed: int,
                         test2_variant: str = "bimodal") -> float:
    """MSE of ``net`` on ``N`` draws of test law ``which_test``.

    Bin-based nets see the histogram of the draws, cylindrical nets the
    latent mean over the same draws; the reference value uses the exact
    law of the test distribution.
    """
    law = make_test_distribution(which_test, test2_variant)
    X = law.sample(N, np.random.default_rng(seed))[None, :]
    V = law.target(case, X)
    pred = net.predict(X.astype(net.params.dtype))
    return float(np.mean((pred.astype(float) - V) ** 2))
