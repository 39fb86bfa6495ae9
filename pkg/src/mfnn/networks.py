"""Mean-field neural networks: bin-density, DeepONet and cylindrical.

Every architecture maps a batch of ``M`` measures, each seen through ``N``
points, to outputs of shape ``(M, N, output_dim)``. Evaluation is split in
two stages:

``features(theta, clouds, bins)``
    the finite-dimensional description of each measure: the density bins
    for bin-based nets, the empirical latent mean ``mean_n phi(X_n)`` for
    cylindrical nets;
``apply(theta, points, feats)``
    the network evaluated at ``points`` of shape ``(M, N, d)``.

``points`` carries the state ``x`` in its first column and, for
time-dependent nets, the normalized time ``t / T`` in the second.
Parameters live in one flat vector per network so that the whole model can
be differentiated and optimized as a unit.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import MlpSpec, Tensor, load_params, save_params, value_of
from .measures import BinDensity, BinGrid, EmpiricalSample, estimate_bins_batch, make_grid

__all__ = [
    "BinDensityNet",
    "DeepOnetNet",
    "CylindricalNet",
    "build_net",
    "eval_bin",
    "eval_deeponet",
    "eval_cyl",
    "save_net",
    "load_net",
]


class _MeanFieldNet:
    kind: str = ""
    needs_bins: bool = False

    def __init__(self):
        self.params: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def init(self, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
        raise NotImplementedError

    def initialize(self, rng: np.random.Generator, dtype=np.float64) -> "_MeanFieldNet":
        self.params = self.init(rng).astype(dtype)
        return self

    def features(self, theta, clouds: np.ndarray, bins: np.ndarray | None = None):
        raise NotImplementedError

    def apply(self, theta, points, feats):
        raise NotImplementedError

    def __call__(self, points, clouds, bins=None, theta=None):
        """Convenience: features then apply, with stored parameters by default."""
        theta = self.params if theta is None else theta
        return self.apply(theta, points, self.features(theta, clouds, bins))

    def predict(self, X: np.ndarray, clouds: np.ndarray | None = None, bins=None, t=None) -> np.ndarray:
        """Scalar output at ``X`` (M, N) for measures described by ``clouds``."""
        X = np.asarray(X, dtype=self.params.dtype)
        clouds = X if clouds is None else clouds
        points = point_inputs(X, t, self.n_point)
        return value_of(self(points, clouds, bins))[..., 0]

    def header(self) -> dict:
        raise NotImplementedError


def point_inputs(X, t=None, n_point: int = 1) -> np.ndarray:
    """Stack ``x`` (and ``t`` when the net is time dependent) into (M, N, d)."""
    X = np.asarray(X)
    if n_point == 1:
        return X[..., None]
    t = np.asarray(t, dtype=X.dtype)
    if t.ndim == 1:
        t = t[:, None]
    return np.stack([X, np.broadcast_to(t, X.shape)], axis=-1)


class BinDensityNet(_MeanFieldNet):
    """Feedforward net on ``concat(x, p)`` where ``p`` are the density bins."""

    kind = "bin"
    needs_bins = True

    def __init__(self, grid: BinGrid, hidden=(20, 20, 20), activation: str = "tanh",
                 output_dim: int = 1, n_point: int = 1):
        super().__init__()
        self.grid = grid
        self.n_point = n_point
        self.phi = MlpSpec(n_point + grid.K, tuple(hidden), output_dim, activation)

    @property
    def n_params(self) -> int:
        return self.phi.n_params

    def init(self, rng, dtype=np.float64):
        return self.phi.init(rng).astype(dtype)

    def features(self, theta, clouds, bins=None):
        if bins is None:
            bins = estimate_bins_batch(self.grid, clouds)
        bins = np.asarray(bins, dtype=value_of(theta).dtype)
        if bins.shape[-1] != self.grid.K:
            raise ValueError(f"dimension mismatch: net expects {self.grid.K} bins, got {bins.shape[-1]}")
        return bins

    def apply(self, theta, points, feats):
        return self.phi.apply(theta, points, context=feats)

    def header(self):
        return {"arch": "bin", "grid": self.grid.to_dict(), "phi": self.phi.to_dict(), "n_point": self.n_point}


class DeepOnetNet(_MeanFieldNet):
    """``sum_l branch_l(p) trunk_l(x)`` with a branch net on the bins and a trunk net on the state."""

    kind = "deeponet"
    needs_bins = True

    def __init__(self, grid: BinGrid, hidden=(20, 20, 20), latent: int = 20,
                 activation: str = "tanh", n_point: int = 1):
        super().__init__()
        self.grid = grid
        self.n_point = n_point
        self.branch = MlpSpec(grid.K, tuple(hidden), latent, activation)
        self.trunk = MlpSpec(n_point, tuple(hidden), latent, activation)

    @property
    def n_params(self):
        return self.branch.n_params + self.trunk.n_params

    def init(self, rng, dtype=np.float64):
        return np.concatenate([self.branch.init(rng), self.trunk.init(rng)]).astype(dtype)

    def features(self, theta, clouds, bins=None):
        return BinDensityNet.features(self, theta, clouds, bins)

    def apply(self, theta, points, feats):
        nb = self.branch.n_params
        b = self.branch.apply(theta[:nb], feats)
        t = self.trunk.apply(theta[nb:], points)
        M, L = value_of(b).shape
        return (t * b.reshape(M, 1, L)).sum(axis=-1, keepdims=True)

    def header(self):
        return {"arch": "deeponet", "grid": self.grid.to_dict(), "branch": self.branch.to_dict(),
                "trunk": self.trunk.to_dict(), "n_point": self.n_point}


class CylindricalNet(_MeanFieldNet):
    """``Psi(x, mean_n phi(X_n))`` with inner net ``phi`` and outer net ``Psi``.

    ``layers`` counts the layers of the inner net (``layers - 1`` hidden
    layers of width ``latent`` plus an affine output of width ``latent``)
    and the hidden layers of the outer net (each of width ``width``).
    """

    kind = "cylindrical"
    needs_bins = False

    def __init__(self, latent: int = 20, width: int = 10, layers: int = 2, activation: str = "tanh",
                 output_dim: int = 1, n_point: int = 1, inner: MlpSpec | None = None,
                 outer: MlpSpec | None = None):
        super().__init__()
        self.n_point = n_point
        self.inner = inner or MlpSpec(1, (latent,) * max(layers - 1, 0), latent, activation)
        self.outer = outer or MlpSpec(n_point + self.inner.output_dim, (width,) * layers, output_dim, activation)
        if self.outer.input_dim != n_point + self.inner.output_dim:
            raise ValueError("outer input must be the point inputs plus the latent dimension")

    @property
    def latent_dim(self) -> int:
        return self.inner.output_dim

    @property
    def n_params(self):
        return self.inner.n_params + self.outer.n_params

    def init(self, rng, dtype=np.float64):
        return np.concatenate([self.inner.init(rng), self.outer.init(rng)]).astype(dtype)

    def features(self, theta, clouds, bins=None):
        clouds = np.asarray(clouds, dtype=value_of(theta).dtype)
        if clouds.ndim == 1:
            clouds = clouds[None, :]
        ni = self.inner.n_params
        return self.inner.apply(theta[:ni], clouds[..., None], group_mean=True)

    def apply(self, theta, points, feats):
        return self.outer.apply(theta[self.inner.n_params:], points, context=feats)

    def header(self):
        return {"arch": "cylindrical", "inner": self.inner.to_dict(), "outer": self.outer.to_dict(),
                "n_point": self.n_point}


def build_net(arch: str, grid: BinGrid | None = None, n_point: int = 1, **hyper) -> _MeanFieldNet:
    """Construct an architecture by tag with the default hyperparameters."""
    if arch == "bin":
        return BinDensityNet(grid, n_point=n_point, **hyper)
    if arch == "deeponet":
        return DeepOnetNet(grid, n_point=n_point, **hyper)
    if arch in ("cylindrical", "cyl"):
        return CylindricalNet(n_point=n_point, **hyper)
    raise ValueError(f"unknown architecture {arch!r}")


# --------------------------------------------------------------------------
# single-point evaluation


def _point(x, dtype):
    return np.asarray(x, dtype=dtype).reshape(1, 1, 1)


def eval_bin(net: BinDensityNet, x: float, bd: BinDensity) -> np.ndarray:
    if bd.grid.K != net.grid.K:
        raise ValueError("dimension mismatch between density and network grid")
    p = bd.p[None, :].astype(net.params.dtype)
    return value_of(net.apply(net.params, _point(x, net.params.dtype), p))[0, 0]


def eval_deeponet(net: DeepOnetNet, x: float, bd: BinDensity) -> float:
    if bd.grid.K != net.grid.K:
        raise ValueError("dimension mismatch between density and network grid")
    p = bd.p[None, :].astype(net.params.dtype)
    return float(value_of(net.apply(net.params, _point(x, net.params.dtype), p))[0, 0, 0])


def eval_cyl(net: CylindricalNet, x: float, xs) -> np.ndarray:
    values = xs.values if isinstance(xs, EmpiricalSample) else np.asarray(xs, dtype=float).ravel()
    if values.size < 1:
        raise ValueError("need at least one sample")
    z = net.features(net.params, values[None, :])
    return value_of(net.apply(net.params, _point(x, net.params.dtype), z))[0, 0]


# --------------------------------------------------------------------------
# checkpoints


def save_net(stem, net: _MeanFieldNet) -> None:
    save_params(stem, net.header(), net.params)


def load_net(stem) -> _MeanFieldNet:
    head, params = load_params(stem)
    arch = head["arch"]
    if arch == "bin":
        g = head["grid"]
        spec = MlpSpec.from_dict(head["phi"])
        net = BinDensityNet(make_grid(g["lo"], g["hi"], g["K"]), spec.hidden, spec.activation,
                            spec.output_dim, head["n_point"])
    elif arch == "deeponet":
        g = head["grid"]
        br, tr = MlpSpec.from_dict(head["branch"]), MlpSpec.from_dict(head["trunk"])
        net = DeepOnetNet(make_grid(g["lo"], g["hi"], g["K"]), br.hidden, br.output_dim, br.activation,
                          head["n_point"])
    elif arch == "cylindrical":
        net = CylindricalNet(inner=MlpSpec.from_dict(head["inner"]), outer=MlpSpec.from_dict(head["outer"]),
                             n_point=head["n_point"])
    else:
        raise ValueError(f"unknown architecture tag {arch!r}")
    net.params = params
    return net
