import numpy as np
import pytest
from conftest import assert_grad_close, central_difference

from mfnn.autodiff import value_and_grad, value_of
from mfnn.measures import make_grid, random_bin_densities
from mfnn.networks import BinDensityNet, CylindricalNet
from mfnn.targets import make_test_distribution, target_on_bins
from mfnn.training import (
    Batch,
    TrainConfig,
    generalization_error,
    heldout_mse,
    loss_bin,
    loss_cyl,
    make_batch,
    train,
)

GRID = make_grid(-1.3, 1.3, 5)


class MomentNet:
    """Cylindrical-style stub: latent (mean x, mean x^2) and the exact case-A outer map."""

    needs_bins = False
    n_point = 1

    def __init__(self):
        self.params = np.zeros(1)

    def features(self, theta, clouds, bins=None):
        clouds = np.atleast_2d(clouds)
        return np.stack([clouds.mean(axis=1), (clouds**2).mean(axis=1)], axis=1)

    def apply(self, theta, points, feats):
        m, s = feats[:, 0][:, None, None], feats[:, 1][:, None, None]
        return points + m + 2 * (s - m**2) + theta[0]

    def predict(self, X, clouds=None, bins=None, t=None):
        X = np.atleast_2d(X)
        return value_of(self.apply(self.params, X[..., None], self.features(self.params, X)))[..., 0]


def tiny_batch(case="A", M=2, N=8, seed=0):
    return make_batch(GRID, case, M, N, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    cfg = TrainConfig(grid={"lo": 0, "hi": 1, "K": 3})
    assert cfg.grid.K == 3 and cfg.to_dict()["grid"] == {"lo": 0.0, "hi": 1.0, "K": 3}


def test_zero_iterations():
    res = train(TrainConfig(iterations=0, arch="cylindrical"))
    assert res.loss_history == [] and res.test_history == []
    assert res.net.params is not None


def test_deterministic_histories():
    cfg = TrainConfig(arch="bin", batch_size=3, n_samples=50, iterations=8, eval_every=4, M_test=4, seed=5,
                      grid=GRID, hyper={"hidden": (4,)})
    a, b = train(cfg), train(cfg)
    assert a.loss_history == b.loss_history and a.test_history == b.test_history
    assert [it for it, _ in a.test_history] == [0, 4, 8]


def test_fixed_pool_mode():
    cfg = TrainConfig(arch="cylindrical", batch_size=2, n_samples=20, iterations=3, fixed_pool=4, M_test=2,
                      grid=GRID, hyper={"latent": 3, "width": 3})
    assert len(train(cfg).loss_history) == 3


@pytest.mark.parametrize("arch", ["bin", "cylindrical"])
@pytest.mark.parametrize("case", ["A", "D"])
def test_loss_gradient(arch, case):
    rng = np.random.default_rng(1)
    net = BinDensityNet(GRID, hidden=(4, 4)) if arch == "bin" else CylindricalNet(latent=4, width=4)
    net.initialize(rng)
    theta = net.params + 0.1 * rng.normal(size=net.params.size)
    batch = tiny_batch(case)
    loss = loss_bin if arch == "bin" else loss_cyl
    _, g = value_and_grad(lambda th: loss(net, batch, th), theta)
    fd = central_difference(lambda th: float(value_of(loss(net, batch, th))), theta)
    assert_grad_close(g, fd)


def test_loss_type_checks():
    batch = tiny_batch()
    with pytest.raises(TypeError):
        loss_bin(CylindricalNet(latent=2, width=2).initialize(np.random.default_rng(0)), batch)
    with pytest.raises(TypeError):
        loss_cyl(BinDensityNet(GRID, hidden=(2,)).initialize(np.random.default_rng(0)), batch)


def test_zero_net_case_e():
    net = BinDensityNet(GRID, hidden=(3,))
    net.params = np.zeros(net.n_params)
    batch = tiny_batch("E", M=2, N=50)
    val = float(value_of(loss_bin(net, batch)))
    assert val == pytest.approx(np.mean(batch.V**2))
    assert 0 <= val <= 1


def test_single_point_loss():
    rng = np.random.default_rng(3)
    net = BinDensityNet(GRID, hidden=(3,)).initialize(rng)
    batch = tiny_batch("B", M=1, N=1)
    out = net.predict(batch.X, bins=batch.P)
    assert float(value_of(loss_bin(net, batch))) == pytest.approx(float(((out - batch.V) ** 2)[0, 0]))


def test_exact_moment_net_has_zero_loss():
    N = 10**6
    batch = make_batch(GRID, "A", 2, N, np.random.default_rng(4))
    net = MomentNet()
    # the empirical moments stand in for the exact ones: the loss is MC error only
    assert float(value_of(loss_cyl(net, batch))) <= 1e-4


def test_cylindrical_loss_permutation_invariant():
    rng = np.random.default_rng(5)
    net = CylindricalNet(latent=3, width=3).initialize(rng)
    batch = tiny_batch("A", M=2, N=30)
    perm = np.stack([rng.permutation(30) for _ in range(2)])
    rows = np.arange(2)[:, None]
    shuffled = Batch(batch.P, batch.X[rows, perm], batch.V[rows, perm])
    assert float(value_of(loss_cyl(net, batch))) == pytest.approx(float(value_of(loss_cyl(net, shuffled))), abs=1e-12)


def test_heldout_mse_chunking():
    rng = np.random.default_rng(6)
    net = BinDensityNet(GRID, hidden=(3,)).initialize(rng)
    batch = tiny_batch("C", M=7, N=10)
    a, per_a = heldout_mse(net, batch, chunk=2)
    b, per_b = heldout_mse(net, batch, chunk=100)
    np.testing.assert_allclose(per_a, per_b)
    assert a == pytest.approx(float(value_of(loss_bin(net, batch))))


@pytest.mark.parametrize("which", [1, 2, 3])
def test_generalization_exact_net(which):
    # A uses the law's exact moments while the net sees sample moments,
    # so the error is the squared moment estimation error, tiny at large N
    err = generalization_error(MomentNet(), "A", which, 10**6, seed=0)
    assert err < 1e-5


def test_generalization_random_net_positive_and_reproducible():
    net = CylindricalNet(latent=3, width=3).initialize(np.random.default_rng(7))
    a = generalization_error(net, "B", 2, 1000, seed=3)
    b = generalization_error(net, "B", 2, 1000, seed=3)
    assert a > 0 and a == b
    bnet = BinDensityNet(make_grid(-1.3, 1.3, 50), hidden=(3,)).initialize(np.random.default_rng(8))
    assert generalization_error(bnet, "E", 3, 1000, seed=3) > 0


def test_targets_on_batch_match_bins():
    batch = tiny_batch("D", M=2, N=6, seed=9)
    np.testing.assert_allclose(batch.V, target_on_bins("D", GRID, batch.P, batch.X))


def test_coarse_bin_net_sees_projected_densities():
    fine = make_grid(-1.3, 1.3, 20)
    cfg = TrainConfig(arch="bin", batch_size=2, n_samples=30, iterations=3, eval_every=3, M_test=3,
                      grid=make_grid(-1.3, 1.3, 4), law_grid=fine, hyper={"hidden": (3,)})
    res = train(cfg)
    assert len(res.loss_history) == 3 and res.net.grid.K == 4
    batch = make_batch(fine, "A", 2, 10, np.random.default_rng(0))
    seen = batch.bins_for(res.net)
    np.testing.assert_allclose(seen, batch.P.reshape(2, 4, 5).mean(axis=2), atol=1e-12)
    assert cfg.to_dict()["law_grid"]["K"] == 20
