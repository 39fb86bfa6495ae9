import numpy as np
import pytest
import sympy
from conftest import assert_grad_close, central_difference
from dataclasses import replace

from mfnn.autodiff import value_and_grad, value_of
from mfnn.dynamics import (
    CosKernel,
    ExactSolution,
    Kernel,
    LocalBatch,
    ParticleCloud,
    PdeProblem,
    SolverConfig,
    _Model,
    _local_model,
    _make_model,
    euler_batch,
    euler_step,
    evaluate_pde_mse,
    exact_solution,
    exact_z,
    field_terms,
    generator_f,
    global_bsde_loss,
    global_regression_loss,
    local_loss,
    make_local_batch,
    make_path_batch,
    martingale_residual,
    solve,
    terminal_g,
)
from mfnn.measures import estimate_bins, make_grid
from mfnn.networks import build_net
from mfnn.targets import make_test_distribution

PAIRWISE_COS = Kernel(np.cos, lambda z: -np.sin(z), lambda z: -np.cos(z), "cos_pairwise")


class ExactModel:
    """Stand-in for a trained model: U is the exact value, Z a scaled exact gradient."""

    n_params = 1

    def __init__(self, problem, t):
        self.problem, self.t = problem, t

    def outputs(self, theta, X, clouds, bins=None, t=None):
        _, v, z = field_terms(self.problem, self.t, X, clouds)
        return {"u": v, "z": z * value_of(theta)[0]}


# -- problem and kernel ---------------------------------------------------------


def test_problem_defaults_and_validation():
    p = PdeProblem()
    assert (p.T, p.kappa, p.sigma, p.a) == (0.1, 0.2, 0.5, 0.1)
    assert p.grid.K == 200 and p.grid.lo == -1.3
    assert p.dt == pytest.approx(0.01)
    for bad in ({"T": 0.0}, {"sigma": -1.0}, {"n_steps": 0}):
        with pytest.raises(ValueError):
            PdeProblem(**bad)


def test_cos_fast_path_matches_pairwise():
    rng = np.random.default_rng(0)
    X, C = rng.normal(size=(3, 11)), rng.normal(size=(3, 13))
    p = PdeProblem(kernel=CosKernel(1.7))
    q = replace(p, kernel=Kernel(lambda z: 1.7 * np.cos(z), lambda z: -1.7 * np.sin(z), lambda z: -1.7 * np.cos(z)))
    for a, b in zip(field_terms(p, 0.04, X, C), field_terms(q, 0.04, X, C)):
        np.testing.assert_allclose(a, b, atol=1e-13)


# -- generator, terminal value and exact solution --------------------------------------


def test_generator_worked_value():
    z, sigma = sympy.symbols("z sigma")
    w = sympy.cos(z)
    lead = (w - sigma**2 * sympy.diff(w, z, 2)).subs({z: 0, sigma: sympy.Rational(1, 2)})
    p = PdeProblem()
    assert generator_f(p.T, 0.0, np.zeros(7), 1.0, p) == pytest.approx(float(lead), abs=1e-15)
    assert float(lead) == 1.25


def test_generator_cancels_at_exact_value():
    rng = np.random.default_rng(1)
    p = PdeProblem()
    xs, x = rng.normal(0, 0.3, 500), rng.normal(size=9)
    v = exact_solution(0.03, x, xs, p)
    lin, _, _ = field_terms(p, 0.03, x[None, :], xs[None, :])
    np.testing.assert_allclose(generator_f(0.03, x, xs, v, p), lin[0], atol=1e-15)


def test_generator_without_nonlinearity_ignores_y():
    p = PdeProblem(a=0.0)
    xs = np.random.default_rng(2).normal(size=50)
    assert generator_f(0.0, 0.2, xs, -3.0, p) == generator_f(0.0, 0.2, xs, 5.0, p)


def test_terminal_value():
    p = PdeProblem()
    assert terminal_g(0.4, np.full(10, 0.4), p) == pytest.approx(1.0)
    vals = terminal_g(np.linspace(-50, 50, 11), np.random.default_rng(0).normal(size=20), p)
    assert np.all(np.abs(vals) <= 1)


def test_terminal_value_gaussian_cloud():
    # E cos(b Z) = exp(-b^2 / 2)
    N = 10**6
    xs = make_test_distribution(1).sample(N, np.random.default_rng(3))
    p = PdeProblem()
    got = terminal_g(0.3, xs, p)
    se = np.std(np.cos(0.3 - xs)) / np.sqrt(N)
    assert abs(got - np.exp(-0.05**2 / 2)) <= 4 * se


def test_exact_solution_values():
    N = 10**6
    p = PdeProblem()
    xs = make_test_distribution(1).sample(N, np.random.default_rng(4))
    assert exact_solution(p.T, 0.1, xs, p) == terminal_g(0.1, xs, p)
    got = exact_solution(0.0, 0.3, xs, p)
    se = np.exp(0.1) * np.std(np.cos(0.3 - xs)) / np.sqrt(N)
    assert abs(got - np.exp(0.1) * np.exp(-0.00125)) <= 4 * se
    scaled = replace(p, kernel=CosKernel(2.5))
    assert exact_solution(0.05, 0.2, xs[:1000], scaled) == pytest.approx(2.5 * exact_solution(0.05, 0.2, xs[:1000], p))
    with pytest.raises(ValueError):
        exact_solution(0.2, 0.0, xs[:10], p)


def test_exact_z_is_sigma_times_space_derivative():
    p = PdeProblem()
    xs = np.random.default_rng(5).normal(0, 0.4, 300)
    h = 1e-6
    fd = (exact_solution(0.02, 0.3 + h, xs, p) - exact_solution(0.02, 0.3 - h, xs, p)) / (2 * h)
    assert exact_z(0.02, 0.3, xs, p) == pytest.approx(p.sigma * fd, rel=1e-7)


# -- particles --------------------------------------------------------------------


def test_euler_frozen():
    p = PdeProblem(kappa=0.0, sigma=0.0)
    X = np.random.default_rng(0).normal(size=(1, 20))
    np.testing.assert_array_equal(euler_batch(X, p, np.random.default_rng(1))[0], X)


def test_euler_fixed_point():
    p = PdeProblem(sigma=0.0)
    cloud = ParticleCloud(0, np.full(15, 0.7), p.grid)
    np.testing.assert_allclose(euler_step(cloud, p, np.random.default_rng(0)).values, 0.7)


def test_euler_one_step_variance():
    N = 10**6
    p = PdeProblem()
    X = make_test_distribution(1).sample(N, np.random.default_rng(6))[None, :]
    Xn, _ = euler_batch(X, p, np.random.default_rng(7))
    expected = (1 - p.kappa * p.dt) ** 2 * X.var() + p.sigma**2 * p.dt
    se = np.std((Xn - Xn.mean()) ** 2) / np.sqrt(N)
    assert abs(Xn.var() - expected) <= 4 * se


def test_euler_mean_dynamics():
    p = PdeProblem(kappa=3.7)
    X = np.random.default_rng(8).normal(size=(4, 1000))
    Xn, dW = euler_batch(X, p, np.random.default_rng(9))
    np.testing.assert_allclose(Xn.mean(axis=1), X.mean(axis=1) + p.sigma * dW.mean(axis=1), atol=1e-12)


def test_particle_cloud():
    p = PdeProblem(n_steps=2)
    values = np.random.default_rng(0).normal(0, 0.5, 100)
    cloud = ParticleCloud(0, values, p.grid)
    np.testing.assert_array_equal(cloud.bins, estimate_bins(p.grid, values).p)
    c2 = euler_step(euler_step(cloud, p, np.random.default_rng(1)), p, np.random.default_rng(2))
    assert c2.index == 2 and len(c2) == 100
    with pytest.raises(ValueError):
        euler_step(c2, p, np.random.default_rng(3))


# -- losses --------------------------------------------------------------------------

TINY_GRID = make_grid(-1.3, 1.3, 6)
TINY_HYPER = {"bin": {"hidden": (4, 4)}, "cylindrical": {"latent": 3, "width": 4}}


def _fd_check(loss, theta):
    _, g = value_and_grad(loss, theta)
    fd = central_difference(lambda th: float(value_of(loss(th))), theta)
    assert_grad_close(g, fd)


@pytest.mark.parametrize("arch", ["bin", "cylindrical"])
@pytest.mark.parametrize("bsde, shared", [(False, False), (True, False), (True, True)])
def test_local_loss_gradient(arch, bsde, shared):
    rng = np.random.default_rng(10)
    p = PdeProblem(n_steps=2, grid=TINY_GRID)
    model = _local_model(SolverConfig(arch=arch, hyper=TINY_HYPER[arch], shared_uz=shared), TINY_GRID, bsde)
    theta = model.init(rng, np.float64) + 0.1 * rng.normal(size=model.n_params)
    batch = make_local_batch(p, 0, lambda Xn: field_terms(p, p.times[1], Xn, Xn)[1], 2, 8, rng)
    _fd_check(lambda th: local_loss(model, th, batch, p, bsde), theta)


@pytest.mark.parametrize("arch", ["bin", "cylindrical"])
def test_global_losses_gradient(arch):
    rng = np.random.default_rng(11)
    p = PdeProblem(n_steps=2, grid=TINY_GRID)
    batch = make_path_batch(p, 2, 8, rng)
    model = _make_model(arch, TINY_GRID, TINY_HYPER[arch], ("u",), True)
    theta = model.init(rng, np.float64) + 0.1 * rng.normal(size=model.n_params)
    _fd_check(lambda th: global_regression_loss(model, th, batch, p), theta)
    mu = _make_model(arch, TINY_GRID, TINY_HYPER[arch], ("u",), False)
    mz = _Model([build_net(arch, TINY_GRID, n_point=2, **TINY_HYPER[arch])], [("z",)], True)
    theta = np.concatenate([mu.init(rng, np.float64), mz.init(rng, np.float64)])
    _fd_check(lambda th: global_bsde_loss(mu, mz, th, batch, p), theta)


def test_bsde_loss_without_noise_is_regression():
    # with sigma = 0 the exact Z vanishes; a zero Z head leaves the regression loss
    rng = np.random.default_rng(12)
    p = PdeProblem(n_steps=3, sigma=0.0, grid=TINY_GRID)
    cfg = SolverConfig(arch="cylindrical", hyper=TINY_HYPER["cylindrical"], shared_uz=False)
    bsde, reg = _local_model(cfg, TINY_GRID, True), _local_model(cfg, TINY_GRID, False)
    theta_u = reg.init(rng, np.float64)
    theta = np.concatenate([theta_u, np.zeros(bsde.n_params - reg.n_params)])
    batch = make_local_batch(p, 1, lambda Xn: field_terms(p, p.times[2], Xn, Xn)[1], 2, 20, rng)
    assert float(value_of(local_loss(bsde, theta, batch, p, True))) == \
        float(value_of(local_loss(reg, theta_u, batch, p, False)))


def _exact_local_batch(p, i, M, N, seed):
    return make_local_batch(p, i, lambda Xn: field_terms(p, p.times[i + 1], Xn, Xn)[1], M, N,
                            np.random.default_rng(seed))


def test_exact_z_beats_zero_z():
    p = PdeProblem(a=0.0, n_steps=2)
    batch = _exact_local_batch(p, 0, 4, 5000, 13)
    model = ExactModel(p, 0.0)
    with_z = float(value_of(local_loss(model, np.array([1.0]), batch, p, True)))
    without = float(value_of(local_loss(model, np.array([0.0]), batch, p, True)))
    assert with_z < 0.1 * without


def test_regression_loss_at_exact_solution_shrinks_with_dt():
    losses = []
    for n in (1, 4, 16):
        p = PdeProblem(a=0.0, n_steps=n)
        batch = _exact_local_batch(p, 0, 4, 20000, 14)
        losses.append(float(value_of(local_loss(ExactModel(p, 0.0), np.array([0.0]), batch, p, False))))
    assert losses[0] > losses[1] > losses[2]


def test_global_bsde_loss_at_exact_solution():
    losses = []
    for n in (2, 8):
        p = PdeProblem(n_steps=n)
        batch = make_path_batch(p, 3, 5000, np.random.default_rng(15))

        class U0:
            n_params = 0

            def outputs(self, theta, X, clouds, bins=None, t=None):
                return {"u": field_terms(p, 0.0, X, clouds)[1]}

        class Zt:
            def outputs(self, theta, X, clouds, bins=None, t=None):
                return {"z": field_terms(p, np.asarray(t, float) * p.T, X, clouds)[2]}

        losses.append(float(value_of(global_bsde_loss(U0(), Zt(), np.zeros(0), batch, p))))
    assert losses[1] < losses[0] < 1e-3


def test_global_regression_loss_at_exact_solution():
    # the exact map leaves the martingale part Z dW, so the loss tends to sum_i E|Z_i|^2 dt
    gaps = []
    for n in (2, 8, 32):
        p = PdeProblem(n_steps=n)
        batch = make_path_batch(p, 3, 20000, np.random.default_rng(16))

        class U:
            def outputs(self, theta, X, clouds, bins=None, t=None):
                return {"u": field_terms(p, np.asarray(t, float) * p.T, X, clouds)[1]}

        loss = float(value_of(global_regression_loss(U(), np.zeros(0), batch, p)))
        qv = sum(np.mean(field_terms(p, p.times[i], batch.path[i], batch.path[i])[2] ** 2) * p.dt
                 for i in range(n))
        gaps.append(abs(loss / qv - 1))
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 0.02


# -- solvers and evaluation ------------------------------------------------------------


def _tiny_solve(mode, arch="cylindrical", seed=0, **kw):
    p = PdeProblem(n_steps=2, grid=make_grid(-1.3, 1.3, 20))
    cfg = SolverConfig(mode=mode, arch=arch, batch_size=2, n_samples=64, iterations=3, seed=seed,
                       hyper=TINY_HYPER[arch], dtype="float64", **kw)
    return solve(p, cfg)


@pytest.mark.parametrize("mode", ["local_regression", "local_bsde", "global_regression", "global_bsde"])
@pytest.mark.parametrize("arch", ["bin", "cylindrical"])
def test_solvers_run_and_are_deterministic(mode, arch):
    a, b = _tiny_solve(mode, arch), _tiny_solve(mode, arch)
    assert a.loss_history == b.loss_history
    for name in a.models:
        np.testing.assert_array_equal(a.models[name][1], b.models[name][1])
    mse = evaluate_pde_mse(a, 1, [0, 1, 2], 500, seed=3)
    assert [t for t, _ in mse] == pytest.approx([0.0, 0.05, 0.1])
    assert all(np.isfinite(m) and m > 0 for _, m in mse[:2])


def test_local_solution_terminal_is_exact():
    sol = _tiny_solve("local_regression")
    X = np.random.default_rng(0).normal(size=(1, 50))
    np.testing.assert_array_equal(sol.value(2, X), field_terms(sol.problem, sol.problem.T, X, X)[1])
    assert sorted(sol.models) == [0, 1]


def test_local_checkpoints_per_date():
    sol = _tiny_solve("local_bsde", shared_uz=False)
    assert sorted(sol.models) == [0, 1]
    model, _ = sol.models[0]
    assert [h for h in model.heads] == [("u",), ("z",)]


def test_global_bsde_exposes_time_zero_only():
    sol = _tiny_solve("global_bsde")
    with pytest.raises(ValueError):
        sol.value(1, np.zeros((1, 3)))


def test_exact_oracle_evaluation():
    sol = ExactSolution(PdeProblem(n_steps=4))
    for which in (1, 2, 3):
        for _, mse in evaluate_pde_mse(sol, which, [0, 2, 4], 10**5, seed=1):
            assert mse <= 1e-6


def test_evaluation_reproducible():
    sol = _tiny_solve("global_regression")
    assert evaluate_pde_mse(sol, 2, [0, 2], 1000, 5) == evaluate_pde_mse(sol, 2, [0, 2], 1000, 5)
    with pytest.raises(ValueError):
        evaluate_pde_mse(sol, 2, [3], 1000, 5)


def test_martingale_residual_small_and_needs_cos():
    p = PdeProblem(n_steps=10)
    X0 = make_test_distribution(3).sample(20000, np.random.default_rng(0))
    assert martingale_residual(p, X0, np.random.default_rng(1)) < 1e-2
    with pytest.raises(ValueError):
        martingale_residual(replace(p, kernel=PAIRWISE_COS), X0[:10], np.random.default_rng(1))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(mode="mystery")
    with pytest.raises(ValueError):
        SolverConfig(arch="rnn")
    with pytest.raises(ValueError):
        SolverConfig(iterations=-1)
