"""The semi-linear PDE and its exact solution.

With w = cos the value function is v(t, x, mu) = exp(T - t) E_mu[cos(x - xi)].
This script propagates a particle cloud with the mean-reverting dynamics,
prints v along the way and checks the martingale residual of the exact
solution, which shrinks linearly with the time step.
"""
import numpy as np

from mfnn.dynamics import ParticleCloud, PdeProblem, euler_step, exact_solution, residual_order
from mfnn.targets import make_test_distribution

problem = PdeProblem()
rng = np.random.default_rng(0)
cloud = ParticleCloud(0, make_test_distribution(3).sample(20000, rng), problem.grid)

print(" t      mean(X)  std(X)   v(t, 0.3, mu_t)")
while True:
    t = problem.times[cloud.index]
    v = exact_solution(t, 0.3, cloud.values, problem)
    print(f"{t:.2f}  {cloud.values.mean():8.4f}  {cloud.values.std():6.4f}   {v:.5f}")
    if cloud.index == problem.n_steps:
        break
    cloud = euler_step(cloud, problem, rng)

X0 = make_test_distribution(1).sample(100000, np.random.default_rng(1))
residuals, order = residual_order(problem, X0)
print("\nN_T    residual")
for n, r in zip((5, 10, 20, 40), residuals):
    print(f"{n:3d}    {r:.3e}")
print(f"fitted order in dt: {order:.3f}")
