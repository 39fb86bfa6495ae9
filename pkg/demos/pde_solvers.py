"""Comparing the four PDE solvers at a small budget.

Each solver gets the same tiny budget (a few hundred Adam steps in total),
so the numbers are far from converged; the point is the workflow:
solve, then score the time-0 value on the three test laws against the
exact solution.
"""
import time

from mfnn.dynamics import PdeProblem, SolverConfig, evaluate_pde_mse, solve
from mfnn.measures import make_grid

problem = PdeProblem(n_steps=5, grid=make_grid(-1.3, 1.3, 100))
print("mode               arch          test 1    test 2    test 3   seconds")
for mode in ("local_regression", "local_bsde", "global_regression", "global_bsde"):
    per_step = 60 if mode.startswith("local") else 300
    for arch in ("cylindrical", "bin"):
        cfg = SolverConfig(mode=mode, arch=arch, batch_size=5, n_samples=2000, iterations=per_step, seed=0)
        start = time.perf_counter()
        sol = solve(problem, cfg)
        mse = [evaluate_pde_mse(sol, w, [0], 20000, seed=w)[0][1] for w in (1, 2, 3)]
        print(f"{mode:18s} {arch:12s} " + "  ".join(f"{m:.2e}" for m in mse)
              + f"   {time.perf_counter() - start:6.1f}")
