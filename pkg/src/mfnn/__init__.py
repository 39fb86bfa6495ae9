"""Mean-field neural networks: learning functions of probability measures
and solving a semi-linear PDE on Wasserstein space."""

__version__ = "0.1.0"

from .autodiff import AdamState, DivergenceError, Mlp, MlpSpec, Tensor, adam_init, adam_step, grad, value_and_grad
from .measures import (
    BinDensity,
    BinGrid,
    EmpiricalSample,
    QuantizedMeasure,
    estimate_bins,
    inverse_cdf,
    make_grid,
    moments,
    random_bin_density,
    random_quantized,
    sample,
)
from .networks import BinDensityNet, CylindricalNet, DeepOnetNet, build_net, load_net, save_net
from .targets import GaussianMixture, eval_target, make_test_distribution
from .training import TrainConfig, TrainResult, generalization_error, train
from .dynamics import PdeProblem, PdeSolution, SolverConfig, evaluate_pde_mse, exact_solution, solve
