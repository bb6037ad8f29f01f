"""Infinite-width NNGP kernels, certified robustness radii for random ReLU networks,
and Monte-Carlo checks of the bounds behind them."""

from .arch import ArchError, ArchSpec, build_arch, layer_geometry, load_arch
from .attack import AttackRecord, boundary_search, scaling_experiment
from .certificate import RobustnessCertificate, certify, dudley_constant, failure_prob
from .covering import covering_bound, dudley_integral, lattice_cover, verify_cover
from .kernel import kernel_matrix, psi, rkhs_distance, smoothness_constants
from .randnet import RandomNetwork, empirical_kernel, forward, gradient, init_random
from .stats import fit_loglog, percentile_profile

__version__ = "0.1.0"

__all__ = [
    "ArchError", "ArchSpec", "build_arch", "layer_geometry", "load_arch",
    "AttackRecord", "boundary_search", "scaling_experiment",
    "RobustnessCertificate", "certify", "dudley_constant", "failure_prob",
    "covering_bound", "dudley_integral", "lattice_cover", "verify_cover",
    "kernel_matrix", "psi", "rkhs_distance", "smoothness_constants",
    "RandomNetwork", "empirical_kernel", "forward", "gradient", "init_random",
    "fit_loglog", "percentile_profile",
]
