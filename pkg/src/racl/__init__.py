"""Robust architecture search under a probabilistic Lipschitz constraint.

Architecture weights are log-normal random variables; the network Lipschitz
bound is propagated as a log-normal via Fenton-Wilkinson moment matching and
kept below a target with an augmented-Lagrangian (ADMM) penalty.
"""

import os as _os

# RACL_THREADS caps BLAS threading; it has to be applied before numpy loads.
_threads = _os.environ.get("RACL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .lognormal import LogNormalParams, ZERO_BOUND, fw_sum, ln_product, ln_scale, mc_oracle  # noqa: E402
from .operations import OperationKind, op_lipschitz, power_iteration  # noqa: E402
from .supernet import (  # noqa: E402
    ArchDistribution,
    Genotype,
    Supernet,
    SupernetSpec,
    discretize,
    network_bound_dist,
    sample_arch,
    sampled_bound,
)
from .search import SearchConfig, retrain, search_loop  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "LogNormalParams",
    "ZERO_BOUND",
    "fw_sum",
    "ln_product",
    "ln_scale",
    "mc_oracle",
    "OperationKind",
    "op_lipschitz",
    "power_iteration",
    "ArchDistribution",
    "Genotype",
    "Supernet",
    "SupernetSpec",
    "discretize",
    "network_bound_dist",
    "sample_arch",
    "sampled_bound",
    "SearchConfig",
    "retrain",
    "search_loop",
]
