"""Split-federated training for U-shaped networks.

A U-shaped model is split into a head, body, and tail so that skip
connections stay on the client; clients train head and tail against
per-client body replicas on a computation server, an aggregation server
averages the client parts each round, and a dynamic weight-correction
step counteracts drift under heterogeneous data.
"""

from .config import ExperimentConfig, parse_config
from .fedops import DwcsConfig, aggregate, alpha, correct
from .runners import RunResult, run, run_centralized, run_fedavg, run_rosfl, run_sequential_sl
from .unet import SplitPlan, UNetSpec, build_unet, split_unet

__version__ = "0.1.0"

__all__ = [
    "DwcsConfig",
    "ExperimentConfig",
    "RunResult",
    "SplitPlan",
    "UNetSpec",
    "aggregate",
    "alpha",
    "build_unet",
    "correct",
    "parse_config",
    "run",
    "run_centralized",
    "run_fedavg",
    "run_rosfl",
    "run_sequential_sl",
    "split_unet",
]
