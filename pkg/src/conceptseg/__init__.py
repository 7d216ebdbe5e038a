"""conceptseg: concept-routed adapter experts with demand-driven growth
for continual segmentation, at desk scale.

Core pieces: a tiny taped-gradient tensor engine (:mod:`numerics`), the
concept library (:mod:`concepts`), bottleneck experts with reconstruction
estimators (:mod:`adapters`), dual routing (:mod:`routing`), growth
decisions (:mod:`expansion`), the toy transformer backbone
(:mod:`backbone`), losses (:mod:`objectives`), ledger metrics
(:mod:`metrics`), synthetic streams (:mod:`stream`) and the run harness
plus CLI (:mod:`harness`, :mod:`cli`).
"""

from .config import MODES, RunConfig, build_config
from .harness import ContinualModel, RunResult, load_model, run_continual, save_checkpoint
from .metrics import MetricsLedger, bwt, dsc

__all__ = [
    "MODES",
    "RunConfig",
    "build_config",
    "ContinualModel",
    "RunResult",
    "load_model",
    "run_continual",
    "save_checkpoint",
    "MetricsLedger",
    "bwt",
    "dsc",
]

__version__ = "0.1.0"
