"""agscl.

Continual learning with adaptive group sparsity over node importances.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version(__name__)
except PackageNotFoundError:
    __version__ = "unknown"

from agscl.config import ExperimentConfig, Hyperparams, load_config
from agscl.exceptions import (
    AgsclException,
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    DataError,
    IdxFormatError,
    NumericError,
)
from agscl.runner import (
    RunReport,
    emit_results,
    resume_run,
    run_agscl,
    run_finetune,
    run_no_pgd_ablation,
    run_rho_sweep,
)
