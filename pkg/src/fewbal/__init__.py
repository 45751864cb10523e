"""Few-shot learning under class imbalance, on plain feature vectors.

The package covers the full loop at desk scale: imbalanced task sampling,
synthetic meta-datasets, a small hand-differentiated network core, nine
few-shot learners, support-set rebalancing, training/evaluation protocol,
metrics with confidence intervals, and a CLI for grid experiments.
"""

from fewbal.errors import (
    DataFormatError,
    InvalidSpecError,
    TaskSamplingError,
    UnsupportedStrategyError,
)
from fewbal.tasks import ImbalanceSpec, ShotVector, Task, imbalance_ratio, sample_task

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "ImbalanceSpec",
    "InvalidSpecError",
    "ShotVector",
    "Task",
    "TaskSamplingError",
    "UnsupportedStrategyError",
    "imbalance_ratio",
    "sample_task",
    "__version__",
]
