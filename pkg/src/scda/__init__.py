"""Open-set domain adaptation that discovers implicit target classes.

Modules: ``numkit`` (rng, matrices, PCA), ``net`` (MLP feature extractor,
restructurable softmax classifier, SGD), ``losses`` (class correlation
matrix and the confusion losses), ``discovery`` (candidate selection,
k estimation, pseudo classes), ``adapter`` (training driver), ``data``
(synthetic benchmark, CSV), ``evaluation`` (metrics, ablations) and ``cli``.
"""
from .adapter import TrainConfig, run
from .data import LabeledSet, ShiftSpec, TargetSet, generate
from .errors import ContractError, DataError, GeneratorError, NumericalError, ShapeError
from .evaluation import MetricsReport, ablation_suite, evaluate
from .numkit import Rng

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DataError", "GeneratorError", "LabeledSet", "MetricsReport",
    "NumericalError", "Rng", "ShapeError", "ShiftSpec", "TargetSet", "TrainConfig",
    "ablation_suite", "evaluate", "generate", "run",
]
