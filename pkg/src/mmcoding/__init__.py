"""Multi-label output coding with max-margin learned label encodings.

Modules: :mod:`~mmcoding.data` (datasets), :mod:`~mmcoding.linear_models`
(ridge maps, logistic classifiers), :mod:`~mmcoding.encoders`,
:mod:`~mmcoding.margin_metric`, :mod:`~mmcoding.decoders`,
:mod:`~mmcoding.pipelines` and :mod:`~mmcoding.evaluation`.
"""
from .data import Dataset, load_dataset, random_split, select_top_labels
from .encoders import EncodingMatrix
from .evaluation import macro_f1, micro_f1, run_benchmark, subset_accuracy
from .margin_metric import MetricQ, learn_metric, metric_to_projections
from .pipelines import METHODS, FittedModel, MethodSpec, fit, load_model, predict, save_model

__version__ = "0.1.0"

__all__ = [
    "Dataset", "load_dataset", "random_split", "select_top_labels", "EncodingMatrix",
    "macro_f1", "micro_f1", "run_benchmark", "subset_accuracy", "MetricQ", "learn_metric",
    "metric_to_projections", "METHODS", "FittedModel", "MethodSpec", "fit", "load_model",
    "predict", "save_model",
]
