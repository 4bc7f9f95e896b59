"""Narrative e-bike incident extraction and ordered logit severity modeling."""

from .codebook import PredictorEncoder, PredictorVector, build_predictor_vector
from .inference import chi_square_sf, lr_statistic, lr_test
from .metrics import precision_recall_f1, tally, weighted_f1
from .ordlogit import ModelData, OrderedLogit, OrderedLogitFit, fit_ordered_logit
from .records import CauseType, Component, StructuredIncident

__version__ = "0.1.0"

__all__ = [
    "CauseType",
    "Component",
    "ModelData",
    "OrderedLogit",
    "OrderedLogitFit",
    "PredictorEncoder",
    "PredictorVector",
    "StructuredIncident",
    "build_predictor_vector",
    "chi_square_sf",
    "fit_ordered_logit",
    "lr_statistic",
    "lr_test",
    "precision_recall_f1",
    "tally",
    "weighted_f1",
]
