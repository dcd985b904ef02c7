"""Fusion families behind one train/score/serialize interface."""

from __future__ import annotations

import json
from typing import Mapping

from ..core import ConfigError, ScoreTable, dumps
from .base import FAMILIES, ClassPriors, FusionModel
from .evidence import (
    DempsterShafer,
    MassAssignment,
    dempster_combine,
    dempster_shafer_fuse,
    ds_closed_form,
    ds_combine_explicit,
)
from .generative import GmmBayes, MofaBayes, posterior
from .logistic import (
    DivergenceWarning,
    LogReg,
    LogRegDevice,
    LogRegModel,
    LogRegQFuse,
    device_normalize,
    logreg_fit,
    logreg_grad,
    logreg_loglik,
    qfuse_expand,
    qfuse_features,
)
from .naive import (
    BNq,
    NaiveLLR,
    QualityClusterModel,
    bnq_normalize,
    cluster_posterior,
    fit_quality_clusters,
)
from .rules import (
    ErrorWeighted,
    ErrorWeights,
    FixedRule,
    QFixed,
    error_weighted_fuse,
    error_weights,
    fixed_rule_combine,
    qfixed_fuse,
)


def train(family: str, dev: ScoreTable, channels=None, **config) -> FusionModel:
    """Train ``family`` on the development table."""
    cls = FAMILIES.get(family)
    if cls is None:
        raise ConfigError(f"unknown fusion family {family!r}; expected one of {sorted(FAMILIES)}")
    return cls.fit(dev, channels, **config)


def load_model(d: Mapping | str) -> FusionModel:
    if isinstance(d, str):
        d = json.loads(d)
    return FusionModel.from_dict(d)


def model_json(model: FusionModel) -> str:
    return dumps(model.to_dict())


__all__ = [
    "FAMILIES", "ClassPriors", "FusionModel", "train", "load_model", "model_json",
    "GmmBayes", "MofaBayes", "NaiveLLR", "BNq", "DempsterShafer", "LogReg", "LogRegQFuse", "LogRegDevice",
    "ErrorWeighted", "QFixed", "FixedRule",
    "MassAssignment", "QualityClusterModel", "LogRegModel", "ErrorWeights", "DivergenceWarning",
    "posterior", "dempster_combine", "ds_combine_explicit", "ds_closed_form", "dempster_shafer_fuse",
    "logreg_fit", "logreg_grad", "logreg_loglik", "qfuse_expand", "qfuse_features", "device_normalize",
    "bnq_normalize", "cluster_posterior", "fit_quality_clusters",
    "error_weights", "error_weighted_fuse", "fixed_rule_combine", "qfixed_fuse",
]
