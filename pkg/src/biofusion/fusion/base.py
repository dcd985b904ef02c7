"""Uniform interface shared by every fusion family."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar, Mapping, Sequence

import numpy as np

from ..core import (
    CHANNELS,
    AccessRecord,
    AllMissing,
    ConfigError,
    NormalizerModel,
    ScoreTable,
    SchemaError,
    TrainingError,
)

FORMAT_VERSION = 1
FAMILIES: dict[str, type["FusionModel"]] = {}


def register(cls):
    FAMILIES[cls.family] = cls
    return cls


@dataclass(frozen=True)
class ClassPriors:
    client: float = 0.5
    impostor: float = 0.5

    def __post_init__(self):
        for p in (self.client, self.impostor):
            if not 0.0 < p < 1.0:
                raise ConfigError("class priors must lie in (0, 1)")
        if not math.isclose(self.client + self.impostor, 1.0, abs_tol=1e-12):
            raise ConfigError("class priors must sum to 1")


def check_dev(dev: ScoreTable, channels: Sequence[str]) -> None:
    if dev.partition != "development":
        raise ConfigError("fusion models are trained on the development partition only")
    missing = [c for c in channels if c not in dev.channels]
    if missing:
        raise SchemaError(f"development table lacks channels {missing}")
    if not channels:
        raise ConfigError("empty channel set")
    if dev.is_client.all() or not dev.is_client.any():
        raise TrainingError("development data must contain both classes")


class FusionModel:
    """Base class.

    Subclasses implement ``fit``, ``_score`` and the ``_params``/``_load`` pair.
    ``_score`` receives raw scores ``X`` of shape ``(n, d)`` in model channel
    order (NaN for missing) plus the quality arrays, and only rows with at
    least one observed channel.
    """

    family: ClassVar[str]
    output_range: ClassVar[str] = "probability"
    strategies: ClassVar[tuple[str, ...]] = ("drop_term",)
    uses_quality: ClassVar[bool] = False
    # restrict() gives the same model as training on the subset
    exact_restrict: ClassVar[bool] = True

    def __init__(self, channels: Sequence[str], strategy: str, normalizer: NormalizerModel | None = None):
        self.channels = tuple(channels)
        if strategy not in self.strategies:
            raise ConfigError(f"{self.family} does not support strategy {strategy!r}")
        self.strategy = strategy
        self.normalizer = normalizer

    # -- training ---------------------------------------------------------
    @classmethod
    def fit(cls, dev: ScoreTable, channels: Sequence[str] | None = None, **config) -> "FusionModel":
        raise NotImplementedError

    # -- scoring ----------------------------------------------------------
    def _score(self, X: np.ndarray, Q: Mapping[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def _inputs(self, table: ScoreTable, subset: Sequence[str] | None):
        missing = [c for c in self.channels if c not in table.channels]
        if missing:
            raise SchemaError(f"table lacks model channels {missing}")
        X = np.array(table.score_matrix(self.channels), dtype=float)
        Q = {c: np.array(table.qualities[c], dtype=float) for c in self.channels}
        if subset is not None:
            unknown = set(subset) - set(self.channels)
            if unknown:
                raise SchemaError(f"subset channels {sorted(unknown)} not in model")
            for j, c in enumerate(self.channels):
                if c not in subset:
                    X[:, j] = np.nan
                    Q[c][:] = np.nan
        return X, Q

    def score(self, table: ScoreTable, channels: Sequence[str] | None = None) -> np.ndarray:
        """Fused score per row; channels outside ``channels`` are treated as missing.

        Rows with no observed channel get NaN.
        """
        X, Q = self._inputs(table, channels)
        return self.score_arrays(X, Q)

    def score_arrays(self, X: np.ndarray, Q: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Score raw arrays; a channel absent from ``Q`` has missing quality."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Q = Q or {}
        Q = {c: Q[c] if c in Q else np.full((X.shape[0], CHANNELS[c].quality_dim), np.nan) for c in self.channels}
        out = np.full(X.shape[0], np.nan)
        obs = ~np.isnan(X).all(axis=1)
        if obs.any():
            out[obs] = self._score(X[obs], {c: Q[c][obs] for c in self.channels})
        return out

    def score_record(self, record: AccessRecord) -> float:
        X = np.array([[np.nan if record.scores.get(c) is None else record.scores[c] for c in self.channels]])
        if np.isnan(X).all():
            raise AllMissing("no observed channel in record")
        Q = {}
        for c in self.channels:
            q = record.qualities.get(c)
            Q[c] = np.full((1, CHANNELS[c].quality_dim), np.nan) if q is None else np.asarray(q, float).reshape(1, -1)
        return float(self._score(X, Q)[0])

    def restrict(self, channels: Sequence[str]) -> "FusionModel":
        raise NotImplementedError(f"{self.family} must be retrained per subset")

    # -- persistence ------------------------------------------------------
    def _params(self) -> dict:
        raise NotImplementedError

    @classmethod
    def _load(cls, channels, strategy, normalizer, params) -> "FusionModel":
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "format_version": FORMAT_VERSION,
            "channels": list(self.channels),
            "strategy": self.strategy,
            "output_range": self.output_range,
            "normalizer": None if self.normalizer is None else self.normalizer.to_dict(),
            "params": self._params(),
        }

    @staticmethod
    def from_dict(d: Mapping) -> "FusionModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {d.get('format_version')!r}")
        cls = FAMILIES.get(d.get("family"))
        if cls is None:
            raise ConfigError(f"unknown fusion family {d.get('family')!r}")
        norm = None if d["normalizer"] is None else NormalizerModel.from_dict(d["normalizer"])
        return cls._load(tuple(d["channels"]), d["strategy"], norm, d["params"])

    def __repr__(self) -> str:
        return f"{type(self).__name__}(channels={self.channels}, strategy={self.strategy!r})"


def normalized(model: FusionModel, X: np.ndarray) -> np.ndarray:
    return np.column_stack([model.normalizer.apply(c, X[:, j]) for j, c in enumerate(model.channels)])


def sub_normalizer(norm: NormalizerModel | None, channels: Sequence[str]) -> NormalizerModel | None:
    return None if norm is None else NormalizerModel({c: norm.bounds[c] for c in channels})


def class_rows(dev: ScoreTable, channels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    X = dev.score_matrix(channels)
    return X[dev.is_client], X[~dev.is_client]
