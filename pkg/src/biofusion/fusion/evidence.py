"""Dempster-Shafer combination over the frame {C, I}."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..core import AllMissing, minmax_fit
from .base import FusionModel, check_dev, normalized, register, sub_normalizer

C, I = "C", "I"
EMPTY = frozenset()
SINGLE_C = frozenset({C})
SINGLE_I = frozenset({I})
THETA = frozenset({C, I})
FOCAL = (EMPTY, SINGLE_C, SINGLE_I, THETA)


@dataclass(frozen=True)
class MassAssignment:
    client: float
    impostor: float
    either: float

    def __post_init__(self):
        for m in (self.client, self.impostor, self.either):
            if not 0.0 <= m <= 1.0:
                raise ValueError("masses must lie in [0, 1]")
        if not math.isclose(self.client + self.impostor + self.either, 1.0, abs_tol=1e-12):
            raise ValueError("masses must sum to 1")

    @classmethod
    def from_score(cls, y: float) -> "MassAssignment":
        """Belief y in the client hypothesis, the rest left uncommitted."""
        return cls(float(y), 0.0, 1.0 - float(y))

    def as_dict(self) -> dict[frozenset, float]:
        return {EMPTY: 0.0, SINGLE_C: self.client, SINGLE_I: self.impostor, THETA: self.either}


def dempster_combine(m1: dict[frozenset, float], m2: dict[frozenset, float]) -> tuple[dict[frozenset, float], float]:
    """Dempster's rule by enumerating every pair of focal elements.

    Returns the combined masses and the conflict K (mass landing on the
    empty set before renormalization).
    """
    raw = {A: 0.0 for A in FOCAL}
    for B, mb in m1.items():
        for D, md in m2.items():
            raw[B & D] += mb * md
    conflict = raw[EMPTY]
    if conflict >= 1.0:
        raise ValueError("total conflict; combination undefined")
    out = {A: (0.0 if A == EMPTY else raw[A] / (1.0 - conflict)) for A in FOCAL}
    return out, conflict


def ds_combine_explicit(scores: Iterable[float]) -> tuple[dict[frozenset, float], float]:
    """Sequential combination of score-derived masses; returns masses and total conflict."""
    masses = [MassAssignment.from_score(y).as_dict() for y in scores]
    if not masses:
        raise AllMissing("no observed channel")
    acc, total = masses[0], 0.0
    for m in masses[1:]:
        acc, k = dempster_combine(acc, m)
        total += k
    return acc, total


def ds_closed_form(Y: np.ndarray) -> np.ndarray:
    """1 - prod(1 - y) over the observed (non-NaN) entries of each row."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return 1.0 - np.prod(np.where(np.isnan(Y), 1.0, 1.0 - Y), axis=1)


def dempster_shafer_fuse(normalized_scores) -> float:
    y = np.asarray(normalized_scores, dtype=float).ravel()
    y = y[~np.isnan(y)]
    if y.size == 0:
        raise AllMissing("no observed channel")
    return float(ds_closed_form(y)[0])


@register
class DempsterShafer(FusionModel):
    family = "dempster_shafer"
    output_range = "probability"

    @classmethod
    def fit(cls, dev, channels=None):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        return cls(channels, "drop_term", minmax_fit(dev, channels))

    def _score(self, X, Q):
        return ds_closed_form(normalized(self, X))

    def restrict(self, channels):
        return DempsterShafer(tuple(channels), self.strategy, sub_normalizer(self.normalizer, channels))

    def _params(self):
        return {}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, strategy, normalizer)
