"""Rule-based combiners over Min-Max normalized scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..core import AllMissing, ConfigError, TrainingError, minmax_fit
from ..metrics import eer as eer_of
from .base import FusionModel, check_dev, normalized, register, sub_normalizer

RULES = ("mean", "product", "min", "max", "median")
EXCLUSIONS = ("as_printed", "text_intent")


# ---------------------------------------------------------------------------
# Fixed rules
# ---------------------------------------------------------------------------


def _rule(Y: np.ndarray, rule: str) -> np.ndarray:
    if rule == "mean":
        return np.nanmean(Y, axis=1)
    if rule == "product":
        return np.nanprod(Y, axis=1)
    if rule == "min":
        return np.nanmin(Y, axis=1)
    if rule == "max":
        return np.nanmax(Y, axis=1)
    if rule == "median":
        return np.nanmedian(Y, axis=1)
    raise ConfigError(f"unknown rule {rule!r}; expected one of {RULES}")


def fixed_rule_combine(normalized_scores, rule: str = "mean") -> float:
    y = np.asarray(normalized_scores, dtype=float).ravel()
    if np.isnan(y).all():
        raise AllMissing("no observed channel")
    return float(_rule(y[None, :], rule)[0])


@register
class FixedRule(FusionModel):
    family = "fixed_rule"
    output_range = "probability"

    def __init__(self, channels, normalizer, rule: str = "mean", strategy: str = "drop_term"):
        super().__init__(channels, strategy, normalizer)
        if rule not in RULES:
            raise ConfigError(f"unknown rule {rule!r}; expected one of {RULES}")
        self.rule = rule

    @classmethod
    def fit(cls, dev, channels=None, rule: str = "mean"):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        return cls(channels, minmax_fit(dev, channels), rule)

    def _score(self, X, Q):
        return _rule(normalized(self, X), self.rule)

    def restrict(self, channels):
        return FixedRule(tuple(channels), sub_normalizer(self.normalizer, channels), self.rule, self.strategy)

    def _params(self):
        return {"rule": self.rule}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, normalizer, p["rule"], strategy)


# ---------------------------------------------------------------------------
# Error-based weighting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorWeights:
    eers: tuple[float, ...]
    u: tuple[float, ...]
    weights: tuple[float, ...]
    variant: str
    exclusion: str


def error_weights(eers: Sequence[float], variant: str = "linear", exclusion: str = "as_printed") -> ErrorWeights:
    """Channel weights from development EERs.

    ``as_printed``: ratio r_i = e_i / sum(e) (e squared for ``quadratic``);
    u_i = r_i when r_i >= 0.5/N, else infinity; w_i proportional to 1/u_i.
    ``text_intent``: w_i proportional to 1/r_i over all channels, then
    channels whose weight falls below 0.5/N are dropped and the rest
    renormalized.
    """
    if variant not in ("linear", "quadratic"):
        raise ConfigError(f"unknown variant {variant!r}")
    if exclusion not in EXCLUSIONS:
        raise ConfigError(f"unknown exclusion {exclusion!r}; expected one of {EXCLUSIONS}")
    e = np.asarray(eers, dtype=float)
    n = e.size
    if n == 0:
        raise ConfigError("no channels")
    e = e**2 if variant == "quadratic" else e
    floor = 0.5 / n
    if e.sum() == 0:
        r = np.full(n, 1.0 / n)
    else:
        r = e / e.sum()
    with np.errstate(divide="ignore"):
        if exclusion == "as_printed":
            u = np.where(r >= floor, r, np.inf)
            inv = np.where(np.isfinite(u), 1.0 / u, 0.0)
        else:
            inv = 1.0 / r
            if np.isinf(inv).any():
                # zero-error channels take all the weight
                inv = np.isinf(inv).astype(float)
            w0 = inv / inv.sum()
            inv = np.where(w0 >= floor, inv, 0.0)
            u = np.where(inv > 0, r, np.inf)
    if not inv.sum() > 0:
        raise TrainingError("every channel was excluded; weights are degenerate")
    w = inv / inv.sum()
    return ErrorWeights(tuple(map(float, np.asarray(eers, float))), tuple(map(float, u)), tuple(map(float, w)),
                        variant, exclusion)


def error_weighted_fuse(ew: ErrorWeights, normalized_scores, impute=None) -> float:
    y = np.asarray(normalized_scores, dtype=float).ravel()
    if impute is not None:
        y = np.where(np.isnan(y), impute, y)
    if np.isnan(y).all():
        raise AllMissing("no observed channel")
    return float(np.nansum(y * np.asarray(ew.weights)))


@register
class ErrorWeighted(FusionModel):
    """Weighted sum of normalized scores with EER-derived weights; missing scores take the class-mean midpoint."""

    family = "error_weighted"
    output_range = "probability"
    strategies = ("midpoint_impute",)

    def __init__(self, channels, normalizer, eers, genuine_means, impostor_means, variant="linear",
                 exclusion="as_printed", strategy="midpoint_impute"):
        super().__init__(channels, strategy, normalizer)
        self.eers = np.asarray(eers, dtype=float)
        self.genuine_means = np.asarray(genuine_means, dtype=float)
        self.impostor_means = np.asarray(impostor_means, dtype=float)
        self.weights = error_weights(self.eers, variant, exclusion)
        self.variant, self.exclusion = variant, exclusion

    @property
    def impute(self) -> np.ndarray:
        return 0.5 * (self.genuine_means + self.impostor_means)

    @classmethod
    def fit(cls, dev, channels=None, variant: str = "linear", exclusion: str = "as_printed"):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        norm = minmax_fit(dev, channels)
        N = norm.apply_matrix(dev, channels)
        eers, gm, im = [], [], []
        for j in range(len(channels)):
            ok = ~np.isnan(N[:, j])
            lab = dev.is_client[ok]
            if lab.all() or not lab.any():
                raise TrainingError(f"channel {channels[j]} lacks observed scores for one class")
            eers.append(eer_of(N[ok, j], lab)[0])
            gm.append(N[ok, j][lab].mean())
            im.append(N[ok, j][~lab].mean())
        return cls(channels, norm, eers, gm, im, variant, exclusion)

    def _score(self, X, Q):
        Y = normalized(self, X)
        Y = np.where(np.isnan(Y), self.impute, Y)
        return Y @ np.asarray(self.weights.weights)

    def restrict(self, channels):
        idx = [self.channels.index(c) for c in channels]
        return ErrorWeighted(tuple(channels), sub_normalizer(self.normalizer, channels), self.eers[idx],
                             self.genuine_means[idx], self.impostor_means[idx], self.variant, self.exclusion,
                             self.strategy)

    def _params(self):
        return {"eers": self.eers.tolist(), "genuine_means": self.genuine_means.tolist(),
                "impostor_means": self.impostor_means.tolist(), "variant": self.variant,
                "exclusion": self.exclusion}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, normalizer, p["eers"], p["genuine_means"], p["impostor_means"], p["variant"],
                   p["exclusion"], strategy)


# ---------------------------------------------------------------------------
# Quality-dependent fixed rule
# ---------------------------------------------------------------------------


def qfixed_fuse(Y, high) -> np.ndarray:
    """Product of the high-group mean and the low-group mean; one group alone gives its mean.

    ``Y`` holds normalized scores (NaN missing), ``high`` flags high-quality cells.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    high = np.atleast_2d(np.asarray(high, dtype=bool))
    obs = ~np.isnan(Y)
    if not obs.any(axis=1).all():
        raise AllMissing("no observed channel")
    hi, lo = obs & high, obs & ~high
    with np.errstate(invalid="ignore"):
        mh = np.where(hi, Y, 0.0).sum(axis=1) / hi.sum(axis=1)
        ml = np.where(lo, Y, 0.0).sum(axis=1) / lo.sum(axis=1)
    both = hi.any(axis=1) & lo.any(axis=1)
    return np.where(both, mh * ml, np.where(hi.any(axis=1), mh, ml))


@register
class QFixed(FusionModel):
    family = "qfixed"
    output_range = "probability"
    uses_quality = True

    def __init__(self, channels, normalizer, q_bounds: Mapping[str, Sequence], q_mean, q_std,
                 strategy: str = "drop_term"):
        super().__init__(channels, strategy, normalizer)
        self.q_bounds = {c: np.asarray(q_bounds[c], dtype=float) for c in channels}
        self.q_mean = np.asarray(q_mean, dtype=float)
        self.q_std = np.asarray(q_std, dtype=float)

    @staticmethod
    def _summary(q: np.ndarray, bounds: np.ndarray) -> np.ndarray:
        lo, hi = bounds[0], bounds[1]
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.clip((q - lo) / span, 0.0, 1.0).mean(axis=1)

    @classmethod
    def fit(cls, dev, channels=None):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        bounds, mean, std = {}, [], []
        for c in channels:
            q = dev.qualities[c]
            q = q[~np.isnan(q).any(axis=1)]
            if q.shape[0] == 0:
                raise TrainingError(f"channel {c} has no observed quality vectors")
            bounds[c] = np.vstack([q.min(axis=0), q.max(axis=0)])
            s = cls._summary(q, bounds[c])
            mean.append(s.mean())
            std.append(s.std())
        return cls(channels, minmax_fit(dev, channels), bounds, mean, std)

    def high_quality(self, Q) -> np.ndarray:
        """High iff summary > mean - std; constant development quality makes every observed vector high."""
        cols = []
        for j, c in enumerate(self.channels):
            q = Q[c]
            s = self._summary(q, self.q_bounds[c])
            ok = ~np.isnan(q).any(axis=1)
            high = s > self.q_mean[j] - self.q_std[j] if self.q_std[j] > 0 else np.ones(len(s), bool)
            cols.append(ok & high)
        return np.column_stack(cols)

    def _score(self, X, Q):
        return qfixed_fuse(normalized(self, X), self.high_quality(Q))

    def restrict(self, channels):
        idx = [self.channels.index(c) for c in channels]
        return QFixed(tuple(channels), sub_normalizer(self.normalizer, channels),
                      {c: self.q_bounds[c] for c in channels}, self.q_mean[idx], self.q_std[idx], self.strategy)

    def _params(self):
        return {"q_bounds": {c: b.tolist() for c, b in self.q_bounds.items()},
                "q_mean": self.q_mean.tolist(), "q_std": self.q_std.tolist()}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, normalizer, p["q_bounds"], p["q_mean"], p["q_std"], strategy)
