"""Logistic-regression fusion: raw scores, quality tensor expansion, device-dependent."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from ..core import CHANNELS, ConfigError, SchemaError, TrainingError, minmax_fit
from .base import FusionModel, check_dev, normalized, register
from .naive import QualityClusterModel, cluster_posterior, default_sources, fit_quality_clusters

FEATURE_MAPS = ("raw", "qfuse", "device")


class DivergenceWarning(UserWarning):
    """Gradient ascent stopped at max_iter, typically because the data are separable."""


@dataclass(frozen=True, eq=False)
class LogRegModel:
    weights: np.ndarray
    intercept: float
    feature_map: str = "raw"
    converged: bool = True

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.intercept)):
            raise TrainingError("logistic weights must be finite")

    def decision(self, X) -> np.ndarray:
        """Linear log-odds g(x)."""
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.weights + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision(X))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "intercept": self.intercept,
                "feature_map": self.feature_map, "converged": self.converged}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LogRegModel":
        return cls(np.array(d["weights"], float), float(d["intercept"]), d["feature_map"], d["converged"])


def _sample_weights(y: np.ndarray, balanced: bool) -> np.ndarray:
    if not balanced:
        return np.ones(y.size)
    n1 = y.sum()
    n0 = y.size - n1
    return np.where(y == 1, y.size / (2.0 * n1), y.size / (2.0 * n0))


def logreg_loglik(theta, X, y, sample_weight=None, l2: float = 0.0) -> float:
    """Weighted mean Bernoulli log-likelihood minus (l2/2)|w|^2; theta = [b, w]."""
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(X, dtype=float)
    sw = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
    z = X @ theta[1:] + theta[0]
    ll = sw * (y * log_expit(z) + (1 - y) * log_expit(-z))
    return float(ll.sum() / sw.sum() - 0.5 * l2 * theta[1:] @ theta[1:])


def logreg_grad(theta, X, y, sample_weight=None, l2: float = 0.0) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(X, dtype=float)
    sw = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
    r = sw * (y - expit(X @ theta[1:] + theta[0])) / sw.sum()
    g = np.empty_like(theta)
    g[0] = r.sum()
    g[1:] = X.T @ r - l2 * theta[1:]
    return g


def logreg_fit(X, y, l2: float = 0.0, max_iter: int = 5000, tol: float = 1e-6, step: float = 1.0,
               balanced: bool = True, feature_map: str = "raw") -> LogRegModel:
    """Maximize the (weighted, optionally L2-penalized) log-likelihood by gradient ascent.

    Columns are standardized internally and the step length is found by
    backtracking, so ``step`` is only the initial trial length. The L2 penalty
    applies to the weights in standardized units. Without a penalty, a
    vanishing gradient on separable data does not count as convergence: the
    ascent runs to ``max_iter`` and a ``DivergenceWarning`` is emitted.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("X and y differ in length")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise TrainingError("logistic regression needs both classes")
    if np.isnan(X).any():
        raise ValueError("features must be complete")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    sw = _sample_weights(y, balanced)

    # Nesterov-accelerated ascent with backtracking and function-value restarts
    x = np.zeros(X.shape[1] + 1)
    v, t = x, 1.0
    ll_x = logreg_loglik(x, Z, y, sw, l2)
    converged = False
    for _ in range(max_iter):
        gx = logreg_grad(x, Z, y, sw, l2)
        if np.linalg.norm(gx) < tol:
            if l2 > 0 or not _separates(x, Z, y):
                converged = True
                break
        g = logreg_grad(v, Z, y, sw, l2)
        ll_v = logreg_loglik(v, Z, y, sw, l2)
        gg = float(g @ g)
        while True:
            cand = v + step * g
            ll_new = logreg_loglik(cand, Z, y, sw, l2)
            if ll_new >= ll_v + 0.5 * step * gg or step < 1e-12:
                break
            step *= 0.5
        if ll_new < ll_x:
            v, t = x, 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        v = cand + ((t - 1.0) / t_next) * (cand - x)
        x, ll_x, t = cand, ll_new, t_next
        step = min(step * 1.5, 1e8)
    theta = x
    if not converged:
        warnings.warn("logistic regression reached max_iter without converging; "
                      "weights may be diverging on separable data", DivergenceWarning, stacklevel=2)
    w = theta[1:] / sd
    b = theta[0] - float(mu @ w)
    return LogRegModel(w, b, feature_map, converged)


def _separates(theta, Z, y) -> bool:
    """True when the hyperplane puts every positive strictly above every negative."""
    z = Z @ theta[1:] + theta[0]
    return bool(z[y == 1].min() > z[y == 0].max())


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------


def qfuse_expand(y: float, q, dim: int | None = None) -> np.ndarray:
    """[y, q, y*q]: the score, its quality vector, and score-quality products.

    A missing quality vector (None, or any NaN) gives zero q and product blocks.
    """
    if q is None:
        if dim is None:
            raise ValueError("dim is required when the quality vector is missing")
        q = np.zeros(dim)
    else:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if np.isnan(q).any():
            q = np.zeros(q.size)
    return np.concatenate([[float(y)], q, float(y) * q])


def qfuse_features(Y: np.ndarray, Q: Sequence[np.ndarray]) -> np.ndarray:
    """Row-wise qfuse blocks for every channel, each followed by a missing-quality indicator.

    A missing score zeroes its whole block.
    """
    blocks = []
    for j, q in enumerate(Q):
        y = Y[:, j]
        ys = np.nan_to_num(y)
        qmiss = np.isnan(q).any(axis=1)
        qz = np.where(np.isnan(q), 0.0, q) * ~np.isnan(y)[:, None]
        blocks += [ys[:, None], qz, ys[:, None] * qz, (qmiss & ~np.isnan(y)).astype(float)[:, None]]
    return np.hstack(blocks)


def raw_features(Y: np.ndarray, fill: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(Y), fill, Y)


class _LogRegBase(FusionModel):
    output_range = "probability"
    strategies = ("median_impute", "drop_term")
    exact_restrict = False

    def __init__(self, channels, model: LogRegModel, normalizer, strategy: str, fill):
        super().__init__(channels, strategy, normalizer)
        self.model = model
        self.fill = np.asarray(fill, dtype=float)

    @classmethod
    def _fill(cls, N: np.ndarray, strategy: str) -> np.ndarray:
        if strategy == "median_impute":
            return np.nanmedian(N, axis=0)
        return np.zeros(N.shape[1])

    def _params(self):
        return {"model": self.model.to_dict(), "fill": self.fill.tolist()}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, LogRegModel.from_dict(p["model"]), normalizer, strategy, p["fill"])


@register
class LogReg(_LogRegBase):
    """Logistic regression on Min-Max normalized scores."""

    family = "logreg"

    @classmethod
    def fit(cls, dev, channels=None, strategy: str = "median_impute", l2: float = 0.0, max_iter: int = 5000,
            tol: float = 1e-6, balanced: bool = True):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        norm = minmax_fit(dev, channels)
        N = norm.apply_matrix(dev, channels)
        fill = cls._fill(N, strategy)
        m = logreg_fit(raw_features(N, fill), dev.labels, l2, max_iter, tol, balanced=balanced)
        return cls(channels, m, norm, strategy, fill)

    def features(self, X, Q):
        return raw_features(normalized(self, X), self.fill)

    def _score(self, X, Q):
        return self.model.predict_proba(self.features(X, Q))


@register
class LogRegQFuse(_LogRegBase):
    """Logistic regression on per-channel [y, q, y*q] blocks."""

    family = "logreg_qfuse"
    strategies = ("drop_term",)
    uses_quality = True

    @classmethod
    def fit(cls, dev, channels=None, strategy: str = "drop_term", l2: float = 1e-4, max_iter: int = 5000,
            tol: float = 1e-6, balanced: bool = True):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        norm = minmax_fit(dev, channels)
        N = norm.apply_matrix(dev, channels)
        F = qfuse_features(N, [dev.qualities[c] for c in channels])
        m = logreg_fit(F, dev.labels, l2, max_iter, tol, balanced=balanced, feature_map="qfuse")
        return cls(channels, m, norm, strategy, np.zeros(len(channels)))

    def features(self, X, Q):
        return qfuse_features(normalized(self, X), [Q[c] for c in self.channels])

    def _score(self, X, Q):
        return self.model.predict_proba(self.features(X, Q))


def device_normalize(per_cluster: Sequence[LogRegModel], pooled: LogRegModel, qcm: QualityClusterModel,
                     y, q) -> np.ndarray:
    """g_{Q*}(y) with Q* the most probable device cluster; pooled model where quality is missing."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    out = pooled.decision(y[:, None])
    ok = ~np.isnan(q).any(axis=1)
    if ok.any() and len(per_cluster) > 0:
        best = np.argmax(cluster_posterior(qcm, q[ok]), axis=1)
        sub = np.empty(best.size)
        for k, m in enumerate(per_cluster):
            sel = best == k
            sub[sel] = m.decision(y[ok][sel, None])
        out[ok] = sub
    return out


@register
class LogRegDevice(FusionModel):
    """Per-slot, per-device 1-D logistic normalization combined by max or sum of log-odds."""

    family = "logreg_device"
    output_range = "log_ratio"
    uses_quality = True
    combines = ("max", "sum")

    def __init__(self, channels, qcms, per_cluster, pooled, combine: str = "max", strategy: str = "drop_term"):
        super().__init__(channels, strategy)
        if combine not in self.combines:
            raise ConfigError(f"combine must be one of {self.combines}")
        self.qcms = tuple(qcms)
        self.per_cluster = tuple(tuple(m) for m in per_cluster)
        self.pooled = tuple(pooled)
        self.combine = combine

    @classmethod
    def fit(cls, dev, channels=None, slot_sources: Mapping[str, Sequence[str]] | None = None,
            combine: str = "max", quality_components: int = 1, l2: float = 0.0, max_iter: int = 5000,
            tol: float = 1e-6, balanced: bool = True, seed: int = 0):
        channels = tuple(channels or (slot_sources and list(slot_sources)) or dev.channels)
        sources = dict(slot_sources or default_sources(channels))
        check_dev(dev, [s for c in channels for s in sources.get(c, [c])])
        kw = dict(l2=l2, max_iter=max_iter, tol=tol, balanced=balanced, feature_map="device")
        qcms, per_cluster, pooled = [], [], []
        for c in channels:
            src = list(sources.get(c, [c]))
            qcm = fit_quality_clusters(dev, src, quality_components=quality_components, seed=seed)
            models = []
            for device in qcm.clusters:
                members = [s for s in src if CHANNELS[s].device == device]
                models.append(_fit_1d(dev, members, kw))
            qcms.append(qcm)
            per_cluster.append(models)
            pooled.append(_fit_1d(dev, src, kw))
        return cls(channels, qcms, per_cluster, pooled, combine)

    def terms(self, X, Q) -> np.ndarray:
        T = np.full_like(X, np.nan)
        for j, c in enumerate(self.channels):
            ok = ~np.isnan(X[:, j])
            if ok.any():
                T[ok, j] = device_normalize(self.per_cluster[j], self.pooled[j], self.qcms[j], X[ok, j], Q[c][ok])
        return T

    def _score(self, X, Q):
        T = self.terms(X, Q)
        return np.nanmax(T, axis=1) if self.combine == "max" else np.nansum(T, axis=1)

    def restrict(self, channels):
        idx = [self.channels.index(c) for c in channels]
        return LogRegDevice(tuple(channels), [self.qcms[i] for i in idx], [self.per_cluster[i] for i in idx],
                            [self.pooled[i] for i in idx], self.combine, self.strategy)

    def _params(self):
        return {
            "combine": self.combine,
            "qcms": [m.to_dict() for m in self.qcms],
            "per_cluster": [[m.to_dict() for m in ms] for ms in self.per_cluster],
            "pooled": [m.to_dict() for m in self.pooled],
        }

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(
            channels,
            [QualityClusterModel.from_dict(m) for m in p["qcms"]],
            [[LogRegModel.from_dict(m) for m in ms] for ms in p["per_cluster"]],
            [LogRegModel.from_dict(m) for m in p["pooled"]],
            p["combine"],
            strategy,
        )


def _fit_1d(dev, members: Sequence[str], kw) -> LogRegModel:
    for s in members:
        if s not in dev.channels:
            raise SchemaError(f"development table lacks source channel {s}")
    y = np.concatenate([dev.column(s) for s in members])
    lab = np.concatenate([dev.labels for _ in members])
    ok = ~np.isnan(y)
    return logreg_fit(y[ok, None], lab[ok], **kw)
