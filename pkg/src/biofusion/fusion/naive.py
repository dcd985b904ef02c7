"""Naive-Bayes log-likelihood-ratio fusion and its quality-conditioned variant (BNq)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from ..core import CHANNELS, ConfigError, ScoreTable, SchemaError, TrainingError
from ..densities import GmmModel, HistogramModel, gmm_fit, gmm_logpdf, hist_fit, hist_pdf
from .base import FusionModel, check_dev, register

DENSITY_KINDS = ("gaussian", "gmm", "histogram")


def fit_density(values, kind: str = "gaussian", n_components: int = 2, n_bins: int = 20, seed: int = 0):
    """1-D score density: a single Gaussian, a GMM, or a histogram."""
    v = np.asarray(values, dtype=float).ravel()
    v = v[~np.isnan(v)]
    if v.size < 2:
        raise TrainingError("need at least two observed scores per class")
    if kind == "gaussian":
        return gmm_fit(v[:, None], 1)
    if kind == "gmm":
        return gmm_fit(v[:, None], min(n_components, v.size), seed=seed)
    if kind == "histogram":
        return hist_fit(v, n_bins)
    raise ConfigError(f"unknown density kind {kind!r}; expected one of {DENSITY_KINDS}")


def density_logpdf(model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if isinstance(model, HistogramModel):
        return np.log(hist_pdf(model, x))
    return gmm_logpdf(model, x.reshape(-1, 1))


def density_from_dict(d: Mapping):
    return HistogramModel.from_dict(d) if d["kind"] == "histogram" else GmmModel.from_dict(d)


def channel_llr(client, impostor, y: np.ndarray) -> np.ndarray:
    return density_logpdf(client, y) - density_logpdf(impostor, y)


# ---------------------------------------------------------------------------
# Quality clusters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QualityClusterModel:
    """Per-device quality densities p(q|Q) and score densities p(y|k,Q) for one slot."""

    clusters: tuple[str, ...]
    quality: tuple[GmmModel, ...]
    client: tuple
    impostor: tuple

    def log_quality(self, q: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        return np.column_stack([gmm_logpdf(m, q) for m in self.quality])

    def to_dict(self) -> dict:
        return {
            "clusters": list(self.clusters),
            "quality": [m.to_dict() for m in self.quality],
            "client": [m.to_dict() for m in self.client],
            "impostor": [m.to_dict() for m in self.impostor],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QualityClusterModel":
        return cls(
            tuple(d["clusters"]),
            tuple(GmmModel.from_dict(m) for m in d["quality"]),
            tuple(density_from_dict(m) for m in d["client"]),
            tuple(density_from_dict(m) for m in d["impostor"]),
        )


def cluster_posterior(qcm: QualityClusterModel, q) -> np.ndarray:
    """P(Q | q) under equal cluster priors; rows sum to 1.

    Rows with a missing quality vector, or with zero density under every
    cluster, get the uniform distribution.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    K = len(qcm.clusters)
    out = np.full((q.shape[0], K), 1.0 / K)
    ok = ~np.isnan(q).any(axis=1)
    if K == 1 or not ok.any():
        return out
    logq = qcm.log_quality(q[ok])
    finite = np.isfinite(logq).any(axis=1)
    norm = logsumexp(logq[finite], axis=1, keepdims=True)
    sub = out[ok]
    sub[finite] = np.exp(logq[finite] - norm)
    out[ok] = sub
    return out


def bnq_normalize(qcm: QualityClusterModel, y, q) -> np.ndarray:
    """log of sum_Q p(y|C,Q) P(Q|q) over sum_Q p(y|I,Q) P(Q|q)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    post = cluster_posterior(qcm, q)
    with np.errstate(divide="ignore"):
        logpost = np.log(post)
    lc = np.column_stack([density_logpdf(m, y) for m in qcm.client]) + logpost
    li = np.column_stack([density_logpdf(m, y) for m in qcm.impostor]) + logpost
    return logsumexp(lc, axis=1) - logsumexp(li, axis=1)


def fit_quality_clusters(dev: ScoreTable, sources: Sequence[str], density: str = "gaussian",
                         quality_components: int = 1, seed: int = 0, **density_kw) -> QualityClusterModel:
    """One cluster per query device among ``sources`` (dev channels feeding this slot)."""
    groups: dict[str, list[str]] = {}
    for s in sources:
        if s not in dev.channels:
            raise SchemaError(f"development table lacks source channel {s}")
        groups.setdefault(CHANNELS[s].device, []).append(s)
    dims = {CHANNELS[s].quality_dim for s in sources}
    if len(dims) != 1:
        raise ConfigError(f"sources {list(sources)} have different quality dimensions")
    clusters, quality, client, impostor = [], [], [], []
    for device, members in groups.items():
        y = np.concatenate([dev.column(s) for s in members])
        lab = np.concatenate([dev.is_client for _ in members])
        clusters.append(device)
        client.append(fit_density(y[lab], density, seed=seed, **density_kw))
        impostor.append(fit_density(y[~lab], density, seed=seed, **density_kw))
        if len(groups) > 1:
            q = np.vstack([dev.qualities[s] for s in members])
            quality.append(gmm_fit(q, quality_components, seed=seed))
    return QualityClusterModel(tuple(clusters), tuple(quality), tuple(client), tuple(impostor))


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


@register
class NaiveLLR(FusionModel):
    """Sum over observed channels of log p(y|C) - log p(y|I)."""

    family = "naive_llr"
    output_range = "log_ratio"

    def __init__(self, channels, client: Sequence, impostor: Sequence, density: str = "gaussian",
                 strategy: str = "drop_term"):
        super().__init__(channels, strategy)
        self.client, self.impostor = tuple(client), tuple(impostor)
        self.density = density

    @classmethod
    def fit(cls, dev, channels=None, density: str = "gaussian", n_components: int = 2, n_bins: int = 20,
            seed: int = 0):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        kw = dict(kind=density, n_components=n_components, n_bins=n_bins, seed=seed)
        client, impostor = [], []
        for c in channels:
            y = dev.column(c)
            client.append(fit_density(y[dev.is_client], **kw))
            impostor.append(fit_density(y[~dev.is_client], **kw))
        return cls(channels, client, impostor, density)

    def terms(self, X: np.ndarray) -> np.ndarray:
        """Per-channel LLR terms; 0 where the score is missing."""
        T = np.zeros_like(X)
        for j in range(len(self.channels)):
            ok = ~np.isnan(X[:, j])
            if ok.any():
                T[ok, j] = channel_llr(self.client[j], self.impostor[j], X[ok, j])
        return T

    def _score(self, X, Q):
        return self.terms(X).sum(axis=1)

    def restrict(self, channels):
        idx = [self.channels.index(c) for c in channels]
        return NaiveLLR(tuple(channels), [self.client[i] for i in idx], [self.impostor[i] for i in idx],
                        self.density, self.strategy)

    def _params(self):
        return {"density": self.density, "client": [m.to_dict() for m in self.client],
                "impostor": [m.to_dict() for m in self.impostor]}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, [density_from_dict(m) for m in p["client"]],
                   [density_from_dict(m) for m in p["impostor"]], p["density"], strategy)


def default_sources(channels: Sequence[str]) -> dict[str, list[str]]:
    return {c: [c] for c in channels}


@register
class BNq(FusionModel):
    """Quality-conditioned naive Bayes: per-slot device clusters, LLRs summed over observed slots."""

    family = "bnq"
    output_range = "log_ratio"
    uses_quality = True

    def __init__(self, channels, qcms: Sequence[QualityClusterModel], strategy: str = "drop_term"):
        super().__init__(channels, strategy)
        self.qcms = tuple(qcms)

    @classmethod
    def fit(cls, dev, channels=None, slot_sources: Mapping[str, Sequence[str]] | None = None,
            density: str = "gaussian", quality_components: int = 1, seed: int = 0, **density_kw):
        channels = tuple(channels or (slot_sources and list(slot_sources)) or dev.channels)
        sources = dict(slot_sources or default_sources(channels))
        check_dev(dev, [s for c in channels for s in sources.get(c, [c])])
        qcms = [fit_quality_clusters(dev, sources.get(c, [c]), density, quality_components, seed, **density_kw)
                for c in channels]
        return cls(channels, qcms)

    def terms(self, X, Q) -> np.ndarray:
        T = np.zeros_like(X)
        for j, c in enumerate(self.channels):
            ok = ~np.isnan(X[:, j])
            if ok.any():
                T[ok, j] = bnq_normalize(self.qcms[j], X[ok, j], Q[c][ok])
        return T

    def _score(self, X, Q):
        return self.terms(X, Q).sum(axis=1)

    def restrict(self, channels):
        return BNq(tuple(channels), [self.qcms[self.channels.index(c)] for c in channels], self.strategy)

    def _params(self):
        return {"qcms": [m.to_dict() for m in self.qcms]}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, [QualityClusterModel.from_dict(m) for m in p["qcms"]], strategy)
