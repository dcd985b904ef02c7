"""Bayes-rule fusion over class-conditional mixture densities."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import CHANNELS, ScoreTable, TrainingError, minmax_fit
from ..densities import GmmModel, MofaModel, gmm_fit, gmm_logpdf, gmm_marginal, mofa_fit, mofa_to_gmm
from .base import ClassPriors, FusionModel, check_dev, normalized, register, sub_normalizer


def posterior(log_client: np.ndarray, log_impostor: np.ndarray, priors: ClassPriors) -> np.ndarray:
    """P(C | x) from class log-likelihoods."""
    a = np.log(priors.client) + log_client
    b = np.log(priors.impostor) + log_impostor
    return np.exp(a - np.logaddexp(a, b))


def _feature_index(channels: Sequence[str], with_quality: bool) -> dict[str, list[int]]:
    """Column positions of each channel's score (and quality block) in the feature vector."""
    idx = {c: [j] for j, c in enumerate(channels)}
    if with_quality:
        pos = len(channels)
        for c in channels:
            L = CHANNELS[c].quality_dim
            idx[c] = idx[c] + list(range(pos, pos + L))
            pos += L
    return idx


class _BayesBase(FusionModel):
    output_range = "probability"
    strategies = ("marginalize", "median_impute", "minmax_average_fallback")
    exact_restrict = False

    def __init__(self, channels, strategy, normalizer, priors: ClassPriors, medians: np.ndarray, with_quality: bool):
        super().__init__(channels, strategy, normalizer)
        self.priors = priors
        self.medians = np.asarray(medians, dtype=float)
        self.with_quality = with_quality
        self.uses_quality = with_quality

    def _features(self, X, Q) -> np.ndarray:
        if not self.with_quality:
            return X
        return np.hstack([X] + [Q[c] for c in self.channels])

    def _densities(self) -> tuple[GmmModel, GmmModel]:
        raise NotImplementedError

    def _score(self, X, Q):
        F = self._features(X, Q)
        if self.strategy == "median_impute":
            F = np.where(np.isnan(F), self.medians, F)
        client, impostor = self._densities()
        if self.strategy != "minmax_average_fallback":
            return posterior(gmm_logpdf(client, F), gmm_logpdf(impostor, F), self.priors)
        out = np.empty(X.shape[0])
        full = ~np.isnan(X).any(axis=1)
        if full.any():
            out[full] = posterior(gmm_logpdf(client, F[full]), gmm_logpdf(impostor, F[full]), self.priors)
        if (~full).any():
            out[~full] = np.nanmean(normalized(self, X[~full]), axis=1)
        return out

    def _sub_index(self, channels) -> list[int]:
        idx = _feature_index(self.channels, self.with_quality)
        order = [j for c in channels for j in idx[c][:1]]
        if self.with_quality:
            order += [j for c in channels for j in idx[c][1:]]
        return order

    def _base_params(self) -> dict:
        return {
            "priors": [self.priors.client, self.priors.impostor],
            "medians": self.medians.tolist(),
            "with_quality": self.with_quality,
        }


def _fit_inputs(dev: ScoreTable, channels, with_quality: bool, strategy: str):
    F = dev.score_matrix(channels)
    if with_quality:
        F = np.hstack([F] + [dev.qualities[c] for c in channels])
    medians = np.nanmedian(F, axis=0)
    if np.isnan(medians).any():
        raise TrainingError("a feature has no observed development values")
    Fc, Fi = F[dev.is_client], F[~dev.is_client]
    for name, part in (("client", Fc), ("impostor", Fi)):
        if (~np.isnan(part).any(axis=1)).sum() < 2:
            raise TrainingError(f"fewer than 2 complete {name} records")
    return Fc, Fi, medians


@register
class GmmBayes(_BayesBase):
    """Posterior P(C | y) from one full-covariance GMM per class."""

    family = "gmm_bayes"

    def __init__(self, channels, client: GmmModel, impostor: GmmModel, priors=ClassPriors(),
                 strategy="marginalize", medians=None, normalizer=None, with_quality=False):
        super().__init__(channels, strategy, normalizer, priors, medians, with_quality)
        self.client, self.impostor = client, impostor

    @classmethod
    def fit(cls, dev, channels=None, n_components: int = 2, priors=(0.5, 0.5), strategy: str = "marginalize",
            with_quality: bool = False, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            reg_floor: float = 1e-6):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        Fc, Fi, med = _fit_inputs(dev, channels, with_quality, strategy)
        kw = dict(max_iter=max_iter, tol=tol, reg_floor=reg_floor, seed=seed)
        client = gmm_fit(Fc, min(n_components, _complete(Fc)), **kw)
        impostor = gmm_fit(Fi, min(n_components, _complete(Fi)), **kw)
        return cls(channels, client, impostor, ClassPriors(*priors), strategy, med,
                   minmax_fit(dev, channels), with_quality)

    def _densities(self):
        return self.client, self.impostor

    def restrict(self, channels):
        idx = self._sub_index(channels)
        return GmmBayes(tuple(channels), gmm_marginal(self.client, idx), gmm_marginal(self.impostor, idx),
                        self.priors, self.strategy, self.medians[idx],
                        sub_normalizer(self.normalizer, channels), self.with_quality)

    def _params(self):
        return {**self._base_params(), "client": self.client.to_dict(), "impostor": self.impostor.to_dict()}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, GmmModel.from_dict(p["client"]), GmmModel.from_dict(p["impostor"]),
                   ClassPriors(*p["priors"]), strategy, p["medians"], normalizer, p["with_quality"])


@register
class MofaBayes(_BayesBase):
    """Posterior from one mixture of factor analyzers per class."""

    family = "mofa_bayes"

    def __init__(self, channels, client: MofaModel, impostor: MofaModel, priors=ClassPriors(),
                 strategy="median_impute", medians=None, normalizer=None, with_quality=False):
        super().__init__(channels, strategy, normalizer, priors, medians, with_quality)
        self.client, self.impostor = client, impostor
        self._gmms = (mofa_to_gmm(client), mofa_to_gmm(impostor))

    @classmethod
    def fit(cls, dev, channels=None, n_components: int = 2, n_factors: int = 1, priors=(0.5, 0.5),
            strategy: str = "median_impute", with_quality: bool = False, seed: int = 0,
            max_iter: int = 200, tol: float = 1e-6, reg_floor: float = 1e-6):
        channels = tuple(channels or dev.channels)
        check_dev(dev, channels)
        Fc, Fi, med = _fit_inputs(dev, channels, with_quality, strategy)
        kw = dict(n_factors=n_factors, max_iter=max_iter, tol=tol, reg_floor=reg_floor, seed=seed)
        client = mofa_fit(Fc, min(n_components, _complete(Fc)), **kw)
        impostor = mofa_fit(Fi, min(n_components, _complete(Fi)), **kw)
        return cls(channels, client, impostor, ClassPriors(*priors), strategy, med,
                   minmax_fit(dev, channels), with_quality)

    def _densities(self):
        return self._gmms

    def restrict(self, channels):
        # a factor analyzer's marginal keeps the same factors on fewer rows
        idx = self._sub_index(channels)

        def cut(m: MofaModel) -> MofaModel:
            return MofaModel(m.weights, m.means[:, idx], m.loadings[:, idx, :], m.psi[idx])

        return MofaBayes(tuple(channels), cut(self.client), cut(self.impostor), self.priors, self.strategy,
                         self.medians[idx], sub_normalizer(self.normalizer, channels), self.with_quality)

    def _params(self):
        return {**self._base_params(), "client": self.client.to_dict(), "impostor": self.impostor.to_dict()}

    @classmethod
    def _load(cls, channels, strategy, normalizer, p):
        return cls(channels, MofaModel.from_dict(p["client"]), MofaModel.from_dict(p["impostor"]),
                   ClassPriors(*p["priors"]), strategy, p["medians"], normalizer, p["with_quality"])


def _complete(F: np.ndarray) -> int:
    return int((~np.isnan(F).any(axis=1)).sum())
