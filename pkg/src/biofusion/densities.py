"""Density estimators backing the generative fusion classifiers.

Missing coordinates are NaN. Gaussian mixtures evaluate missing coordinates
by marginalization: the marginal of a mixture over the observed indices
keeps the weights and restricts each mean and covariance to those indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .core import AllMissing, ConfigError, TrainingError

FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Gaussian mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "kind": "gmm",
            "format_version": FORMAT_VERSION,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        _check_version(d, "gmm")
        return cls(np.array(d["weights"], float), np.array(d["means"], float), np.array(d["covs"], float))


def _check_version(d: dict, kind: str) -> None:
    if d.get("kind") != kind:
        raise ValueError(f"expected a serialized {kind}, got {d.get('kind')!r}")
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {d.get('format_version')!r}")


def floor_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov
    return (V * np.maximum(w, floor)) @ V.T


def _gauss_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    diff = solve_triangular(L, (X - mean).T, lower=True)
    maha = np.sum(diff**2, axis=0)
    return -0.5 * (X.shape[1] * _LOG_2PI + maha) - np.sum(np.log(np.diag(L)))


def _component_logpdf(X, weights, means, covs) -> np.ndarray:
    """(n, K) matrix of log w_c + log N(x | mu_c, Sigma_c)."""
    out = np.empty((X.shape[0], len(weights)))
    for c in range(len(weights)):
        out[:, c] = np.log(weights[c]) + _gauss_logpdf(X, means[c], covs[c])
    return out


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, n_iter: int = 25) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations; returns labels."""
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
    C = np.array(centers)
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        for j in range(k):
            members = X[new == j]
            C[j] = members.mean(axis=0) if len(members) else X[rng.integers(n)]
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def _complete_rows(data) -> np.ndarray:
    X = np.asarray(data, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X[~np.isnan(X).any(axis=1)]


def _validate_fit(X: np.ndarray, n_components: int) -> None:
    if n_components < 1:
        raise ConfigError("n_components must be at least 1")
    if X.shape[0] == 0:
        raise TrainingError("no complete rows to fit")
    if X.shape[0] < n_components:
        raise TrainingError(f"{X.shape[0]} complete rows cannot support {n_components} components")


def gmm_fit(
    data,
    n_components: int = 2,
    max_iter: int = 200,
    tol: float = 1e-6,
    reg_floor: float = 1e-6,
    seed: int = 0,
) -> GmmModel:
    """Fit a full-covariance GMM by EM.

    Rows containing NaN are dropped. Initialization is k-means++ with the given
    seed; iterations stop once the mean log-likelihood gains less than ``tol``.
    The per-iteration mean log-likelihood is kept in ``model.history``.
    """
    X = _complete_rows(data)
    _validate_fit(X, n_components)
    n, d = X.shape
    rng = np.random.default_rng(seed)
    if n_components == 1:
        resp = np.ones((n, 1))
    else:
        labels = kmeans(X, n_components, rng)
        resp = np.eye(n_components)[labels]

    history: list[float] = []
    for _ in range(max_iter + 1):
        # M-step
        Nk = resp.sum(axis=0) + 1e-12
        weights = Nk / Nk.sum()
        means = (resp.T @ X) / Nk[:, None]
        covs = np.empty((n_components, d, d))
        for c in range(n_components):
            diff = X - means[c]
            covs[c] = floor_eigenvalues((resp[:, c, None] * diff).T @ diff / Nk[c], reg_floor)
        # E-step
        logp = _component_logpdf(X, weights, means, covs)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        history.append(ll)
        if n_components == 1:
            break
        if len(history) > 1 and ll - history[-2] < tol:
            break
        resp = np.exp(logp - norm[:, None])
    return GmmModel(weights, means, covs, tuple(history))


def gmm_logpdf(model: GmmModel, x) -> float | np.ndarray:
    """Log density of the marginal mixture over the observed coordinates.

    ``x`` is a vector or an ``(n, d)`` matrix with NaN for missing entries. A
    vector with no observed entry raises ``AllMissing``; in matrix mode such
    rows yield NaN.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.dim:
        raise ValueError(f"expected {model.dim} coordinates, got {X.shape[1]}")
    observed = ~np.isnan(X)
    if single and not observed.any():
        raise AllMissing("all coordinates are missing")
    out = np.full(X.shape[0], np.nan)
    if observed.all():
        comp = _component_logpdf(X, model.weights, model.means, model.covs)
        out = logsumexp(comp, axis=1)
        return float(out[0]) if single else out
    # one integer code per missingness pattern
    if X.shape[1] <= 62:
        codes = observed.astype(np.int64) @ (np.int64(1) << np.arange(X.shape[1], dtype=np.int64))
    else:
        codes = np.unique(observed, axis=0, return_inverse=True)[1].reshape(-1)
    logw = np.log(model.weights)
    for code in np.unique(codes):
        rows = codes == code
        idx = np.flatnonzero(observed[np.argmax(rows)])
        if idx.size == 0:
            continue
        Xo = X[np.ix_(rows, idx)]
        comp = np.empty((Xo.shape[0], model.n_components))
        for c in range(model.n_components):
            cov = model.covs[c][np.ix_(idx, idx)]
            comp[:, c] = logw[c] + _gauss_logpdf(Xo, model.means[c, idx], cov)
        out[rows] = logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def gmm_marginal(model: GmmModel, idx) -> GmmModel:
    idx = np.asarray(idx)
    return GmmModel(model.weights, model.means[:, idx], model.covs[:, idx][:, :, idx])


# ---------------------------------------------------------------------------
# Mixture of factor analyzers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MofaModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    loadings: np.ndarray  # (K, d, p)
    psi: np.ndarray  # (d,) shared diagonal noise
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[2]

    def logpdf(self, X) -> np.ndarray:
        """Complete-data log density via the Woodbury identity."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d, p = self.means.shape[1], self.n_factors
        inv_psi = 1.0 / self.psi
        comp = np.empty((X.shape[0], len(self.weights)))
        for c in range(len(self.weights)):
            Lam = self.loadings[c]
            M = np.eye(p) + (Lam.T * inv_psi) @ Lam
            diff = X - self.means[c]
            t = (diff * inv_psi) @ Lam
            maha = np.sum(diff**2 * inv_psi, axis=1) - np.sum(t * np.linalg.solve(M, t.T).T, axis=1)
            logdet = np.sum(np.log(self.psi)) + np.linalg.slogdet(M)[1]
            comp[:, c] = np.log(self.weights[c]) - 0.5 * (d * _LOG_2PI + logdet + maha)
        return logsumexp(comp, axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": "mofa",
            "format_version": FORMAT_VERSION,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "loadings": self.loadings.tolist(),
            "psi": self.psi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MofaModel":
        _check_version(d, "mofa")
        return cls(
            np.array(d["weights"], float),
            np.array(d["means"], float),
            np.array(d["loadings"], float),
            np.array(d["psi"], float),
        )


def mofa_to_gmm(model: MofaModel) -> GmmModel:
    """Equivalent GMM with covariances ``Lambda Lambda^T + Psi``."""
    covs = np.einsum("kdp,kep->kde", model.loadings, model.loadings) + np.diag(model.psi)[None]
    return GmmModel(model.weights.copy(), model.means.copy(), covs)


def mofa_fit(
    data,
    n_components: int = 2,
    n_factors: int = 1,
    max_iter: int = 200,
    tol: float = 1e-6,
    reg_floor: float = 1e-6,
    seed: int = 0,
) -> MofaModel:
    """EM for a mixture of factor analyzers with one shared diagonal noise.

    Loadings and means are updated jointly through the augmented factor
    ``[z; 1]`` so every iteration is an exact EM step.
    """
    X = _complete_rows(data)
    _validate_fit(X, n_components)
    n, d = X.shape
    if not 1 <= n_factors < d:
        raise ConfigError(f"n_factors must lie in [1, {d - 1}] for {d}-dimensional data")
    p = n_factors
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=int) if n_components == 1 else kmeans(X, n_components, rng)

    weights = np.bincount(labels, minlength=n_components) / n + 1e-12
    weights = weights / weights.sum()
    means = np.array([X[labels == c].mean(axis=0) if np.any(labels == c) else X.mean(axis=0) for c in range(n_components)])
    psi = np.maximum(0.5 * X.var(axis=0), reg_floor)
    loadings = np.empty((n_components, d, p))
    for c in range(n_components):
        members = X[labels == c]
        S = np.cov(members, rowvar=False, bias=True) if len(members) > 1 else np.diag(X.var(axis=0))
        w, V = np.linalg.eigh(np.atleast_2d(S))
        top = np.argsort(w)[::-1][:p]
        loadings[c] = V[:, top] * np.sqrt(np.maximum(w[top] - psi.mean(), 1e-3))

    history: list[float] = []
    for _ in range(max_iter):
        model = MofaModel(weights, means, loadings, psi)
        gm = mofa_to_gmm(model)
        logp = _component_logpdf(X, gm.weights, gm.means, gm.covs)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        history.append(ll)
        if len(history) > 1 and ll - history[-2] < tol:
            break
        resp = np.exp(logp - norm[:, None])

        new_loadings = np.empty_like(loadings)
        new_means = np.empty_like(means)
        psi_acc = np.zeros(d)
        for c in range(n_components):
            h = resp[:, c]
            Lam = loadings[c]
            beta = np.linalg.solve(gm.covs[c], Lam).T  # (p, d) = Lam^T Sigma^-1
            Ez = (X - means[c]) @ beta.T  # (n, p)
            S0 = h.sum() + 1e-12
            hEz = h[:, None] * Ez
            A = np.hstack([X.T @ hEz, (h @ X)[:, None]])  # (d, p+1)
            Ezz = S0 * (np.eye(p) - beta @ Lam) + Ez.T @ hEz
            sEz = hEz.sum(axis=0)
            B = np.block([[Ezz, sEz[:, None]], [sEz[None, :], np.array([[S0]])]])
            Lt = np.linalg.solve(B.T, A.T).T  # A B^-1
            new_loadings[c] = Lt[:, :p]
            new_means[c] = Lt[:, p]
            psi_acc += (h[:, None] * X * X).sum(axis=0) - np.sum(Lt * A, axis=1)
        weights = resp.sum(axis=0) / n + 1e-12
        weights = weights / weights.sum()
        loadings, means = new_loadings, new_means
        psi = np.maximum(psi_acc / n, reg_floor)
    return MofaModel(weights, means, loadings, psi, tuple(history))


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HistogramModel:
    edges: np.ndarray  # (B+1,), strictly increasing
    probs: np.ndarray  # (B,), sums to 1

    def to_dict(self) -> dict:
        return {
            "kind": "histogram",
            "format_version": FORMAT_VERSION,
            "edges": self.edges.tolist(),
            "probs": self.probs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HistogramModel":
        _check_version(d, "histogram")
        return cls(np.array(d["edges"], float), np.array(d["probs"], float))


def hist_fit(values, n_bins: int = 20) -> HistogramModel:
    """Equal-width histogram over [min, max] with add-one smoothing."""
    v = np.asarray(values, dtype=float).ravel()
    v = v[~np.isnan(v)]
    if n_bins < 1:
        raise ConfigError("n_bins must be at least 1")
    if v.size == 0:
        raise TrainingError("histogram needs at least one value")
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise TrainingError("constant values give a single degenerate bin")
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    probs = (counts + 1.0) / (v.size + n_bins)
    return HistogramModel(edges, probs)


def hist_pdf(model: HistogramModel, x):
    """Density at ``x``; points outside the support use the nearest edge bin."""
    xa = np.asarray(x, dtype=float)
    B = len(model.probs)
    idx = np.clip(np.searchsorted(model.edges, xa, side="right") - 1, 0, B - 1)
    widths = np.diff(model.edges)
    out = model.probs[idx] / widths[idx]
    out = np.where(np.isnan(xa), np.nan, out)
    return float(out) if out.ndim == 0 else out
