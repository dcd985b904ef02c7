import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biofusion.core import AllMissing, ConfigError, TrainingError
from biofusion.densities import (
    GmmModel,
    HistogramModel,
    MofaModel,
    gmm_fit,
    gmm_logpdf,
    gmm_marginal,
    hist_fit,
    hist_pdf,
    mofa_fit,
    mofa_to_gmm,
)
from oracles import integrate_out, random_gmm


def _std_normal(d):
    return GmmModel(np.ones(1), np.zeros((1, d)), np.eye(d)[None])


def test_single_component_closed_form():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.2], [0, 0, 1.0]])
    m = gmm_fit(X, 1)
    np.testing.assert_allclose(m.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(m.covs[0], np.cov(X, rowvar=False, bias=True), atol=1e-10)


def test_rows_with_missing_excluded():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 2))
    Y = np.vstack([X, [[np.nan, 100.0]]])
    np.testing.assert_allclose(gmm_fit(Y, 1).means, gmm_fit(X, 1).means)


def test_recovers_separated_means():
    rng = np.random.default_rng(2)
    X = np.vstack([rng.normal(-4, 1, (5000, 2)), rng.normal(4, 1, (5000, 2))])
    m = gmm_fit(X, 2, seed=3)
    got = m.means[np.argsort(m.means[:, 0])]
    np.testing.assert_allclose(got, [[-4, -4], [4, 4]], atol=0.1)


def test_fit_errors():
    with pytest.raises(ConfigError):
        gmm_fit(np.ones((5, 2)), 0)
    with pytest.raises(TrainingError):
        gmm_fit(np.empty((0, 2)), 1)
    with pytest.raises(TrainingError):
        gmm_fit(np.full((3, 2), np.nan), 1)


def test_em_monotone():
    rng = np.random.default_rng(4)
    X = np.vstack([rng.normal(0, 1, (300, 3)), rng.normal(2, 0.5, (200, 3))])
    h = np.array(gmm_fit(X, 3, seed=1).history)
    assert h.size > 2
    assert np.all(np.diff(h) >= -1e-8)


def test_marginal_standard_normal():
    v = gmm_logpdf(_std_normal(2), [0.0, np.nan])
    assert v == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    w, mu, cov = np.ones(1), np.zeros((1, 2)), np.eye(2)[None]
    assert math.log(integrate_out(w, mu, cov, [0.0, np.nan])) == pytest.approx(v, abs=1e-6)


def test_full_observation_is_joint():
    from scipy.stats import multivariate_normal
    rng = np.random.default_rng(5)
    w, mu, cov = random_gmm(rng, 3, 2)
    x = rng.normal(size=3)
    ref = math.log(sum(wi * multivariate_normal(m, c).pdf(x) for wi, m, c in zip(w, mu, cov)))
    assert gmm_logpdf(GmmModel(w, mu, cov), x) == pytest.approx(ref, abs=1e-10)


def test_all_missing():
    with pytest.raises(AllMissing):
        gmm_logpdf(_std_normal(2), [np.nan, np.nan])
    out = gmm_logpdf(_std_normal(2), np.array([[np.nan, np.nan], [0.0, 0.0]]))
    assert math.isnan(out[0]) and np.isfinite(out[1])


def test_marginal_integrates_to_one():
    rng = np.random.default_rng(6)
    w, mu, cov = random_gmm(rng, 2, 3)
    m = GmmModel(w, mu, cov)
    t = np.linspace(mu[:, 0].min() - 12, mu[:, 0].max() + 12, 20001)
    X = np.column_stack([t, np.full_like(t, np.nan)])
    assert np.trapezoid(np.exp(gmm_logpdf(m, X)), t) == pytest.approx(1.0, abs=1e-3)


def test_batch_matches_pointwise():
    rng = np.random.default_rng(7)
    m = GmmModel(*random_gmm(rng, 3, 2))
    X = rng.normal(size=(40, 3))
    X[rng.random((40, 3)) < 0.4] = np.nan
    X = X[~np.isnan(X).all(axis=1)]
    batch = gmm_logpdf(m, X)
    np.testing.assert_allclose(batch, [gmm_logpdf(m, x) for x in X], rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_marginal_matches_quadrature(seed, d, k):
    rng = np.random.default_rng(seed)
    w, mu, cov = random_gmm(rng, d, k)
    x = rng.normal(0, 1.5, d)
    mask = rng.random(d) < 0.5
    if mask.all():
        mask[rng.integers(d)] = False
    x[mask] = np.nan
    ref = integrate_out(w, mu, cov, x, n_grid=301)
    assert gmm_logpdf(GmmModel(w, mu, cov), x) == pytest.approx(math.log(ref), abs=1e-3)


def test_gmm_marginal_model():
    rng = np.random.default_rng(8)
    m = GmmModel(*random_gmm(rng, 3, 2))
    x = rng.normal(size=3)
    sub = gmm_marginal(m, [0, 2])
    assert gmm_logpdf(sub, x[[0, 2]]) == pytest.approx(gmm_logpdf(m, [x[0], np.nan, x[2]]), abs=1e-12)


def test_gmm_serialization():
    rng = np.random.default_rng(9)
    m = GmmModel(*random_gmm(rng, 2, 2))
    back = GmmModel.from_dict(json.loads(json.dumps(m.to_dict())))
    x = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(gmm_logpdf(back, x), gmm_logpdf(m, x))
    with pytest.raises(ValueError):
        GmmModel.from_dict({**m.to_dict(), "format_version": 99})


def test_mofa_to_gmm_examples():
    m = MofaModel(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 1)), np.array([0.5, 2.0]))
    np.testing.assert_array_equal(mofa_to_gmm(m).covs[0], np.diag([0.5, 2.0]))
    m = MofaModel(np.ones(1), np.zeros((1, 2)), np.ones((1, 2, 1)), np.ones(2))
    np.testing.assert_array_equal(mofa_to_gmm(m).covs[0], [[2.0, 1.0], [1.0, 2.0]])


def test_mofa_density_agrees_with_gmm():
    rng = np.random.default_rng(10)
    m = MofaModel(np.array([0.3, 0.7]), rng.normal(size=(2, 4)), rng.normal(size=(2, 4, 2)),
                  rng.uniform(0.2, 1.0, 4))
    X = rng.normal(size=(50, 4))
    np.testing.assert_allclose(m.logpdf(X), gmm_logpdf(mofa_to_gmm(m), X), rtol=0, atol=1e-10)


def test_mofa_fit_psd_and_monotone():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(400, 4)) @ rng.normal(size=(4, 4))
    m = mofa_fit(X, 2, 2, seed=0)
    for c in mofa_to_gmm(m).covs:
        assert np.linalg.eigvalsh(c).min() > 0
    assert np.all(np.diff(m.history) >= -1e-8)
    assert np.all(m.psi > 0)


def test_mofa_near_full_gmm():
    rng = np.random.default_rng(12)
    X = rng.multivariate_normal(np.zeros(3), [[2, 0.8, 0.3], [0.8, 1, 0.2], [0.3, 0.2, 0.5]], 4000)
    mofa = mofa_fit(X, 1, 2, max_iter=2000, tol=1e-10)
    full = gmm_fit(X, 1)
    a = mofa.logpdf(X).mean()
    b = gmm_logpdf(full, X).mean()
    assert abs(a - b) <= 0.01 * abs(b)


def test_mofa_factor_bound():
    with pytest.raises(ConfigError):
        mofa_fit(np.random.default_rng(0).normal(size=(20, 2)), 1, 2)


def test_hist_examples():
    h = hist_fit([0.0, 1.0], 2)
    np.testing.assert_array_equal(h.edges, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(h.probs, [0.5, 0.5])
    h1 = hist_fit([0.0, 0.3, 2.0], 1)
    assert hist_pdf(h1, 0.1) == pytest.approx(0.5)
    assert hist_pdf(h1, 1.9) == pytest.approx(0.5)
    with pytest.raises(TrainingError):
        hist_fit([3.0, 3.0], 4)
    assert hist_pdf(h, -5.0) == hist_pdf(h, 0.0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=60), st.integers(1, 30))
def test_hist_normalized(values, n_bins):
    if max(values) <= min(values):
        return
    h = hist_fit(values, n_bins)
    assert np.all(np.diff(h.edges) > 0)
    assert h.probs.sum() == pytest.approx(1.0)
    widths = np.diff(h.edges)
    assert float(np.sum(hist_pdf(h, 0.5 * (h.edges[:-1] + h.edges[1:])) * widths)) == pytest.approx(1.0)
    back = HistogramModel.from_dict(h.to_dict())
    np.testing.assert_array_equal(back.probs, h.probs)
