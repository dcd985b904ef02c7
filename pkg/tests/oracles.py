"""Reference computations that share no code with the library."""

import itertools

import numpy as np
from scipy.stats import multivariate_normal


def random_gmm(rng, d, k):
    weights = rng.dirichlet(np.ones(k))
    means = rng.normal(0, 1.5, (k, d))
    covs = []
    for _ in range(k):
        A = rng.normal(0, 0.7, (d, d))
        covs.append(A @ A.T + 0.3 * np.eye(d))
    return weights, means, np.array(covs)


def joint_pdf(weights, means, covs, pts):
    return sum(w * multivariate_normal(m, c).pdf(pts) for w, m, c in zip(weights, means, covs))


def integrate_out(weights, means, covs, x, n_grid=801):
    """Trapezoid integral of the joint density over the NaN coordinates of ``x``."""
    x = np.asarray(x, dtype=float)
    miss = np.flatnonzero(np.isnan(x))
    if miss.size == 0:
        return float(np.atleast_1d(joint_pdf(weights, means, covs, x[None]))[0])
    axes = []
    for j in miss:
        sd = np.sqrt(covs[:, j, j]).max()
        axes.append(np.linspace(means[:, j].min() - 10 * sd, means[:, j].max() + 10 * sd, n_grid))
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.tile(x, (grids[0].size, 1))
    for g, j in zip(grids, miss):
        pts[:, j] = g.ravel()
    vals = np.atleast_1d(joint_pdf(weights, means, covs, pts)).reshape(grids[0].shape)
    for ax in reversed(axes):
        vals = np.trapezoid(vals, ax, axis=-1)
    return float(vals)


def brute_force_eer(scores, labels, n_grid=100_000):
    """EER from counted rates on a dense threshold grid.

    At the first grid point where FAR - FRR changes sign, the crossing of the
    segment joining the two bracketing (FAR, FRR) operating points with the
    diagonal is returned.
    """
    s = np.asarray(scores, float)
    y = np.asarray(labels, bool)
    imp, cli = np.sort(s[~y]), np.sort(s[y])
    span = s.max() - s.min() + 1.0
    t = np.linspace(s.min() - span, s.max() + span, n_grid)
    far = (imp.size - np.searchsorted(imp, t, side="right")) / imp.size
    frr = np.searchsorted(cli, t, side="right") / cli.size
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(far[i])
    a = d[i - 1] / (d[i - 1] - d[i])
    return float(far[i - 1] + a * (far[i] - far[i - 1]))


def dempster_enumerate(scores):
    """Dempster's rule by explicit intersection over the power set of {C, I}."""
    frame = [frozenset(), frozenset("C"), frozenset("I"), frozenset("CI")]
    m = {frozenset("CI"): 1.0}
    total_conflict = 0.0
    for y in scores:
        e = {frozenset("C"): y, frozenset("CI"): 1.0 - y}
        out = dict.fromkeys(frame, 0.0)
        for (a, ma), (b, mb) in itertools.product(m.items(), e.items()):
            out[a & b] += ma * mb
        k = out.pop(frozenset())
        total_conflict += k
        m = {s: v / (1.0 - k) for s, v in out.items()}
    return m, total_conflict


def central_gradient(f, theta, h=1e-6):
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g
