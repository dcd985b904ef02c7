"""Verification error rates.

An access is accepted iff its fused score is strictly above the threshold.
NaN fused scores (no usable channel) are always rejected.

FAR and FRR are step functions of the threshold. Where interpolation is
requested, both curves are linearly interpolated between *knots*: the
midpoints between adjacent distinct scores, plus one knot below the lowest
and one above the highest score, each half a gap away. At every knot the
interpolated rates equal the counted rates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

CI_METHOD = "binomial-hter"


def _split(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    cli, imp = s[y], s[~y]
    if cli.size == 0 or imp.size == 0:
        raise ValueError("both client and impostor scores are required")
    return cli, imp


class _Curves:
    """Counted FAR/FRR over a sorted score population."""

    def __init__(self, scores, labels):
        cli, imp = _split(scores, labels)
        self.n_client, self.n_impostor = cli.size, imp.size
        self.cli = np.sort(cli[~np.isnan(cli)])
        self.imp = np.sort(imp[~np.isnan(imp)])

    def far(self, t):
        return (self.imp.size - np.searchsorted(self.imp, t, side="right")) / self.n_impostor

    def frr(self, t):
        accepted = self.cli.size - np.searchsorted(self.cli, t, side="right")
        return (self.n_client - accepted) / self.n_client

    def knots(self) -> np.ndarray:
        u = np.unique(np.concatenate([self.cli, self.imp]))
        if u.size == 0:
            raise ValueError("no finite scores")
        if u.size == 1:
            return np.array([u[0] - 0.5, u[0] + 0.5])
        mids = 0.5 * (u[:-1] + u[1:])
        return np.concatenate([[u[0] - 0.5 * (u[1] - u[0])], mids, [u[-1] + 0.5 * (u[-1] - u[-2])]])


def far_frr(scores, labels, threshold: float, interpolate: bool = False) -> tuple[float, float]:
    """False acceptance and false rejection rates at ``threshold``."""
    c = _Curves(scores, labels)
    if not interpolate:
        return float(c.far(threshold)), float(c.frr(threshold))
    k = c.knots()
    return float(np.interp(threshold, k, c.far(k))), float(np.interp(threshold, k, c.frr(k)))


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and the (interpolated) threshold where FAR = FRR."""
    c = _Curves(scores, labels)
    k = c.knots()
    far, frr = c.far(k), c.frr(k)
    d = far - frr
    if d[0] < 0:
        return float(0.5 * (far[0] + frr[0])), float(k[0])
    j = int(np.argmax(d <= 0))
    if j == 0 or d[j] == 0:
        return float(far[j]), float(k[j])
    a = d[j - 1] / (d[j - 1] - d[j])
    e = far[j - 1] + a * (far[j] - far[j - 1])
    return float(e), float(k[j - 1] + a * (k[j] - k[j - 1]))


def hter(scores, labels, threshold: float, interpolate: bool = False) -> float:
    far, frr = far_frr(scores, labels, threshold, interpolate=interpolate)
    return 0.5 * (far + frr)


def det_points(scores, labels) -> np.ndarray:
    """(FAR, FRR) pairs, one per knot threshold in increasing order.

    The accept-all point (1, 0) and reject-all point (0, 1) are included.
    """
    c = _Curves(scores, labels)
    k = c.knots()
    pts = np.column_stack([c.far(k), c.frr(k)])
    if tuple(pts[0]) != (1.0, 0.0):
        pts = np.vstack([[1.0, 0.0], pts])
    if tuple(pts[-1]) != (0.0, 1.0):
        pts = np.vstack([pts, [0.0, 1.0]])
    return pts


def hter_ci(far: float, frr: float, n_impostor: int, n_client: int, confidence: float = 0.9) -> float:
    """Half-width of the binomial-variance confidence interval on HTER."""
    if n_impostor <= 0 or n_client <= 0:
        raise ValueError("counts must be positive")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    sigma = math.sqrt(far * (1 - far) / (4 * n_impostor) + frr * (1 - frr) / (4 * n_client))
    return float(norm.ppf(0.5 * (1 + confidence)) * sigma)


def hter_variation(hters) -> float:
    """Population standard deviation of HTER across missing-data levels."""
    h = np.asarray(hters, dtype=float)
    if h.size < 2:
        raise ValueError("need at least two levels")
    # centring on the first value keeps a constant sequence at exactly 0
    return float((h - h[0]).std())


@dataclass
class EvalReport:
    far: float
    frr: float
    hter: float
    threshold: float
    eer: float
    eer_threshold: float
    ci_halfwidth: float
    confidence: float
    n_client: int
    n_impostor: int
    det: list = field(default_factory=list, repr=False)
    ci_method: str = CI_METHOD
    cost: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, threshold: float, confidence: float = 0.9, cost: float | None = None) -> EvalReport:
    """Bundle FAR/FRR/HTER at ``threshold`` with EER, DET and the HTER interval."""
    c = _Curves(scores, labels)
    far, frr = far_frr(scores, labels, threshold)
    e, t = eer(scores, labels)
    return EvalReport(
        far=far,
        frr=frr,
        hter=0.5 * (far + frr),
        threshold=float(threshold),
        eer=e,
        eer_threshold=t,
        ci_halfwidth=hter_ci(far, frr, c.n_impostor, c.n_client, confidence),
        confidence=confidence,
        n_client=c.n_client,
        n_impostor=c.n_impostor,
        det=det_points(scores, labels).tolist(),
        cost=cost,
    )
