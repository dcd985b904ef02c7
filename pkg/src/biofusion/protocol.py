"""Evaluation campaigns: cost-sensitive subset search, cross-device quality, missing data."""

from __future__ import annotations

import hashlib
import io
import itertools
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    CROSS_VARIANT,
    FUSION_CHANNELS,
    QUALITY_SLOTS,
    ClassLabel,
    ConfigError,
    ScoreTable,
    SchemaError,
    dumps,
)
from .densities import floor_eigenvalues
from .fusion import FAMILIES, FusionModel, train
from .metrics import EvalReport, eer, evaluate, far_frr
from .sequential import CostModel, channel_cost

CURVE_KINDS = ("dev_cv_eer", "apriori_hter", "aposteriori_hter", "aposteriori_eer")
COMBINATIONS = (
    ("no_mismatch", ("fnf1", "fo1", "fo2", "fo3")),
    ("face_mismatch", ("xfa1", "fo1", "fo2", "fo3")),
    ("finger_mismatch", ("fnf1", "xft1", "xft2", "xft3")),
    ("both_mismatch", ("xfa1", "xft1", "xft2", "xft3")),
)
DEVICE_AWARE = ("bnq", "logreg_device")


# ---------------------------------------------------------------------------
# Subsets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ChannelSubset:
    """Non-empty channel subset; ordering is by size, then channel order within the universe."""

    key: tuple[int, tuple[int, ...]] = field(repr=False)
    channels: tuple[str, ...] = field(compare=False)
    cost: float = field(compare=False)
    mask: int = field(compare=False)

    @classmethod
    def of(cls, channels: Sequence[str], universe: Sequence[str] = FUSION_CHANNELS,
           cost_model: CostModel = CostModel()) -> "ChannelSubset":
        idx = tuple(sorted(universe.index(c) for c in channels))
        if not idx:
            raise ConfigError("a channel subset cannot be empty")
        chans = tuple(universe[i] for i in idx)
        return cls((len(idx), idx), chans, channel_cost(chans, cost_model), sum(1 << i for i in idx))

    @property
    def label(self) -> str:
        return "+".join(self.channels)


def enumerate_subsets(cost_model: CostModel = CostModel(), channels: Sequence[str] = FUSION_CHANNELS
                      ) -> list[ChannelSubset]:
    """All 2^d - 1 non-empty subsets, sorted by size then channel order."""
    channels = tuple(channels)
    out = [
        ChannelSubset.of(combo, channels, cost_model)
        for r in range(1, len(channels) + 1)
        for combo in itertools.combinations(channels, r)
    ]
    return sorted(out)


def distinct_costs(subsets: Sequence[ChannelSubset]) -> list[float]:
    return sorted({s.cost for s in subsets})


# ---------------------------------------------------------------------------
# Missing-value injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MissingPlan:
    """Nested deletion levels. ``impostor_levels`` overrides the impostor class's ratios."""

    levels: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4)
    seed: int = 0
    impostor_levels: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if self.impostor_levels is not None:
            object.__setattr__(self, "impostor_levels", tuple(float(v) for v in self.impostor_levels))
            if len(self.impostor_levels) != len(self.levels):
                raise ConfigError("impostor_levels must pair up with levels")
        for v in self.levels + (self.impostor_levels or ()):
            if not 0.0 <= v <= 1.0:
                raise ConfigError("missing levels must lie in [0, 1]")

    def levels_for(self, label: ClassLabel) -> tuple[float, ...]:
        if label is ClassLabel.IMPOSTOR and self.impostor_levels is not None:
            return self.impostor_levels
        return self.levels

    def masks(self, n: int, d: int, label: ClassLabel = ClassLabel.CLIENT) -> list[np.ndarray]:
        """One (n, d) boolean deletion mask per level; larger levels contain smaller ones."""
        code = 0 if label is ClassLabel.CLIENT else 1
        rng = np.random.default_rng([self.seed, code])
        order = rng.permutation(n * d)
        out = []
        for v in self.levels_for(label):
            m = np.zeros(n * d, dtype=bool)
            m[order[: int(round(v * d * n))]] = True
            out.append(m.reshape(n, d))
        return out


def inject_missing(table: ScoreTable, plan: MissingPlan, label: ClassLabel | None = None) -> list[ScoreTable]:
    """One table per plan level with the masked cells (and their quality vectors) deleted.

    ``label`` restricts injection to one class; by default each class gets its
    own independent masks at the same level.
    """
    if table.partition != "evaluation":
        raise ConfigError("missing values are injected into the evaluation partition only")
    labels = [label] if label is not None else [ClassLabel.CLIENT, ClassLabel.IMPOSTOR]
    d = len(table.channels)
    per_level = [np.zeros((len(table), d), dtype=bool) for _ in plan.levels]
    for lab in labels:
        rows = np.flatnonzero(table.is_client == (lab is ClassLabel.CLIENT))
        for k, m in enumerate(plan.masks(rows.size, d, lab)):
            per_level[k][rows] = m
    out = []
    for mask in per_level:
        scores = np.where(mask, np.nan, table.scores)
        quals = {c: np.where(mask[:, [j]], np.nan, table.qualities[c]) for j, c in enumerate(table.channels)}
        out.append(table.replace(scores=scores, qualities=quals))
    return out


# ---------------------------------------------------------------------------
# Cross-validated subset selection
# ---------------------------------------------------------------------------


def _subset_model(base: FusionModel | None, family: str, train_table: ScoreTable, subset: ChannelSubset,
                  config: Mapping) -> FusionModel:
    if base is not None:
        try:
            return base.restrict(subset.channels)
        except NotImplementedError:
            pass
    return train(family, train_table, subset.channels, **config)


def _supports_restrict(family: str) -> bool:
    return FAMILIES[family].restrict is not FusionModel.restrict


def _universe(subsets: Sequence[ChannelSubset]) -> list[str]:
    seen: dict[str, None] = {}
    for s in sorted(subsets):
        seen.update(dict.fromkeys(s.channels))
    return list(seen)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _safe_eer(scores, labels) -> float:
    lab = np.asarray(labels, dtype=bool)
    if lab.all() or not lab.any():
        return math.nan
    return eer(scores, lab)[0]


def crossval_scores(dev: ScoreTable, family: str, subsets: Sequence[ChannelSubset], config: Mapping | None = None,
                    workers: int = 1) -> dict[ChannelSubset, float]:
    """Mean two-fold EER per subset, folds being the two sessions."""
    config = dict(config or {})
    universe = _universe(subsets)
    folds = []
    for tr, te in (("S1", "S2"), ("S2", "S1")):
        a, b = dev.session_subset(tr), dev.session_subset(te)
        if a.is_client.all() or not a.is_client.any() or b.is_client.all() or not b.is_client.any():
            warnings.warn(f"fold {tr}->{te} lacks a class; every subset is skipped", stacklevel=2)
            return {}
        base = train(family, a, universe, **config) if _supports_restrict(family) else None
        folds.append((a, b, base))

    def one(subset: ChannelSubset) -> float:
        errs = []
        for a, b, base in folds:
            model = _subset_model(base, family, a, subset, config)
            errs.append(_safe_eer(model.score(b), b.is_client))
        return float(np.mean(errs))

    return dict(zip(subsets, _map(one, list(subsets), workers)))


def best_per_cost(criteria: Mapping[ChannelSubset, float]) -> dict[float, ChannelSubset]:
    """Argmin subset per distinct cost; ties go to the smaller subset, then channel order."""
    best: dict[float, ChannelSubset] = {}
    for s in sorted(criteria):
        v = criteria[s]
        if math.isnan(v):
            continue
        cur = best.get(s.cost)
        if cur is None or v < criteria[cur]:
            best[s.cost] = s
    return dict(sorted(best.items()))


def crossval_select(dev: ScoreTable, family: str, subsets: Sequence[ChannelSubset] | None = None,
                    config: Mapping | None = None, workers: int = 1) -> dict[float, ChannelSubset]:
    subsets = list(subsets or enumerate_subsets())
    return best_per_cost(crossval_scores(dev, family, subsets, config, workers))


# ---------------------------------------------------------------------------
# Cost protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetResult:
    subset: ChannelSubset
    dev_criterion: float
    threshold: float
    eval_hter: float
    eval_eer: float

    @property
    def cost(self) -> float:
        return self.subset.cost


def evaluate_subsets(dev: ScoreTable, ev: ScoreTable, family: str, subsets: Sequence[ChannelSubset],
                     config: Mapping | None = None, criteria: Mapping[ChannelSubset, float] | None = None,
                     workers: int = 1) -> list[SubsetResult]:
    """Per subset: dev-EER threshold, evaluation HTER at that threshold, evaluation EER."""
    config = dict(config or {})
    if criteria is None:
        criteria = crossval_scores(dev, family, subsets, config, workers)
    universe = _universe(subsets)
    base = train(family, dev, universe, **config) if _supports_restrict(family) else None

    def one(subset: ChannelSubset) -> SubsetResult:
        model = _subset_model(base, family, dev, subset, config)
        _, thr = eer(model.score(dev), dev.is_client)
        s = model.score(ev)
        far, frr = far_frr(s, ev.is_client, thr)
        return SubsetResult(subset, criteria.get(subset, math.nan), thr, 0.5 * (far + frr), eer(s, ev.is_client)[0])

    return _map(one, list(subsets), workers)


def rank_curve(results: Sequence[SubsetResult], k: int = 1) -> dict[str, list[tuple[float, float, str]]]:
    """Per distinct cost, one (cost, error, subset label) point for each curve kind.

    ``apriori_hter`` is the best evaluation HTER among the ``k`` subsets with
    the lowest development criterion at that cost.
    """
    if k < 1:
        raise ConfigError("rank must be at least 1")
    by_cost: dict[float, list[SubsetResult]] = {}
    for r in results:
        by_cost.setdefault(r.cost, []).append(r)
    curves: dict[str, list[tuple[float, float, str]]] = {kind: [] for kind in CURVE_KINDS}
    for cost in sorted(by_cost):
        group = sorted(by_cost[cost], key=lambda r: r.subset)
        ranked = sorted((r for r in group if not math.isnan(r.dev_criterion)),
                        key=lambda r: (r.dev_criterion, r.subset))
        if ranked:
            curves["dev_cv_eer"].append((cost, ranked[0].dev_criterion, ranked[0].subset.label))
            top = min(ranked[:k], key=lambda r: (r.eval_hter, r.subset))
            curves["apriori_hter"].append((cost, top.eval_hter, top.subset.label))
        best = min(group, key=lambda r: (r.eval_hter, r.subset))
        curves["aposteriori_hter"].append((cost, best.eval_hter, best.subset.label))
        best = min(group, key=lambda r: (r.eval_eer, r.subset))
        curves["aposteriori_eer"].append((cost, best.eval_eer, best.subset.label))
    return curves


def run_cost_protocol(dev: ScoreTable, ev: ScoreTable, family: str, config: Mapping | None = None,
                      cost_model: CostModel = CostModel(), workers: int = 1, k: int = 1):
    subsets = enumerate_subsets(cost_model)
    criteria = crossval_scores(dev, family, subsets, config, workers)
    results = evaluate_subsets(dev, ev, family, subsets, config, criteria, workers)
    return results, rank_curve(results, k)


def cost_curves_csv(curves: Mapping[str, Sequence[tuple[float, float, str]]]) -> str:
    out = io.StringIO()
    out.write("cost,kind,error,subset\n")
    for kind in CURVE_KINDS:
        for cost, err, label in curves.get(kind, []):
            out.write(f"{cost!r},{kind},{float(err)!r},{label}\n")
    return out.getvalue()


def subset_results_csv(results: Sequence[SubsetResult]) -> str:
    out = io.StringIO()
    out.write("mask,cost,dev_criterion,threshold,eval_hter,eval_eer,subset\n")
    for r in sorted(results, key=lambda r: r.subset):
        out.write(f"{r.subset.mask},{r.cost!r},{r.dev_criterion!r},{r.threshold!r},"
                  f"{r.eval_hter!r},{r.eval_eer!r},{r.subset.label}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Cross-device quality protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceMixAssignment:
    combination: np.ndarray  # (n,) index into COMBINATIONS
    weights: tuple[float, float, float, float]
    seed: int

    def to_dict(self) -> dict:
        body = {
            "combinations": [name for name, _ in COMBINATIONS],
            "sources": {name: list(src) for name, src in COMBINATIONS},
            "weights": list(self.weights),
            "seed": self.seed,
            "assignment": self.combination.tolist(),
        }
        digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
        return {**body, "sha256": digest}


def assign_devices(table: ScoreTable, weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25), seed: int = 0,
                   oracle_path: str | Path | None = None) -> tuple[ScoreTable, DeviceMixAssignment]:
    """Draw one device combination per record and emit the four unlabeled slots.

    The slots keep the same-device labels (fnf1, fo1, fo2, fo3); which device
    actually produced each value is only in the returned assignment and the
    optional oracle file.
    """
    need = [c for c in QUALITY_SLOTS + tuple(CROSS_VARIANT.values()) if c not in table.channels]
    if need:
        raise SchemaError(f"quality protocol needs same- and cross-device channels; missing {need}")
    w = np.asarray(weights, dtype=float)
    if w.shape != (4,) or (w < 0).any() or w.sum() <= 0:
        raise ConfigError("weights must be four non-negative numbers with a positive sum")
    w = w / w.sum()
    rng = np.random.default_rng(seed)
    combo = rng.choice(4, size=len(table), p=w)
    scores = np.empty((len(table), len(QUALITY_SLOTS)))
    quals = {c: np.empty_like(table.qualities[c]) for c in QUALITY_SLOTS}
    for k, (_, sources) in enumerate(COMBINATIONS):
        rows = combo == k
        for j, (slot, src) in enumerate(zip(QUALITY_SLOTS, sources)):
            scores[rows, j] = table.column(src)[rows]
            quals[slot][rows] = table.qualities[src][rows]
    out = table.replace(scores=scores, qualities=quals, channels=QUALITY_SLOTS)
    assignment = DeviceMixAssignment(combo, tuple(float(v) for v in w), seed)
    if oracle_path is not None:
        Path(oracle_path).write_text(dumps(assignment.to_dict()))
    return out, assignment


def slot_sources() -> dict[str, list[str]]:
    return {c: [c, CROSS_VARIANT[c]] for c in QUALITY_SLOTS}


def run_quality_protocol(dev: ScoreTable, ev: ScoreTable, family: str, config: Mapping | None = None,
                         weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25), seed: int = 0,
                         confidence: float = 0.9) -> EvalReport:
    """Train on development data and evaluate on a device-mixed evaluation table.

    Device-aware families learn one cluster per device from the labelled
    same- and cross-device development channels. Every other family trains
    on a development table mixed with the same weights.
    """
    config = dict(config or {})
    ev_mix, _ = assign_devices(ev, weights, seed)
    if family in DEVICE_AWARE:
        model = train(family, dev, QUALITY_SLOTS, slot_sources=slot_sources(), **config)
        dev_mix, _ = assign_devices(dev, weights, seed + 1)
    else:
        dev_mix, _ = assign_devices(dev, weights, seed + 1)
        model = train(family, dev_mix, QUALITY_SLOTS, **config)
    _, thr = eer(model.score(dev_mix), dev_mix.is_client)
    report = evaluate(model.score(ev_mix), ev_mix.is_client, thr, confidence)
    if not FAMILIES[family].uses_quality and not getattr(model, "uses_quality", False):
        report.notes.append("quality-blind model evaluated under the quality protocol")
    return report


# ---------------------------------------------------------------------------
# Missing-data protocol
# ---------------------------------------------------------------------------


def run_missing_protocol(dev: ScoreTable, ev: ScoreTable, family: str, config: Mapping | None = None,
                         plan: MissingPlan = MissingPlan(), channels: Sequence[str] = FUSION_CHANNELS,
                         workers: int = 1) -> dict[str, list[float]]:
    """HTER per level (0 first, then the plan's levels) for the fused system and each single channel.

    Thresholds come from the development set; injection touches only the
    evaluation set.
    """
    config = dict(config or {})
    channels = tuple(channels)
    ev = ev.select_channels(channels)
    tables = [ev] + inject_missing(ev, plan)
    systems = [("fusion", channels)] + [(c, (c,)) for c in channels]
    base = train(family, dev, channels, **config) if _supports_restrict(family) else None

    def one(system):
        name, chans = system
        subset = ChannelSubset.of(chans, channels)
        model = _subset_model(base, family, dev, subset, config)
        _, thr = eer(model.score(dev), dev.is_client)
        return name, [0.5 * sum(far_frr(model.score(t), t.is_client, thr)) for t in tables]

    return dict(_map(one, systems, workers))


# ---------------------------------------------------------------------------
# Parametric selection criterion
# ---------------------------------------------------------------------------


def bhattacharyya_distance(mu1, cov1, mu2, cov2) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    cov = 0.5 * (cov1 + cov2)
    diff = mu1 - mu2
    term1 = 0.125 * diff @ np.linalg.solve(cov, diff)
    ld = np.linalg.slogdet(cov)[1]
    term2 = 0.5 * (ld - 0.5 * (np.linalg.slogdet(cov1)[1] + np.linalg.slogdet(cov2)[1]))
    return float(term1 + term2)


def bhattacharyya_criterion(scores, labels, priors: tuple[float, float] = (0.5, 0.5),
                            floor: float = 1e-9) -> float:
    """sqrt(P_C P_I) exp(-B) between Gaussian fits of the two classes (lower is better)."""
    X = np.asarray(scores, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    lab = np.asarray(labels, dtype=bool)
    ok = ~np.isnan(X).any(axis=1)
    fits = []
    for rows in (lab & ok, ~lab & ok):
        Z = X[rows]
        if Z.shape[0] < 2:
            raise ValueError("need at least two complete records per class")
        fits.append((Z.mean(axis=0), floor_eigenvalues(np.atleast_2d(np.cov(Z, rowvar=False)), floor)))
    B = bhattacharyya_distance(fits[0][0], fits[0][1], fits[1][0], fits[1][1])
    return float(math.sqrt(priors[0] * priors[1]) * math.exp(-B))
