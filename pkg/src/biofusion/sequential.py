"""Sequential fusion: acquire channels one at a time and stop on a confident decision."""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import CHANNELS, AccessRecord, ChannelId, ConfigError, ScoreTable
from .fusion.base import FusionModel

ORDERINGS = ("static", "jr_benefit", "quality_gated")
LO_MODES = ("absolute", "fraction_of_upper")
STOP_REASONS = ("accept_early", "reject_early", "exhausted")
SKIP_RULES = ("cwi",)


@dataclass(frozen=True)
class CostModel:
    first_use: float = 1.0
    reuse: float = 0.3

    def __post_init__(self):
        if not (self.first_use > 0 and self.reuse > 0):
            raise ConfigError("costs must be positive")
        if self.reuse > self.first_use:
            raise ConfigError("reuse cost cannot exceed first-use cost")


def _device(c) -> str:
    return c.device if isinstance(c, ChannelId) else CHANNELS[c].device


def channel_cost(subset: Iterable, cost_model: CostModel = CostModel()) -> float:
    """Sum over query devices of first_use + reuse * (uses - 1), rounded to 10 decimals."""
    uses: dict[str, int] = {}
    for c in subset:
        d = _device(c)
        uses[d] = uses.get(d, 0) + 1
    if not uses:
        raise ConfigError("cost of an empty subset is undefined")
    total = sum(cost_model.first_use + cost_model.reuse * (k - 1) for k in uses.values())
    return round(total, 10)


def jr_benefit(y_norm: float, is_reuse: bool, cost_model: CostModel = CostModel()) -> float:
    """Expected benefit y * (2 - cost) of acquiring a channel."""
    cost = cost_model.reuse if is_reuse else cost_model.first_use
    return y_norm * (2.0 - cost)


@dataclass(frozen=True)
class SequentialPolicy:
    """Acquisition order, stopping thresholds and skip rules.

    ``order`` is the acquisition sequence for ``static`` and the candidate
    pool (with tie-break order) for the other rules. ``expected`` maps each
    channel to its expected normalized score for ``jr_benefit``. ``gate``
    configures ``quality_gated``: keys ``face``, ``iris`` and ``median``.
    """

    order: tuple[str, ...]
    theta_hi: float = math.inf
    theta_lo: float = -math.inf
    rule: str = "static"
    lo_mode: str = "absolute"
    fraction: float = 0.05
    skip_rules: tuple[str, ...] = ()
    max_channels: int | None = None
    expected: Mapping[str, float] = field(default_factory=dict)
    gate: Mapping[str, object] = field(default_factory=dict)
    cost_model: CostModel = CostModel()

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "skip_rules", tuple(self.skip_rules))
        if not self.order:
            raise ConfigError("policy order is empty")
        if len(set(self.order)) != len(self.order):
            raise ConfigError("policy order repeats a channel")
        for c in self.order:
            CHANNELS[c]
        if self.rule not in ORDERINGS:
            raise ConfigError(f"unknown ordering rule {self.rule!r}")
        if self.lo_mode not in LO_MODES:
            raise ConfigError(f"unknown lower-threshold mode {self.lo_mode!r}")
        for r in self.skip_rules:
            if r not in SKIP_RULES:
                raise ConfigError(f"unknown skip rule {r!r}")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("fraction must lie in (0, 1)")
        if self.lo_mode == "absolute" and not self.theta_lo < self.theta_hi:
            raise ConfigError("theta_lo must be below theta_hi")
        if self.rule == "jr_benefit" and set(self.order) - set(self.expected):
            raise ConfigError("jr_benefit needs an expected score for every channel")
        if self.rule == "quality_gated" and not {"face", "iris", "median"} <= set(self.gate):
            raise ConfigError("quality_gated needs gate keys face, iris and median")

    @property
    def lower(self) -> float:
        if self.lo_mode == "fraction_of_upper":
            return self.fraction * self.theta_hi if math.isfinite(self.theta_hi) else -math.inf
        return self.theta_lo

    def _jr_order(self, acquired: Sequence[str], remaining: Sequence[str]) -> str:
        used = {_device(c) for c in acquired}
        best, best_b = None, -math.inf
        for c in remaining:
            b = jr_benefit(self.expected[c], _device(c) in used, self.cost_model)
            if b > best_b:
                best, best_b = c, b
        return best

    def next_channels(self, acquired: tuple[str, ...], X: np.ndarray, Q: Mapping[str, np.ndarray],
                      channels: Sequence[str]) -> np.ndarray:
        """Next channel for each row sharing the acquisition history ``acquired``; None when done."""
        n = X.shape[0]
        out = np.full(n, None, dtype=object)
        if self.max_channels is not None and len(acquired) >= self.max_channels:
            return out
        remaining = [c for c in self.order if c not in acquired]
        if not remaining:
            return out
        skip_fingers = np.zeros(n, dtype=bool)
        if "cwi" in self.skip_rules:
            for c in acquired:
                if CHANNELS[c].modality in ("face", "iris"):
                    skip_fingers |= ~np.isnan(X[:, channels.index(c)])
        if self.rule == "static":
            nxt = np.full(n, remaining[0], dtype=object)
        elif self.rule == "jr_benefit":
            nxt = np.full(n, self._jr_order(acquired, remaining), dtype=object)
        else:
            nxt = np.full(n, remaining[0], dtype=object)
            face, iris = self.gate["face"], self.gate["iris"]
            if acquired == (face,) and iris in remaining:
                q = Q[face]
                with np.errstate(invalid="ignore"):
                    good = ~np.isnan(q).any(axis=1) & (np.nanmean(q, axis=1) >= float(self.gate["median"]))
                fingers = [c for c in remaining if CHANNELS[c].modality == "fingerprint"]
                nxt[:] = fingers[0] if fingers else iris
                nxt[good] = iris
        if skip_fingers.any():
            for i in np.flatnonzero(skip_fingers):
                if CHANNELS[nxt[i]].modality == "fingerprint":
                    rest = [c for c in remaining if CHANNELS[c].modality != "fingerprint"]
                    nxt[i] = rest[0] if rest else None
        return nxt


@dataclass(frozen=True)
class SequentialTrace:
    record_id: int
    acquired: tuple[str, ...]
    y_steps: tuple[float, ...]
    stop_reason: str
    cost: float

    @property
    def final(self) -> float:
        """Last defined running score (NaN when nothing was observed)."""
        for y in reversed(self.y_steps):
            if not math.isnan(y):
                return y
        return math.nan

    def decision(self, threshold: float) -> bool:
        """True for accept. Exhausted traces are thresholded on their final score."""
        if self.stop_reason == "accept_early":
            return True
        if self.stop_reason == "reject_early":
            return False
        return self.final > threshold


def run_sequential_table(policy: SequentialPolicy, model: FusionModel, table: ScoreTable) -> list[SequentialTrace]:
    """Run the policy on every row, grouping rows that share an acquisition history."""
    channels = list(model.channels)
    for c in policy.order:
        if c not in channels:
            raise ConfigError(f"policy channel {c} is not a model channel")
    X_all, Q_all = model._inputs(table, None)
    n = X_all.shape[0]
    hi, lo = policy.theta_hi, policy.lower
    acquired: list[tuple[str, ...]] = [()] * n
    ys: list[list[float]] = [[] for _ in range(n)]
    reason = np.full(n, None, dtype=object)
    active = np.ones(n, dtype=bool)
    while active.any():
        groups: dict[tuple[str, ...], list[int]] = {}
        for i in np.flatnonzero(active):
            groups.setdefault(acquired[i], []).append(i)
        for hist in sorted(groups):
            rows = np.array(groups[hist])
            nxt = policy.next_channels(hist, X_all[rows], {c: q[rows] for c, q in Q_all.items()}, channels)
            done = np.array([c is None for c in nxt])
            for i in rows[done]:
                reason[i] = "exhausted"
                active[i] = False
            rows, nxt = rows[~done], nxt[~done]
            for c in sorted(set(nxt)):
                sel = rows[nxt == c]
                new_hist = hist + (c,)
                keep = [channels.index(a) for a in new_hist]
                X = np.full((sel.size, len(channels)), np.nan)
                X[:, keep] = X_all[np.ix_(sel, keep)]
                Q = {ch: (q[sel] if ch in new_hist else np.full_like(q[sel], np.nan)) for ch, q in Q_all.items()}
                y = model.score_arrays(X, Q)
                for i, v in zip(sel, y):
                    acquired[i] = new_hist
                    ys[i].append(float(v))
                    if v > hi:
                        reason[i], active[i] = "accept_early", False
                    elif v < lo:
                        reason[i], active[i] = "reject_early", False
    return [
        SequentialTrace(i, acquired[i], tuple(ys[i]), reason[i], channel_cost(acquired[i], policy.cost_model))
        for i in range(n)
    ]


def run_sequential(policy: SequentialPolicy, model: FusionModel, record: AccessRecord) -> SequentialTrace:
    table = ScoreTable.from_records([record], model.channels)
    return run_sequential_table(policy, model, table)[0]


# ---------------------------------------------------------------------------
# Threshold calibration
# ---------------------------------------------------------------------------


def calibrate_thresholds(
    dev: ScoreTable,
    model: FusionModel,
    policy: SequentialPolicy,
    far_bound: float = 0.01,
    frr_bound: float = 0.01,
    lo_mode: str = "absolute",
) -> tuple[float, float]:
    """(theta_lo, theta_hi) from full-length development traces.

    theta_hi is the smallest value leaving at most ``far_bound`` of the
    development impostors with a running score above it at some step, so the
    FAR due to early accepts stays within the bound. theta_lo is the mirror
    image for clients and ``frr_bound``, or ``fraction * theta_hi`` in
    ``fraction_of_upper`` mode. When a bound leaves no room for early
    decisions the threshold is pushed to infinity with a warning. If the two
    candidates cross, theta_lo is placed just below theta_hi; both bounds
    still hold there.
    """
    for b in (far_bound, frr_bound):
        if not 0.0 <= b < 1.0:
            raise ConfigError("bounds must lie in [0, 1)")
    full = SequentialPolicy(
        order=policy.order, rule=policy.rule, skip_rules=policy.skip_rules, max_channels=policy.max_channels,
        expected=policy.expected, gate=policy.gate, cost_model=policy.cost_model,
    )
    traces = run_sequential_table(full, model, dev)
    peak = np.array([np.nanmax(t.y_steps) if not np.isnan(t.y_steps).all() else -np.inf for t in traces])
    trough = np.array([np.nanmin(t.y_steps) if not np.isnan(t.y_steps).all() else np.inf for t in traces])
    imp, cli = peak[~dev.is_client], trough[dev.is_client]

    a = int(math.floor(far_bound * imp.size))
    theta_hi = float(np.sort(imp)[::-1][a]) if a < imp.size else -math.inf
    if theta_hi >= np.max(peak[dev.is_client]) or not math.isfinite(theta_hi):
        warnings.warn("FAR bound leaves no feasible early accept; theta_hi set to +inf", stacklevel=2)
        theta_hi = math.inf
    if lo_mode == "fraction_of_upper":
        return (policy.fraction * theta_hi if math.isfinite(theta_hi) else -math.inf), theta_hi
    b = int(math.floor(frr_bound * cli.size))
    theta_lo = float(np.sort(cli)[b]) if b < cli.size else math.inf
    if theta_lo <= np.min(trough[~dev.is_client]) or not math.isfinite(theta_lo):
        warnings.warn("FRR bound leaves no feasible early reject; theta_lo set to -inf", stacklevel=2)
        theta_lo = -math.inf
    if theta_lo >= theta_hi:
        # both bounds hold anywhere at or below the crossing; keep the band as narrow as possible
        theta_lo = float(np.nextafter(theta_hi, -math.inf))
    return float(theta_lo), float(theta_hi)


def early_error_rates(traces: Sequence[SequentialTrace], is_client) -> tuple[float, float]:
    """(impostors accepted early / impostors, clients rejected early / clients)."""
    is_client = np.asarray(is_client, dtype=bool)
    acc = np.array([t.stop_reason == "accept_early" for t in traces])
    rej = np.array([t.stop_reason == "reject_early" for t in traces])
    return float(acc[~is_client].mean()), float(rej[is_client].mean())


# ---------------------------------------------------------------------------
# Trace log
# ---------------------------------------------------------------------------


def traces_to_csv(traces: Sequence[SequentialTrace]) -> str:
    out = io.StringIO()
    out.write("record_id,acquired,y_steps,stop_reason,cost\n")
    for t in traces:
        steps = "|".join(repr(float(y)) for y in t.y_steps)
        out.write(f"{t.record_id},{'|'.join(t.acquired)},{steps},{t.stop_reason},{t.cost!r}\n")
    return out.getvalue()
