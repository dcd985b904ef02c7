"""Domain model, score-table I/O and Min-Max normalization.

Scores live in memory as float arrays where NaN marks a missing value.
The ``-999`` sentinel only exists in serialized score tables.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

SENTINEL = -999.0
SENTINEL_TEXT = "-999"
MISSING = None

FIXED_COLUMNS = ("claim_id", "subject_id", "session", "label")
SESSIONS = ("S1", "S2")


class BiofusionError(Exception):
    """Base class for library errors."""


class ParseError(BiofusionError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(BiofusionError, ValueError):
    pass


class DegenerateChannel(BiofusionError, ValueError):
    pass


class AllMissing(BiofusionError, ValueError):
    pass


class ConfigError(BiofusionError, ValueError):
    pass


class TrainingError(BiofusionError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------

QUALITY_DIM = {"face": 14, "fingerprint": 1, "iris": 3}


@dataclass(frozen=True)
class ChannelId:
    label: str
    modality: str
    device: str
    template_device: str

    @property
    def cross_device(self) -> bool:
        return self.device != self.template_device

    @property
    def quality_dim(self) -> int:
        return QUALITY_DIM[self.modality]


def _build_channels() -> dict[str, ChannelId]:
    specs: list[tuple[str, str, str, str]] = [
        ("fa1", "face", "webcam", "webcam"),
        ("fnf1", "face", "digital-camera", "digital-camera"),
        ("fwf1", "face", "digital-camera", "digital-camera"),
        ("ir1", "iris", "iris-LG", "iris-LG"),
        ("ir2", "iris", "iris-LG", "iris-LG"),
    ]
    specs += [(f"fo{n}", "fingerprint", "optical-fp", "optical-fp") for n in range(1, 7)]
    specs += [(f"ft{n}", "fingerprint", "thermal-fp", "thermal-fp") for n in range(1, 7)]
    specs += [("xfa1", "face", "webcam", "digital-camera")]
    specs += [(f"xft{n}", "fingerprint", "thermal-fp", "optical-fp") for n in range(1, 7)]
    return {s[0]: ChannelId(*s) for s in specs}


CHANNELS: dict[str, ChannelId] = _build_channels()
ALL_CHANNELS: tuple[str, ...] = tuple(CHANNELS)
FUSION_CHANNELS: tuple[str, ...] = ("fnf1", "fo1", "fo2", "fo3", "fo4", "fo5", "fo6", "ir1")
QUALITY_SLOTS: tuple[str, ...] = ("fnf1", "fo1", "fo2", "fo3")
CROSS_VARIANT: dict[str, str] = {"fnf1": "xfa1", "fo1": "xft1", "fo2": "xft2", "fo3": "xft3"}


def channel(label: str) -> ChannelId:
    try:
        return CHANNELS[label]
    except KeyError:
        raise SchemaError(f"unknown channel label {label!r}") from None


# ---------------------------------------------------------------------------
# Records and tables
# ---------------------------------------------------------------------------


class ClassLabel(enum.Enum):
    CLIENT = "C"
    IMPOSTOR = "I"

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        try:
            return cls(text)
        except ValueError:
            raise ParseError(f"label must be 'C' or 'I', got {text!r}") from None


@dataclass(frozen=True)
class AccessRecord:
    """One access attempt. Missing scores and quality vectors are ``None``."""

    claim_id: str
    subject_id: str
    session: str
    label: ClassLabel
    scores: Mapping[str, float | None]
    qualities: Mapping[str, tuple[float, ...] | None] = field(default_factory=dict)

    def __post_init__(self):
        if (self.label is ClassLabel.CLIENT) != (self.claim_id == self.subject_id):
            raise SchemaError(
                f"label {self.label.value} inconsistent with claim {self.claim_id!r} / subject {self.subject_id!r}"
            )


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Column-oriented collection of access records.

    ``scores`` is an ``(n, d)`` array aligned with ``channels``; ``qualities``
    maps each channel label to an ``(n, L)`` array. A NaN score is missing; a
    quality row is either fully observed or fully NaN.
    """

    claim_id: np.ndarray
    subject_id: np.ndarray
    session: np.ndarray
    is_client: np.ndarray
    scores: np.ndarray
    qualities: Mapping[str, np.ndarray]
    channels: tuple[str, ...]
    partition: str = "development"

    def __post_init__(self):
        channels = tuple(self.channels)
        for c in channels:
            channel(c)
        if len(set(channels)) != len(channels):
            raise SchemaError("duplicate channel labels")
        n = len(self.claim_id)
        scores = np.asarray(self.scores, dtype=float).reshape(n, len(channels))
        if np.any(scores == SENTINEL):
            raise SchemaError("in-memory scores must not carry the -999 sentinel")
        quals = {}
        for c in channels:
            L = CHANNELS[c].quality_dim
            q = self.qualities.get(c)
            q = np.full((n, L), np.nan) if q is None else np.asarray(q, dtype=float).reshape(n, L)
            partial = np.isnan(q).any(axis=1) & ~np.isnan(q).all(axis=1)
            if partial.any():
                raise SchemaError(f"partial quality vector for channel {c}")
            quals[c] = _freeze(q)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "claim_id", _freeze(np.asarray(self.claim_id, dtype=object)))
        object.__setattr__(self, "subject_id", _freeze(np.asarray(self.subject_id, dtype=object)))
        object.__setattr__(self, "session", _freeze(np.asarray(self.session, dtype=object)))
        object.__setattr__(self, "is_client", _freeze(np.asarray(self.is_client, dtype=bool)))
        object.__setattr__(self, "scores", _freeze(scores))
        object.__setattr__(self, "qualities", quals)
        if self.partition not in ("development", "evaluation"):
            raise SchemaError(f"unknown partition {self.partition!r}")
        if not (len(self.subject_id) == len(self.session) == len(self.is_client) == n):
            raise SchemaError("column length mismatch")
        if np.any(self.is_client != (self.claim_id == self.subject_id)):
            raise SchemaError("label must be Client exactly when claim_id equals subject_id")

    def __len__(self) -> int:
        return len(self.claim_id)

    @property
    def labels(self) -> np.ndarray:
        """1 for client accesses, 0 for impostor accesses."""
        return self.is_client.astype(int)

    def column(self, label: str) -> np.ndarray:
        return self.scores[:, self.channels.index(label)]

    def score_matrix(self, channels: Sequence[str] | None = None) -> np.ndarray:
        if channels is None:
            return self.scores
        return self.scores[:, [self.channels.index(c) for c in channels]]

    def record(self, i: int) -> AccessRecord:
        scores = {}
        quals = {}
        for j, c in enumerate(self.channels):
            s = self.scores[i, j]
            scores[c] = None if math.isnan(s) else float(s)
            q = self.qualities[c][i]
            quals[c] = None if np.isnan(q).all() else tuple(float(v) for v in q)
        return AccessRecord(
            claim_id=str(self.claim_id[i]),
            subject_id=str(self.subject_id[i]),
            session=str(self.session[i]),
            label=ClassLabel.CLIENT if self.is_client[i] else ClassLabel.IMPOSTOR,
            scores=scores,
            qualities=quals,
        )

    def records(self) -> Iterator[AccessRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def take(self, index) -> "ScoreTable":
        """Row subset by boolean mask or integer index."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return ScoreTable(
            claim_id=self.claim_id[index],
            subject_id=self.subject_id[index],
            session=self.session[index],
            is_client=self.is_client[index],
            scores=self.scores[index],
            qualities={c: q[index] for c, q in self.qualities.items()},
            channels=self.channels,
            partition=self.partition,
        )

    def session_subset(self, session: str) -> "ScoreTable":
        return self.take(self.session == session)

    def select_channels(self, channels: Sequence[str]) -> "ScoreTable":
        missing = [c for c in channels if c not in self.channels]
        if missing:
            raise SchemaError(f"table lacks channels {missing}")
        return ScoreTable(
            claim_id=self.claim_id,
            subject_id=self.subject_id,
            session=self.session,
            is_client=self.is_client,
            scores=self.score_matrix(channels),
            qualities={c: self.qualities[c] for c in channels},
            channels=tuple(channels),
            partition=self.partition,
        )

    def replace(self, **changes) -> "ScoreTable":
        fields = dict(
            claim_id=self.claim_id,
            subject_id=self.subject_id,
            session=self.session,
            is_client=self.is_client,
            scores=self.scores,
            qualities=self.qualities,
            channels=self.channels,
            partition=self.partition,
        )
        fields.update(changes)
        return ScoreTable(**fields)

    @classmethod
    def from_records(
        cls,
        records: Iterable[AccessRecord],
        channels: Sequence[str],
        partition: str = "development",
    ) -> "ScoreTable":
        records = list(records)
        n = len(records)
        scores = np.full((n, len(channels)), np.nan)
        quals = {c: np.full((n, CHANNELS[c].quality_dim), np.nan) for c in channels}
        for i, r in enumerate(records):
            for j, c in enumerate(channels):
                if c not in r.scores:
                    raise SchemaError(f"record {i} has no entry for channel {c}")
                s = r.scores[c]
                if s is not None:
                    scores[i, j] = s
                q = r.qualities.get(c)
                if q is not None:
                    quals[c][i] = q
        return cls(
            claim_id=np.array([r.claim_id for r in records], dtype=object),
            subject_id=np.array([r.subject_id for r in records], dtype=object),
            session=np.array([r.session for r in records], dtype=object),
            is_client=np.array([r.label is ClassLabel.CLIENT for r in records], dtype=bool),
            scores=scores,
            qualities=quals,
            channels=tuple(channels),
            partition=partition,
        )


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def header_for(channels: Sequence[str]) -> list[str]:
    cols = list(FIXED_COLUMNS)
    for c in channels:
        cols.append(f"score_{c}")
        cols.extend(f"q_{c}_{k}" for k in range(1, CHANNELS[c].quality_dim + 1))
    return cols


def _channels_from_header(header: list[str]) -> tuple[str, ...]:
    if tuple(header[:4]) != FIXED_COLUMNS:
        raise SchemaError(f"header must start with {','.join(FIXED_COLUMNS)}")
    channels = []
    pos = 4
    while pos < len(header):
        col = header[pos]
        if not col.startswith("score_"):
            raise SchemaError(f"expected a score_<label> column, got {col!r}")
        label = col[len("score_"):]
        channels.append(channel(label).label)
        pos += 1 + CHANNELS[label].quality_dim
    if header != header_for(channels):
        raise SchemaError("quality columns do not match the channel schema")
    return tuple(channels)


def _parse_float(text: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r}", line)
    return v


def parse_score_table(stream, partition: str = "development") -> ScoreTable:
    """Read a score-table CSV from a text stream or string.

    Fields equal to ``-999`` become missing. A quality vector must be either
    fully observed or fully ``-999``.
    """
    text = stream if isinstance(stream, str) else stream.read()
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise ParseError("empty stream: no header", 1)
    header = lines[0].rstrip("\r").split(",")
    channels = _channels_from_header(header)
    width = len(header)

    rows, linenos = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        raw = raw.rstrip("\r")
        if not raw:
            continue
        fields = raw.split(",")
        if len(fields) != width:
            raise ParseError(f"expected {width} fields, got {len(fields)}", lineno)
        rows.append(fields)
        linenos.append(lineno)
    n = len(rows)
    grid = np.array(rows, dtype=object).reshape(n, width)

    claim, subj, sess, lab = (grid[:, k] for k in range(4))
    bad = np.flatnonzero(~np.isin(sess, SESSIONS))
    if bad.size:
        raise ParseError(f"session must be S1 or S2, got {sess[bad[0]]!r}", linenos[bad[0]])
    bad = np.flatnonzero(~np.isin(lab, ("C", "I")))
    if bad.size:
        raise ParseError(f"label must be 'C' or 'I', got {lab[bad[0]]!r}", linenos[bad[0]])
    is_client = lab == "C"
    bad = np.flatnonzero(is_client != (claim == subj))
    if bad.size:
        raise ParseError("label inconsistent with claim_id/subject_id", linenos[bad[0]])

    try:
        values = grid[:, 4:].astype(float)
    except ValueError:
        for i, row in enumerate(rows):
            for f in row[4:]:
                _parse_float(f, linenos[i])
        raise
    missing = values == SENTINEL
    if not np.isfinite(values).all():
        i = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise ParseError("non-finite value", linenos[i])
    values[missing] = np.nan

    score_cols, quals = [], {}
    pos = 0
    for c in channels:
        L = CHANNELS[c].quality_dim
        score_cols.append(pos)
        block = missing[:, pos + 1:pos + 1 + L]
        partial = block.any(axis=1) & ~block.all(axis=1)
        if partial.any():
            i = int(np.flatnonzero(partial)[0])
            raise ParseError(f"partial quality vector for channel {c}", linenos[i])
        quals[c] = values[:, pos + 1:pos + 1 + L]
        pos += 1 + L

    return ScoreTable(
        claim_id=claim,
        subject_id=subj,
        session=sess,
        is_client=is_client,
        scores=values[:, score_cols],
        qualities=quals,
        channels=channels,
        partition=partition,
    )


def _fmt_column(values: np.ndarray) -> list[str]:
    return [SENTINEL_TEXT if v != v else repr(v) for v in values.tolist()]


def write_score_table(table: ScoreTable) -> str:
    """Serialize a table to CSV text; missing values become ``-999``."""
    cols: list[list[str]] = [
        [str(v) for v in table.claim_id],
        [str(v) for v in table.subject_id],
        [str(v) for v in table.session],
        ["C" if v else "I" for v in table.is_client],
    ]
    for j, c in enumerate(table.channels):
        cols.append(_fmt_column(table.scores[:, j]))
        q = table.qualities[c]
        for k in range(q.shape[1]):
            cols.append(_fmt_column(q[:, k]))
    out = [",".join(header_for(table.channels))]
    out.extend(",".join(row) for row in zip(*cols))
    return "\n".join(out) + "\n"


def read_score_table(path, partition: str = "development") -> ScoreTable:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_score_table(fh, partition=partition)


def save_score_table(table: ScoreTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_score_table(table))


# ---------------------------------------------------------------------------
# Min-Max normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizerModel:
    bounds: Mapping[str, tuple[float, float]]

    def apply(self, label: str, values):
        lo, hi = self.bounds[label]
        if values is None:
            return None
        v = np.asarray(values, dtype=float)
        out = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def apply_matrix(self, table: ScoreTable, channels: Sequence[str]) -> np.ndarray:
        X = table.score_matrix(channels)
        return np.column_stack([self.apply(c, X[:, j]) for j, c in enumerate(channels)]) if channels else X

    def to_dict(self) -> dict:
        return {c: [lo, hi] for c, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizerModel":
        return cls({c: (float(v[0]), float(v[1])) for c, v in d.items()})


def minmax_fit(table: ScoreTable, channels: str | Sequence[str]) -> NormalizerModel:
    """Fit per-channel (min, max) over the observed development scores."""
    if isinstance(channels, str):
        channels = [channels]
    bounds = {}
    for c in channels:
        v = table.column(c)
        v = v[~np.isnan(v)]
        if v.size == 0:
            raise DegenerateChannel(f"channel {c} has no observed scores")
        lo, hi = float(v.min()), float(v.max())
        if not hi > lo:
            raise DegenerateChannel(f"channel {c} is constant ({lo})")
        bounds[c] = (lo, hi)
    return NormalizerModel(bounds)


def minmax_apply(model: NormalizerModel, score, channel: str | None = None):
    """Map a score into [0, 1]; values outside the fitted range are clipped.

    Missing input (``None`` or NaN) passes through unchanged.
    """
    if channel is None:
        if len(model.bounds) != 1:
            raise ValueError("channel must be given for a multi-channel normalizer")
        (channel,) = model.bounds
    if score is None:
        return None
    return model.apply(channel, score)


# ---------------------------------------------------------------------------
# Decision rule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionThreshold:
    value: float
    per_claim: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value) or not all(math.isfinite(v) for v in self.per_claim.values()):
            raise ConfigError("decision thresholds must be finite")

    def for_claim(self, claim_id) -> float:
        return self.per_claim.get(claim_id, self.value) if claim_id is not None else self.value


def decide(y_com: float, threshold: DecisionThreshold | float, claim_id: str | None = None) -> str:
    """Accept iff the combined score is strictly above the applicable threshold."""
    if not isinstance(threshold, DecisionThreshold):
        threshold = DecisionThreshold(float(threshold))
    return "accept" if y_com > threshold.for_claim(claim_id) else "reject"


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------


def to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def from_json_float(v) -> float:
    if v is None:
        return math.nan
    if v == "inf":
        return math.inf
    if v == "-inf":
        return -math.inf
    return float(v)


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"
