"""Seeded synthetic corpus with the DS2 campaign structure.

Score distributions are class-conditional Gaussians. Genuine fingerprint
scores of one access are correlated; impostor channels are independent
unless configured otherwise. Quality vectors are drawn from one Gaussian
cluster per query device. Acquisition failures blank a channel's score and
quality vector together.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ALL_CHANNELS,
    CHANNELS,
    ClassLabel,
    ConfigError,
    ScoreTable,
    channel,
)

_SAME_DEVICE_GENUINE_MEAN = {
    "fa1": 1.6, "fnf1": 2.4, "fwf1": 2.2, "ir1": 1.8, "ir2": 1.8,
    "fo1": 2.6, "fo2": 2.8, "fo3": 2.5, "fo4": 2.5, "fo5": 2.7, "fo6": 2.4,
    "ft1": 2.0, "ft2": 2.2, "ft3": 1.9, "ft4": 1.9, "ft5": 2.1, "ft6": 1.8,
}
_CROSS_BASE = {"xfa1": "fnf1", **{f"xft{n}": f"fo{n}" for n in range(1, 7)}}


def _default_genuine_mean() -> dict[str, float]:
    return dict(_SAME_DEVICE_GENUINE_MEAN)


def _default_shift() -> dict[str, float]:
    return {"xfa1": -1.2, **{f"xft{n}": -1.2 for n in range(1, 7)}}


def _default_quality_mean() -> dict[str, float]:
    return {"digital-camera": 0.7, "webcam": 0.45, "optical-fp": 0.65, "thermal-fp": 0.4, "iris-LG": 0.6}


def _default_quality_std() -> dict[str, float]:
    return {"digital-camera": 0.08, "webcam": 0.08, "optical-fp": 0.1, "thermal-fp": 0.1, "iris-LG": 0.1}


@dataclass(frozen=True)
class GenConfig:
    """Generator settings. Defaults reproduce the Table IV population sizes."""

    seed: int = 42
    channels: tuple[str, ...] = ALL_CHANNELS
    n_dev_users: int = 51
    n_eval_users: int = 156
    dev_impostor_persons: tuple[int, int] = (103, 103)
    eval_impostor_persons: tuple[int, int] = (51, 126)
    impostor_samples: int = 4
    genuine_per_session: tuple[int, int] = (1, 2)
    genuine_mean: Mapping[str, float] = field(default_factory=_default_genuine_mean)
    genuine_std: float | Mapping[str, float] = 1.0
    impostor_mean: float | Mapping[str, float] = 0.0
    impostor_std: float | Mapping[str, float] = 1.0
    cross_device_shift: Mapping[str, float] = field(default_factory=_default_shift)
    genuine_finger_correlation: float = 0.6
    genuine_correlation: Sequence[Sequence[float]] | None = None
    impostor_correlation: float = 0.0
    quality_mean: Mapping[str, float | Sequence[float]] = field(default_factory=_default_quality_mean)
    quality_std: Mapping[str, float | Sequence[float]] = field(default_factory=_default_quality_std)
    p_fail: float | Mapping[str, float] = 0.02
    decimals: int = 6

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        for c in self.channels:
            channel(c)
        for name in ("n_dev_users", "n_eval_users", "impostor_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for c, s in self.cross_device_shift.items():
            if s >= 0:
                raise ConfigError(f"cross-device shift for {c} must be negative")
        for c in self.channels:
            p = self._per_channel(self.p_fail, c)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"p_fail for {c} must lie in [0, 1)")
        self.genuine_corr()
        self.impostor_corr()

    @staticmethod
    def _per_channel(value, c: str) -> float:
        if isinstance(value, Mapping):
            return float(value[c])
        return float(value)

    def genuine_means(self) -> np.ndarray:
        out = []
        for c in self.channels:
            if c in self.genuine_mean:
                out.append(self.genuine_mean[c])
            elif c in _CROSS_BASE:
                out.append(self.genuine_mean[_CROSS_BASE[c]] + self.cross_device_shift[c])
            else:
                raise ConfigError(f"no genuine mean for channel {c}")
        return np.array(out, dtype=float)

    def genuine_stds(self) -> np.ndarray:
        return np.array([self._per_channel(self.genuine_std, c) for c in self.channels])

    def impostor_means(self) -> np.ndarray:
        return np.array([self._per_channel(self.impostor_mean, c) for c in self.channels])

    def impostor_stds(self) -> np.ndarray:
        return np.array([self._per_channel(self.impostor_std, c) for c in self.channels])

    def genuine_corr(self) -> np.ndarray:
        d = len(self.channels)
        if self.genuine_correlation is not None:
            R = np.array(self.genuine_correlation, dtype=float)
            if R.shape != (d, d):
                raise ConfigError("genuine_correlation must be d x d over the configured channels")
        else:
            R = np.eye(d)
            fingers = [i for i, c in enumerate(self.channels) if CHANNELS[c].modality == "fingerprint"]
            for i in fingers:
                for j in fingers:
                    if i != j:
                        R[i, j] = self.genuine_finger_correlation
        _check_correlation(R, "genuine")
        return R

    def impostor_corr(self) -> np.ndarray:
        d = len(self.channels)
        R = np.full((d, d), float(self.impostor_correlation))
        np.fill_diagonal(R, 1.0)
        _check_correlation(R, "impostor")
        return R

    def quality_params(self, device: str, dim: int) -> tuple[np.ndarray, np.ndarray]:
        mean = np.broadcast_to(np.asarray(self.quality_mean[device], dtype=float), (dim,))
        std = np.broadcast_to(np.asarray(self.quality_std[device], dtype=float), (dim,))
        return mean, std

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown GenConfig fields: {sorted(unknown)}")
        kw = dict(d)
        for k in ("channels", "dev_impostor_persons", "eval_impostor_persons", "genuine_per_session"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_correlation(R: np.ndarray, name: str) -> None:
    if not np.allclose(R, R.T):
        raise ConfigError(f"{name} correlation matrix is not symmetric")
    if not np.allclose(np.diag(R), 1.0):
        raise ConfigError(f"{name} correlation matrix must have unit diagonal")
    if np.linalg.eigvalsh(R).min() < -1e-10:
        raise ConfigError(f"{name} correlation matrix is not positive semi-definite")


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


def _person_ids(prefix: str, start: int, count: int) -> list[str]:
    return [f"{prefix}{k:04d}" for k in range(start, start + count)]


def _layout(config: GenConfig, partition: str):
    """Row layout (claim, subject, session) for one partition."""
    if partition == "development":
        users = _person_ids("u", 0, config.n_dev_users)
        # dev impostor pools are distinct across sessions
        n1, n2 = config.dev_impostor_persons
        pools = (_person_ids("x", 0, n1), _person_ids("x", n1, n2))
    else:
        users = _person_ids("u", config.n_dev_users, config.n_eval_users)
        n1, n2 = config.eval_impostor_persons
        dev_users = _person_ids("u", 0, config.n_dev_users)
        # session-1 evaluation impostors are the development users
        pool1 = dev_users[:n1] if n1 <= len(dev_users) else dev_users + _person_ids("y", 0, n1 - len(dev_users))
        pools = (pool1, _person_ids("e", 0, n2))
    claim, subj, sess = [], [], []
    for u in users:
        for s_idx, session in enumerate(("S1", "S2")):
            for _ in range(config.genuine_per_session[s_idx]):
                claim.append(u)
                subj.append(u)
                sess.append(session)
            for p in pools[s_idx]:
                for _ in range(config.impostor_samples):
                    claim.append(u)
                    subj.append(p)
                    sess.append(session)
    return np.array(claim, dtype=object), np.array(subj, dtype=object), np.array(sess, dtype=object)


def _draw_table(config: GenConfig, partition: str, rng: np.random.Generator) -> ScoreTable:
    claim, subj, sess = _layout(config, partition)
    is_client = claim == subj
    n, d = len(claim), len(config.channels)

    gen_cov = np.outer(config.genuine_stds(), config.genuine_stds()) * config.genuine_corr()
    imp_cov = np.outer(config.impostor_stds(), config.impostor_stds()) * config.impostor_corr()
    z = rng.standard_normal((n, d))
    scores = np.where(
        is_client[:, None],
        config.genuine_means() + z @ _psd_factor(gen_cov).T,
        config.impostor_means() + z @ _psd_factor(imp_cov).T,
    )

    qualities = {}
    for c in config.channels:
        ch = CHANNELS[c]
        mean, std = config.quality_params(ch.device, ch.quality_dim)
        qualities[c] = mean + std * rng.standard_normal((n, ch.quality_dim))

    p = np.array([config._per_channel(config.p_fail, c) for c in config.channels])
    failed = rng.random((n, d)) < p
    scores[failed] = np.nan
    for j, c in enumerate(config.channels):
        qualities[c][failed[:, j]] = np.nan

    scores = np.round(scores, config.decimals)
    qualities = {c: np.round(q, config.decimals) for c, q in qualities.items()}
    return ScoreTable(
        claim_id=claim,
        subject_id=subj,
        session=sess,
        is_client=is_client,
        scores=scores,
        qualities=qualities,
        channels=config.channels,
        partition=partition,
    )


def generate_corpus(config: GenConfig | None = None) -> tuple[ScoreTable, ScoreTable]:
    """Generate ``(development, evaluation)`` tables.

    The two partitions use independent child streams of ``config.seed``, so
    changing one partition's size never perturbs the other's draws.
    """
    config = config or GenConfig()
    dev_seed, eval_seed = np.random.SeedSequence(config.seed).spawn(2)
    dev = _draw_table(config, "development", np.random.default_rng(dev_seed))
    ev = _draw_table(config, "evaluation", np.random.default_rng(eval_seed))
    return dev, ev


def device_map(channels: Sequence[str]) -> dict[str, dict[str, str]]:
    return {
        c: {"device": CHANNELS[c].device, "template_device": CHANNELS[c].template_device}
        for c in channels
    }


def corpus_manifest(config: GenConfig) -> dict:
    return {
        "seed": config.seed,
        "config_sha256": config.digest(),
        "config": config.to_dict(),
        "population": {
            "genuine_mean": dict(zip(config.channels, config.genuine_means().tolist())),
            "impostor_mean": dict(zip(config.channels, config.impostor_means().tolist())),
        },
    }


def empirical_correlation(table: ScoreTable, channels: Sequence[str], label: ClassLabel) -> np.ndarray:
    """Pearson correlation over records of one class with all ``channels`` observed."""
    X = table.score_matrix(channels)
    rows = table.is_client == (label is ClassLabel.CLIENT)
    X = X[rows]
    X = X[~np.isnan(X).any(axis=1)]
    if X.shape[0] < 2:
        raise ValueError("need at least two complete records to estimate a correlation")
    return np.atleast_2d(np.corrcoef(X, rowvar=False))
