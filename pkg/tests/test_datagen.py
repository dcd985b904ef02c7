import numpy as np
import pytest

from biofusion.core import ClassLabel, ConfigError, write_score_table
from biofusion.datagen import GenConfig, corpus_manifest, empirical_correlation, generate_corpus

FINGERS = [f"fo{n}" for n in range(1, 7)]


def _per_claim(table, session, client):
    rows = (table.session == session) & (table.is_client == client)
    _, counts = np.unique(table.claim_id[rows], return_counts=True)
    return set(counts.tolist())


def test_default_cardinalities(default_corpus):
    dev, ev = default_corpus
    assert len(set(dev.claim_id)) == 51
    assert len(set(ev.claim_id)) == 156
    assert _per_claim(dev, "S1", True) == {1}
    assert _per_claim(dev, "S2", True) == {2}
    assert _per_claim(dev, "S1", False) == {103 * 4}
    assert _per_claim(dev, "S2", False) == {103 * 4}
    assert _per_claim(ev, "S1", False) == {51 * 4}
    assert _per_claim(ev, "S2", False) == {126 * 4}
    assert _per_claim(ev, "S1", True) == {1} and _per_claim(ev, "S2", True) == {2}


def test_partitions_disjoint(default_corpus):
    dev, ev = default_corpus
    assert not set(dev.claim_id) & set(ev.claim_id)
    assert dev.partition == "development" and ev.partition == "evaluation"


def test_determinism(small_config):
    cfg = GenConfig(**{**small_config.to_dict(), "p_fail": 0.0, "channels": tuple(small_config.channels)})
    a = generate_corpus(cfg)
    b = generate_corpus(cfg)
    for x, y in zip(a, b):
        assert write_score_table(x) == write_score_table(y)
    assert not np.isnan(a[0].scores).any()


def test_failures_blank_score_and_quality(small_corpus):
    dev, _ = small_corpus
    for j, c in enumerate(dev.channels):
        miss = np.isnan(dev.scores[:, j])
        assert np.array_equal(miss, np.isnan(dev.qualities[c]).all(axis=1))
    assert np.isnan(dev.scores).any()


def test_genuine_finger_correlation():
    cfg = GenConfig(channels=("fo1", "fo2"), n_dev_users=3400, n_eval_users=1,
                    dev_impostor_persons=(1, 1), eval_impostor_persons=(1, 1), impostor_samples=1, p_fail=0.0)
    dev, _ = generate_corpus(cfg)
    assert dev.is_client.sum() >= 10_000
    R = empirical_correlation(dev, ["fo1", "fo2"], ClassLabel.CLIENT)
    assert abs(R[0, 1] - 0.6) < 0.05
    assert R[0, 0] == pytest.approx(1.0)


def test_impostor_correlation_near_zero():
    cfg = GenConfig(channels=("fnf1", "fo1", "ir1"), n_dev_users=25, n_eval_users=1,
                    dev_impostor_persons=(50, 50), eval_impostor_persons=(1, 1), impostor_samples=4, p_fail=0.0)
    dev, _ = generate_corpus(cfg)
    assert (~dev.is_client).sum() >= 10_000
    R = empirical_correlation(dev, ["fnf1", "fo1", "ir1"], ClassLabel.IMPOSTOR)
    assert np.abs(R[np.triu_indices(3, 1)]).max() < 0.05


def test_cross_device_lower_genuine_mean():
    cfg = GenConfig(n_dev_users=1000, n_eval_users=1, dev_impostor_persons=(1, 1),
                    eval_impostor_persons=(1, 1), impostor_samples=1, p_fail=0.0)
    means = dict(zip(cfg.channels, cfg.genuine_means()))
    dev, _ = generate_corpus(cfg)
    g = dev.is_client
    for x, base in [("xfa1", "fnf1")] + [(f"xft{n}", f"fo{n}") for n in range(1, 7)]:
        assert means[x] < means[base]
        a, b = dev.column(x)[g], dev.column(base)[g]
        se = np.sqrt(a.var() / a.size + b.var() / b.size)
        assert a.mean() < b.mean() + 3 * se
        assert a.mean() < b.mean()


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(p_fail=1.0)
    with pytest.raises(ConfigError):
        GenConfig(channels=("fo1", "fo2"), genuine_correlation=[[1, 2], [2, 1]])
    with pytest.raises(ConfigError):
        GenConfig(channels=("fo1", "fo2"), genuine_correlation=[[1, 0.5], [0.4, 1]])
    with pytest.raises(ConfigError):
        GenConfig(impostor_correlation=-0.5)
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"bogus": 1})


def test_config_roundtrip_and_manifest(small_config):
    again = GenConfig.from_dict(small_config.to_dict())
    assert again.digest() == small_config.digest()
    m = corpus_manifest(small_config)
    assert m["seed"] == 42 and m["config_sha256"] == small_config.digest()


def test_self_correlation(small_corpus):
    dev, _ = small_corpus
    assert empirical_correlation(dev, ["fo1"], ClassLabel.CLIENT)[0, 0] == pytest.approx(1.0)
