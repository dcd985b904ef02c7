import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biofusion.core import FUSION_CHANNELS, ConfigError, NormalizerModel
from biofusion.fusion import FixedRule, GmmBayes
from biofusion.sequential import (
    CostModel,
    SequentialPolicy,
    calibrate_thresholds,
    channel_cost,
    early_error_rates,
    jr_benefit,
    run_sequential,
    run_sequential_table,
    traces_to_csv,
)
from conftest import make_table

ORDER = ("fnf1", "fo1", "fo2", "ir1")


def _mean_rule(channels=ORDER):
    return FixedRule(channels, NormalizerModel({c: (0.0, 1.0) for c in channels}))


def test_channel_cost_examples():
    assert channel_cost(["fnf1", "fo1", "fo2"]) == 2.3
    assert channel_cost([f"fo{n}" for n in range(1, 7)]) == 2.5
    assert channel_cost(FUSION_CHANNELS) == 4.5
    assert channel_cost(["ir1"]) == 1.0
    for k in range(1, 7):
        assert channel_cost([f"fo{n}" for n in range(1, k + 1)]) == round(1 + 0.3 * (k - 1), 10)
    with pytest.raises(ConfigError):
        channel_cost([])
    assert channel_cost(["fo1", "fo2"], CostModel(2.0, 0.5)) == 2.5
    with pytest.raises(ConfigError):
        CostModel(1.0, 2.0)


def test_jr_benefit_examples():
    assert jr_benefit(0.8, False) == pytest.approx(0.8)
    assert jr_benefit(0.8, True) == pytest.approx(1.36)
    assert jr_benefit(0.0, True) == 0.0 and jr_benefit(0.0, False) == 0.0


def test_policy_validation():
    with pytest.raises(ConfigError):
        SequentialPolicy(order=())
    with pytest.raises(ConfigError):
        SequentialPolicy(order=ORDER, theta_hi=0.2, theta_lo=0.5)
    with pytest.raises(ConfigError):
        SequentialPolicy(order=ORDER, rule="jr_benefit")
    p = SequentialPolicy(order=ORDER, theta_hi=0.9, lo_mode="fraction_of_upper")
    assert p.lower == pytest.approx(0.045)


def test_decisive_first_channel():
    t = make_table([[0.99, 0.1, 0.1, 0.1]], [True], ORDER)
    tr = run_sequential(SequentialPolicy(ORDER, theta_hi=0.95), _mean_rule(), t.record(0))
    assert tr.acquired == ("fnf1",) and tr.cost == 1.0 and tr.stop_reason == "accept_early"
    assert tr.y_steps == (0.99,)


def test_degenerate_thresholds_exhaust(small_corpus):
    dev, ev = small_corpus
    model = GmmBayes.fit(dev, FUSION_CHANNELS)
    probe = ev.take(np.arange(0, len(ev), 50))
    traces = run_sequential_table(SequentialPolicy(FUSION_CHANNELS), model, probe)
    full = model.score(probe)
    for tr, y in zip(traces, full):
        assert tr.acquired == FUSION_CHANNELS and tr.stop_reason == "exhausted" and tr.cost == 4.5
        assert tr.y_steps[-1] == pytest.approx(y, abs=1e-12) or (math.isnan(y) and math.isnan(tr.y_steps[-1]))


def test_failed_acquisition_is_charged():
    t = make_table([[np.nan, np.nan, 0.1, 0.2]], [False], ORDER)
    tr = run_sequential(SequentialPolicy(ORDER, theta_hi=0.95, theta_lo=0.05), _mean_rule(), t.record(0))
    assert tr.acquired == ORDER
    assert math.isnan(tr.y_steps[0]) and math.isnan(tr.y_steps[1])
    assert tr.cost == channel_cost(ORDER) == 3.3
    assert tr.final == pytest.approx(0.15)


def test_reject_early():
    t = make_table([[0.01, 0.9, 0.9, 0.9]], [False], ORDER)
    tr = run_sequential(SequentialPolicy(ORDER, theta_hi=0.95, theta_lo=0.02), _mean_rule(), t.record(0))
    assert tr.stop_reason == "reject_early" and tr.acquired == ("fnf1",)
    assert not tr.decision(0.5)


def test_cwi_skip_rule():
    order = ("fo1", "fnf1", "fo2", "ir1")
    t = make_table([[0.5, 0.5, 0.5, 0.5], [0.5, np.nan, 0.5, 0.5]], [True, True], order)
    traces = run_sequential_table(SequentialPolicy(order, skip_rules=("cwi",)), _mean_rule(order), t)
    assert traces[0].acquired == ("fo1", "fnf1", "ir1")
    # a failed face acquisition does not trigger the skip
    assert traces[1].acquired == order


def test_jr_benefit_ordering():
    expected = {"fnf1": 0.6, "fo1": 0.7, "fo2": 0.5, "ir1": 0.65}
    p = SequentialPolicy(ORDER, rule="jr_benefit", expected=expected)
    t = make_table([[0.5] * 4], [True], ORDER)
    tr = run_sequential(p, _mean_rule(), t.record(0))
    # fo1 first (0.7); then reuse makes fo2 worth 0.5 * 1.7 = 0.85 > 0.65
    assert tr.acquired == ("fo1", "fo2", "ir1", "fnf1")


def test_quality_gated():
    q = np.full((2, 14), 0.0)
    q[0] = 0.9
    t = make_table([[0.5] * 4] * 2, [True, True], ORDER, qualities={"fnf1": q})
    p = SequentialPolicy(ORDER, rule="quality_gated", gate={"face": "fnf1", "iris": "ir1", "median": 0.5},
                         max_channels=2)
    traces = run_sequential_table(p, _mean_rule(), t)
    assert traces[0].acquired == ("fnf1", "ir1")
    assert traces[1].acquired == ("fnf1", "fo1")


def test_trace_csv():
    t = make_table([[0.99, 0.1, 0.1, 0.1]], [True], ORDER)
    tr = run_sequential_table(SequentialPolicy(ORDER, theta_hi=0.95), _mean_rule(), t)
    lines = traces_to_csv(tr).splitlines()
    assert lines[0] == "record_id,acquired,y_steps,stop_reason,cost"
    assert lines[1] == "0,fnf1,0.99,accept_early,1.0"


def test_calibrate_separated():
    rng = np.random.default_rng(0)
    y = np.r_[np.ones(40, bool), np.zeros(40, bool)]
    X = np.where(y[:, None], rng.uniform(0.7, 1.0, (80, 4)), rng.uniform(0.0, 0.3, (80, 4)))
    dev = make_table(X, y, ORDER)
    lo, hi = calibrate_thresholds(dev, _mean_rule(), SequentialPolicy(ORDER), 0.0, 0.0)
    traces = run_sequential_table(SequentialPolicy(ORDER, theta_hi=hi, theta_lo=lo), _mean_rule(), dev)
    assert early_error_rates(traces, y) == (0.0, 0.0)
    assert all(t.decision(0.5) == c for t, c in zip(traces, y))
    assert lo < hi
    assert np.mean([len(t.acquired) for t in traces]) < 1.1


def test_calibrate_infeasible_warns():
    rng = np.random.default_rng(1)
    y = np.r_[np.ones(50, bool), np.zeros(200, bool)]
    X = np.where(y[:, None], rng.uniform(0.3, 0.7, (250, 4)), rng.uniform(0.0, 1.0, (250, 4)))
    dev = make_table(X, y, ORDER)
    with pytest.warns(UserWarning, match="FAR bound"):
        lo, hi = calibrate_thresholds(dev, _mean_rule(), SequentialPolicy(ORDER), 0.0, 0.0)
    assert hi == math.inf and math.isfinite(lo)


def test_calibrate_self_consistent(small_corpus):
    dev, _ = small_corpus
    model = GmmBayes.fit(dev, FUSION_CHANNELS)
    policy = SequentialPolicy(FUSION_CHANNELS)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lo, hi = calibrate_thresholds(dev, model, policy, 0.05, 0.05)
    traces = run_sequential_table(SequentialPolicy(FUSION_CHANNELS, theta_hi=hi, theta_lo=lo), model, dev)
    far, frr = early_error_rates(traces, dev.is_client)
    assert far <= 0.05 and frr <= 0.05
    lo2, hi2 = calibrate_thresholds(dev, model, SequentialPolicy(FUSION_CHANNELS, fraction=0.1), 0.05, 0.05,
                                    lo_mode="fraction_of_upper")
    assert lo2 == pytest.approx(0.1 * hi2)


@pytest.fixture(scope="module")
def seq_setup(small_corpus):
    dev, ev = small_corpus
    model = GmmBayes.fit(dev, FUSION_CHANNELS)
    probe = ev.take(np.arange(0, len(ev), 13))
    return model, probe


@settings(max_examples=15, deadline=None)
@given(st.floats(0.5, 1.0), st.floats(0.0, 0.49), st.floats(0.0, 0.5))
def test_invariants(seq_setup, hi, lo, widen):
    model, probe = seq_setup
    narrow = run_sequential_table(SequentialPolicy(FUSION_CHANNELS, theta_hi=hi, theta_lo=lo), model, probe)
    wide = run_sequential_table(
        SequentialPolicy(FUSION_CHANNELS, theta_hi=hi + widen, theta_lo=lo - widen), model, probe)
    for a, b in zip(narrow, wide):
        # cost ledger
        assert a.cost == channel_cost(a.acquired)
        # early-stop dominance and monotone nesting
        assert len(a.acquired) <= len(b.acquired) <= len(FUSION_CHANNELS)
        assert b.acquired[: len(a.acquired)] == a.acquired
        # decision consistency
        if a.stop_reason == "accept_early":
            assert a.y_steps[-1] > hi
        if a.stop_reason == "reject_early":
            assert a.y_steps[-1] < lo
