import io
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from biofusion.core import (
    ALL_CHANNELS,
    CHANNELS,
    FUSION_CHANNELS,
    AccessRecord,
    ClassLabel,
    ConfigError,
    DecisionThreshold,
    DegenerateChannel,
    ParseError,
    SchemaError,
    ScoreTable,
    decide,
    header_for,
    minmax_apply,
    minmax_fit,
    parse_score_table,
    write_score_table,
)
from conftest import make_table


def _csv(rows, channels=("fo1",)):
    return ",".join(header_for(channels)) + "\n" + "".join(r + "\n" for r in rows)


def test_channel_registry():
    assert len(ALL_CHANNELS) == 24
    cross = [c for c in ALL_CHANNELS if CHANNELS[c].cross_device]
    assert len(cross) == 7
    assert set(FUSION_CHANNELS) == {"fnf1", "ir1", *(f"fo{n}" for n in range(1, 7))}
    assert len({CHANNELS[f"fo{n}"].device for n in range(1, 7)}) == 1
    assert len({CHANNELS[f"ft{n}"].device for n in range(1, 7)}) == 1
    assert CHANNELS["fnf1"].quality_dim == 14
    assert CHANNELS["fo1"].quality_dim == 1
    assert CHANNELS["ir1"].quality_dim == 3


def test_sentinel_becomes_missing():
    t = parse_score_table(_csv(["a,a,S1,C,-999,-999", "a,b,S2,I,1.5,0.3"]))
    assert math.isnan(t.scores[0, 0])
    assert np.isnan(t.qualities["fo1"][0]).all()
    assert t.record(0).scores["fo1"] is None
    assert t.record(1).scores["fo1"] == 1.5
    assert not np.any(t.scores == -999)


def test_header_only_gives_empty_table():
    t = parse_score_table(_csv([]))
    assert len(t) == 0 and t.channels == ("fo1",)


def test_roundtrip_text():
    text = _csv(["a,a,S1,C,0.25,-999", "a,b,S2,I,-999,-999", "c,c,S2,C,-1.125,0.5"])
    assert write_score_table(parse_score_table(text)) == text


def test_missing_written_as_sentinel():
    t = make_table([[np.nan] + [0.5] * 7], [True], FUSION_CHANNELS)
    text = write_score_table(t)
    lines = text.strip().split("\n")
    assert len(lines) == 2
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert row["score_fnf1"] == "-999"
    assert sum(k.startswith("score_") for k in row) == 8
    assert len(row) == 4 + 8 + 14 + 6 + 3


def test_roundtrip_generated(small_corpus):
    dev, _ = small_corpus
    text = write_score_table(dev)
    back = parse_score_table(io.StringIO(text))
    assert write_score_table(back) == text
    np.testing.assert_array_equal(back.scores, dev.scores)


@pytest.mark.parametrize("row,needle", [
    ("a,a,S1,C,1.0", "line 2"),
    ("a,a,S3,C,1.0,0.1", "line 2"),
    ("a,a,S1,X,1.0,0.1", "line 2"),
    ("a,b,S1,C,1.0,0.1", "line 2"),
    ("a,a,S1,C,abc,0.1", "line 2"),
    ("a,a,S1,C,inf,0.1", "line 2"),
])
def test_malformed_rows(row, needle):
    with pytest.raises(ParseError, match=needle):
        parse_score_table(_csv([row]))


def test_partial_quality_rejected():
    with pytest.raises(ParseError):
        parse_score_table(_csv(["a,a,S1,C,1.0," + ",".join(["0.1"] * 13 + ["-999"])], ("fnf1",)))


def test_unknown_channel():
    with pytest.raises(SchemaError):
        parse_score_table("claim_id,subject_id,session,label,score_zz9\n")


def test_record_label_consistency():
    with pytest.raises(SchemaError):
        AccessRecord("a", "b", "S1", ClassLabel.CLIENT, {"fo1": 1.0})


def test_from_records_roundtrip(small_corpus):
    dev, _ = small_corpus
    sub = dev.take(np.arange(20))
    back = ScoreTable.from_records(sub.records(), sub.channels)
    np.testing.assert_array_equal(back.scores, sub.scores)
    for c in sub.channels:
        np.testing.assert_array_equal(back.qualities[c], sub.qualities[c])


def test_in_memory_sentinel_rejected():
    with pytest.raises(SchemaError):
        make_table([[-999.0]], [True], ["fo1"])


def test_minmax_fit_examples():
    t = make_table([[2.0], [4.0], [6.0]], [True, False, True], ["fo1"])
    assert minmax_fit(t, "fo1").bounds["fo1"] == (2.0, 6.0)
    with pytest.raises(DegenerateChannel):
        minmax_fit(make_table([[5.0], [5.0]], [True, False], ["fo1"]), "fo1")
    with pytest.raises(DegenerateChannel):
        minmax_fit(make_table([[np.nan], [np.nan]], [True, False], ["fo1"]), "fo1")
    t = parse_score_table(_csv(["a,a,S1,C,-999,-999", "b,b,S1,C,1,0.1", "c,c,S1,C,3,0.2"]))
    assert minmax_fit(t, "fo1").bounds["fo1"] == (1.0, 3.0)


def test_minmax_apply_examples():
    m = minmax_fit(make_table([[2.0], [6.0]], [True, False], ["fo1"]), "fo1")
    assert minmax_apply(m, 4.0) == 0.5
    assert minmax_apply(m, 8.0) == 1.0
    assert minmax_apply(m, -3.0) == 0.0
    assert minmax_apply(m, None) is None
    assert math.isnan(minmax_apply(m, float("nan")))
    assert minmax_apply(m, 2.0) == 0.0 and minmax_apply(m, 6.0) == 1.0


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30))
def test_minmax_endpoints(values):
    assume(max(values) > min(values) and -999.0 not in values)
    t = make_table(np.array(values)[:, None], [i % 2 == 0 for i in range(len(values))], ["fo1"])
    m = minmax_fit(t, "fo1")
    assert m.apply("fo1", min(values)) == 0.0
    assert m.apply("fo1", max(values)) == 1.0
    out = m.apply("fo1", np.array(values))
    assert np.all((out >= 0) & (out <= 1))


def test_decide():
    assert decide(0.7, 0.5) == "accept"
    assert decide(0.5, 0.5) == "reject"
    th = DecisionThreshold(0.5, {"j": 0.9})
    assert decide(0.7, th, "j") == "reject"
    assert decide(0.7, th, "k") == "accept"
    with pytest.raises(ConfigError):
        DecisionThreshold(float("inf"))


_score = st.one_of(st.none(), st.floats(-100, 100, allow_nan=False).map(lambda v: round(v, 6)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.sampled_from(["S1", "S2"]), _score, _score,
                          st.one_of(st.none(), st.floats(0, 1))), max_size=15))
def test_parse_write_identity(rows):
    n = len(rows)
    scores = np.array([[np.nan if s is None else s for s in r[2:4]] for r in rows]).reshape(n, 2)
    q = np.array([[np.nan if r[4] is None else r[4]] for r in rows]).reshape(n, 1)
    t = make_table(scores, [r[0] for r in rows], ["fo1", "ir1"], {"fo1": q},
                   session=[r[1] for r in rows])
    text = write_score_table(t)
    back = parse_score_table(text)
    np.testing.assert_array_equal(back.scores, t.scores)
    np.testing.assert_array_equal(back.qualities["fo1"], t.qualities["fo1"])
    assert write_score_table(back) == text
