from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devo.classifier import ConfidenceVector
from devo.flows import FeatureVector, FlowRecord, extract_features
from devo.silver import (
    LaidaConfig,
    SilverPool,
    SilverPoolError,
    SilverSample,
    harvest,
    load_pool,
    pool_add,
    pool_split,
    save_pool,
    silver_rate,
    stratified_split,
)

CFG = LaidaConfig()
FV = FeatureVector(np.zeros(4), 0)


def cv(p_max, k=0, C=2):
    probs = np.full(C, (1 - p_max) / (C - 1))
    probs[k] = p_max
    return ConfidenceVector.from_probs(probs)


@pytest.mark.parametrize("p,expected", [(0.9969, False), (0.9970, False), (0.9971, True), (1.0, True)])
def test_laida_boundary(p, expected):
    assert (harvest(cv(p), FV, CFG, 1, "v", 0.0) is not None) is expected


def test_default_threshold():
    assert CFG.confidence_threshold == 0.997 and CFG.sigma_level == 3.0


def test_threshold_validated():
    with pytest.raises(ValueError):
        LaidaConfig(1.0)


def test_harvest_records_provenance():
    s = harvest(cv(0.999, k=1, C=3), FV, CFG, 4, "L1-abc", 17.0)
    assert (s.pseudo_label, s.stage_id, s.model_version, s.harvested_ts) == (1, 4, "L1-abc", 17.0)
    assert s.confidence == 0.999


def test_pool_rejects_other_stage():
    pool = SilverPool(2)
    with pytest.raises(SilverPoolError):
        pool_add(pool, SilverSample(FV, 0, 0.999, 0.0, 3, "v"))


def test_pool_counts():
    pool = SilverPool(1)
    for k in [0, 2, 2, 1, 2]:
        pool_add(pool, SilverSample(FV, k, 0.999, 0.0, 1, "v"))
    assert pool.per_class_counts == Counter({2: 3, 0: 1, 1: 1})
    assert pool.count(5) == 0
    X, y = pool.arrays()
    assert X.shape == (5, 4) and y.tolist() == [0, 2, 2, 1, 2]


def test_silver_rate():
    pool = SilverPool(0, [SilverSample(FV, 0, 1.0, 0.0, 0, "v")] * 3)
    assert silver_rate(pool, 12) == 0.25
    with pytest.raises(ValueError):
        silver_rate(pool, 2)


def test_split_example_ten_per_class():
    labels = np.repeat([0, 1], 10)
    tr, te = stratified_split(labels, 0.8, seed=0)
    assert Counter(labels[tr].tolist()) == {0: 8, 1: 8}
    assert Counter(labels[te].tolist()) == {0: 2, 1: 2}


def test_split_keeps_both_sides_and_singletons():
    labels = np.array([0, 0, 1, 2, 2, 2])
    tr, te = stratified_split(labels, 0.8, seed=3)
    counts_te = Counter(labels[te].tolist())
    assert counts_te[0] == 1 and counts_te[2] >= 1
    assert 2 in set(tr.tolist()) or 2 in set(te.tolist())
    assert labels[tr].tolist().count(1) == 1


@settings(max_examples=150, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=200), st.integers(0, 10_000),
       st.sampled_from([0.5, 0.7, 0.8, 0.9]))
def test_split_partition_properties(labels, seed, frac):
    labels = np.array(labels)
    tr, te = stratified_split(labels, frac, seed)
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(len(labels)))
    assert np.array_equal(tr, np.sort(tr)) and np.array_equal(te, np.sort(te))
    for k, n in Counter(labels.tolist()).items():
        n_tr = int(np.sum(labels[tr] == k))
        if n >= 2:
            assert 1 <= n_tr <= n - 1
        else:
            assert n_tr == 1
    a = stratified_split(labels, frac, seed)
    assert np.array_equal(a[0], tr) and np.array_equal(a[1], te)


def test_split_total_near_fraction():
    labels = np.repeat(np.arange(6), [91, 3, 39, 89, 957, 59])
    tr, te = stratified_split(labels, 0.8, 0)
    assert abs(len(tr) - 0.8 * len(labels)) <= 6


def test_pool_split_empty():
    with pytest.raises(SilverPoolError):
        pool_split(SilverPool(0))


def test_pool_file_round_trip(tmp_path):
    pool = SilverPool(3)
    for i, lengths in enumerate([[100, -1400, 37], [1500, -40], [-777]]):
        fv = extract_features(FlowRecord(None, 0, 0, lengths), 8)
        pool_add(pool, SilverSample(fv, i % 2, 0.9985 + i * 1e-4, 10.0 + i, 3, "L0-x"))
    save_pool(pool, tmp_path / "p.ndjson", ["a", "b"])
    back = load_pool(tmp_path / "p.ndjson")
    assert back.stage_id == 3 and len(back) == 3
    for s, t in zip(pool.samples, back.samples):
        assert np.array_equal(s.features.values, t.features.values)
        assert (s.pseudo_label, s.confidence, s.harvested_ts, s.model_version) == \
               (t.pseudo_label, t.confidence, t.harvested_ts, t.model_version)
    save_pool(back, tmp_path / "q.ndjson", ["a", "b"])
    assert (tmp_path / "p.ndjson").read_bytes() == (tmp_path / "q.ndjson").read_bytes()


def test_pool_file_bad_line(tmp_path):
    (tmp_path / "p.ndjson").write_text('{"lengths": [1]}\n')
    with pytest.raises(SilverPoolError, match="line 1"):
        load_pool(tmp_path / "p.ndjson")
