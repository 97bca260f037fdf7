import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from iomtguard.patterns import PatternError, PatternSource, PatternStore, SecurityLevel


def brute_force(patterns, labels, q, k):
    """Pure-python scan: sort by (distance, id)."""
    C = len(q)
    rows = []
    for pid, p in enumerate(patterns):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q))) / math.sqrt(C)
        rows.append((d, pid))
    rows.sort()
    return [(pid, labels[pid], d) for d, pid in rows[:k]]


def test_insert_ids_increment():
    s = PatternStore(3)
    assert s.insert([0, 0, 0], 1) == 0
    assert s.insert([1, 1, 1], 0) == 1
    assert len(s) == 2


def test_exact_duplicate_recognized():
    s = PatternStore(3)
    pid = s.insert([0.2, 0.4, 0.6], 1)
    m = s.match([0.2, 0.4, 0.6])
    assert m.recognized and m.pattern_id == pid and m.distance == 0.0
    assert m.security_level is SecurityLevel.HIGH


def test_feature_out_of_range():
    with pytest.raises(PatternError, match=r"feature out of \[0,1\]"):
        PatternStore(2).insert([0.5, 1.5], 1)


def test_dimension_mismatch():
    s = PatternStore(2)
    with pytest.raises(PatternError):
        s.insert([0.5], 1)
    with pytest.raises(PatternError):
        s.match([0.5, 0.5, 0.5])


def test_benign_must_be_safe():
    s = PatternStore(2, benign_class=0)
    assert s[s.insert([0, 0], 0)].security_level is SecurityLevel.SAFE
    with pytest.raises(PatternError):
        s.insert([0, 0], 0, SecurityLevel.HIGH)


def test_origin_vs_all_ones():
    s = PatternStore(4)
    s.insert([0, 0, 0, 0], 1)
    m = s.match([1, 1, 1, 1], theta=0.1)
    assert not m.recognized and m.nearest == [(0, 1, 1.0)]


def test_empty_store():
    m = PatternStore(2).match([0.5, 0.5])
    assert not m.recognized and m.nearest == []


def test_bad_theta_k():
    s = PatternStore(1)
    with pytest.raises(PatternError):
        s.match([0.1], theta=0)
    with pytest.raises(PatternError):
        s.match([0.1], k=0)


def test_boundary_distance_recognized():
    s = PatternStore(1)
    s.insert([0.0], 1)
    assert s.match([0.25], theta=0.25).recognized
    assert not s.match([0.25], theta=0.2499).recognized


def test_ties_lower_id_first():
    s = PatternStore(1)
    for _ in range(4):
        s.insert([0.5], 1)
    s.insert([0.1], 1)
    m = s.match([0.9], theta=0.01, k=3)
    assert [pid for pid, _, _ in m.nearest] == [0, 1, 2]
    m = s.match([0.5], theta=0.01)
    assert m.pattern_id == 0


def test_random_100_k3_brute_force():
    rng = np.random.default_rng(0)
    P = rng.random((100, 6))
    s = PatternStore(6)
    for p in P:
        s.insert(p, 1)
    q = rng.random(6)
    m = s.match(q, theta=1e-9, k=3)
    ref = brute_force(P.tolist(), [1] * 100, q.tolist(), 3)
    assert [x[0] for x in m.nearest] == [x[0] for x in ref]
    np.testing.assert_allclose([x[2] for x in m.nearest], [x[2] for x in ref], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 5)),
                  elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])),
       st.integers(1, 6), st.floats(0.01, 0.5))
def test_match_agrees_with_scan(P, k, theta):
    """Coarse grid values force many exact ties."""
    s = PatternStore(P.shape[1])
    for i, p in enumerate(P):
        s.insert(p, 1 + i % 2)
    q = P[len(P) // 2] * 0.5 + 0.25
    m = s.match(q, theta, k)
    ref = brute_force(P.tolist(), [1 + i % 2 for i in range(len(P))], q.tolist(), k)
    if ref[0][2] <= theta:
        assert m.recognized and m.pattern_id == ref[0][0]
        assert m.distance <= theta
    else:
        assert not m.recognized
        assert [x[0] for x in m.nearest] == [x[0] for x in ref]
        dists = [x[2] for x in m.nearest]
        assert dists == sorted(dists)


def test_insert_does_not_change_existing_distances():
    rng = np.random.default_rng(1)
    s = PatternStore(3)
    for p in rng.random((10, 3)):
        s.insert(p, 1)
    before = s.distances(s[4].features)
    s.insert(rng.random(3), 1)
    np.testing.assert_array_equal(s.distances(s[4].features)[:10], before)


def test_record_attack():
    s = PatternStore(2)
    p = s.record_attack([0.3, 0.9], 2)
    assert p.source is PatternSource.LEARNED and p.security_level is SecurityLevel.HIGH
    assert len(s) == 1
    m = s.match([0.3, 0.9])
    assert m.recognized and m.distance == 0.0


def test_record_attack_custom_severity():
    s = PatternStore(1)
    p = s.record_attack([0.1], 3, lambda label: SecurityLevel.CRITICAL)
    assert p.security_level is SecurityLevel.CRITICAL


def test_record_benign_refused():
    with pytest.raises(PatternError):
        PatternStore(2).record_attack([0.1, 0.1], 0)


def test_jsonl_round_trip(tmp_path):
    s = PatternStore(2, benign_class=0, model_path="model.json")
    s.insert([0.1, 0.2], 0)
    s.record_attack([0.9, 0.8], 1)
    s.export_jsonl(tmp_path / "p.jsonl")
    back = PatternStore.import_jsonl(tmp_path / "p.jsonl")
    assert back.patterns == s.patterns and back.model_path == "model.json"


def test_jsonl_bad_line(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"features": [0.5, 2.0], "label": 1, "security_level": "high"}\n')
    with pytest.raises(PatternError, match="line 1"):
        PatternStore.import_jsonl(tmp_path / "p.jsonl")


def test_concurrent_inserts_and_matches():
    s = PatternStore(4)
    rng = np.random.default_rng(0)
    data = rng.random((400, 4))
    errors = []

    def writer(chunk):
        for p in chunk:
            s.insert(p, 1)

    def reader():
        try:
            for _ in range(200):
                m = s.match(data[0], theta=1e-12, k=3)
                if not m.recognized:
                    for pid, _, d in m.nearest:
                        assert math.isclose(d, s.distances(data[0])[pid])
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(data[i::4],)) for i in range(4)]
    threads += [threading.Thread(target=reader) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len(s) == 400
    assert sorted(p.id for p in s.patterns) == list(range(400))
