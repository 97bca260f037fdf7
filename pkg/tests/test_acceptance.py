"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import hashlib
import heapq
import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import record_criterion
from gradcheck import max_relative_errors, toy_problem
from stat_oracles import t_two_sided_p, wilcoxon_enumerate

from iomtguard.agent import SecurityAgent, seed_store, simulate
from iomtguard.bilstm import TrainConfig, train
from iomtguard.cli import run
from iomtguard.data import load_csv, normalize, save_csv, stratified_split, synth_generate
from iomtguard.ledger import (FIELD_NAMES, DeviceRegistry, Ledger, LogicalClock, append_block, field_bytes,
                              sign_request, verify_chain, with_field_bytes)
from iomtguard.metrics import (ConfusionCounts, accuracy, confusion, detection_rate, f1, false_alarm_rate,
                               paired_t_test, precision, recall, wilcoxon_signed_rank)
from iomtguard.patterns import PatternStore, Recognized
from iomtguard.woa import BinaryWoaConfig, WoaConfig, optimize, select_features


def test_criterion_1_gradient_check():
    t0 = time.perf_counter()
    model, X, y = toy_problem(dropout=0.0, seed=0)
    worst = max_relative_errors(model, X, y, h=1e-5)
    elapsed = time.perf_counter() - t0
    err = max(worst.values())
    ok = err < 1e-4 and elapsed < 10
    record_criterion(1, "BiLSTM gradient check", ok, f"max rel err {err:.2e}, {elapsed:.1f}s")
    assert ok, worst


def test_criterion_2_woa_sphere():
    t0 = time.perf_counter()
    cfg = WoaConfig(population=30, max_iters=200, dimension=10, bounds=[(-5.0, 5.0)], seed=0)
    res = optimize(lambda x: float(np.sum(x * x)), cfg)
    again = optimize(lambda x: float(np.sum(x * x)), cfg)
    elapsed = time.perf_counter() - t0
    monotone = all(b <= a for a, b in zip(res.history, res.history[1:]))
    ok = res.best_fitness < 1e-3 and monotone and res.history == again.history and elapsed < 5
    record_criterion(2, "WOA on the sphere function", ok, f"best {res.best_fitness:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_feature_recovery():
    t0 = time.perf_counter()
    hits, detail = 0, []
    for seed in range(10):
        d = normalize(synth_generate(400, 5, 15, n_classes=6, seed=seed))
        mask = select_features(d, BinaryWoaConfig(woa=WoaConfig(seed=seed))).mask
        covered = int(np.sum(mask.bits[:5]))
        good = covered >= 4 and mask.count <= 10
        hits += good
        detail.append(f"{covered}/5 of {mask.count}")
    elapsed = time.perf_counter() - t0
    ok = hits >= 8 and elapsed < 120
    record_criterion(3, "feature-selection recovery", ok, f"{hits}/10 seeds, {elapsed:.0f}s: {', '.join(detail)}")
    assert ok


def _tally(t, p):
    tp = tn = fp = fn = 0
    for a, b in zip(t, p):
        if a == 1 and b == 1:
            tp += 1
        elif a == 1:
            fn += 1
        elif b == 1:
            fp += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        t = rng.integers(0, 2, n).tolist()
        p = rng.integers(0, 2, n).tolist()
        tp, tn, fp, fn = _tally(t, p)
        c = confusion(t, p, 1)
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        expected = (pr, rc, 2 * pr * rc / (pr + rc) if pr + rc else 0.0, (tp + tn) / n, rc,
                    fp / (fp + tn) if fp + tn else 0.0)
        got = (precision(c), recall(c), f1(c), accuracy(c), detection_rate(c), false_alarm_rate(c))
        mismatches += (c != ConfusionCounts(tp, tn, fp, fn)) or got != expected
    f1_table = 2 * 97.8 * 98.5 / (97.8 + 98.5)
    ok = mismatches == 0 and abs(f1_table - 98.1) <= 0.1
    record_criterion(4, "metric oracle", ok, f"{mismatches} mismatches, f1 {f1_table:.3f}")
    assert ok


def _ledger(n_blocks):
    rng = np.random.default_rng(0)
    reg = DeviceRegistry()
    reg.enroll("dev-00", rng)
    clock = LogicalClock()
    led = Ledger()
    while len(led) < n_blocks:
        i = len(led)
        req = sign_request(reg, "dev-00", f"payload-{i}".encode(), rng, clock)
        accepted = i % 3 != 0
        append_block(led, req, "accepted" if accepted else "rejected",
                     "phase3_classifier:classified_benign" if accepted else "phase2_pattern:known_attack",
                     clock, countersig=hashlib.sha256(bytes([i])).digest() if accepted else b"")
    return led


def test_criterion_5_ledger_tamper_exhaustive():
    led = _ledger(50)
    assert verify_chain(led).ok
    t0 = time.perf_counter()
    blocks = list(led.blocks)
    tried = missed = 0
    for i, block in enumerate(led.blocks):
        for name in FIELD_NAMES:
            raw = field_bytes(block, name)
            for pos in range(len(raw)):
                buf = bytearray(raw)
                for v in range(256):
                    if v == raw[pos]:
                        continue
                    buf[pos] = v
                    blocks[i] = with_field_bytes(block, name, bytes(buf))
                    missed += verify_chain(blocks).ok
                    tried += 1
        blocks[i] = block
    elapsed = time.perf_counter() - t0
    ok = missed == 0 and tried > 0 and elapsed < 30
    record_criterion(5, "ledger tamper evidence", ok,
                     f"{tried} mutations, {missed} undetected, {elapsed:.1f}s")
    assert ok


def _wilcoxon_vectors():
    for m in range(1, 6):  # every vector over a small alphabet, ties included
        yield from itertools.product((-2, -1, 1, 2), repeat=m)
    rng = np.random.default_rng(0)
    for m in range(1, 11):
        for _ in range(150):
            yield tuple(rng.integers(-6, 7, m).tolist())
        for _ in range(50):
            yield tuple(np.round(rng.normal(size=m), 3).tolist())


def test_criterion_6_statistics():
    worst = 0.0
    count = 0
    for d in _wilcoxon_vectors():
        if not any(d):
            with pytest.raises(ValueError):
                wilcoxon_signed_rank(d)
            continue
        w, p = wilcoxon_enumerate(d)
        res = wilcoxon_signed_rank(d)
        assert res.statistic == w and res.note == "exact"
        worst = max(worst, abs(res.p_value - p))
        count += 1
    t = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    oracle = t_two_sided_p(t.statistic, 4)
    ok = worst < 1e-12 and abs(t.p_value - 0.0132) <= 0.0005 and abs(t.p_value - oracle) < 1e-10
    record_criterion(6, "signed-rank and t-test p values", ok,
                     f"{count} vectors, max |dp| {worst:.1e}, t-test p {t.p_value:.5f}")
    assert ok


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    t0 = time.perf_counter()
    tmp = tmp_path_factory.mktemp("e2e")
    raw = synth_generate(2000, 5, 15, 2, seed=0, separation=8.0)
    save_csv(raw, tmp / "corpus.csv")
    d = normalize(load_csv(tmp / "corpus.csv", raw.schema))
    tr, te = stratified_split(d, 0.3, 0)
    mask = select_features(tr, BinaryWoaConfig(woa=WoaConfig(seed=0))).mask
    model, _ = train(tr, mask, TrainConfig(epochs=10, seed=0))
    return dict(d=d, tr=tr, te=te, mask=mask, model=model, setup=time.perf_counter() - t0)


def _fresh_agent(fx):
    store = seed_store(fx["tr"], benign_class=0)
    return SecurityAgent(fx["model"], fx["mask"], store, DeviceRegistry(), b"\x11" * 32, clock=LogicalClock())


@pytest.mark.slow
def test_criterion_7_end_to_end(e2e):
    t0 = time.perf_counter()
    agent = _fresh_agent(e2e)
    rep = simulate(agent, e2e["te"], 1000, 0.3, seed=0)
    chain_ok = verify_chain(agent.ledger).ok
    elapsed = e2e["setup"] + time.perf_counter() - t0
    ok = rep.dr >= 0.90 and rep.far <= 0.10 and len(agent.ledger) == 1001 and chain_ok and elapsed < 300
    record_criterion(7, "end-to-end run at AP=0.3", ok,
                     f"DR {rep.dr:.3f}, FAR {rep.far:.3f}, {len(agent.ledger)} blocks, "
                     f"{e2e['mask'].count} features, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_dr_trend_over_attack_percentage(e2e):
    drs = []
    for ap in (0.3, 0.4, 0.5, 0.6, 0.7, 0.8):
        drs.append(simulate(_fresh_agent(e2e), e2e["te"], 1000, ap, seed=0).dr)
    ok = all(b <= a for a, b in zip(drs, drs[1:]))
    record_criterion(7, "DR non-increasing as AP sweeps 0.3 to 0.8", ok, " ".join(f"{x:.3f}" for x in drs))
    assert ok


def _digests(manifest_path):
    return json.loads(manifest_path.read_text())["outputs"]


def test_criterion_8_cli_reproducibility(tmp_path):
    def pipeline(w):
        w.mkdir()
        c = ["--data", str(w / "d.csv"), "--schema", str(w / "s.json")]
        cmds = {
            "synth": ["synth", "--rows", "300", "--informative", "3", "--noise", "5", "--separation", "8",
                      "--out", str(w / "d.csv"), "--schema-out", str(w / "s.json")],
            "ingest": ["ingest", *c, "--out", str(w / "n.csv"), "--summary", str(w / "sum.json")],
            "select": ["select-features", *c, "--population", "8", "--iters", "8", "--out", str(w / "mask.json")],
            "train": ["train", *c, "--mask", str(w / "mask.json"), "--epochs", "3", "--units", "6",
                      "--layers", "1", "--out", str(w / "model.json"), "--history", str(w / "h.json")],
            "evaluate": ["evaluate", *c, "--model", str(w / "model.json"), "--out", str(w / "ev.json"),
                         "--csv", str(w / "ev.csv")],
            "crossval": ["crossval", *c, "--method", "knn", "--k", "3", "--out", str(w / "cv.json")],
            "patterns": ["patterns", "import", *c, "--limit", "40", "--out", str(w / "p.jsonl")],
            "simulate": ["agent", "simulate", *c, "--model", str(w / "model.json"), "--mask", str(w / "mask.json"),
                         "--patterns", str(w / "p.jsonl"), "--n", "100", "--ap", "0.4",
                         "--out-dir", str(w / "out")],
            "verify": ["ledger", "verify", str(w / "out" / "ledger.jsonl")],
        }
        out = {}
        for name, argv in cmds.items():
            m = w / f"{name}.manifest.json"
            assert run([*argv, "--seed", "11", "--manifest", str(m)]) == 0, name
            out[name] = {p.replace(str(w), ""): h for p, h in _digests(m).items()}
        return out

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differing = [k for k in a if a[k] != b[k]]
    ok = not differing and all(a[k] for k in a if k != "verify")
    record_criterion(8, "CLI reproducibility", ok, f"{len(a)} commands, differing: {differing or 'none'}")
    assert ok


def test_criterion_9_pattern_store_oracle():
    rng = np.random.default_rng(0)
    dim, n, theta, k = 8, 10_000, 0.05, 5
    P = rng.uniform(0, 1, (n, dim))
    labels = rng.integers(0, 3, n)
    store = PatternStore(dim)
    for x, lab in zip(P, labels):
        store.insert(x, int(lab))
    rows = [tuple(map(float, x)) for x in P]
    queries = rng.uniform(0, 1, (1000, dim))
    near = rng.integers(0, n, 500)  # half the queries sit close to a stored pattern
    queries[:500] = np.clip(P[near] + rng.normal(scale=0.02, size=(500, dim)), 0, 1)
    scale = math.sqrt(dim)
    bad = recognized = 0
    for q in queries:
        qt = tuple(map(float, q))
        ranked = heapq.nsmallest(k, ((math.dist(r, qt) / scale, i) for i, r in enumerate(rows)))
        res = store.match(q, theta, k)
        if ranked[0][0] <= theta:
            recognized += 1
            good = isinstance(res, Recognized) and res.pattern_id == ranked[0][1] \
                and res.label == labels[ranked[0][1]] and abs(res.distance - ranked[0][0]) <= 1e-12
        else:
            good = not res.recognized and [i for i, _, _ in res.nearest] == [i for _, i in ranked] \
                and all(abs(dd - od) <= 1e-12 for (_, _, dd), (od, _) in zip(res.nearest, ranked))
        bad += not good
    ok = bad == 0 and 0 < recognized < 1000
    record_criterion(9, "pattern store vs brute force", ok, f"{bad} mismatches, {recognized} recognized")
    assert ok
