import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from protoprompt import data, model
from protoprompt.errors import ShapeError
from protoprompt.metrics import PairResult, binarize, evaluate, iou, summarize

seeds = st.integers(0, 2**31 - 1)


def test_binarize_tie_is_false():
    assert not binarize(np.zeros((3, 3)), 0.5).any()


def test_binarize_extremes():
    assert binarize(np.array([-10.0, 10.0])).tolist() == [False, True]


def test_binarize_matches_elementwise_oracle():
    logits = np.random.default_rng(0).uniform(-3, 3, (6, 7))
    expected = [[oracles.sigmoid(v) > 0.3 for v in row] for row in logits]
    assert binarize(logits, 0.3).tolist() == expected


def test_iou_examples():
    a = np.array([[1, 1], [0, 0]], dtype=bool)
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[0, 1], [0, 1]])
    assert iou(pred, gt) == pytest.approx(1 / 3)
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert iou(np.zeros((2, 2)), a) == 0.0


def test_iou_shape_error():
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_iou_symmetric_bounded_and_matches_count(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 6)) < 0.4, rng.random((5, 6)) < 0.4
    v = iou(a, b)
    assert v == iou(b, a) and 0.0 <= v <= 1.0
    assert v == oracles.iou_count(a, b)


def test_summarize_handcrafted():
    pairs = [PairResult("a", 1, 1.0), PairResult("b", 1, 0.5), PairResult("c", 2, 0.0)]
    r = summarize(pairs, 2)
    assert r.challenge_iou == 0.5 and r.iou == 0.5
    assert r.per_class == {1: 0.75, 2: 0.0}
    assert r.mc_iou == 0.375


def test_summarize_iou_counts_predicted_absent_classes():
    # only reachable when a caller reports a non-empty prediction for an absent class
    pairs = [PairResult("a", 1, 1.0)]
    r = summarize(pairs, 2, predicted={"a": {2}})
    assert r.challenge_iou == 1.0 and r.iou == 0.5


@settings(max_examples=50, deadline=None)
@given(seed=seeds, n=st.integers(1, 40), c=st.integers(1, 5))
def test_challenge_equals_iou_and_accumulation_oracle(seed, n, c):
    rng = np.random.default_rng(seed)
    pairs = [PairResult(f"s{rng.integers(8)}", int(rng.integers(1, c + 1)), float(rng.random())) for _ in range(n)]
    # one class per image at most once
    seen, unique = set(), []
    for p in pairs:
        if (p.sample_id, p.class_id) not in seen:
            seen.add((p.sample_id, p.class_id))
            unique.append(p)
    r = summarize(unique, c)
    assert r.challenge_iou == r.iou  # bit-for-bit
    naive = 0.0
    for p in unique:
        naive += p.iou
    assert abs(r.challenge_iou - naive / len(unique)) <= 1e-9
    assert 0.0 <= r.mc_iou <= 1.0


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_mc_iou_relabeling_invariant(seed):
    rng = np.random.default_rng(seed)
    pairs = [PairResult(f"s{i}", k, float(rng.random())) for i in range(6) for k in (1, 2, 3) if rng.random() < 0.7]
    if not pairs:
        return
    perm = {1: 3, 2: 1, 3: 2}
    relabeled = [PairResult(p.sample_id, perm[p.class_id], p.iou) for p in pairs]
    assert summarize(pairs, 3).mc_iou == pytest.approx(summarize(relabeled, 3).mc_iou, abs=1e-12)


def _crafted_samples():
    rng = np.random.default_rng(1)
    out = []
    for i in range(3):
        ids = np.zeros((8, 8), dtype=np.uint8)
        ids[:4, :4] = 1
        if i != 1:
            ids[5:, 5:] = 2
        out.append(data.make_sample(f"s{i}", rng.standard_normal((2, 2, 4)), ids))
    return out


def _fake_forward(sign):
    def forward(state, embeddings, classes, record=None):
        logits = np.stack([sign * (20.0 * (state.lookup[tuple(e.ravel())] == c) - 10.0)
                           for e, c in zip(embeddings, classes)])
        return SimpleNamespace(logits=SimpleNamespace(data=logits))

    return forward


def test_evaluate_perfect_predictor(monkeypatch):
    samples = _crafted_samples()
    state = SimpleNamespace(num_classes=2, lookup={tuple(s.embedding.ravel()): s.class_ids for s in samples})
    monkeypatch.setattr(model, "forward", _fake_forward(1.0))
    r = evaluate(state, samples)
    assert r.challenge_iou == r.iou == r.mc_iou == 1.0
    assert len(r.pairs) == 5


def test_evaluate_background_predictor(monkeypatch):
    samples = _crafted_samples()
    state = SimpleNamespace(num_classes=2, lookup={tuple(s.embedding.ravel()): s.class_ids for s in samples})

    def forward(state, embeddings, classes, record=None):
        return SimpleNamespace(logits=SimpleNamespace(data=np.full((len(classes), 8, 8), -10.0)))

    monkeypatch.setattr(model, "forward", forward)
    r = evaluate(state, samples)
    assert r.challenge_iou == r.iou == r.mc_iou == 0.0


def test_csv_format():
    r = summarize([PairResult("a", 1, 1 / 3), PairResult("a", 2, 1.0)], 2)
    assert r.to_csv() == (
        "name,value\nclass_1,0.333333\nclass_2,1.000000\n"
        "challenge_iou,0.666667\niou,0.666667\nmc_iou,0.666667\n"
    )
    assert math.isclose(r.challenge_iou, 2 / 3)
