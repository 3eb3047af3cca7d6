import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from protoprompt.config import TrainConfig
from protoprompt.errors import ConfigError, EmptyMaskError, ShapeError
from protoprompt.gradcheck import toy_problem, DEFAULT_SCALE
from protoprompt.losses import (
    DICE_SMOOTH,
    class_embedding,
    dice_loss,
    dice_loss_from_probs,
    prototype_contrastive_loss,
    total_loss,
)
from protoprompt.model import forward
from protoprompt.tensor import Tensor, grad_check
from protoprompt.trainer import batch_loss

seeds = st.integers(0, 2**31 - 1)


# ---------------------------------------------------------------- class embedding


def test_class_embedding_constant_features():
    v0 = np.array([1.5, -2.0, 0.25], dtype=np.float32)
    emb = np.broadcast_to(v0, (4, 5, 3)).copy()
    mask = np.zeros((4, 5))
    mask[1, 2] = mask[3, 4] = 1
    assert np.array_equal(class_embedding(emb, mask).data, v0)


def test_class_embedding_full_mask_is_spatial_mean():
    emb = np.random.default_rng(0).standard_normal((3, 3, 4)).astype(np.float32)
    out = class_embedding(emb, np.ones((3, 3))).data
    np.testing.assert_allclose(out, emb.astype(np.float64).mean(axis=(0, 1)), atol=1e-6)


def test_class_embedding_loop_oracle():
    rng = np.random.default_rng(1)
    emb = rng.integers(-5, 6, size=(2, 2, 2)).astype(np.float32)
    mask = np.array([[1, 0], [1, 1]])
    out = class_embedding(emb, mask).data
    assert np.array_equal(out, oracles.class_embedding(emb, mask).astype(np.float32))


def test_class_embedding_empty_mask():
    with pytest.raises(EmptyMaskError) as exc:
        class_embedding(np.ones((2, 2, 3)), np.zeros((2, 2)))
    assert exc.value.code == "empty-mask"


def test_class_embedding_shape_error():
    with pytest.raises(ShapeError):
        class_embedding(np.ones((2, 2, 3)), np.ones((3, 2)))


# ---------------------------------------------------------------- PCL


@pytest.mark.parametrize("c", [2, 3, 4, 7])
def test_pcl_equal_similarities_is_log_c(c):
    protos = np.random.default_rng(c).standard_normal((c, 5))
    loss = prototype_contrastive_loss(protos, np.zeros((c, 5)), 0.07)
    assert abs(float(loss.data) - math.log(c)) <= 1e-9


def test_pcl_single_class_is_zero():
    assert float(prototype_contrastive_loss(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), 0.07).data) == 0.0


def test_pcl_two_class_example():
    loss = prototype_contrastive_loss(np.array([[1.0], [-1.0]]), np.array([[1.0], [-1.0]]), 1.0)
    assert float(loss.data) == pytest.approx(0.126928, abs=1e-6)
    assert float(loss.data) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-7)


@pytest.mark.parametrize("tau", [0.0, -0.5])
def test_pcl_bad_temperature(tau):
    with pytest.raises(ConfigError) as exc:
        prototype_contrastive_loss(np.ones((2, 2)), np.ones((2, 2)), tau)
    assert exc.value.code == "config-error"


def test_pcl_stable_at_low_temperature():
    protos = np.array([[30.0, 0.0], [0.0, 30.0]])
    loss = prototype_contrastive_loss(protos, protos, 0.07)
    assert np.isfinite(loss.data) and float(loss.data) >= 0


@settings(max_examples=40, deadline=None)
@given(seed=seeds, c=st.integers(1, 4), d=st.integers(1, 8), tau=st.sampled_from([0.07, 0.5, 1.0, 2.0]))
def test_pcl_matches_oracle_and_is_non_negative(seed, c, d, tau):
    rng = np.random.default_rng(seed)
    protos, embs = rng.uniform(-2, 2, (c, d)), rng.uniform(-2, 2, (c, d))
    loss = float(prototype_contrastive_loss(protos, embs, tau).data)
    assert loss >= 0
    assert loss == pytest.approx(oracles.pcl(protos, embs, tau), abs=1e-9, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, c=st.integers(2, 5))
def test_pcl_permutation_invariant(seed, c):
    rng = np.random.default_rng(seed)
    protos, embs = rng.standard_normal((c, 4)), rng.standard_normal((c, 4))
    perm = rng.permutation(c)
    a = float(prototype_contrastive_loss(protos, embs, 0.3).data)
    b = float(prototype_contrastive_loss(protos[perm], embs[perm], 0.3).data)
    assert abs(a - b) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=seeds, c=st.integers(2, 5))
def test_pcl_temperature_monotone_when_separated(seed, c):
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((c, 4))
    embs = 2 * protos + 0.3 * rng.standard_normal((c, 4))
    sims = protos @ embs.T
    assume(all(sims[k, k] > np.delete(sims[k], k).max() + 1e-6 for k in range(c)))
    values = [float(prototype_contrastive_loss(protos, embs, t).data) for t in (4.0, 2.0, 1.0, 0.5, 0.2, 0.07, 0.03)]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_pcl_gradcheck():
    rng = np.random.default_rng(2)
    protos = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    embs = rng.standard_normal((4, 6))
    report = grad_check(lambda: prototype_contrastive_loss(protos, embs, 0.07), [protos], eps=1e-6)
    assert report.passed, report.errors


# ---------------------------------------------------------------- dice


def test_dice_perfect_probs_is_zero():
    g = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert abs(float(dice_loss_from_probs(g, g).data)) <= 1e-6


def test_dice_disjoint_two_by_two():
    m = np.array([[1.0, 1.0], [0.0, 0.0]])
    g = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert DICE_SMOOTH == 1.0
    assert float(dice_loss_from_probs(m, g).data) == 0.8  # float64 path
    assert dice_loss_from_probs(m.astype(np.float32), g).data == np.float32(0.8)


def test_dice_zero_logits():
    g = np.zeros((4, 4))
    g[0, :] = 1
    loss = float(dice_loss(np.zeros((4, 4)), g).data)
    assert loss == pytest.approx(1 - 5 / 9, abs=1e-6)


def test_dice_shape_error():
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_batch_is_mean_of_samples():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 4, 4))
    g = (rng.random((3, 4, 4)) < 0.5).astype(np.float64)
    per = [float(dice_loss(logits[i], g[i]).data) for i in range(3)]
    assert float(dice_loss(logits, g).data) == pytest.approx(np.mean(per), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, h=st.integers(1, 6), w=st.integers(1, 6))
def test_dice_oracle_and_bounds(seed, h, w):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-4, 4, (h, w))
    g = (rng.random((h, w)) < 0.5).astype(np.float64)
    assume(g.any())
    loss = float(dice_loss(logits, g).data)
    m = np.vectorize(oracles.sigmoid)(logits)
    assert loss == pytest.approx(oracles.dice_from_probs(m, g), abs=1e-12)
    assert 0 <= loss < 1


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_dice_monotone_in_foreground_probability(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((3, 3))
    g = (rng.random((3, 3)) < 0.5).astype(np.float64)
    assume(g.any())
    i = tuple(np.argwhere(g)[0])
    lowered = m.copy()
    lowered[i] *= rng.random()
    assert float(dice_loss_from_probs(lowered, g).data) >= float(dice_loss_from_probs(m, g).data) - 1e-15


def test_dice_gradcheck():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True, dtype=np.float64)
    g = (rng.random((2, 4, 4)) < 0.4).astype(np.float64)
    report = grad_check(lambda: dice_loss(logits, g), [logits], eps=1e-6)
    assert report.passed, report.errors


# ---------------------------------------------------------------- total


def test_total_loss_examples():
    assert float(total_loss(Tensor(0.0), Tensor(0.0)).data) == 0.0
    assert float(total_loss(Tensor(0.5), Tensor(1.0)).data) == 1.5


def test_breakdown_equals_independent_recomputation():
    state, pairs, cfg = toy_problem(3, dict(DEFAULT_SCALE))
    total, dice, pcl = batch_loss(state, pairs, cfg)
    logits = forward(state, np.stack([p.embedding for p in pairs]), np.array([p.class_id for p in pairs])).logits.data
    dice_ref = np.mean([
        oracles.dice_from_probs(np.vectorize(oracles.sigmoid)(logits[i].astype(np.float64)), p.mask.full)
        for i, p in enumerate(pairs)
    ])
    present = sorted({p.class_id for p in pairs})
    embs = np.array([oracles.class_embedding(p.embedding, p.mask.coarse) for p in pairs])
    pcl_ref = oracles.pcl(state.prototypes.data[np.array(present) - 1].astype(np.float64), embs, cfg.tau)
    assert float(dice.data) == pytest.approx(dice_ref, abs=1e-6)
    assert float(pcl.data) == pytest.approx(pcl_ref, abs=1e-6 * max(1.0, pcl_ref))
    assert float(total.data) == pytest.approx(dice_ref + pcl_ref, abs=1e-6 * max(1.0, pcl_ref))
