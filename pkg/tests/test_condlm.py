import math

import numpy as np
import pytest

from planlm.condlm import (
    AdapterLayer, ConditionedLM, ConditioningError, ConditioningMode, conditioning_weights, ntp_loss,
    onehot,
)
from planlm.corpus import collate
from planlm.tensor import Tape, Tensor, default_dtype, finite_difference, no_grad

from conftest import rel_err


def perturb_projections(lm, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for a in lm.adapters:
        a.projection.weight.data = rng.normal(0, scale, a.projection.weight.shape).astype(
            a.projection.weight.dtype)


@pytest.mark.parametrize("K", [2, 8, 32])
def test_soft_vector_matches_explicit_sum(K):
    rng = np.random.default_rng(K)
    E = rng.normal(size=(K, 16))
    adapter = AdapterLayer(E, 8, rng)
    s = Tensor(rng.normal(size=(3, K)))
    p = np.exp(s.data - s.data.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    r = adapter.conditioning_vector(conditioning_weights("soft", K, logits=s)).data
    for row in range(3):
        brute = np.zeros(16)
        for a in range(K):
            brute += p[row, a] * adapter.embedding.data[a].astype(np.float64)
        np.testing.assert_allclose(r[row], brute, atol=1e-6)


def test_soft_degenerate_cases():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(5, 4))
    adapter = AdapterLayer(E, 8, rng)
    spike = Tensor(np.array([[-1e4, -1e4, 1e4, -1e4, -1e4]]))
    r = adapter.conditioning_vector(conditioning_weights("soft", 5, logits=spike)).data
    np.testing.assert_array_equal(r[0], adapter.embedding.data[2])
    zero = conditioning_weights("soft", 5, logits=Tensor(np.zeros((1, 5))))
    uni = conditioning_weights("uniform", 5, logits=Tensor(np.zeros((1, 5))))
    np.testing.assert_allclose(adapter.conditioning_vector(zero).data, adapter.conditioning_vector(uni).data)
    np.testing.assert_allclose(adapter.conditioning_vector(uni).data[0], adapter.embedding.data.mean(0), atol=1e-6)


def test_soft_vector_inside_hull_norm_bound():
    rng = np.random.default_rng(1)
    adapter = AdapterLayer(rng.normal(size=(8, 6)), 4, rng)
    w = conditioning_weights("soft", 8, logits=Tensor(rng.normal(0, 3, (100, 8))))
    r = adapter.conditioning_vector(w).data
    assert np.linalg.norm(r, axis=1).max() <= np.linalg.norm(adapter.embedding.data, axis=1).max() + 1e-6


def test_mode_weights():
    s = Tensor(np.array([[0.1, 2.0, -1.0], [5.0, 5.0, 1.0]]))
    np.testing.assert_array_equal(conditioning_weights("hard", 3, logits=s).data, [[0, 1, 0], [1, 0, 0]])
    np.testing.assert_array_equal(conditioning_weights("st", 3, logits=s).data, [[0, 1, 0], [1, 0, 0]])
    np.testing.assert_allclose(conditioning_weights("uniform", 3, logits=s).data, np.full((2, 3), 1 / 3))
    np.testing.assert_array_equal(conditioning_weights("oracle", 3, oracle=np.array([2, 0])).data,
                                  [[0, 0, 1], [1, 0, 0]])
    with pytest.raises(ConditioningError):
        conditioning_weights("oracle", 3, oracle=np.array([3, 0]))
    with pytest.raises(ConditioningError):
        conditioning_weights("soft", 3)
    with pytest.raises(ConditioningError):
        conditioning_weights("soft", 4, logits=s)


def test_mode_parsing():
    assert ConditioningMode.parse("Straight_Through") is ConditioningMode.STRAIGHT_THROUGH
    assert ConditioningMode.parse("oracle").eval_mode is ConditioningMode.HARD
    assert ConditioningMode.SOFT.differentiable and not ConditioningMode.HARD.differentiable
    with pytest.raises(ValueError):
        ConditioningMode.parse("gumbel")


def test_onehot_padding_rows_are_zero():
    out = onehot(np.array([[1, -1]]), 3)
    np.testing.assert_array_equal(out, [[[0, 1, 0], [0, 0, 0]]])


def _batch(small_corpus, n=4):
    corpus, _ = small_corpus
    return collate(corpus, corpus.windows("train")[:n])


def test_zero_init_matches_base_lm(small_corpus, tiny_models):
    _, lm = tiny_models
    corpus, vocab = small_corpus
    rng = np.random.default_rng(0)
    b = _batch(small_corpus, 8)
    w = conditioning_weights("soft", vocab.K, logits=Tensor(rng.normal(0, 2, b.slots.shape + (vocab.K,))))
    with no_grad():
        base = lm(b.tokens).data
        cond = lm(b.tokens, b.slot_index, w, b.slot_mask).data
    assert np.abs(base - cond).max() <= 1e-6


def test_injection_never_reaches_earlier_positions(small_corpus, tiny_models):
    _, lm = tiny_models
    perturb_projections(lm)
    b = _batch(small_corpus, 1)
    K = lm.K
    rng = np.random.default_rng(2)
    logits = rng.normal(size=b.slots.shape + (K,))
    j = 1
    first = int(np.argmax(b.slot_index[0] == j))
    logits2 = logits.copy()
    logits2[0, j] += rng.normal(0, 3, K)
    with no_grad():
        out1 = lm(b.tokens, b.slot_index, conditioning_weights("soft", K, logits=Tensor(logits)), b.slot_mask).data
        out2 = lm(b.tokens, b.slot_index, conditioning_weights("soft", K, logits=Tensor(logits2)), b.slot_mask).data
    np.testing.assert_array_equal(out1[0, :first], out2[0, :first])
    assert np.abs(out1[0, first] - out2[0, first]).max() > 0


def test_soft_equals_hard_for_one_hot_distribution(tiny_models):
    _, lm = tiny_models
    perturb_projections(lm, seed=3)
    tokens = np.array([[256] + list(b"Single sentence only")])
    slot_index = np.zeros_like(tokens)
    logits = np.full((1, 1, lm.K), -1e4)
    logits[0, 0, 2] = 1e4
    with no_grad():
        soft = lm(tokens, slot_index, conditioning_weights("soft", lm.K, logits=Tensor(logits))).data
        hard = lm(tokens, slot_index, conditioning_weights("hard", lm.K, logits=Tensor(logits))).data
    np.testing.assert_allclose(soft, hard, atol=1e-6)


def test_untrained_loss_near_log_vocab(small_corpus, tiny_models):
    _, lm = tiny_models
    b = _batch(small_corpus, 4)
    with no_grad():
        assert abs(ntp_loss(lm, b.tokens).item() - math.log(258)) < 0.1


def test_hard_and_straight_through_forward_bitwise(small_corpus, tiny_models):
    _, lm = tiny_models
    perturb_projections(lm, seed=4)
    b = _batch(small_corpus, 3)
    s = Tensor(np.random.default_rng(4).normal(size=b.slots.shape + (lm.K,)), requires_grad=True)
    with Tape():
        hard = lm(b.tokens, b.slot_index, conditioning_weights("hard", lm.K, logits=s), b.slot_mask)
        st = lm(b.tokens, b.slot_index, conditioning_weights("st", lm.K, logits=s), b.slot_mask)
    assert hard.data.tobytes() == st.data.tobytes()


@pytest.mark.parametrize("mode,expect_nonzero", [("soft", True), ("st", True), ("hard", False),
                                                  ("uniform", False), ("oracle", False)])
def test_planner_logit_gradient_by_mode(small_corpus, tiny_models, mode, expect_nonzero):
    _, lm = tiny_models
    perturb_projections(lm, seed=5)
    b = _batch(small_corpus, 3)
    s = Tensor(np.random.default_rng(5).normal(size=b.slots.shape + (lm.K,)).astype(np.float32),
               requires_grad=True)
    with Tape() as tape:
        w = conditioning_weights(mode, lm.K, logits=s, oracle=b.oracle, mask=b.slot_mask)
        loss = ntp_loss(lm, b.tokens, b.slot_index, w, b.slot_mask)
    tape.backward(loss)
    g = np.zeros(s.shape) if s.grad is None else s.grad
    if expect_nonzero:
        assert np.abs(g).max() > 0
    else:
        assert np.all(g == 0)


def test_soft_gradient_matches_finite_differences(small_corpus):
    corpus, vocab = small_corpus
    b = collate(corpus, corpus.windows("train")[:2])
    with default_dtype(np.float64):
        lm = ConditionedLM(vocab.centroids, d_model=16, n_layers=2, n_heads=2, context=128,
                           rng=np.random.default_rng(7))
        perturb_projections(lm, seed=7)
        s = Tensor(np.random.default_rng(8).normal(size=b.slots.shape + (lm.K,)), requires_grad=True)

        def loss():
            w = conditioning_weights("soft", lm.K, logits=s)
            return ntp_loss(lm, b.tokens, b.slot_index, w, b.slot_mask)

        with Tape() as tape:
            out = loss()
        tape.backward(out)
        valid = [i for i in np.ndindex(*s.shape) if b.slot_mask[i[:2]]][:40]
        fd = finite_difference(loss, s, index=valid)
    sel = tuple(np.array(valid).T)
    assert rel_err(s.grad[sel], fd[sel]) <= 1e-4


def test_missing_conditioning_rejected(small_corpus, tiny_models):
    _, lm = tiny_models
    b = _batch(small_corpus, 2)
    w = conditioning_weights("uniform", lm.K, oracle=b.oracle)
    with pytest.raises(ConditioningError):
        lm(b.tokens, None, w)
    bad = b.slot_index.copy()
    bad[0, 0] = w.shape[1]
    with pytest.raises(ConditioningError):
        lm(b.tokens, bad, w)
    mask = b.slot_mask.copy()
    mask[0, b.slot_index[0, 0]] = False
    with pytest.raises(ConditioningError):
        lm(b.tokens, b.slot_index, w, mask)


def test_adapter_layer_defaults():
    c = np.random.default_rng(0).normal(size=(8, 6))
    lm = ConditionedLM(c, d_model=16, n_layers=4, n_heads=2)
    assert lm.adapter_layers == [2, 3]
    for a in lm.adapters:
        assert a.K == 8 and np.all(a.projection.weight.data == 0)
        np.testing.assert_allclose(a.embedding.data, c.astype(np.float32))
    with pytest.raises(ValueError):
        ConditionedLM(c, d_model=16, n_layers=2, n_heads=2, adapter_layers=[2])


def test_capture_shapes_and_pre_merge_constant_within_sentence(small_corpus, tiny_models):
    _, lm = tiny_models
    b = _batch(small_corpus, 2)
    w = conditioning_weights("soft", lm.K, logits=Tensor(np.random.default_rng(1).normal(size=b.slots.shape + (lm.K,))))
    cap = []
    with no_grad():
        lm(b.tokens, b.slot_index, w, b.slot_mask, capture=cap)
    assert [c["layer"] for c in cap] == lm.adapter_layers
    for c in cap:
        assert c["pre_merge"].shape == (2, 128, lm.adapters[0].embedding.shape[1])
        assert c["post_merge"].shape == (2, 128, lm.d_model)
        pre = c["pre_merge"].data
        for r in range(2):
            for slot in np.unique(b.slot_index[r]):
                rows = pre[r, b.slot_index[r] == slot]
                assert np.all(rows == rows[0])


def test_adapter_tables_do_not_alias_centroids():
    c = np.random.default_rng(0).normal(size=(4, 6))
    with default_dtype(np.float64):
        lm = ConditionedLM(c, d_model=8, n_layers=2, n_heads=2)
    lm.adapters[0].embedding.data[0, 0] += 1.0
    assert lm.adapters[1].embedding.data[0, 0] == c[0, 0]
    assert not np.shares_memory(lm.adapters[0].embedding.data, c)
