import numpy as np
import pytest

from castr import autograd as ag
from castr import nn
from castr.autograd import Tensor, backward


def store64():
    return nn.ParamStore(dtype=np.float64)


# ---------------------------------------------------------------------------
# parameter store


def test_param_store_rejects_duplicates(rng):
    s = store64()
    s.create("w", (2, 2), "zeros")
    with pytest.raises(ValueError, match="duplicate"):
        s.create("w", (2, 2), "zeros")


def test_param_store_insertion_order_and_size(rng):
    s = store64()
    s.create("b", (3,), "zeros")
    s.create("a", (2, 2), "ones")
    assert s.names() == ["b", "a"]  # insertion order, not sorted
    assert s.size() == 7


def test_param_store_state_round_trip(rng):
    s = store64()
    s.create("w", (2, 3), "trunc_normal", rng)
    state = {k: v.copy() for k, v in s.state_dict().items()}
    s["w"].data[:] = 0.0
    s.load_state(state)
    np.testing.assert_array_equal(s["w"].data, state["w"])


def test_param_store_load_rejects_mismatches(rng):
    s = store64()
    s.create("w", (2, 3), "zeros")
    with pytest.raises(ValueError, match="parameter set mismatch"):
        s.load_state({})
    with pytest.raises(ValueError, match="parameter set mismatch"):
        s.load_state({"w": np.zeros((2, 3)), "extra": np.zeros(1)})
    with pytest.raises(ValueError, match="shape mismatch"):
        s.load_state({"w": np.zeros((3, 2))})


def test_trunc_normal_bounded(rng):
    arr = nn.trunc_normal(rng, (100000,), std=0.02)
    assert np.abs(arr).max() <= 0.04 + 1e-12  # two sigma resampling bound
    # std of a normal truncated at +-2 sigma: sqrt(1 - 4*phi(2)/(2*Phi(2)-1))
    from scipy.stats import norm
    want = 0.02 * np.sqrt(1 - 4 * norm.pdf(2) / (2 * norm.cdf(2) - 1))
    assert abs(float(arr.std()) - want) < 0.0005


# ---------------------------------------------------------------------------
# linear / layer norm


def test_linear_matches_manual(rng):
    s = store64()
    lin = nn.Linear(s, "l", 4, 3, rng)
    x = rng.standard_normal((2, 5, 4))
    out = lin(Tensor(x, dtype=np.float64))
    want = x @ lin.w.data + lin.b.data
    np.testing.assert_allclose(out.data, want, rtol=1e-12)


def test_layer_norm_statistics(rng):
    s = store64()
    ln = nn.LayerNorm(s, "ln", 16)
    x = Tensor(rng.standard_normal((8, 16)) * 3 + 2, dtype=np.float64)
    y = ln(x).data
    np.testing.assert_allclose(y.mean(axis=1), np.zeros(8), atol=1e-10)
    np.testing.assert_allclose(y.std(axis=1), np.ones(8), atol=1e-4)


# ---------------------------------------------------------------------------
# attention


def test_softmax_singleton_row_is_one():
    y = ag.softmax(Tensor(np.array([[3.7]]), dtype=np.float64))
    np.testing.assert_array_equal(y.data, [[1.0]])


def test_attention_matches_hand_oracle():
    # single head, 3 keys, hand-computed softmax(qk/sqrt(d)) @ v
    q = np.array([[[[1.0, 0.0]]]])          # (1, 1, 1, 2)
    k = np.array([[[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]]])
    v = np.array([[[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]]])
    out = nn.scaled_dot_attention(
        Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64),
        Tensor(v, dtype=np.float64))
    scores = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    p = np.exp(scores) / np.exp(scores).sum()
    want = p @ v[0, 0]
    np.testing.assert_allclose(out.data[0, 0, 0], want, rtol=1e-12)


def test_attention_mask_excludes_positions_bit_exactly(rng):
    # perturbing a masked key must not change the output at all
    b, h, lq, lk, dh = 1, 2, 3, 5, 4
    q = Tensor(rng.standard_normal((b, h, lq, dh)), dtype=np.float64)
    k0 = rng.standard_normal((b, h, lk, dh))
    v0 = rng.standard_normal((b, h, lk, dh))
    visible = np.ones((lq, lk), dtype=bool)
    visible[:, 2] = False
    penalty = nn.mask_to_penalty(visible, np.float64)

    out0 = nn.scaled_dot_attention(q, Tensor(k0, dtype=np.float64),
                                   Tensor(v0, dtype=np.float64), penalty).data
    k1 = k0.copy(); k1[:, :, 2] += 1e6
    v1 = v0.copy(); v1[:, :, 2] -= 42.0
    out1 = nn.scaled_dot_attention(q, Tensor(k1, dtype=np.float64),
                                   Tensor(v1, dtype=np.float64), penalty).data
    assert (out0 == out1).all()


def test_mask_with_no_visible_keys_raises():
    visible = np.zeros((2, 3), dtype=bool)
    visible[0, 0] = True
    with pytest.raises(nn.MaskError, match="no visible keys"):
        nn.mask_to_penalty(visible, np.float32)


def test_multi_head_attention_single_head_oracle(rng):
    s = store64()
    mha = nn.MultiHeadAttention(s, "a", 4, 1, rng)
    x = rng.standard_normal((1, 3, 4))
    out = mha(Tensor(x, dtype=np.float64), Tensor(x, dtype=np.float64)).data

    q = x @ mha.q.w.data + mha.q.b.data
    k = x @ mha.k.w.data + mha.k.b.data
    v = x @ mha.v.w.data + mha.v.b.data
    sc = q[0] @ k[0].T / 2.0
    p = np.exp(sc - sc.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    want = (p @ v[0]) @ mha.o.w.data + mha.o.b.data
    np.testing.assert_allclose(out[0], want, rtol=1e-10, atol=1e-12)


def test_attention_capture_collects_probabilities(rng):
    s = store64()
    mha = nn.MultiHeadAttention(s, "a", 8, 2, rng)
    x = Tensor(rng.standard_normal((2, 5, 8)), dtype=np.float64)
    cap = []
    mha(x, x, capture=cap)
    assert len(cap) == 1
    assert cap[0].shape == (2, 2, 5, 5)
    np.testing.assert_allclose(cap[0].sum(axis=-1), np.ones((2, 2, 5)), rtol=1e-12)


# ---------------------------------------------------------------------------
# transformer block


def test_block_with_zeroed_output_projections_is_identity(rng):
    # residual-only path: attn out-proj and mlp second layer forced to zero
    s = store64()
    blk = nn.TransformerBlock(s, "blk", 8, 2, rng)
    blk.attn.o.w.data[:] = 0.0
    blk.attn.o.b.data[:] = 0.0
    blk.mlp.fc2.w.data[:] = 0.0
    blk.mlp.fc2.b.data[:] = 0.0
    x = rng.standard_normal((2, 4, 8))
    out = blk(Tensor(x, dtype=np.float64)).data
    np.testing.assert_array_equal(out, x)


def test_block_gradients_reach_every_parameter(rng):
    s = store64()
    blk = nn.TransformerBlock(s, "blk", 8, 2, rng)
    x = Tensor(rng.standard_normal((2, 4, 8)), dtype=np.float64,
               requires_grad=True)
    backward(ag.sum_(ag.mul(blk(x), blk(x))))
    for name, t in s.items():
        assert t.grad is not None, name
    assert x.grad is not None


def test_block_finite_check_fires():
    rng = np.random.default_rng(0)
    s = store64()
    blk = nn.TransformerBlock(s, "blk", 8, 2, rng)
    x = np.zeros((1, 2, 8))
    x[0, 0, 0] = np.nan
    with pytest.raises(nn.NonFiniteError, match="blk"):
        blk(Tensor(x, dtype=np.float64))


def test_uniform_logits_cross_entropy_is_log_vocab():
    # a flat distribution over V classes costs exactly ln(V)
    for v in (17, 95):
        logits = Tensor(np.zeros((3, v)), dtype=np.float64)
        loss = ag.cross_entropy(logits, np.array([0, 5, v - 1]))
        assert abs(float(loss.data) - np.log(v)) < 1e-12
