import numpy as np
import pytest

from castr import autograd as ag
from castr import nn
from castr.autograd import Tensor
from castr.config import DecoderConfig
from castr.decoder import (PLDDecoder, Permutation, context_visibility,
                           identity_perm, sample_permutations)

V = 7  # toy charset size


def make_decoder(blocks=1, dim=32, max_len=5, seed=0, dtype=np.float64):
    store = nn.ParamStore(dtype)
    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(blocks=blocks, embed_dim=dim, heads=4,
                        max_len=max_len, charset_size=V)
    return PLDDecoder(cfg, store, rng, enc_dim=dim), store


def make_vision(rng, b=2, n=5, dim=32):
    return Tensor(rng.standard_normal((b, n, dim)), dtype=np.float64)


# ---------------------------------------------------------------------------
# permutations and visibility


def test_permutation_rank_inverts_order():
    p = Permutation((2, 0, 1))
    assert p.rank == (1, 2, 0)
    assert len(p) == 3


def test_permutation_rejects_non_bijection():
    with pytest.raises(ValueError, match="not a bijection"):
        Permutation((0, 0, 2))


def test_sample_permutations_identity_first(rng):
    perms = sample_permutations(4, 5, rng)
    assert perms[0].order == (0, 1, 2, 3, 4)
    assert len(perms) == 4
    for p in perms:
        assert sorted(p.order) == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError, match="at least one"):
        sample_permutations(0, 3, rng)


def test_context_visibility_hand_case():
    vis = context_visibility(Permutation((2, 0, 1)))
    # rank = (1, 2, 0); (q, k) true iff rank[k] < rank[q]
    want = np.array([[False, False, True],
                     [True, False, True],
                     [False, False, False]])
    np.testing.assert_array_equal(vis, want)
    assert not vis.diagonal().any()


def test_visibility_row_counts_match_rank(rng):
    for _ in range(20):
        order = tuple(int(i) for i in rng.permutation(6))
        p = Permutation(order)
        vis = context_visibility(p)
        np.testing.assert_array_equal(vis.sum(axis=1), np.asarray(p.rank))


def test_batch_masks_shape_and_bos_column(rng):
    dec, _ = make_decoder()
    perms = [sample_permutations(3, 3, rng), sample_permutations(3, 2, rng)]
    vis = dec.build_batch_masks([3, 2], perms, lmax=4)
    assert vis.shape == (6, 4, 5)
    assert vis[:, :, 0].all()
    # padded query rows of the short sample see only BOS
    assert not vis[3:, 2:, 1:].any()


def test_batch_masks_reject_ragged_permutations(rng):
    dec, _ = make_decoder()
    with pytest.raises(ValueError, match="permutation length"):
        dec.build_batch_masks([3], [[identity_perm(2)]], lmax=3)
    with pytest.raises(ValueError, match="same permutation count"):
        dec.build_batch_masks(
            [2, 2], [sample_permutations(2, 2, rng), sample_permutations(3, 2, rng)],
            lmax=2)


# ---------------------------------------------------------------------------
# training loss


def test_loss_is_mean_of_components(rng):
    dec, _ = make_decoder()
    vision = make_vision(rng)
    labels = [[1, 2, 3], [4, 0]]
    perms = [sample_permutations(3, 4, rng), sample_permutations(3, 3, rng)]
    loss, info = dec.plm_loss(vision, labels, perms)
    assert len(info["components"]) == 3
    assert abs(float(loss.data) - np.mean(info["components"])) < 1e-12
    assert 0.0 <= info["teacher_acc"] <= 1.0


def test_single_char_label_has_two_loss_positions(rng):
    # label "A" trains two rows: the character and the EOS that follows it
    dec, _ = make_decoder()
    vision = make_vision(rng, b=1)
    loss, _ = dec.plm_loss(vision, [[3]], [[identity_perm(2)]])

    ids = np.array([[3, dec.eos_id]], dtype=np.int64)
    logits = dec.forward(dec.queries(1, 2), dec.context(ids), vision,
                         dec.build_batch_masks([2], [[identity_perm(2)]], 2))
    z = logits.data[0]
    want = 0.0
    for t, tgt in enumerate((3, dec.eos_id)):
        p = np.exp(z[t] - z[t].max())
        p /= p.sum()
        want += -np.log(p[tgt]) / 2.0
    assert abs(float(loss.data) - want) < 1e-9


def test_uniform_logits_loss_is_log_vocab(rng):
    dec, store = make_decoder()
    for name in ("dec.head.w", "dec.head.b"):
        store[name].data[:] = 0.0
    vision = make_vision(rng)
    loss, info = dec.plm_loss(vision, [[0, 1], [2, 3, 4]],
                              [sample_permutations(2, 3, rng),
                               sample_permutations(2, 4, rng)])
    assert abs(float(loss.data) - np.log(V + 1)) < 1e-9


def test_component_order_does_not_change_loss(rng):
    dec, _ = make_decoder()
    vision = make_vision(rng)
    labels = [[1, 2], [3, 4]]
    pa = [sample_permutations(3, 3, rng) for _ in range(2)]
    pb = [[ps[0], ps[2], ps[1]] for ps in pa]
    la, _ = dec.plm_loss(vision, labels, pa)
    lb, _ = dec.plm_loss(vision, labels, pb)
    assert abs(float(la.data) - float(lb.data)) < 1e-12


def test_single_perm_equals_identity_component(rng):
    dec, _ = make_decoder()
    vision = make_vision(rng)
    labels = [[1, 2, 3], [4, 5]]
    perms4 = [sample_permutations(4, 4, rng), sample_permutations(4, 3, rng)]
    _, info4 = dec.plm_loss(vision, labels, perms4)
    loss1, _ = dec.plm_loss(vision, labels,
                            [[identity_perm(4)], [identity_perm(3)]])
    assert abs(float(loss1.data) - info4["components"][0]) < 1e-10


def test_loss_input_validation(rng):
    dec, _ = make_decoder()
    vision = make_vision(rng)
    with pytest.raises(ValueError, match="empty label"):
        dec.plm_loss(vision, [[], [1]], [[identity_perm(1)], [identity_perm(2)]])
    with pytest.raises(ValueError, match="max_len"):
        dec.plm_loss(make_vision(rng, b=1), [[1] * 9], [[identity_perm(10)]])
    with pytest.raises(ValueError, match="batch size"):
        dec.plm_loss(vision, [[1]], [[identity_perm(2)]])


# ---------------------------------------------------------------------------
# the masking property: a position's logits cannot depend on later-ranked
# context entries


def test_later_ranked_perturbation_is_invisible(rng):
    dec, _ = make_decoder()
    trials = 60
    hits = 0
    for _ in range(trials):
        l_eff = int(rng.integers(2, 6))
        lab = [int(c) for c in rng.integers(0, V, size=l_eff - 1)]
        perm = Permutation(tuple(int(i) for i in rng.permutation(l_eff)))
        vision = make_vision(rng, b=1)
        t = int(rng.integers(0, l_eff))
        p = perm.order[t]

        ids = np.full((1, l_eff), dec.pad_id, dtype=np.int64)
        ids[0, : len(lab)] = lab
        ids[0, len(lab)] = dec.eos_id
        vis = dec.build_batch_masks([l_eff], [[perm]], l_eff)

        base = dec.forward(dec.queries(1, l_eff), dec.context(ids), vision,
                           vis).data[0, p]

        # perturb every context entry the mask hides from row p
        ids2 = ids.copy()
        for q in range(l_eff):
            if perm.rank[q] >= perm.rank[p]:
                ids2[0, q] = (ids2[0, q] + 1 + int(rng.integers(0, V))) % (V + 2)
        got = dec.forward(dec.queries(1, l_eff), dec.context(ids2), vision,
                          vis).data[0, p]
        assert (base == got).all()
        hits += 1
    assert hits == trials


def test_earlier_ranked_perturbation_is_visible(rng):
    # sanity companion: visible context entries do change the logits
    dec, _ = make_decoder()
    vision = make_vision(rng, b=1)
    perm = identity_perm(3)
    ids = np.array([[1, 2, dec.eos_id]], dtype=np.int64)
    vis = dec.build_batch_masks([3], [[perm]], 3)
    a = dec.forward(dec.queries(1, 3), dec.context(ids), vision, vis).data[0, 2]
    ids[0, 0] = 5
    b = dec.forward(dec.queries(1, 3), dec.context(ids), vision, vis).data[0, 2]
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# inference path vs training path


def test_decode_step_matches_training_rows(rng):
    dec, _ = make_decoder()
    vision = make_vision(rng, b=1)
    lab = [2, 5, 0]
    l_eff = len(lab) + 1
    ids = np.array([lab + [dec.eos_id]], dtype=np.int64)
    vis = dec.build_batch_masks([l_eff], [[identity_perm(l_eff)]], l_eff)
    full = dec.forward(dec.queries(1, l_eff), dec.context(ids), vision, vis)
    for t in range(l_eff):
        step = dec.decode_step(vision, lab[:t], t)
        np.testing.assert_allclose(step, full.data[0, t], rtol=0, atol=1e-12)


def test_identity_loss_matches_independent_ar_oracle(rng):
    # left-to-right teacher forcing, implemented with the inference path
    dec, _ = make_decoder()
    b = 3
    vision = make_vision(rng, b=b)
    labels = [[1, 2, 3], [4], [0, 6]]
    loss, _ = dec.plm_loss(vision, labels,
                           [[identity_perm(len(l) + 1)] for l in labels])

    total = 0.0
    for s, lab in enumerate(labels):
        vs = Tensor(vision.data[s : s + 1])
        row = 0.0
        seq = list(lab) + [dec.eos_id]
        for t, tgt in enumerate(seq):
            z = dec.decode_step(vs, lab[:t], t)
            p = np.exp(z - z.max())
            row += -np.log(p[tgt] / p.sum())
        total += row / len(seq)
    total /= b
    assert abs(float(loss.data) - total) < 1e-6


def test_decode_step_beyond_max_len_raises(rng):
    dec, _ = make_decoder(max_len=3)
    with pytest.raises(ValueError, match="beyond max_len"):
        dec.decode_step(make_vision(rng, b=1), [1, 2, 3, 4], 4)


# ---------------------------------------------------------------------------
# depth composition


def test_zeroed_second_block_equals_single_block(rng):
    deep, deep_store = make_decoder(blocks=2)
    shallow, shallow_store = make_decoder(blocks=1, seed=1)
    # align the shared parameters by name, then silence block 1's writes
    state = deep_store.state_dict()
    shallow_store.load_state({k: v for k, v in state.items()
                              if k in set(shallow_store.names())})
    for part in ("ctx.o", "vis.o", "mlp.fc2"):
        for leaf in ("w", "b"):
            deep_store[f"dec.block1.{part}.{leaf}"].data[:] = 0.0

    vision = make_vision(rng, b=1)
    ids = np.array([[1, 2, dec_eos(deep)]], dtype=np.int64)
    vis = deep.build_batch_masks([3], [[identity_perm(3)]], 3)
    a = deep.forward(deep.queries(1, 3), deep.context(ids), vision, vis)
    b = shallow.forward(shallow.queries(1, 3), shallow.context(ids), vision, vis)
    assert (a.data == b.data).all()


def dec_eos(dec):
    return dec.eos_id


def test_gradients_reach_all_parameters(rng):
    dec, store = make_decoder()
    vision = Tensor(rng.standard_normal((2, 5, 32)), requires_grad=True,
                    dtype=np.float64)
    loss, _ = dec.plm_loss(vision, [[1, 2], [3]],
                           [sample_permutations(2, 3, rng),
                            sample_permutations(2, 2, rng)])
    ag.backward(loss)
    dead = [n for n, t in store.items()
            if t.grad is None or not np.any(t.grad)]
    # the PAD embedding row is gathered with zero weight; everything else moves
    assert dead == []
    assert vision.grad is not None
