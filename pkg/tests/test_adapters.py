import math

import numpy as np
import pytest

from ctxadapt import tensor_core as tc
from ctxadapt.adapters import (AdapterConfig, AttentionMap, BiasedCTCModel, Catalog, ContextualAdapter,
                               apply_bias, biasing_attention, ce_supervision_loss, combined_loss,
                               encode_catalog)
from ctxadapt.ctc import ctc_loss, greedy_decode
from ctxadapt.nn_blocks import EncoderConfig, Linear
from ctxadapt.tensor_core import Tensor, grad_check

H = 8
ENC = EncoderConfig(input_dim=4, hidden=H, blocks=2, heads=2, ff_dim=8, vocab_size=6)


def make_adapter(seed=0):
    return ContextualAdapter(AdapterConfig(hidden=H, embed_dim=5, blocks=2, vocab_size=6),
                             np.random.default_rng(seed))


def states(rng, t=3, n=None):
    shape = (t, H) if n is None else (n, t, H)
    return [Tensor(rng.normal(size=shape)) for _ in range(2)]


CE_HAND = -0.5 * math.log(math.exp(0.3) / (math.exp(0.3) + math.exp(0.2)))


class TestCatalog:
    def test_validation(self):
        with pytest.raises(ValueError):
            Catalog([[1], []])
        with pytest.raises(ValueError):
            Catalog([[1]], correct_index=1)

    def test_empty_catalog_is_nb_only(self):
        keys, values = encode_catalog(Catalog([]), make_adapter())
        assert keys.shape == (1, H) and values.shape == (1, H)
        assert np.array_equal(values.data, np.zeros((1, H)))

    def test_shape_and_order(self):
        ad = make_adapter()
        entries = [[1, 2], [3], [4, 5, 1]]
        keys, values = encode_catalog(Catalog(entries), ad)
        assert keys.shape == (4, H)
        np.testing.assert_array_equal(keys.data[0], ad.nb_key.data)
        for j, e in enumerate(entries, start=1):
            single, _ = encode_catalog(Catalog([e]), ad)
            np.testing.assert_allclose(keys.data[j], single.data[1], atol=1e-14)

    def test_duplicates_identical_rows(self):
        keys, values = encode_catalog(Catalog([[2, 3], [1], [2, 3]]), make_adapter(4))
        assert np.array_equal(keys.data[1], keys.data[3])
        assert np.array_equal(values.data[1], values.data[3])

    def test_batched_catalogs_must_share_k(self):
        with pytest.raises(ValueError):
            encode_catalog([Catalog([[1]]), Catalog([[1], [2]])], make_adapter())


class TestAttention:
    def test_empty_catalog_attends_nb(self):
        ad = make_adapter()
        keys, values = encode_catalog(Catalog([]), ad)
        amap = biasing_attention(states(np.random.default_rng(0)), keys, values, ad)
        assert np.array_equal(amap.weights.data, np.ones((3, 1)))
        assert np.array_equal(amap.context.data, np.zeros((3, H)))

    def test_rows_normalized(self):
        ad = make_adapter()
        keys, values = encode_catalog(Catalog([[1, 2], [3], [5]]), ad)
        w = biasing_attention(states(np.random.default_rng(1), t=5), keys, values, ad).weights.data
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) <= 1e-9)
        assert w.min() >= 0.0 and w.max() <= 1.0

    def test_hand_built_scores(self):
        ad = make_adapter()
        for lin in (ad.query_proj,):
            lin.weight.data = np.eye(H)
            lin.bias.data[:] = 0.0
        ad.layer_logits.data[:] = 0.0
        q = np.zeros((2, H))
        q[0, 0], q[1, 1] = 1.0, 2.0
        keys = np.zeros((3, H))
        keys[0, 0], keys[1, 1], keys[2, :2] = 0.5, 1.0, [1.0, 1.0]
        values = np.random.default_rng(2).normal(size=(3, H))
        # both layers equal q, so the softmax-weighted combination is q itself
        amap = biasing_attention([Tensor(q), Tensor(q)], Tensor(keys), Tensor(values), ad)
        scores = np.array([[0.5, 0.0, 1.0], [0.0, 2.0, 2.0]]) / math.sqrt(H)
        expected = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(amap.weights.data, expected, atol=1e-12)
        np.testing.assert_allclose(amap.context.data, expected @ values, atol=1e-12)

    def test_layer_count_mismatch(self):
        ad = make_adapter()
        keys, values = encode_catalog(Catalog([[1]]), ad)
        with pytest.raises(ValueError):
            biasing_attention(states(np.random.default_rng(0))[:1], keys, values, ad)


class TestApplyBias:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.proj = Linear(H, 6, rng)
        self.final = Tensor(rng.normal(size=(4, H)))

    def test_zero_context_is_bit_exact(self):
        out = apply_bias(self.final, Tensor(np.zeros((4, H))), self.proj)
        assert np.array_equal(out.data, self.proj(self.final).data)

    def test_cancelling_context(self):
        out = apply_bias(self.final, Tensor(-self.final.data), self.proj)
        assert np.array_equal(out.data, self.proj(Tensor(np.zeros((4, H)))).data)

    def test_random_context_changes_logits(self):
        ctx = Tensor(np.random.default_rng(1).normal(size=(4, H)))
        assert not np.allclose(apply_bias(self.final, ctx, self.proj).data, self.proj(self.final).data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_bias(self.final, Tensor(np.zeros((3, H))), self.proj)


class TestCeLoss:
    def test_hand_value(self):
        w = np.array([[0.5, 0.3, 0.2]])
        assert ce_supervision_loss(Tensor(w), 0).item() == pytest.approx(CE_HAND, abs=1e-12)
        assert CE_HAND == pytest.approx(0.32218, abs=1e-4)

    def test_all_nb_is_zero(self):
        w = np.zeros((4, 3))
        w[:, 0] = 1.0
        assert ce_supervision_loss(Tensor(w), 1).item() == 0.0

    def test_repeating_frames_doubles(self):
        w = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
        once = ce_supervision_loss(Tensor(w), 1).item()
        assert ce_supervision_loss(Tensor(np.vstack([w, w])), 1).item() == pytest.approx(2 * once, rel=1e-14)

    def test_needs_words(self):
        with pytest.raises(ValueError):
            ce_supervision_loss(Tensor(np.ones((2, 1))), 0)

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            raw = rng.dirichlet(np.ones(4), size=5)
            assert ce_supervision_loss(Tensor(raw), int(rng.integers(3))).item() >= 0.0

    def test_frame_mask(self):
        w = np.array([[[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]]])
        masked = ce_supervision_loss(Tensor(w), [0], frame_mask=np.array([[1.0, 0.0]]))
        assert masked.data[0] == pytest.approx(CE_HAND, abs=1e-12)


class TestCombinedLoss:
    lattice = np.log(np.full((2, 3), 1 / 3))

    def test_alpha_zero_equals_ctc(self):
        amap = AttentionMap(Tensor(np.array([[0.5, 0.3, 0.2], [0.5, 0.3, 0.2]])), Tensor(np.zeros((2, H))))
        assert combined_loss(self.lattice, [1], amap, 0, 0.0).item() == ctc_loss(self.lattice, [1]).item()

    def test_alpha_one_sums_hand_values(self):
        amap = AttentionMap(Tensor(np.array([[0.5, 0.3, 0.2], [1.0, 0.0, 0.0]])), Tensor(np.zeros((2, H))))
        expected = math.log(3) + CE_HAND
        assert combined_loss(self.lattice, [1], amap, 0, 1.0).item() == pytest.approx(expected, abs=1e-12)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            combined_loss(self.lattice, [1], None, 0, -1.0)


def toy_model(seed=0):
    return BiasedCTCModel.create(ENC, seed=seed, with_adapter=True, embed_dim=5)


def test_empty_catalog_decode_matches_base():
    model = toy_model()
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.normal(size=(int(rng.integers(1, 8)), 4))
        lp_b, amap, _ = model.forward(x, catalogs=Catalog([]))
        lp_d, _, _ = model.forward(x, use_adapters=False)
        assert np.array_equal(lp_b.data, lp_d.data)
        assert greedy_decode(lp_b.data[0]) == greedy_decode(lp_d.data[0])


def test_permuting_catalog_permutes_columns_and_keeps_losses():
    model = toy_model(1)
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(5, 4)), [1, 2]
    entries = [[1, 2], [3], [4, 5]]
    perm = [2, 0, 1]
    lp1, m1, _ = model.forward(x, catalogs=[Catalog(entries, 1)])
    lp2, m2, _ = model.forward(x, catalogs=[Catalog([entries[p] for p in perm], perm.index(1))])
    np.testing.assert_allclose(m2.weights.data[..., 1:], m1.weights.data[..., 1:][..., perm], atol=1e-12)
    l1 = combined_loss(lp1, [y], m1, [1], 25.0).item()
    l2 = combined_loss(lp2, [y], m2, [perm.index(1)], 25.0).item()
    assert abs(l1 - l2) <= 1e-12


@pytest.mark.parametrize("part", ["adapters", "encoder"])
def test_combined_loss_gradients(part):
    model = toy_model(2)
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(1, 2, 4)), [[3]]
    cats = [Catalog([[1, 2], [4]], 0)]

    def f():
        lp, amap, _ = model.forward(x, catalogs=cats)
        return combined_loss(lp, y, amap, [0], 25.0).sum()

    params = list(model.partitions()[part].values())
    assert grad_check(f, params) < 1e-4


def test_adapter_path_reaches_all_encoder_blocks():
    model = toy_model(3)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 4, 4))
    for p in model.encoder.parameters():
        p.requires_grad = False
    for blk in model.encoder.blocks:
        blk.ff.outer.weight.requires_grad = True
    lp, amap, _ = model.forward(x, catalogs=[Catalog([[1], [2, 3]], 1)])
    ce_supervision_loss(amap, [1]).sum().backward()
    for blk in model.encoder.blocks:
        assert blk.ff.outer.weight.grad is not None
        assert np.abs(blk.ff.outer.weight.grad).sum() > 0
