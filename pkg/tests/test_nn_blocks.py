import numpy as np
import pytest

from ctxadapt import tensor_core as tc
from ctxadapt.nn_blocks import (EncoderConfig, EncoderStack, LstmCell, SequenceEncoder, ShapeError,
                                SubwordEmbedding, lstm_step)
from ctxadapt.tensor_core import Tensor, grad_check


def small_encoder(seed=0, **kw):
    cfg = EncoderConfig(**{"input_dim": 8, "hidden": 16, "blocks": 2, "vocab_size": 12, **kw})
    return EncoderStack(cfg, np.random.default_rng(seed))


class TestEncoder:
    def test_shapes(self):
        enc = small_encoder()
        out = enc(np.random.default_rng(1).normal(size=(5, 8)))
        assert len(out.layer_states) == 2
        assert all(s.shape == (1, 5, 16) for s in out.layer_states)
        assert out.logits.shape == (1, 5, 12)

    def test_zero_parameters_give_flat_logits(self):
        enc = small_encoder()
        for p in enc.parameters():
            p.data = np.zeros_like(p.data)
        logits = enc(np.random.default_rng(2).normal(size=(4, 8))).logits.data
        assert np.all(logits == logits[..., :1])

    def test_deterministic(self):
        x = np.random.default_rng(3).normal(size=(6, 8))
        a = small_encoder(seed=7)(x).logits.data
        b = small_encoder(seed=7)(x).logits.data
        assert np.array_equal(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            small_encoder()(np.zeros((3, 5)))

    def test_finite_for_large_inputs(self):
        out = small_encoder()(1e3 * np.random.default_rng(4).uniform(-1, 1, size=(7, 8)))
        assert all(np.isfinite(s.data).all() for s in out.layer_states)
        assert np.isfinite(out.logits.data).all()

    def test_residual_identity_when_sublayers_zeroed(self):
        enc = small_encoder()
        block = enc.blocks[0]
        for lin in (block.attn.out, block.ff.outer):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(5).normal(size=(1, 5, 16)))
        assert np.array_equal(block(x).data, x.data)

    def test_padding_does_not_change_real_frames(self):
        enc = small_encoder()
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 8))
        padded = np.zeros((2, 6, 8))
        padded[0, :4] = x
        padded[1] = rng.normal(size=(6, 8))
        alone = enc(x).logits.data[0]
        batched = enc(padded, lengths=[4, 6]).logits.data[0, :4]
        np.testing.assert_allclose(batched, alone, atol=1e-12)

    def test_sampled_gradients(self):
        enc = small_encoder()
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 4, 8))
        probe = rng.normal(size=(1, 4, 12))
        params = enc.parameters()
        f = lambda: (enc(x).logits * probe).sum()
        # about 1% of the parameter entries
        n_total = sum(p.data.size for p in params)
        per = max(1, n_total // 100 // len(params))
        assert grad_check(f, params, max_entries=per, rng=np.random.default_rng(0)) < 1e-4


class TestLstm:
    def test_zero_weights_zero_state(self):
        cell = LstmCell(3, 4, np.random.default_rng(0))
        for p in cell.parameters():
            p.data[:] = 0.0
        h, c = lstm_step(cell, np.ones(3), np.zeros(4), np.zeros(4))
        assert np.array_equal(h.data, np.zeros(4)) and np.array_equal(c.data, np.zeros(4))

    def test_gate_equations(self):
        rng = np.random.default_rng(1)
        cell = LstmCell(3, 2, rng)
        x, h, c = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
        z = x @ cell.w_input.data + h @ cell.w_hidden.data + cell.bias.data
        sig = lambda v: 1 / (1 + np.exp(-v))
        i, f, o, g = sig(z[0:2]), sig(z[2:4]), sig(z[4:6]), np.tanh(z[6:8])
        c_ref = f * c + i * g
        h2, c2 = lstm_step(cell, x, h, c)
        np.testing.assert_allclose(c2.data, c_ref, atol=1e-14)
        np.testing.assert_allclose(h2.data, o * np.tanh(c_ref), atol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        cell = LstmCell(3, 4, rng)
        x, h, c = rng.normal(size=(1, 3)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        probe = rng.normal(size=(1, 4))
        f = lambda: (cell.step(Tensor(x), Tensor(h), Tensor(c))[0] * probe).sum()
        assert grad_check(f, cell.parameters()) < 1e-6

    def test_shape_mismatch(self):
        cell = LstmCell(3, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            lstm_step(cell, np.zeros(2), np.zeros(4), np.zeros(4))


class TestSequenceEncoder:
    def make(self, seed=0):
        return SequenceEncoder(10, 5, 6, np.random.default_rng(seed))

    def test_single_token_is_one_step(self):
        enc = self.make()
        emb = enc.embedding([4])
        h, _ = enc.lstm.step(emb, Tensor(np.zeros((1, 6))), Tensor(np.zeros((1, 6))))
        np.testing.assert_array_equal(enc.encode_sequence([4]).data, h.data[0])

    def test_order_sensitive(self):
        enc = self.make(3)
        assert not np.allclose(enc.encode_sequence([2, 7]).data, enc.encode_sequence([7, 2]).data)

    def test_length_sensitive(self):
        enc = self.make(4)
        assert not np.allclose(enc.encode_sequence([5, 5]).data, enc.encode_sequence([5, 5, 5]).data)

    def test_batch_matches_individual(self):
        enc = self.make(5)
        seqs = [[1, 2, 3], [4], [5, 6]]
        batch = enc.encode_batch(seqs).data
        for row, s in zip(batch, seqs):
            np.testing.assert_allclose(row, enc.encode_sequence(s).data, atol=1e-14)

    def test_deterministic(self):
        assert np.array_equal(self.make(9).encode_sequence([1, 2]).data, self.make(9).encode_sequence([1, 2]).data)

    def test_errors(self):
        enc = self.make()
        with pytest.raises(ValueError):
            enc.encode_sequence([])
        with pytest.raises(ValueError):
            enc.encode_sequence([10])


def test_embedding_lookup_returns_row():
    emb = SubwordEmbedding(4, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(emb([2]).data[0], emb.table.data[2])
    with pytest.raises(ValueError):
        emb([-1])


def test_encoder_gradient_reaches_every_block():
    enc = small_encoder()
    out = enc(np.random.default_rng(1).normal(size=(3, 8)))
    tc.log_softmax(out.logits).sum().backward()
    assert all(p.grad is not None for p in enc.parameters())
