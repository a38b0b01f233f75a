"""Layers for the acoustic encoder and the catalog encoder.

Shapes follow the batch-first convention ``(N, T, H)``; a 2-D ``(T, H)`` input
is treated as a batch of one where that makes sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import ShapeError, Tensor

NEG_MASK = -1e9


class Module:
    """Attribute-walking parameter container (``Tensor`` leaves and sub-modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv_std = tc.exp(tc.log(var + self.eps) * -0.5)
        return xc * inv_std * self.gain + self.shift


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.head_dim = dim // heads

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        q, k, v = self.query(x), self.key(x), self.value(x)
        scale = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for h in range(self.heads):
            sl = slice(h * self.head_dim, (h + 1) * self.head_dim)
            qh, kh, vh = q[..., sl], k[..., sl], v[..., sl]
            scores = (qh @ kh.T) * scale
            if key_mask is not None:
                scores = scores + key_mask
            outs.append(tc.softmax(scores, axis=-1) @ vh)
        merged = outs[0] if len(outs) == 1 else tc.concat(outs, axis=-1)
        return self.out(merged)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(tc.tanh(self.inner(x)))


class EncoderBlock(Module):
    """Pre-norm self-attention and feedforward, each wrapped in a residual."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm_attn(x), key_mask)
        return x + self.ff(self.norm_ff(x))


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 8
    hidden: int = 16
    blocks: int = 2
    heads: int = 2
    ff_dim: int = 32
    vocab_size: int = 28


class EncoderOutput(NamedTuple):
    layer_states: list[Tensor]
    final_state: Tensor
    logits: Tensor


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / (10000.0 ** (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


def padding_mask(lengths: Sequence[int], max_len: int) -> np.ndarray:
    """``(N, T)`` array, 1.0 on real frames and 0.0 on padding."""
    lengths = np.asarray(lengths)
    return (np.arange(max_len)[None, :] < lengths[:, None]).astype(np.float64)


class EncoderStack(Module):
    """Acoustic encoder: projection, B blocks, final norm, vocabulary projection."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.input_proj = Linear(config.input_dim, config.hidden, rng)
        self.blocks = [EncoderBlock(config.hidden, config.heads, config.ff_dim, rng)
                       for _ in range(config.blocks)]
        self.final_norm = LayerNorm(config.hidden)
        self.output_proj = Linear(config.hidden, config.vocab_size, rng)

    def __call__(self, frames, lengths: Sequence[int] | None = None) -> EncoderOutput:
        return self.forward(frames, lengths)

    def forward(self, frames, lengths: Sequence[int] | None = None) -> EncoderOutput:
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim:
            raise ShapeError(f"encoder expects (N, T, {self.config.input_dim}) frames, got {frames.shape}")
        n, t, _ = x.shape
        if t < 1:
            raise ShapeError("encoder needs at least one frame")
        key_mask = None
        if lengths is not None:
            key_mask = ((1.0 - padding_mask(lengths, t)) * NEG_MASK)[:, None, :]
        h = self.input_proj(x) + sinusoidal_positions(t, self.config.hidden)
        states = []
        for block in self.blocks:
            h = block(h, key_mask)
            states.append(h)
        final = self.final_norm(h)
        return EncoderOutput(states, final, self.output_proj(final))


class SubwordEmbedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.table = _param(rng.normal(0.0, 1.0, size=(vocab_size, dim)))
        self.vocab_size = vocab_size

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"subword id outside [0, {self.vocab_size}): {ids.tolist()}")
        return tc.embedding(self.table, ids)


class LstmCell(Module):
    """Standard LSTM with gate order (input, forget, output, candidate)."""

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator):
        s = 1.0 / math.sqrt(hidden)
        self.w_input = _param(rng.uniform(-s, s, size=(input_dim, 4 * hidden)))
        self.w_hidden = _param(rng.uniform(-s, s, size=(hidden, 4 * hidden)))
        self.bias = _param(np.zeros(4 * hidden))
        self.input_dim, self.hidden = input_dim, hidden

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.input_dim or h.shape[-1] != self.hidden or c.shape[-1] != self.hidden:
            raise ShapeError(f"lstm_step shapes x={x.shape} h={h.shape} c={c.shape} "
                             f"do not match E={self.input_dim}, H={self.hidden}")
        z = x @ self.w_input + h @ self.w_hidden + self.bias
        H = self.hidden
        i = tc.sigmoid(z[..., 0:H])
        f = tc.sigmoid(z[..., H:2 * H])
        o = tc.sigmoid(z[..., 2 * H:3 * H])
        g = tc.tanh(z[..., 3 * H:])
        c_new = f * c + i * g
        return o * tc.tanh(c_new), c_new


def lstm_step(cell: LstmCell, x_t, h, c) -> tuple[Tensor, Tensor]:
    as_t = lambda v: v if isinstance(v, Tensor) else Tensor(v)
    x_t, h, c = as_t(x_t), as_t(h), as_t(c)
    if x_t.ndim == 1:
        x_t, h, c = x_t.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1)
        h2, c2 = cell.step(x_t, h, c)
        return h2.reshape(-1), c2.reshape(-1)
    return cell.step(x_t, h, c)


class SequenceEncoder(Module):
    """Embeds subword sequences and returns the final LSTM hidden state of each."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int, rng: np.random.Generator):
        self.embedding = SubwordEmbedding(vocab_size, embed_dim, rng)
        self.lstm = LstmCell(embed_dim, hidden, rng)

    def encode_batch(self, sequences: Sequence[Sequence[int]]) -> Tensor:
        """``(M, H)`` final states for M variable-length sequences."""
        if not sequences:
            return Tensor(np.zeros((0, self.lstm.hidden)))
        lengths = np.array([len(s) for s in sequences])
        if lengths.min() < 1:
            raise ValueError("cannot encode an empty subword sequence")
        m, max_len = len(sequences), int(lengths.max())
        ids = np.zeros((m, max_len), dtype=np.int64)
        for r, seq in enumerate(sequences):
            ids[r, : len(seq)] = seq
        emb = self.embedding(ids)
        h = Tensor(np.zeros((m, self.lstm.hidden)))
        c = Tensor(np.zeros((m, self.lstm.hidden)))
        hs = []
        for t in range(max_len):
            h, c = self.lstm.step(emb[:, t, :], h, c)
            hs.append(h)
        if max_len == 1:
            return hs[0]
        # state at each sequence's own last step; padding steps are never read
        return tc.stack(hs, axis=0)[lengths - 1, np.arange(m)]

    def encode_sequence(self, tokens: Sequence[int]) -> Tensor:
        return self.encode_batch([list(tokens)]).reshape(-1)
