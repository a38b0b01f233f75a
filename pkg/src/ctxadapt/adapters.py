"""Contextual adapters: attention from encoder frames over a catalog of boost words.

The catalog LSTM turns each boost word into a key and a value.  Slot 0 of every
catalog is the learned no-bias key whose value is pinned to zero, so frames
that attend to it leave the base encoder output untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .ctc import ctc_loss
from .nn_blocks import EncoderConfig, EncoderOutput, EncoderStack, Linear, Module, SequenceEncoder, _param
from .tensor_core import ShapeError, Tensor


@dataclass
class Catalog:
    """K boost words as subword-id sequences; ``correct_index`` marks w_boost when known."""

    entries: list[list[int]]
    correct_index: int | None = None
    words: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.entries = [list(map(int, e)) for e in self.entries]
        if any(len(e) == 0 for e in self.entries):
            raise ValueError("catalog entries must be non-empty subword sequences")
        if self.correct_index is not None and not 0 <= self.correct_index < len(self.entries):
            raise ValueError(f"correct_index {self.correct_index} outside [0, {len(self.entries)})")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class AttentionMap:
    """``weights[..., 0]`` is the no-bias slot, ``weights[..., 1:]`` the K words."""

    weights: Tensor
    context: Tensor


@dataclass(frozen=True)
class AdapterConfig:
    hidden: int = 16
    embed_dim: int = 16
    blocks: int = 2
    vocab_size: int = 28


class ContextualAdapter(Module):
    def __init__(self, config: AdapterConfig, rng: np.random.Generator):
        self.config = config
        h = config.hidden
        self.catalog_encoder = SequenceEncoder(config.vocab_size, config.embed_dim, h, rng)
        self.nb_key = _param(rng.normal(0.0, 1.0 / math.sqrt(h), size=h))
        self.layer_logits = _param(np.zeros(config.blocks))
        self.query_proj = Linear(h, h, rng)
        self.key_proj = Linear(h, h, rng)
        self.value_proj = Linear(h, h, rng)


def encode_catalog(catalogs: Catalog | Sequence[Catalog], adapter: ContextualAdapter) -> tuple[Tensor, Tensor]:
    """Keys and values with the no-bias slot first.

    A single catalog gives ``(K+1, H)`` arrays; a list of N equally sized
    catalogs gives ``(N, K+1, H)``.
    """
    single = isinstance(catalogs, Catalog)
    cats = [catalogs] if single else list(catalogs)
    sizes = {len(c) for c in cats}
    if len(sizes) != 1:
        raise ShapeError(f"catalogs in one batch must share K, got sizes {sorted(sizes)}")
    k = sizes.pop()
    n, h = len(cats), adapter.config.hidden
    nb_key = tc.add(np.zeros((n, 1, h)), adapter.nb_key.reshape(1, 1, h))
    nb_value = Tensor(np.zeros((n, 1, h)))
    if k == 0:
        keys, values = nb_key, nb_value
    else:
        flat = [e for c in cats for e in c.entries]
        states = adapter.catalog_encoder.encode_batch(flat).reshape(n, k, h)
        keys = tc.concat([nb_key, adapter.key_proj(states)], axis=1)
        values = tc.concat([nb_value, adapter.value_proj(states)], axis=1)
    if single:
        return keys.reshape(k + 1, h), values.reshape(k + 1, h)
    return keys, values


def combine_layers(layer_states: Sequence[Tensor], adapter: ContextualAdapter) -> Tensor:
    """Softmax-weighted sum of the per-block encoder states."""
    if len(layer_states) != adapter.config.blocks:
        raise ShapeError(f"adapter expects {adapter.config.blocks} layer states, got {len(layer_states)}")
    lam = tc.softmax(adapter.layer_logits)
    mixed = layer_states[0] * lam[0]
    for b in range(1, len(layer_states)):
        mixed = mixed + layer_states[b] * lam[b]
    return mixed


def biasing_attention(layer_states: Sequence[Tensor], keys: Tensor, values: Tensor,
                      adapter: ContextualAdapter) -> AttentionMap:
    h = adapter.config.hidden
    if keys.shape != values.shape or keys.shape[-1] != h:
        raise ShapeError(f"keys {keys.shape} / values {values.shape} inconsistent with H={h}")
    query = adapter.query_proj(combine_layers(layer_states, adapter))
    if query.ndim == 3 and keys.ndim == 2:
        keys, values = keys.reshape(1, *keys.shape), values.reshape(1, *values.shape)
    scores = (query @ keys.T) * (1.0 / math.sqrt(h))
    weights = tc.softmax(scores, axis=-1)
    return AttentionMap(weights, weights @ values)


def apply_bias(final_state: Tensor, context: Tensor, output_proj: Linear) -> Tensor:
    if final_state.shape != context.shape:
        raise ShapeError(f"final state {final_state.shape} and context {context.shape} differ")
    return output_proj(final_state + context)


def ce_supervision_loss(attention, correct_index, frame_mask: np.ndarray | None = None) -> Tensor:
    """Frame-weighted K-way cross entropy on the attention weights.

    Each frame contributes ``-(1 - w_nb) * log softmax(w_1..w_K)[k']``; the
    softmax runs over the word columns only.  2-D weights ``(T, K+1)`` with an
    int index give a scalar; ``(N, T, K+1)`` with N indices give ``(N,)``.
    """
    w = attention.weights if isinstance(attention, AttentionMap) else attention
    single = w.ndim == 2
    if single:
        w = w.reshape(1, *w.shape)
        correct_index = [correct_index]
    n, t, kp1 = w.shape
    k = kp1 - 1
    if k < 1:
        raise ValueError("CE supervision needs at least one catalog word")
    idx = np.asarray(correct_index, dtype=np.int64).reshape(n)
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"correct index outside [0, {k})")
    nb = w[:, :, 0]
    word_logp = tc.log_softmax(w[:, :, 1:], axis=-1)
    picked = word_logp[np.arange(n)[:, None], np.arange(t)[None, :], idx[:, None]]
    frame_weight = (nb * -1.0) + 1.0
    if frame_mask is not None:
        frame_weight = frame_weight * np.asarray(frame_mask, dtype=np.float64).reshape(n, t)
    loss = (frame_weight * (picked * -1.0)).sum(axis=1)
    return loss.reshape(()) if single else loss


def combined_loss(log_probs, targets, attention, correct_index, alpha: float,
                  input_lengths: Sequence[int] | None = None) -> Tensor:
    """CTC plus ``alpha`` times the CE supervision term."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    ctc = ctc_loss(log_probs, targets, input_lengths)
    if alpha == 0:
        return ctc
    mask = None
    if input_lengths is not None:
        t = log_probs.shape[-2]
        mask = (np.arange(t)[None, :] < np.asarray(input_lengths)[:, None]).astype(np.float64)
    return ctc + ce_supervision_loss(attention, correct_index, mask) * alpha


class BiasedCTCModel:
    """Encoder (the CTC parameters) with an optional adapter (the biasing parameters)."""

    def __init__(self, encoder: EncoderStack, adapter: ContextualAdapter | None = None):
        self.encoder = encoder
        self.adapter = adapter

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, seed: int, with_adapter: bool = False,
               embed_dim: int = 16) -> "BiasedCTCModel":
        encoder = EncoderStack(enc_cfg, np.random.default_rng([seed, 0]))
        model = cls(encoder)
        if with_adapter:
            model.attach_adapter(seed, embed_dim)
        return model

    def attach_adapter(self, seed: int, embed_dim: int = 16) -> None:
        cfg = self.encoder.config
        acfg = AdapterConfig(hidden=cfg.hidden, embed_dim=embed_dim, blocks=cfg.blocks,
                             vocab_size=cfg.vocab_size)
        self.adapter = ContextualAdapter(acfg, np.random.default_rng([seed, 1]))

    def partitions(self) -> dict[str, dict[str, Tensor]]:
        parts = {"encoder": dict(self.encoder.named_parameters())}
        if self.adapter is not None:
            parts["adapters"] = dict(self.adapter.named_parameters())
        return parts

    def forward(self, frames, lengths=None, catalogs=None, use_adapters: bool = True):
        """Return ``(log_probs, attention_map_or_None, encoder_output)``.

        ``catalogs`` is one shared :class:`Catalog` or a per-utterance list.
        """
        out: EncoderOutput = self.encoder(frames, lengths)
        if not use_adapters or self.adapter is None or catalogs is None:
            return tc.log_softmax(out.logits, axis=-1), None, out
        keys, values = encode_catalog(catalogs, self.adapter)
        amap = biasing_attention(out.layer_states, keys, values, self.adapter)
        logits = apply_bias(out.final_state, amap.context, self.encoder.output_proj)
        return tc.log_softmax(logits, axis=-1), amap, out
