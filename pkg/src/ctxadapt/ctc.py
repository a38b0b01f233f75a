"""CTC negative log-likelihood, an enumeration oracle, and greedy decoding.

Blank is always id 0.  ``ctc_loss`` runs the alpha recursion over the
blank-interleaved label sequence entirely in log space on the autodiff tape,
so its gradient comes from backprop through ``logsumexp`` nodes.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

BLANK = 0


class InfeasibleAlignment(ValueError):
    """The label sequence cannot be emitted in the available frames."""


class InstanceTooLarge(ValueError):
    pass


def min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can emit ``labels``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int]) -> list[int]:
    ext = [BLANK]
    for lab in labels:
        ext += [int(lab), BLANK]
    return ext


def ctc_loss(log_probs, targets, input_lengths: Sequence[int] | None = None) -> Tensor:
    """Per-utterance CTC loss.

    ``log_probs`` is ``(T, V)`` with a single label sequence, or ``(N, T, V)``
    with a list of N sequences and optional per-utterance frame counts.
    Returns a scalar for the 2-D form and an ``(N,)`` tensor otherwise.
    """
    lp = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    single = lp.ndim == 2
    if single:
        lp = lp.reshape(1, *lp.shape)
        targets = [targets]
    n, t_max, vocab = lp.shape
    lengths = np.full(n, t_max) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    for i, y in enumerate(targets):
        if any(lab <= BLANK or lab >= vocab for lab in y):
            raise ValueError(f"labels must lie in [1, {vocab}), got {list(y)}")
        if min_frames(y) > lengths[i]:
            raise InfeasibleAlignment(
                f"utterance {i}: {len(y)} labels need {min_frames(y)} frames, only {lengths[i]} available")

    exts = [_extend(y) for y in targets]
    s_len = np.array([len(e) for e in exts])
    s_max = int(s_len.max())
    ext = np.zeros((n, s_max), dtype=np.int64)
    for i, e in enumerate(exts):
        ext[i, : len(e)] = e

    # skip transition s-2 -> s allowed into non-blank labels that differ from label s-2
    skip = np.full((n, s_max), -np.inf)
    for i, e in enumerate(exts):
        for s in range(2, len(e)):
            if e[s] != BLANK and e[s] != e[s - 2]:
                skip[i, s] = 0.0
    init = np.full((n, s_max), -np.inf)
    init[:, 0] = 0.0
    if s_max > 1:
        init[s_len > 1, 1] = 0.0

    # (T, N, S): log p_t(l'_s) per utterance
    emit = tc.swapaxes(lp[np.arange(n)[:, None, None], np.arange(t_max)[None, :, None], ext[:, None, :]], 0, 1)
    pad = Tensor(np.full((n, 2), -np.inf))

    alpha = emit[0] + init
    alphas = [alpha]
    for t in range(1, t_max):
        padded = tc.concat([pad, alpha], axis=1)
        cands = tc.stack([padded[:, 2:], padded[:, 1:-1], padded[:, :-2] + skip], axis=0)
        alpha = tc.logsumexp(cands, axis=0) + emit[t]
        alphas.append(alpha)

    table = alphas[0].reshape(1, n, s_max) if t_max == 1 else tc.stack(alphas, axis=0)
    rows = np.arange(n)
    last = table[lengths - 1, rows, s_len - 1]
    prev = table[lengths - 1, rows, np.maximum(s_len - 2, 0)]
    prev = prev + np.where(s_len > 1, 0.0, -np.inf)
    ll = tc.logsumexp(tc.stack([last, prev], axis=0), axis=0)
    loss = ll * -1.0
    return loss.reshape(()) if single else loss


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != BLANK:
            out.append(int(p))
        prev = p
    return tuple(out)


@lru_cache(maxsize=64)
def _path_table(t: int, v: int) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
    paths = np.array(list(itertools.product(range(v), repeat=t)), dtype=np.int64).reshape(-1, t)
    return paths, tuple(collapse(p) for p in paths)


def ctc_brute_force(log_probs: np.ndarray, labels: Sequence[int], max_paths: int = 10**6) -> float:
    """Loss by summing every frame path that collapses to ``labels``; +inf if none does."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    t, v = lp.shape
    if v ** t > max_paths:
        raise InstanceTooLarge(f"{v}^{t} paths exceeds the enumeration bound {max_paths}")
    paths, collapsed = _path_table(t, v)
    target = tuple(int(x) for x in labels)
    keep = np.array([c == target for c in collapsed])
    if not keep.any():
        return float("inf")
    scores = lp[np.arange(t)[None, :], paths[keep]].sum(axis=1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


def greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax (lowest id wins ties), collapse repeats, strip blanks."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    return list(collapse(np.argmax(lp, axis=-1).tolist()))
