"""Oracle suites behind ``ctxadapt verify``.

Every suite resolves the code under test through its module attribute
(``adapters.ce_supervision_loss`` rather than a bound import), so patching a
function at runtime is visible to the suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import adapters, ctc, evalkit, nn_blocks
from . import tensor_core as tc


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max_error={self.max_error:.3e} tol={self.tolerance:.1e}{extra}"


def _param(rng, *shape):
    return tc.Tensor(rng.normal(size=shape), requires_grad=True)


def primitive_cases(rng) -> dict[str, tuple[Callable[[], tc.Tensor], list[tc.Tensor]]]:
    """One scalar-valued probe per tape primitive."""
    x, y = _param(rng, 3, 4), _param(rng, 3, 4)
    w = _param(rng, 4, 2)
    table = _param(rng, 5, 3)
    probe = rng.normal(size=(3, 4))
    eprobe = rng.normal(size=(2, 3, 3))
    dot = lambda t: (t * probe).sum()
    return {
        "add": (lambda: dot(tc.add(x, y)), [x, y]),
        "mul": (lambda: dot(tc.mul(x, y)), [x, y]),
        "matmul": (lambda: (tc.matmul(x, w) * probe[:, :2]).sum(), [x, w]),
        "tanh": (lambda: dot(tc.tanh(x)), [x]),
        "sigmoid": (lambda: dot(tc.sigmoid(x)), [x]),
        "exp": (lambda: dot(tc.exp(x)), [x]),
        "log": (lambda: dot(tc.log(tc.exp(x) + 1.0)), [x]),
        "softmax": (lambda: dot(tc.softmax(x, axis=-1)), [x]),
        "log_softmax": (lambda: dot(tc.log_softmax(x, axis=0)), [x]),
        "logsumexp": (lambda: (tc.logsumexp(x, axis=1) * probe[:, 0]).sum(), [x]),
        "concat": (lambda: (tc.concat([x, y], axis=0) * np.vstack([probe, probe])).sum(), [x, y]),
        "stack": (lambda: (tc.stack([x, y], axis=0) * probe).sum(), [x, y]),
        "index": (lambda: (x[np.array([0, 2, 2]), np.array([1, 3, 3])] * probe[0, :3]).sum(), [x]),
        "reshape": (lambda: (x.reshape(4, 3) * probe.reshape(4, 3)).sum(), [x]),
        "swapaxes": (lambda: (tc.swapaxes(x, 0, 1) * probe.T).sum(), [x]),
        "sum": (lambda: (tc.tensor_sum(x, axis=0) * probe[0]).sum(), [x]),
        "mean": (lambda: (tc.mean(x, axis=1) * probe[:, 0]).sum(), [x]),
        "embedding": (lambda: (tc.embedding(table, [[0, 4, 4], [1, 2, 0]]) * eprobe).sum(), [table]),
    }


def toy_combined_loss(seed: int = 0, alpha: float = 25.0):
    """Full CTC + CE objective on a 2-frame utterance with a 2-word catalog."""
    enc = nn_blocks.EncoderConfig(input_dim=4, hidden=8, blocks=2, heads=2, ff_dim=8, vocab_size=5)
    model = adapters.BiasedCTCModel.create(enc, seed=seed, with_adapter=True, embed_dim=4)
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(1, 2, 4))
    catalog = adapters.Catalog([[1, 2], [3]], correct_index=1)

    def f():
        log_probs, amap, _ = model.forward(frames, [2], [catalog])
        return adapters.combined_loss(log_probs, [[3]], amap, [1], alpha, [2]).sum()

    return f, [t for part in model.partitions().values() for t in part.values()]


def suite_gradients(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    errors = {name: tc.grad_check(f, params) for name, (f, params) in primitive_cases(rng).items()}
    f, params = toy_combined_loss(seed)
    errors["combined_loss"] = tc.grad_check(f, params)
    worst = max(errors, key=errors.get)
    err = errors[worst]
    return SuiteResult("gradients", err < 1e-4, err, 1e-4, f"{len(errors)} checks, worst {worst}")


def random_ctc_instance(rng):
    while True:
        t, v, u = int(rng.integers(1, 7)), int(rng.integers(2, 6)), int(rng.integers(0, 4))
        labels = [int(a) for a in rng.integers(1, v, size=u)]
        if ctc.min_frames(labels) <= t:
            x = rng.normal(size=(t, v)) * 2.0
            return x - np.log(np.exp(x).sum(axis=1, keepdims=True)), labels


def suite_ctc(seed: int = 0, n: int = 200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(n):
        lp, labels = random_ctc_instance(rng)
        err = max(err, abs(ctc.ctc_loss(lp, labels).item() - ctc.ctc_brute_force(lp, labels)))
    return SuiteResult("ctc_brute_force", err <= 1e-8, err, 1e-8, f"{n} instances")


CE_HAND_VALUE = 0.32218


def suite_ce_hand_values() -> SuiteResult:
    hand = adapters.ce_supervision_loss(tc.Tensor(np.array([[0.5, 0.3, 0.2]])), 0).item()
    nb_only = np.zeros((3, 3))
    nb_only[:, 0] = 1.0
    zero = adapters.ce_supervision_loss(tc.Tensor(nb_only), 1).item()
    err = max(abs(hand - CE_HAND_VALUE), abs(zero))
    ok = abs(hand - CE_HAND_VALUE) <= 1e-4 and zero == 0.0
    return SuiteResult("ce_hand_values", ok, err, 1e-4, f"hand={hand:.5f} all_nb={zero!r}")


def suite_adapter_identity(seed: int = 0, n: int = 50) -> SuiteResult:
    enc = nn_blocks.EncoderConfig()
    model = adapters.BiasedCTCModel.create(enc, seed=seed, with_adapter=True)
    rng = np.random.default_rng(seed)
    diff, mismatched = 0.0, 0
    with tc.no_grad():
        for _ in range(n):
            x = rng.normal(size=(int(rng.integers(1, 12)), enc.input_dim))
            biased, _, _ = model.forward(x, catalogs=adapters.Catalog([]), use_adapters=True)
            base, _, _ = model.forward(x, use_adapters=False)
            if not np.array_equal(biased.data, base.data):
                mismatched += 1
                diff = max(diff, float(np.abs(biased.data - base.data).max()))
    return SuiteResult("adapter_identity", mismatched == 0, diff, 0.0, f"{mismatched}/{n} differ")


def edit_distance_oracle(ref, hyp) -> int:
    """Memoised recursion over suffixes, independent of the table fill."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(d(i + 1, j) + 1, d(i, j + 1) + 1, d(i + 1, j + 1) + (ref[i] != hyp[j]))

    return d(0, 0)


def entity_counts_oracle(refs, hyps, entities):
    """Greedy one-to-one matching of hypothesis entity tokens against a working copy of the reference."""
    tp = fp = fn = 0
    for ref, hyp in zip(refs, hyps):
        pending = [w for w in ref if w in entities]
        for w in hyp:
            if w not in entities:
                continue
            if w in pending:
                pending.remove(w)
                tp += 1
            else:
                fp += 1
        fn += len(pending)
    return tp, fp, fn


def random_metric_case(rng, words=("ab", "cd", "ef", "gh", "ij")):
    n = int(rng.integers(1, 4))
    refs = [list(rng.choice(words, size=int(rng.integers(1, 6)))) for _ in range(n)]
    hyps = [list(rng.choice(words, size=int(rng.integers(0, 6)))) for _ in range(n)]
    return refs, hyps


def suite_metrics(seed: int = 0, n: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    err = 0.0
    for _ in range(n):
        refs, hyps = random_metric_case(rng)
        want = sum(edit_distance_oracle(r, h) for r, h in zip(refs, hyps)) / sum(len(r) for r in refs)
        err = max(err, abs(evalkit.corpus_wer(refs, hyps) - want))
    for _ in range(n):
        refs, hyps = random_metric_case(rng)
        ents = set(rng.choice(["ab", "cd", "ef", "gh", "ij"], size=2, replace=False))
        tp, fp, fn = entity_counts_oracle(refs, hyps, ents)
        s = evalkit.entity_f1(refs, hyps, ents)
        err = max(err, abs(s.tp - tp), abs(s.fp - fp), abs(s.fn - fn))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        err = max(err, abs(s.precision - p), abs(s.recall - r), abs(s.f1 - f))
    return SuiteResult("metric_oracles", err == 0.0, err, 0.0, f"{2 * n} cases")


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradients": suite_gradients,
    "ctc_brute_force": suite_ctc,
    "ce_hand_values": suite_ce_hand_values,
    "adapter_identity": suite_adapter_identity,
    "metric_oracles": suite_metrics,
}


def run_all() -> list[SuiteResult]:
    out = []
    for name, fn in SUITES.items():
        try:
            out.append(fn())
        except Exception as exc:  # a crashing suite is a failed suite
            out.append(SuiteResult(name, False, math.inf, 0.0, f"{type(exc).__name__}: {exc}"))
    return out
