"""Scoring: corpus WER, frequency-matched entity F1, and report tables."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor_core as tc
from .adapters import BiasedCTCModel, Catalog
from .ctc import greedy_decode
from .synthlang import Utterance, catalog_from_words, decode_words

WITH_ADAPTERS = "with-adapters"
DETACHED = "adapters-detached"
CONDITIONS = (WITH_ADAPTERS, DETACHED)

REPORT_COLUMNS = ["model_id", "language", "condition", "wer", "precision", "recall", "f1",
                  "n_ref_tokens", "n_entity_tokens", "config_hash"]

GROUPS = [
    ("Monolingual", ["MONO-I", "MONO-II", "MONO-II.ce"]),
    ('Multilingual Training (Track "a")', ["ML-I", "ML-II.a", "ML-III.a", "ML-III.a.ce"]),
    ('Multilingual Contextual Adapters (Track "b")', ["ML-I", "ML-II.b", "ML-II.b.ce", "ML-III.b",
                                                      "ML-III.b.inf"]),
]


class EvalError(ValueError):
    pass


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost Levenshtein distance between two token sequences."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    if not ref:
        raise EvalError("empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Total edits over total reference words."""
    n = sum(len(r) for r in refs)
    if n == 0:
        raise EvalError("empty reference set")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / n


@dataclass(frozen=True)
class EntityScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def entity_f1(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]],
              entities: Iterable[str]) -> EntityScore:
    """Micro-averaged entity P/R/F1 from clipped per-utterance occurrence counts."""
    ents = set(entities)
    tp = fp = fn = 0
    for ref, hyp in zip(refs, hyps):
        rc = Counter(w for w in ref if w in ents)
        hc = Counter(w for w in hyp if w in ents)
        for w in rc.keys() | hc.keys():
            tp += min(rc[w], hc[w])
            fp += max(0, hc[w] - rc[w])
            fn += max(0, rc[w] - hc[w])
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return EntityScore(p, r, f, tp, fp, fn)


@dataclass
class DecodeResult:
    utt_id: str
    hyp: list[str]
    ref: list[str]
    condition: str
    catalog: list[str] = field(default_factory=list)


def decode_suite(model: BiasedCTCModel, utterances: Sequence[Utterance], entities: Sequence[str] | None,
                 condition: str, batch_size: int = 32) -> list[DecodeResult]:
    """Greedy-decode ``utterances`` with adapters on (catalog = ``entities``) or detached."""
    if condition not in CONDITIONS:
        raise EvalError(f"unknown condition {condition!r}")
    if condition == WITH_ADAPTERS and model.adapter is None:
        raise EvalError("with-adapters decoding requested but the checkpoint has no adapters")
    words = list(entities or [])
    catalog: Catalog | None = catalog_from_words(words) if condition == WITH_ADAPTERS else None
    results = []
    with tc.no_grad():
        for start in range(0, len(utterances), batch_size):
            chunk = utterances[start: start + batch_size]
            lengths = [u.num_frames for u in chunk]
            frames = np.zeros((len(chunk), max(lengths), chunk[0].frames.shape[1]))
            for i, u in enumerate(chunk):
                frames[i, : u.num_frames] = u.frames
            log_probs, _, _ = model.forward(frames, lengths, catalog, condition == WITH_ADAPTERS)
            for i, u in enumerate(chunk):
                ids = greedy_decode(log_probs.data[i, : lengths[i]])
                results.append(DecodeResult(u.id, decode_words(ids), list(u.words), condition, list(words)))
    return results


@dataclass
class ReportRow:
    model_id: str
    language: str
    condition: str
    wer: float
    precision: float | None
    recall: float | None
    f1: float | None
    n_ref_tokens: int
    n_entity_tokens: int
    config_hash: str = ""

    def as_record(self) -> dict[str, str]:
        pct = lambda v: "" if v is None else f"{100 * v:.2f}"
        return {
            "model_id": self.model_id,
            "language": self.language,
            "condition": self.condition,
            "wer": pct(self.wer),
            "precision": pct(self.precision),
            "recall": pct(self.recall),
            "f1": pct(self.f1),
            "n_ref_tokens": str(self.n_ref_tokens),
            "n_entity_tokens": str(self.n_entity_tokens),
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_record(cls, rec: dict[str, str]) -> "ReportRow":
        unpct = lambda v: None if v == "" else float(v) / 100
        return cls(rec["model_id"], rec["language"], rec["condition"], unpct(rec["wer"]), unpct(rec["precision"]),
                   unpct(rec["recall"]), unpct(rec["f1"]), int(rec["n_ref_tokens"]), int(rec["n_entity_tokens"]),
                   rec.get("config_hash", ""))


def score_results(model_id: str, language: str, results: Sequence[DecodeResult],
                  entities: Sequence[str] | None) -> ReportRow:
    refs = [r.ref for r in results]
    hyps = [r.hyp for r in results]
    w = corpus_wer(refs, hyps)
    n_ref = sum(len(r) for r in refs)
    if entities:
        ents = set(entities)
        s = entity_f1(refs, hyps, ents)
        n_ent = sum(1 for r in refs for x in r if x in ents)
        return ReportRow(model_id, language, results[0].condition, w, s.precision, s.recall, s.f1, n_ref, n_ent)
    return ReportRow(model_id, language, results[0].condition, w, None, None, None, n_ref, 0)


def evaluate(model: BiasedCTCModel, model_id: str, language: str, utterances: Sequence[Utterance],
             entities: Sequence[str], condition: str) -> tuple[ReportRow, list[DecodeResult]]:
    results = decode_suite(model, utterances, entities, condition)
    return score_results(model_id, language, results, entities), results


def write_hypotheses(path: Path, results: Iterable[DecodeResult]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"id": r.utt_id, "condition": r.condition, "hyp": " ".join(r.hyp),
                                 "ref": " ".join(r.ref)}, sort_keys=True) + "\n")


def rows_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_record())
    return buf.getvalue()


def parse_csv(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def rows_from_csv(text: str) -> list[ReportRow]:
    return [ReportRow.from_record(rec) for rec in parse_csv(text)]


def render_text(rows: Sequence[ReportRow]) -> str:
    """Aligned table grouped like the monolingual / track a / track b sections."""
    by_id = {}
    for r in rows:
        by_id.setdefault(r.model_id, r)
    header = ["Model ID", "Language", "WER", "P", "R", "F1"]
    lines = []
    widths = [12, 9, 7, 7, 7, 7]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines.append(fmt(header))
    lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    listed = set()
    for title, ids in GROUPS:
        present = [i for i in ids if i in by_id]
        if not present:
            continue
        lines.append(title)
        for mid in present:
            rec = by_id[mid].as_record()
            lines.append(fmt([mid, rec["language"], rec["wer"], rec["precision"] or "-",
                              rec["recall"] or "-", rec["f1"] or "-"]))
            listed.add(mid)
    extra = [r for r in rows if r.model_id not in listed]
    if extra:
        lines.append("Other")
        for r in extra:
            rec = r.as_record()
            lines.append(fmt([r.model_id, rec["language"], rec["wer"], rec["precision"] or "-",
                              rec["recall"] or "-", rec["f1"] or "-"]))
    return "\n".join(lines) + "\n"


def render_report(rows: Sequence[ReportRow]) -> tuple[str, str]:
    """``(csv_text, aligned_text)`` for the given rows."""
    return rows_to_csv(rows), render_text(rows)
