"""Staged training for the monolingual baselines and the two multilingual tracks.

A stage trains some partitions of a :class:`ModelCheckpoint` (``encoder``
and/or ``adapters``) on pooled or single-language data, with either the plain
CTC loss or CTC plus the weighted CE supervision term.  Frozen partitions are
excluded from the tape entirely, so they come out bitwise unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_core as tc
from .adapters import BiasedCTCModel, combined_loss
from .ctc import ctc_loss
from .nn_blocks import EncoderConfig
from .synthlang import BoostSubset, Corpus, Utterance, build_boost_subset, sample_catalog

log = logging.getLogger(__name__)

PARTITIONS = ("encoder", "adapters")
CHECKPOINT_MAGIC = b"CTXACKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    warmup: int = 200
    epochs: int = 10
    batch_size: int = 8
    alpha: float = 0.0
    k_min: int = 3
    k_max: int = 10
    seed: int = 0
    clip_norm: float = 5.0
    dev_cap: int = 400

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.k_min > self.k_max or self.k_min < 1:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# ----------------------------------------------------------------------------
# optimizer and schedules
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, tc.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              frozen: Sequence[str] = (), beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam on every named tensor not listed in ``frozen``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    frozen = set(frozen)
    for name, p in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def lr_schedule(step: int, warmup: int, lr_max: float) -> float:
    """Linear warmup to ``lr_max``, constant afterwards."""
    if warmup <= 0 or step >= warmup:
        return lr_max
    return lr_max * step / warmup


def curriculum_k(epoch: int, total_epochs: int, k_min: int, k_max: int) -> int:
    """Catalog size for ``epoch``: linear from ``k_min`` to ``k_max``, rounded half up."""
    if total_epochs <= 1:
        return k_max
    x = k_min + (k_max - k_min) * epoch / (total_epochs - 1)
    return int(math.floor(x + 0.5))


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    state: dict[str, np.ndarray]
    partitions: dict[str, list[str]]
    frozen: dict[str, bool]
    provenance: dict

    def __post_init__(self):
        names = [n for part in self.partitions.values() for n in part]
        if len(names) != len(set(names)) or set(names) != set(self.state):
            raise ValueError("checkpoint partitions must be disjoint and cover every tensor")

    @property
    def has_adapters(self) -> bool:
        return bool(self.partitions.get("adapters"))

    @property
    def model_id(self) -> str:
        return self.provenance.get("model_id", "")

    def partition_state(self, part: str) -> dict[str, np.ndarray]:
        return {n: self.state[n] for n in self.partitions.get(part, [])}

    @classmethod
    def from_model(cls, model: BiasedCTCModel, provenance: dict,
                   frozen: dict[str, bool] | None = None) -> "ModelCheckpoint":
        state, partitions = {}, {}
        for part, tensors in model.partitions().items():
            partitions[part] = []
            for name, p in tensors.items():
                key = f"{part}.{name}"
                state[key] = p.data.copy()
                partitions[part].append(key)
        frozen = frozen or {}
        return cls(state, partitions, {p: bool(frozen.get(p, False)) for p in partitions}, dict(provenance))

    def to_model(self, enc_cfg: EncoderConfig, embed_dim: int = 16) -> BiasedCTCModel:
        model = BiasedCTCModel.create(enc_cfg, seed=0, with_adapter=self.has_adapters, embed_dim=embed_dim)
        for part, tensors in model.partitions().items():
            prefix = f"{part}."
            sub = {n[len(prefix):]: self.state[n] for n in self.partitions[part]}
            module = model.encoder if part == "encoder" else model.adapter
            module.load_state_dict(sub)
        return model

    def to_bytes(self) -> bytes:
        order = [n for part in PARTITIONS for n in self.partitions.get(part, [])]
        header = {
            "version": CHECKPOINT_VERSION,
            "tensors": [{"name": n, "shape": list(self.state[n].shape)} for n in order],
            "partitions": {p: self.partitions[p] for p in PARTITIONS if p in self.partitions},
            "frozen": {p: self.frozen[p] for p in PARTITIONS if p in self.frozen},
            "provenance": self.provenance,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(self.state[n], dtype="<f8").tobytes() for n in order)
        return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        pos = len(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack("<II", raw[pos: pos + 8])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += 8
        header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
        pos += hlen
        state = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            state[t["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(t["shape"]).astype(np.float64)
            pos += 8 * n
        if pos != len(raw):
            raise ValueError("trailing bytes after checkpoint payload")
        return cls(state, header["partitions"], header["frozen"], header["provenance"])

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def lineage_hash(parent_hash: str, model_id: str, config_hash: str) -> str:
    return hashlib.sha256(f"{parent_hash}|{model_id}|{config_hash}".encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# stages and plans
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    name: str
    data: str            # "pooled" or "mono"
    trainable: tuple[str, ...]
    loss: str            # "ctc" or "ctc+ce"
    adapters: bool

    @property
    def frozen(self) -> tuple[str, ...]:
        return tuple(p for p in PARTITIONS if p not in self.trainable and (p != "adapters" or self.adapters))


def _stage(name, data, trainable, loss="ctc"):
    return Stage(name, data, tuple(trainable), loss, adapters="adapters" in trainable)


STAGE_PLANS: dict[str, list[Stage]] = {
    "mono": [
        _stage("I", "mono", ["encoder"]),
        _stage("II", "mono", ["adapters"]),
    ],
    "a": [
        _stage("I", "pooled", ["encoder"]),
        _stage("II", "mono", ["encoder"]),
        _stage("III", "mono", ["adapters"]),
    ],
    "b": [
        _stage("I", "pooled", ["encoder"]),
        _stage("II", "pooled", ["adapters"]),
        _stage("III", "mono", ["encoder", "adapters"]),
    ],
}


def stage_for(track: str, stage: str, alpha: float = 0.0) -> Stage:
    try:
        plan = STAGE_PLANS[track]
    except KeyError:
        raise ValueError(f"unknown track {track!r}") from None
    for st in plan:
        if st.name == stage:
            loss = "ctc+ce" if (alpha > 0 and st.adapters) else "ctc"
            return replace(st, loss=loss)
    raise ValueError(f"track {track!r} has no stage {stage!r}")


@dataclass
class StageData:
    train: list[Utterance]
    dev: list[Utterance]
    frequencies: dict[str, dict[str, int]]


def stage_data(corpus: Corpus, selector: str, lang: str | None, dev_cap: int) -> StageData:
    langs = list(corpus.languages) if selector == "pooled" else [lang]
    if selector != "pooled" and lang not in corpus.languages:
        raise TrainingError(f"unknown language {lang!r}")
    train = [u for name in langs for u in corpus.languages[name].train]
    dev = [u for name in langs for u in corpus.languages[name].dev]
    if len(dev) > dev_cap:
        step = len(dev) / dev_cap
        dev = [dev[int(i * step)] for i in range(dev_cap)]
    freqs = {name: dict(corpus.languages[name].word_frequencies()) for name in langs}
    return StageData(train, dev, freqs)


def _stable_int(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _pad(utts: Sequence[Utterance]) -> tuple[np.ndarray, list[int]]:
    lengths = [u.num_frames for u in utts]
    dim = utts[0].frames.shape[1]
    batch = np.zeros((len(utts), max(lengths), dim))
    for i, u in enumerate(utts):
        batch[i, : u.num_frames] = u.frames
    return batch, lengths


def batch_loss(model: BiasedCTCModel, utts: Sequence[Utterance], catalogs, alpha: float,
               use_adapters: bool) -> tc.Tensor:
    """Per-utterance losses ``(N,)`` for one padded batch."""
    frames, lengths = _pad(utts)
    log_probs, amap, _ = model.forward(frames, lengths, catalogs if use_adapters else None, use_adapters)
    targets = [u.tokens for u in utts]
    if amap is None or alpha == 0:
        return ctc_loss(log_probs, targets, lengths)
    return combined_loss(log_probs, targets, amap, [c.correct_index for c in catalogs], alpha, lengths)


def _catalogs(boost: BoostSubset, utts: Sequence[Utterance], k: int, seed: int, salt: int):
    return [sample_catalog(boost.pool[u.lang], u.boost_word, k, [seed, salt, _stable_int(u.id)]) for u in utts]


def _dev_loss(model, data: StageData, stage: Stage, cfg: TrainConfig, boost_dev: BoostSubset | None) -> float:
    samples = boost_dev.samples if boost_dev is not None else data.dev
    if not samples:
        return float("nan")
    total = 0.0
    alpha = cfg.alpha if stage.loss == "ctc+ce" else 0.0
    with tc.no_grad():
        for i in range(0, len(samples), 32):
            chunk = samples[i: i + 32]
            cats = _catalogs(boost_dev, chunk, cfg.k_max, cfg.seed, 7) if boost_dev is not None else None
            total += float(batch_loss(model, chunk, cats, alpha, stage.adapters).data.sum())
    return total / len(samples)


def run_stage(stage: Stage, data: StageData, checkpoint: ModelCheckpoint | None, cfg: TrainConfig,
              enc_cfg: EncoderConfig, provenance: dict, log_records: list | None = None,
              embed_dim: int = 16) -> ModelCheckpoint:
    """Train one stage and return the best-on-dev checkpoint."""
    cfg.validate()
    if not data.train:
        raise TrainingError(f"stage {stage.name}: no training data")
    if checkpoint is None:
        if stage.trainable != ("encoder",):
            raise TrainingError(f"stage {stage.name} needs an ancestor checkpoint")
        model = BiasedCTCModel.create(enc_cfg, seed=cfg.seed)
    else:
        model = checkpoint.to_model(enc_cfg, embed_dim)
    if stage.adapters and model.adapter is None:
        model.attach_adapter(cfg.seed, embed_dim)
    if "adapters" in stage.trainable and not stage.adapters:
        raise TrainingError("partition mismatch: adapters trainable in an encoder-only stage")

    parts = model.partitions()
    trainable = {f"{p}.{n}": t for p in stage.trainable for n, t in parts[p].items()}
    for p, tensors in parts.items():
        for t in tensors.values():
            t.requires_grad = p in stage.trainable

    boost = boost_dev = None
    if stage.adapters:
        boost = build_boost_subset(data.train, data.frequencies)
        boost_dev = build_boost_subset(data.dev, data.frequencies)
        # dev pools come from the training text so dev catalogs use the same words
        boost_dev.pool = {lang: sorted(set(boost.pool.get(lang, [])) | set(words))
                          for lang, words in boost_dev.pool.items()}
    samples = boost.samples if boost is not None else list(data.train)
    alpha = cfg.alpha if stage.loss == "ctc+ce" else 0.0
    opt = AdamState()
    best_dev, best_state = math.inf, None
    stage_salt = _stable_int(provenance.get("model_id", stage.name))

    for epoch in range(cfg.epochs):
        k = curriculum_k(epoch, cfg.epochs, cfg.k_min, cfg.k_max) if stage.adapters else 0
        order = np.random.default_rng([cfg.seed, stage_salt, epoch]).permutation(len(samples))
        losses, lr = [], 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start: start + cfg.batch_size]]
            cats = _catalogs(boost, chunk, k, cfg.seed, stage_salt * 1000 + epoch) if stage.adapters else None
            per_utt = batch_loss(model, chunk, cats, alpha, stage.adapters)
            loss = per_utt.mean()
            for t in trainable.values():
                t.grad = None
            loss.backward()
            grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
            clip_grads(grads, cfg.clip_norm)
            lr = lr_schedule(opt.step + 1, cfg.warmup, cfg.lr)
            adam_step(trainable, grads, opt, lr)
            losses.append(float(per_utt.data.mean()))
        dev = _dev_loss(model, data, stage, cfg, boost_dev)
        rec = {"stage": provenance.get("model_id", stage.name), "epoch": epoch, "K": k,
               "train_loss": float(np.mean(losses)), "dev_loss": dev, "lr": lr}
        log.info("%s epoch %d K=%d train %.4f dev %.4f", rec["stage"], epoch, k, rec["train_loss"], dev)
        if log_records is not None:
            log_records.append(rec)
        if dev < best_dev:
            best_dev = dev
            best_state = {n: t.data.copy() for n, t in trainable.items()}

    if best_state is not None:
        for n, arr in best_state.items():
            trainable[n].data = arr
    for tensors in parts.values():
        for t in tensors.values():
            t.requires_grad = True
    frozen = {p: p not in stage.trainable for p in parts}
    return ModelCheckpoint.from_model(model, provenance, frozen)


# ----------------------------------------------------------------------------
# the model lineup
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LineupConfig:
    encoder: EncoderConfig = EncoderConfig()
    embed_dim: int = 16
    train: TrainConfig = TrainConfig()
    alpha: float = 25.0
    mono_epochs: int = 20
    pooled_epochs: int = 4
    finetune_epochs: int = 10
    adapter_epochs: int = 10
    pooled_adapter_epochs: int = 2
    joint_epochs: int = 10

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# model id -> (parent id, track, stage, uses CE, epochs field)
LINEUP: dict[str, tuple[str | None, str, str, bool, str]] = {
    "MONO-I": (None, "mono", "I", False, "mono_epochs"),
    "MONO-II": ("MONO-I", "mono", "II", False, "adapter_epochs"),
    "MONO-II.ce": ("MONO-I", "mono", "II", True, "adapter_epochs"),
    "ML-I": (None, "b", "I", False, "pooled_epochs"),
    "ML-II.a": ("ML-I", "a", "II", False, "finetune_epochs"),
    "ML-III.a": ("ML-II.a", "a", "III", False, "adapter_epochs"),
    "ML-III.a.ce": ("ML-II.a", "a", "III", True, "adapter_epochs"),
    "ML-II.b": ("ML-I", "b", "II", False, "pooled_adapter_epochs"),
    "ML-II.b.ce": ("ML-I", "b", "II", True, "pooled_adapter_epochs"),
    "ML-III.b": ("ML-II.b", "b", "III", False, "joint_epochs"),
}


_MODEL_IDS = {
    ("mono", "I"): ("MONO-I", "MONO-I"),
    ("mono", "II"): ("MONO-II", "MONO-II.ce"),
    ("a", "I"): ("ML-I", "ML-I"),
    ("b", "I"): ("ML-I", "ML-I"),
    ("a", "II"): ("ML-II.a", "ML-II.a"),
    ("a", "III"): ("ML-III.a", "ML-III.a.ce"),
    ("b", "II"): ("ML-II.b", "ML-II.b.ce"),
    ("b", "III"): ("ML-III.b", "ML-III.b"),
}


def model_id_for(track: str, stage: str, alpha: float = 0.0) -> str:
    try:
        plain, with_ce = _MODEL_IDS[(track, stage)]
    except KeyError:
        raise ValueError(f"no lineup model for track={track!r} stage={stage!r}") from None
    return with_ce if alpha > 0 else plain


def lineage(model_id: str) -> list[str]:
    chain = []
    cur: str | None = model_id
    while cur is not None:
        chain.append(cur)
        cur = LINEUP[cur][0]
    return chain[::-1]


def train_model(model_id: str, corpus: Corpus, lang: str, cfg: LineupConfig,
                parent: ModelCheckpoint | None, log_records: list | None = None) -> ModelCheckpoint:
    parent_id, track, stage_name, uses_ce, epochs_field = LINEUP[model_id]
    if parent_id is not None and (parent is None or parent.model_id != parent_id):
        raise TrainingError(f"{model_id} requires ancestor {parent_id}")
    stage = stage_for(track, stage_name, cfg.alpha if uses_ce else 0.0)
    tcfg = replace(cfg.train, epochs=getattr(cfg, epochs_field), alpha=cfg.alpha if uses_ce else 0.0,
                   seed=(cfg.train.seed * 1_000_003 + _stable_int(model_id)) % (2**31))
    chash = cfg.config_hash()
    parent_hash = parent.provenance["lineage_hash"] if parent is not None else ""
    provenance = {
        "model_id": model_id,
        "track": track,
        "stage": stage_name,
        "lang": None if stage.data == "pooled" else lang,
        "seed": cfg.train.seed,
        "alpha": tcfg.alpha,
        "epochs": tcfg.epochs,
        "config_hash": chash,
        "parent": parent_id,
        "lineage": lineage(model_id),
        "lineage_hash": lineage_hash(parent_hash, model_id, chash),
    }
    data = stage_data(corpus, stage.data, lang, tcfg.dev_cap)
    return run_stage(stage, data, parent, tcfg, cfg.encoder, provenance, log_records, cfg.embed_dim)


def build_model_lineup(corpus: Corpus, cfg: LineupConfig, lang: str | None = None,
                       models: Sequence[str] | None = None,
                       log_records: list | None = None) -> dict[str, ModelCheckpoint]:
    """Train the requested lineup (default: all ten models) for ``lang``, sharing ancestors."""
    lang = lang or corpus.low_resource
    wanted = list(models) if models is not None else list(LINEUP)
    needed: list[str] = []
    for mid in wanted:
        for anc in lineage(mid):
            if anc not in needed:
                needed.append(anc)
    needed.sort(key=lambda m: list(LINEUP).index(m))
    out: dict[str, ModelCheckpoint] = {}
    for mid in needed:
        parent_id = LINEUP[mid][0]
        out[mid] = train_model(mid, corpus, lang, cfg, out.get(parent_id), log_records)
    return {m: out[m] for m in needed}
