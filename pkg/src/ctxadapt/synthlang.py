"""Seeded synthetic multilingual corpus.

Every language spells words over one shared alphabet and every letter is one
phoneme with a shared prototype vector, so pooled training can transfer across
languages.  Languages differ by an accent offset, by which letters their
lexicons favour, and by how many training utterances they get.  Test
utterances each carry one out-of-vocabulary entity word built from the full
alphabet, which the low-resource training data covers poorly.
"""

from __future__ import annotations

import hashlib
import json
import string
import struct
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .adapters import Catalog
from .ctc import BLANK

SEPARATOR = "|"
ALPHABET = string.ascii_lowercase
SYMBOLS = [SEPARATOR] + list(ALPHABET)
SYMBOL_TO_ID = {s: i + 1 for i, s in enumerate(SYMBOLS)}
ID_TO_SYMBOL = {i: s for s, i in SYMBOL_TO_ID.items()}
SEP_ID = SYMBOL_TO_ID[SEPARATOR]
VOCAB_SIZE = len(SYMBOLS) + 1  # blank at 0
SPLITS = ("train", "dev", "test")


class CorpusError(ValueError):
    pass


def encode_word(word: str) -> list[int]:
    try:
        return [SYMBOL_TO_ID[ch] for ch in word]
    except KeyError as exc:
        raise CorpusError(f"word {word!r} uses a symbol outside the shared alphabet") from exc


def encode_transcript(words: Sequence[str]) -> list[int]:
    ids: list[int] = []
    for i, w in enumerate(words):
        if i:
            ids.append(SEP_ID)
        ids += encode_word(w)
    return ids


def decode_words(ids: Iterable[int]) -> list[str]:
    """Split a subword stream on the separator; empty pieces are dropped."""
    words, cur = [], []
    for i in ids:
        if i == SEP_ID:
            if cur:
                words.append("".join(cur))
            cur = []
        elif i != BLANK:
            cur.append(ID_TO_SYMBOL[i])
    if cur:
        words.append("".join(cur))
    return words


@dataclass(frozen=True)
class LanguageConfig:
    name: str
    budget: int
    core_letters: int = 12


@dataclass(frozen=True)
class CorpusConfig:
    languages: tuple[LanguageConfig, ...] = (
        LanguageConfig("lang0", 200),
        LanguageConfig("lang1", 1000),
        LanguageConfig("lang2", 2000),
        LanguageConfig("lang3", 2000),
        LanguageConfig("lang4", 4000),
    )
    feature_dim: int = 8
    noise_scale: float = 0.5
    accent_scale: float = 0.3
    lexicon_size: int = 60
    word_len: tuple[int, int] = (2, 5)
    entity_len: tuple[int, int] = (4, 6)
    words_per_utt: tuple[int, int] = (2, 6)
    frames_per_phoneme: tuple[int, int] = (1, 3)
    off_core_weight: float = 0.03
    zipf_exponent: float = 1.0
    dev_fraction: float = 0.1
    min_dev: int = 20
    test_utts: int = 100
    entity_pool: int = 40
    n_entities: int = 30

    def validate(self) -> None:
        if len(self.languages) < 2:
            raise CorpusError("need at least two languages")
        budgets = [lang.budget for lang in self.languages]
        if min(budgets) <= 0:
            raise CorpusError("language budgets must be positive")
        if min(budgets) * 5 > max(budgets):
            raise CorpusError("the smallest language must have at most 1/5 of the largest budget")
        if self.lexicon_size < 1:
            raise CorpusError("empty lexicon")
        if len({lang.name for lang in self.languages}) != len(self.languages):
            raise CorpusError("language names must be unique")

    @property
    def low_resource(self) -> str:
        return min(self.languages, key=lambda lang: lang.budget).name


@dataclass
class LanguageSpec:
    name: str
    lexicon: list[str]
    word_probs: np.ndarray
    accent: np.ndarray
    noise_scale: float
    budget: int
    entity_words: list[str]


@dataclass
class Utterance:
    id: str
    lang: str
    split: str
    frames: np.ndarray
    words: list[str]
    tokens: list[int] = field(default_factory=list)
    boost_word: str | None = None

    def __post_init__(self):
        if not self.tokens:
            self.tokens = encode_transcript(self.words)

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class LanguageCorpus:
    spec: LanguageSpec
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    entities: list[str]

    def split(self, name: str) -> list[Utterance]:
        return getattr(self, name)

    def word_frequencies(self) -> Counter:
        return Counter(w for u in self.train for w in u.words)


@dataclass
class Corpus:
    config: CorpusConfig
    prototypes: np.ndarray
    languages: dict[str, LanguageCorpus]

    @property
    def low_resource(self) -> str:
        return self.config.low_resource


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _random_word(rng: np.random.Generator, length: int, weights: np.ndarray) -> str:
    # no letter repeats back-to-back, so every word is CTC-feasible at one frame per phoneme
    out: list[int] = []
    for _ in range(length):
        w = weights.copy()
        if out:
            w[out[-1]] = 0.0
        out.append(int(rng.choice(len(ALPHABET), p=w / w.sum())))
    return "".join(ALPHABET[i] for i in out)


def build_language(cfg: CorpusConfig, lang: LanguageConfig, index: int, seed: int,
                   taken: set[str]) -> LanguageSpec:
    rng = _rng(seed, 1, index)
    weights = np.full(len(ALPHABET), cfg.off_core_weight)
    weights[rng.choice(len(ALPHABET), size=lang.core_letters, replace=False)] = 1.0
    lexicon: list[str] = []
    seen: set[str] = set()
    while len(lexicon) < cfg.lexicon_size:
        w = _random_word(rng, int(rng.integers(cfg.word_len[0], cfg.word_len[1] + 1)), weights)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    probs = ranks ** -cfg.zipf_exponent
    accent = rng.uniform(-cfg.accent_scale, cfg.accent_scale, size=cfg.feature_dim)
    flat = np.ones(len(ALPHABET))
    entities: list[str] = []
    while len(entities) < cfg.entity_pool:
        w = _random_word(rng, int(rng.integers(cfg.entity_len[0], cfg.entity_len[1] + 1)), flat)
        if w not in taken and w not in seen and w not in entities:
            entities.append(w)
    return LanguageSpec(lang.name, lexicon, probs / probs.sum(), accent, cfg.noise_scale,
                        lang.budget, entities)


def render_frames(words: Sequence[str], prototypes: np.ndarray, accent: np.ndarray, noise: float,
                  durations: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """One prototype + accent + noise vector per frame; 1..3 frames per phoneme."""
    rows = []
    for i, w in enumerate(words):
        phones = ([SEPARATOR] if i else []) + list(w)
        for ph in phones:
            reps = int(rng.integers(durations[0], durations[1] + 1))
            base = prototypes[SYMBOL_TO_ID[ph] - 1] + accent
            rows.append(base + noise * rng.standard_normal((reps, prototypes.shape[1])))
    frames = np.concatenate(rows, axis=0)
    # stored on disk as float32; keep in-memory values identical to a reload
    return frames.astype(np.float32).astype(np.float64)


def _make_utterance(spec: LanguageSpec, cfg: CorpusConfig, prototypes: np.ndarray, seed: int,
                    lang_index: int, split: str, i: int) -> Utterance:
    rng = _rng(seed, 2, lang_index, SPLITS.index(split), i)
    n_words = int(rng.integers(cfg.words_per_utt[0], cfg.words_per_utt[1] + 1))
    words = [spec.lexicon[j] for j in rng.choice(len(spec.lexicon), size=n_words, p=spec.word_probs)]
    if split == "test":
        words[int(rng.integers(n_words))] = spec.entity_words[int(rng.integers(len(spec.entity_words)))]
    frames = render_frames(words, prototypes, spec.accent, spec.noise_scale, cfg.frames_per_phoneme, rng)
    return Utterance(f"{spec.name}-{split}-{i:05d}", spec.name, split, frames, words)


def generate_corpus(cfg: CorpusConfig, seed: int) -> Corpus:
    """Pure function of ``(cfg, seed)``; each utterance has its own seed stream."""
    cfg.validate()
    prototypes = _rng(seed, 0).standard_normal((len(SYMBOLS), cfg.feature_dim))
    specs: list[LanguageSpec] = []
    taken: set[str] = set()
    for idx, lang in enumerate(cfg.languages):
        spec = build_language(cfg, lang, idx, seed, taken)
        taken.update(spec.lexicon)
        specs.append(spec)
    lexicon_union = set().union(*(s.lexicon for s in specs))
    languages = {}
    for idx, spec in enumerate(specs):
        spec.entity_words = [w for w in spec.entity_words if w not in lexicon_union]
        n_dev = max(cfg.min_dev, int(round(spec.budget * cfg.dev_fraction)))
        sizes = {"train": spec.budget, "dev": n_dev, "test": cfg.test_utts}
        parts = {split: [_make_utterance(spec, cfg, prototypes, seed, idx, split, i) for i in range(n)]
                 for split, n in sizes.items()}
        sel = select_oov_entities([u.words for u in parts["train"]], [u.words for u in parts["test"]],
                                  cfg.n_entities, seed=seed + idx)
        languages[spec.name] = LanguageCorpus(spec, parts["train"], parts["dev"], parts["test"], sel.words)
    return Corpus(cfg, prototypes, languages)


# ----------------------------------------------------------------------------
# boost words, catalogs, OOV entities
# ----------------------------------------------------------------------------

def pick_boost_word(transcript: Sequence[str], frequencies: dict[str, int]) -> str:
    """Lowest-frequency word of the transcript; earliest position wins ties."""
    if not transcript:
        raise CorpusError("empty transcript")
    best = transcript[0]
    for w in transcript[1:]:
        if frequencies.get(w, 0) < frequencies.get(best, 0):
            best = w
    return best


@dataclass
class BoostSubset:
    samples: list[Utterance]
    pool: dict[str, list[str]]

    def __len__(self) -> int:
        return len(self.samples)


def build_boost_subset(utterances: Sequence[Utterance], frequencies: dict[str, dict[str, int]]) -> BoostSubset:
    """Annotate each utterance with its boost word and collect per-language rare-word pools.

    ``frequencies`` maps language to its training word counts.  The returned
    utterances are shallow copies carrying ``boost_word``.
    """
    samples, pool = [], {}
    for u in utterances:
        w = pick_boost_word(u.words, frequencies[u.lang])
        samples.append(Utterance(u.id, u.lang, u.split, u.frames, u.words, u.tokens, w))
        lang_pool = pool.setdefault(u.lang, [])
        if w not in lang_pool:
            lang_pool.append(w)
    for words in pool.values():
        words.sort()
    return BoostSubset(samples, pool)


def sample_catalog(pool: Sequence[str], boost_word: str, k: int, seed) -> Catalog:
    """K-1 distractors from ``pool`` without replacement plus ``boost_word`` at a random slot."""
    if k < 1:
        raise CorpusError("catalog size must be at least 1")
    others = sorted(set(pool) - {boost_word})
    if len(others) < k - 1:
        raise CorpusError(f"rare-word pool of {len(others) + 1} words is too small for K={k}")
    rng = np.random.default_rng(seed)
    chosen = [others[i] for i in rng.choice(len(others), size=k - 1, replace=False)] if k > 1 else []
    pos = int(rng.integers(k))
    words = chosen[:pos] + [boost_word] + chosen[pos:]
    return Catalog([encode_word(w) for w in words], pos, words)


def catalog_from_words(words: Sequence[str]) -> Catalog:
    return Catalog([encode_word(w) for w in words], None, list(words))


class OovSelection(NamedTuple):
    words: list[str]
    short: bool


def select_oov_entities(train_transcripts: Iterable[Sequence[str]], test_transcripts: Iterable[Sequence[str]],
                        n: int, seed: int = 0) -> OovSelection:
    """Uniformly sample ``n`` distinct test words never seen in training.

    ``short`` is set (and a warning issued) when fewer than ``n`` exist.
    """
    if n < 1:
        raise CorpusError("n must be at least 1")
    seen = {w for t in train_transcripts for w in t}
    candidates = sorted({w for t in test_transcripts for w in t} - seen)
    if not candidates:
        raise CorpusError("no test word is out of vocabulary")
    if len(candidates) <= n:
        if len(candidates) < n:
            warnings.warn(f"only {len(candidates)} OOV words available, wanted {n}", stacklevel=2)
        return OovSelection(candidates, len(candidates) < n)
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(candidates), size=n, replace=False)
    return OovSelection(sorted(candidates[i] for i in picked), False)


# ----------------------------------------------------------------------------
# on-disk layout: JSONL manifest + float32 frames file + entity list
# ----------------------------------------------------------------------------

def write_frames(path: Path, blocks: Sequence[np.ndarray], dim: int) -> list[int]:
    """Write stacked frames; returns the starting row of each block."""
    offsets, total = [], 0
    for b in blocks:
        offsets.append(total)
        total += b.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", total, dim))
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return offsets


def read_frames(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    total, dim = struct.unpack("<ii", raw[:8])
    data = np.frombuffer(raw, dtype="<f4", offset=8)
    if data.size != total * dim:
        raise CorpusError(f"{path}: header says {total}x{dim} frames, payload has {data.size} values")
    return data.reshape(total, dim).astype(np.float64)


def write_corpus(corpus: Corpus, out_dir: Path, config_hash: str = "") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, lc in corpus.languages.items():
        utts = lc.train + lc.dev + lc.test
        frames_file = f"{name}.frames"
        offsets = write_frames(out_dir / frames_file, [u.frames for u in utts], corpus.config.feature_dim)
        freqs = lc.word_frequencies()
        with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for u, off in zip(utts, offsets):
                rec = {"id": u.id, "lang": u.lang, "split": u.split, "transcript": " ".join(u.words)}
                if u.split == "train":
                    rec["boost_word"] = pick_boost_word(u.words, freqs)
                rec.update({"frames_file": frames_file, "frame_offset": off, "num_frames": u.num_frames,
                            "config_hash": config_hash})
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out_dir / f"{name}.entities.txt").write_text("".join(w + "\n" for w in lc.entities), encoding="utf-8")
        written[name] = out_dir / f"{name}.jsonl"
    fp = corpus_fingerprint(out_dir, sorted(corpus.languages))
    (out_dir / "corpus.fingerprint").write_text(json.dumps({"sha256": fp, "config_hash": config_hash}) + "\n")
    return written


def corpus_fingerprint(out_dir: Path, languages: Sequence[str]) -> str:
    h = hashlib.sha256()
    for name in languages:
        for suffix in (".jsonl", ".frames", ".entities.txt"):
            h.update((Path(out_dir) / f"{name}{suffix}").read_bytes())
    return h.hexdigest()


def read_manifest(path: Path) -> list[Utterance]:
    path = Path(path)
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    cache: dict[str, np.ndarray] = {}
    utts = []
    for r in records:
        if r["frames_file"] not in cache:
            cache[r["frames_file"]] = read_frames(path.parent / r["frames_file"])
        block = cache[r["frames_file"]][r["frame_offset"]: r["frame_offset"] + r["num_frames"]]
        utts.append(Utterance(r["id"], r["lang"], r["split"], block.copy(), r["transcript"].split(),
                              boost_word=r.get("boost_word")))
    return utts


def read_entities(path: Path) -> list[str]:
    return [w for w in Path(path).read_text(encoding="utf-8").split("\n") if w]


def load_corpus_dir(out_dir: Path, cfg: CorpusConfig) -> Corpus:
    out_dir = Path(out_dir)
    languages = {}
    for lang in cfg.languages:
        utts = read_manifest(out_dir / f"{lang.name}.jsonl")
        by_split = {s: [u for u in utts if u.split == s] for s in SPLITS}
        entities = read_entities(out_dir / f"{lang.name}.entities.txt")
        spec = LanguageSpec(lang.name, sorted({w for u in by_split["train"] for w in u.words}),
                            np.zeros(0), np.zeros(cfg.feature_dim), cfg.noise_scale, lang.budget, [])
        languages[lang.name] = LanguageCorpus(spec, by_split["train"], by_split["dev"], by_split["test"], entities)
    return Corpus(cfg, np.zeros((len(SYMBOLS), cfg.feature_dim)), languages)


def config_to_dict(cfg: CorpusConfig) -> dict:
    d = asdict(cfg)
    d["languages"] = [asdict(lang) for lang in cfg.languages]
    return d
