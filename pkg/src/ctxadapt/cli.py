"""``ctxadapt`` command line: datagen, train, decode, eval, report, verify, lineup.

Every command reads one YAML run configuration (optional; built-in defaults
otherwise), applies flag overrides, and writes under the run's output
directory::

    <out>/corpus/        manifests, frame files, entity lists, fingerprint
    <out>/checkpoints/   <model>[@<lang>].ckpt and matching .log.jsonl
    <out>/decode/        hypothesis JSONL per checkpoint and condition
    <out>/reports/       report.csv (appended by eval) and report.txt

Failures print a single ``ctxadapt: error[<kind>]: <message>`` line on
stderr.  Exit codes: 0 ok, 1 validation, 2 runtime, 3 verification.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import selfcheck
from .evalkit import (DETACHED, WITH_ADAPTERS, ReportRow, decode_suite, render_text, rows_from_csv, rows_to_csv,
                      score_results, write_hypotheses)
from .nn_blocks import EncoderConfig
from .synthlang import (VOCAB_SIZE, Corpus, CorpusConfig, LanguageConfig, config_to_dict, generate_corpus,
                        load_corpus_dir, read_entities, read_manifest, write_corpus)
from .trainer import (LINEUP, LineupConfig, ModelCheckpoint, TrainConfig, lineage, model_id_for, stage_for,
                      train_model)

log = logging.getLogger("ctxadapt")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
CONDITION_FLAGS = {"with": WITH_ADAPTERS, "without": DETACHED}
DETACHED_SUFFIX = ".inf"


class ValidationError(ValueError):
    exit_code = EXIT_VALIDATION
    kind = "validation"


class RunFailure(RuntimeError):
    exit_code = EXIT_RUNTIME
    kind = "runtime"


class VerificationFailure(RuntimeError):
    exit_code = EXIT_VERIFY
    kind = "verify"


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

_TRAIN_KEYS = ("lr", "warmup", "batch_size", "k_min", "k_max", "clip_norm", "dev_cap")
_MODEL_KEYS = ("hidden", "blocks", "heads", "ff_dim")
_LINEUP_KEYS = ("alpha", "mono_epochs", "pooled_epochs", "finetune_epochs", "adapter_epochs",
                "pooled_adapter_epochs", "joint_epochs")


def default_tree() -> dict[str, Any]:
    corpus = config_to_dict(CorpusConfig())
    for key, value in corpus.items():
        if isinstance(value, tuple):
            corpus[key] = list(value)
    enc, tcfg, lcfg = EncoderConfig(), TrainConfig(), LineupConfig()
    return {
        "seed": 0,
        "out": "runs/default",
        "lang": None,
        "corpus": corpus,
        "model": {**{k: getattr(enc, k) for k in _MODEL_KEYS}, "embed_dim": lcfg.embed_dim},
        "train": {k: getattr(tcfg, k) for k in _TRAIN_KEYS},
        "lineup": {**{k: getattr(lcfg, k) for k in _LINEUP_KEYS}, "models": list(LINEUP)},
    }


_LANGUAGE_DEFAULT = {"name": "", "budget": 0, "core_letters": LanguageConfig("x", 1).core_letters}


def _key_lines(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, for error messages."""
    lines: dict[str, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, f"{path}[{i}]")

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


def _fail(path: str, msg: str, lines: dict[str, int]) -> ValidationError:
    where = f" (line {lines[path]})" if path in lines else ""
    return ValidationError(f"config key '{path}'{where}: {msg}")


def _check_value(value, default, path, lines):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise _fail(path, "expected a boolean", lines)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise _fail(path, "expected an integer", lines)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _fail(path, "expected a number", lines)
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise _fail(path, "expected a string", lines)
    return value


def _merge(user, default, path, lines):
    if isinstance(default, dict):
        if not isinstance(user, dict):
            raise _fail(path, "expected a mapping", lines)
        out = copy.deepcopy(default)
        for key, value in user.items():
            sub = f"{path}.{key}" if path else str(key)
            if key not in default:
                raise _fail(sub, "unknown key", lines)
            out[key] = _merge(value, default[key], sub, lines)
        return out
    if path == "lang":
        if user is not None and not isinstance(user, str):
            raise _fail(path, "expected a language name or null", lines)
        return user
    if path == "corpus.languages":
        if not isinstance(user, list) or not user:
            raise _fail(path, "expected a non-empty list of languages", lines)
        langs = [_merge(item, _LANGUAGE_DEFAULT, f"{path}[{i}]", lines) for i, item in enumerate(user)]
        for i, item in enumerate(user):
            for req in ("name", "budget"):
                if req not in item:
                    raise _fail(f"{path}[{i}]", f"missing required key '{req}'", lines)
        return langs
    if path == "lineup.models":
        if not isinstance(user, list) or any(m not in LINEUP for m in user):
            raise _fail(path, f"expected a list drawn from {sorted(LINEUP)}", lines)
        return list(user)
    if isinstance(default, list):
        if not isinstance(user, list) or len(user) != len(default):
            raise _fail(path, f"expected a list of {len(default)} values", lines)
        return [_check_value(u, d, f"{path}[{i}]", lines) for i, (u, d) in enumerate(zip(user, default))]
    return _check_value(user, default, path, lines)


@dataclass
class RunConfig:
    tree: dict[str, Any] = field(default_factory=default_tree)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        try:
            user = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ValidationError(f"config is not valid YAML: {' '.join(str(exc).split())}") from None
        cfg = cls(_merge(user or {}, default_tree(), "", _key_lines(text)))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_text(text)

    def override(self, **flags) -> "RunConfig":
        tree = copy.deepcopy(self.tree)
        for key, value in flags.items():
            if value is None:
                continue
            if key in ("k_min", "k_max"):
                tree["train"][key] = value
            elif key == "alpha":
                tree["lineup"]["alpha"] = float(value)
            else:
                tree[key] = value
        cfg = RunConfig(tree)
        cfg.check()
        return cfg

    def check(self) -> None:
        try:
            self.corpus_config().validate()
            self.lineup_config().train.validate()
        except ValueError as exc:
            raise ValidationError(f"config: {exc}") from None
        if self.tree["lang"] is not None and self.tree["lang"] not in self.languages:
            raise ValidationError(f"config key 'lang': unknown language {self.tree['lang']!r}")

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def out(self) -> Path:
        return Path(self.tree["out"])

    @property
    def languages(self) -> list[str]:
        return [lang["name"] for lang in self.tree["corpus"]["languages"]]

    def target_lang(self, flag: str | None = None) -> str:
        lang = flag or self.tree["lang"] or self.corpus_config().low_resource
        if lang not in self.languages:
            raise ValidationError(f"unknown language {lang!r}; configured: {', '.join(self.languages)}")
        return lang

    def corpus_config(self) -> CorpusConfig:
        c = dict(self.tree["corpus"])
        c["languages"] = tuple(LanguageConfig(**lang) for lang in c["languages"])
        for key, value in c.items():
            if isinstance(value, list):
                c[key] = tuple(value)
        return CorpusConfig(**c)

    def lineup_config(self) -> LineupConfig:
        m, t, lu = self.tree["model"], self.tree["train"], self.tree["lineup"]
        enc = EncoderConfig(input_dim=self.tree["corpus"]["feature_dim"], vocab_size=VOCAB_SIZE,
                            **{k: m[k] for k in _MODEL_KEYS})
        tcfg = TrainConfig(seed=self.seed, **{k: t[k] for k in _TRAIN_KEYS})
        return LineupConfig(encoder=enc, embed_dim=m["embed_dim"], train=tcfg, **{k: lu[k] for k in _LINEUP_KEYS})

    def config_hash(self) -> str:
        """Content hash of the resolved configuration; the output location is not content."""
        content = {k: v for k, v in self.tree.items() if k != "out"}
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ----------------------------------------------------------------------------
# paths
# ----------------------------------------------------------------------------

def corpus_dir(cfg: RunConfig) -> Path:
    return cfg.out / "corpus"


def is_pooled(model_id: str) -> bool:
    _, track, stage, _, _ = LINEUP[model_id]
    return stage_for(track, stage).data == "pooled"


def checkpoint_path(cfg: RunConfig, model_id: str, lang: str) -> Path:
    stem = model_id if is_pooled(model_id) else f"{model_id}@{lang}"
    return cfg.out / "checkpoints" / f"{stem}.ckpt"


def report_path(cfg: RunConfig) -> Path:
    return cfg.out / "reports" / "report.csv"


def load_corpus(cfg: RunConfig) -> Corpus:
    root = corpus_dir(cfg)
    if not (root / "corpus.fingerprint").exists():
        raise RunFailure(f"no corpus at {root}; run 'ctxadapt datagen' first")
    return load_corpus_dir(root, cfg.corpus_config())


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_datagen(cfg: RunConfig) -> dict[str, Path]:
    corpus = generate_corpus(cfg.corpus_config(), cfg.seed)
    written = write_corpus(corpus, corpus_dir(cfg), cfg.config_hash())
    fp = json.loads((corpus_dir(cfg) / "corpus.fingerprint").read_text())["sha256"]
    print(f"corpus {corpus_dir(cfg)} languages={len(written)} fingerprint={fp}")
    return written


def _save_checkpoint(cfg: RunConfig, ckpt: ModelCheckpoint, lang: str, records: list[dict]) -> Path:
    ckpt.provenance["run_config_hash"] = cfg.config_hash()
    path = checkpoint_path(cfg, ckpt.model_id, lang)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
    with open(path.with_suffix(".log.jsonl"), "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({**rec, "config_hash": cfg.config_hash()}, sort_keys=True) + "\n")
    return path


def cmd_train(cfg: RunConfig, track: str, stage: str, lang: str | None = None,
              alpha: float | None = None, corpus: Corpus | None = None) -> Path:
    alpha = alpha or 0.0
    try:
        model_id = model_id_for(track, stage, alpha)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    parent_id, _, _, uses_ce, _ = LINEUP[model_id]
    if alpha > 0 and not uses_ce and stage_for(track, stage).adapters:
        raise ValidationError(f"{model_id} has no CE-supervised variant; drop --alpha")
    lang = cfg.target_lang(lang)
    parent = None
    if parent_id is not None:
        ppath = checkpoint_path(cfg, parent_id, lang)
        if not ppath.exists():
            raise RunFailure(f"missing ancestor checkpoint {ppath} (train {parent_id} first)")
        parent = ModelCheckpoint.load(ppath)
    corpus = corpus or load_corpus(cfg)
    lcfg = cfg.lineup_config()
    if uses_ce:
        lcfg = replace(lcfg, alpha=alpha)
    records: list[dict] = []
    ckpt = train_model(model_id, corpus, lang, lcfg, parent, records)
    path = _save_checkpoint(cfg, ckpt, lang, records)
    print(f"checkpoint {model_id} {path}")
    return path


def _decode(cfg: RunConfig, checkpoint: Path, entities: Path | None, condition: str, lang: str | None):
    if condition not in CONDITION_FLAGS:
        raise ValidationError(f"--condition must be one of {sorted(CONDITION_FLAGS)}")
    try:
        ckpt = ModelCheckpoint.load(checkpoint)
    except OSError as exc:
        raise RunFailure(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    cond = CONDITION_FLAGS[condition]
    if cond == WITH_ADAPTERS and not ckpt.has_adapters:
        raise ValidationError(f"incompatible condition: {ckpt.model_id or checkpoint} has no adapters, "
                              "use --condition without")
    lang = cfg.target_lang(lang or ckpt.provenance.get("lang"))
    manifest = corpus_dir(cfg) / f"{lang}.jsonl"
    if not manifest.exists():
        raise RunFailure(f"missing test manifest {manifest}; run 'ctxadapt datagen' first")
    test = [u for u in read_manifest(manifest) if u.split == "test"]
    words = read_entities(entities) if entities is not None else None
    model = ckpt.to_model(cfg.lineup_config().encoder, cfg.lineup_config().embed_dim)
    results = decode_suite(model, test, words, cond)
    model_id = ckpt.model_id + (DETACHED_SUFFIX if cond == DETACHED and ckpt.has_adapters else "")
    return model_id, lang, results, words


def cmd_decode(cfg: RunConfig, checkpoint: Path, entities: Path | None, condition: str,
               lang: str | None = None) -> Path:
    model_id, lang, results, _ = _decode(cfg, checkpoint, entities, condition, lang)
    path = cfg.out / "decode" / f"{Path(checkpoint).stem}.{condition}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    write_hypotheses(path, results)
    print(f"hypotheses {model_id} {lang} {path}")
    return path


def append_rows(path: Path, rows: Sequence[ReportRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows)
    if path.exists() and path.stat().st_size:
        text = text.split("\n", 1)[1]
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(text)


def cmd_eval(cfg: RunConfig, checkpoint: Path, entities: Path | None, condition: str,
             lang: str | None = None) -> ReportRow:
    model_id, lang, results, words = _decode(cfg, checkpoint, entities, condition, lang)
    row = score_results(model_id, lang, results, words)
    row.config_hash = cfg.config_hash()
    append_rows(report_path(cfg), [row])
    rec = row.as_record()
    print(" ".join(f"{k}={rec[k] or '-'}" for k in ("model_id", "language", "condition", "wer", "f1")))
    return row


def cmd_report(cfg: RunConfig) -> str:
    path = report_path(cfg)
    if not path.exists():
        raise RunFailure(f"no report at {path}; run 'ctxadapt eval' or 'ctxadapt lineup' first")
    text = render_text(rows_from_csv(path.read_text(encoding="utf-8")))
    path.with_suffix(".txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return text


def cmd_verify() -> list[selfcheck.SuiteResult]:
    results = selfcheck.run_all()
    for r in results:
        print(r.line())
    grad = next(r for r in results if r.name == "gradients")
    print(f"max gradient-check error: {grad.max_error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"{len(failed)} suite(s) failed: {', '.join(failed)}")
    print(f"all {len(results)} suites passed")
    return results


@dataclass
class LineupResult:
    rows: list[ReportRow]
    checkpoints: dict[str, ModelCheckpoint]
    logs: list[dict]
    train_seconds: float
    total_seconds: float
    csv_text: str


def run_lineup(cfg: RunConfig, lang: str | None = None, write: bool = True) -> LineupResult:
    """Generate the corpus, train every configured model, and score each one on ``lang``'s test split."""
    t0 = time.perf_counter()
    lang = cfg.target_lang(lang)
    corpus = generate_corpus(cfg.corpus_config(), cfg.seed)
    if write:
        write_corpus(corpus, corpus_dir(cfg), cfg.config_hash())
    lcfg = cfg.lineup_config()
    wanted = cfg.tree["lineup"]["models"]
    needed = [m for m in LINEUP if any(m in lineage(w) for w in wanted)]
    ckpts: dict[str, ModelCheckpoint] = {}
    logs: list[dict] = []
    for mid in needed:
        records: list[dict] = []
        parent = ckpts.get(LINEUP[mid][0])
        log.info("training %s", mid)
        ckpts[mid] = train_model(mid, corpus, lang, lcfg, parent, records)
        ckpts[mid].provenance["run_config_hash"] = cfg.config_hash()
        logs.extend(records)
        if write:
            _save_checkpoint(cfg, ckpts[mid], lang, records)
    t_train = time.perf_counter() - t0

    lc = corpus.languages[lang]
    rows = []
    for mid in wanted:
        model = ckpts[mid].to_model(lcfg.encoder, lcfg.embed_dim)
        conds = [WITH_ADAPTERS] if ckpts[mid].has_adapters else [DETACHED]
        if mid == "ML-III.b":
            conds.append(DETACHED)
        for cond in conds:
            row_id = mid + (DETACHED_SUFFIX if cond == DETACHED and model.adapter is not None else "")
            results = decode_suite(model, lc.test, lc.entities, cond)
            row = score_results(row_id, lang, results, lc.entities)
            row.config_hash = cfg.config_hash()
            rows.append(row)
            if write:
                path = cfg.out / "decode" / f"{row_id}.jsonl"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.unlink(missing_ok=True)
                write_hypotheses(path, results)
    csv_text = rows_to_csv(rows)
    if write:
        report_path(cfg).parent.mkdir(parents=True, exist_ok=True)
        report_path(cfg).write_text(csv_text, encoding="utf-8")
        report_path(cfg).with_suffix(".txt").write_text(render_text(rows), encoding="utf-8")
    return LineupResult(rows, ckpts, logs, t_train, time.perf_counter() - t0, csv_text)


def cmd_lineup(cfg: RunConfig, lang: str | None = None) -> LineupResult:
    res = run_lineup(cfg, lang)
    print(render_text(res.rows), end="")
    print(f"report {report_path(cfg)} train_seconds={res.train_seconds:.1f} total_seconds={res.total_seconds:.1f}")
    return res


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors, not argparse's exit 2
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="overrides the config output directory")
    common.add_argument("--k-min", type=int, dest="k_min", help="smallest curriculum catalog size")
    common.add_argument("--k-max", type=int, dest="k_max", help="largest curriculum catalog size")
    common.add_argument("-v", "--verbose", action="store_true", help="log training progress")

    parser = _Parser(prog="ctxadapt", description="Contextual-adapter CTC experiments on a synthetic corpus.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("datagen", parents=[common], help="write the synthetic corpus and entity lists")

    p = sub.add_parser("train", parents=[common], help="train one stage of one track")
    p.add_argument("--track", required=True, choices=["mono", "a", "b"])
    p.add_argument("--stage", required=True, choices=["I", "II", "III"])
    p.add_argument("--lang", help="target language (ignored by pooled stages)")
    p.add_argument("--alpha", type=float, help="CE weight; > 0 trains the CE-supervised variant")

    for name, helptext in (("decode", "write greedy hypotheses"), ("eval", "decode, score, append to report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("checkpoint", type=Path)
        p.add_argument("--condition", required=True, choices=sorted(CONDITION_FLAGS))
        p.add_argument("--entities", type=Path, help="entity list; doubles as the catalog")
        p.add_argument("--lang", help="language whose test split is decoded")

    sub.add_parser("report", parents=[common], help="render the report table")
    sub.add_parser("verify", help="run the oracle suites")

    p = sub.add_parser("lineup", parents=[common], help="datagen, all models, and the full report")
    p.add_argument("--lang", help="low-resource target language")
    p.add_argument("--alpha", type=float, help="CE weight for the CE-supervised models")
    return parser


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "verify":
        cmd_verify()
        return
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(message)s", stream=sys.stderr)
    cfg = RunConfig.load(args.config)
    overrides = dict(seed=args.seed, out=args.out, k_min=args.k_min, k_max=args.k_max)
    if args.command == "lineup":
        overrides["alpha"] = args.alpha
    cfg = cfg.override(**overrides)
    if args.command == "datagen":
        cmd_datagen(cfg)
    elif args.command == "train":
        cmd_train(cfg, args.track, args.stage, args.lang, args.alpha)
    elif args.command == "decode":
        cmd_decode(cfg, args.checkpoint, args.entities, args.condition, args.lang)
    elif args.command == "eval":
        cmd_eval(cfg, args.checkpoint, args.entities, args.condition, args.lang)
    elif args.command == "report":
        cmd_report(cfg)
    elif args.command == "lineup":
        cmd_lineup(cfg, args.lang)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        dispatch(args)
    except (ValidationError, RunFailure, VerificationFailure) as exc:
        return _report_error(exc.kind, exc, exc.exit_code)
    except ValueError as exc:
        return _report_error("validation", exc, EXIT_VALIDATION)
    except Exception as exc:
        return _report_error("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    return EXIT_OK


def _report_error(kind: str, exc, code: int) -> int:
    print(f"ctxadapt: error[{kind}]: {' '.join(str(exc).split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
