"""Command-line interface.

Subcommands: gen, train-teacher, annotate, train-student, eval, bench,
gradcheck. Every option can come from a flat `key = value` config file
(`--config`), with explicit CLI flags taking precedence; unknown config keys
are rejected. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import dataclass, replace

from . import corpus as corpus_mod
from .corpus import (
    SynthSpec,
    Vocabulary,
    generate_synthetic,
    load_squad_json,
    truncate_for_training,
    write_squad_json,
)
from .distill import (
    DistillConfig,
    annotate_example,
    read_annotations,
    run_gradient_suite,
    write_annotations,
)
from .errors import ConfigError, DataError, NumericsError, SpanDistillError
from .evalspan import evaluate
from .reader import ReaderConfig, ReaderParams
from .training import (
    RunManifest,
    TrainConfig,
    baseline_config,
    bench,
    predict_answers,
    predict_answers_ensemble,
    train_model,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass(frozen=True)
class Opt:
    name: str
    kind: str  # int | float | optfloat | str | bool | path
    default: object
    help: str = ""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _convert(opt: Opt, raw: str):
    try:
        if opt.kind == "int":
            return int(raw)
        if opt.kind == "float":
            return float(raw)
        if opt.kind == "optfloat":
            return None if raw.strip().lower() in ("none", "") else float(raw)
        if opt.kind == "bool":
            return _parse_bool(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"option {opt.name}: cannot parse {raw!r} as {opt.kind}") from e


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key = value lines; # starts a comment."""
    values: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
        key, value = text.split("=", 1)
        values[key.strip()] = value.strip()
    return values


COMMON_OPTS = [
    Opt("seed", "int", 0, "base random seed"),
    Opt("out_dir", "path", ".", "directory for outputs"),
]

MODEL_OPTS = [
    Opt("dim", "int", 32, "embedding size"),
    Opt("hidden", "int", 32, "hidden size"),
    Opt("window", "int", 2, "context half-width per encoder layer"),
]

TRAIN_OPTS = [
    Opt("epochs", "int", 30, "training epochs"),
    Opt("batch_size", "int", 32, "batch size"),
    Opt("learning_rate", "float", 1e-3, "learning rate"),
    Opt("clip_norm", "float", 5.0, "global gradient norm clip"),
    Opt("vocab_cap", "int", 5000, "vocabulary size cap"),
    Opt("truncate_cap", "int", 400, "passage token cap for training"),
    Opt("max_span_len", "int", 15, "decoding span length cap"),
]

DISTILL_OPTS = [
    Opt("tau", "float", 2.0, "distillation temperature (tuned on 1/2/3/5)"),
    Opt("lam", "optfloat", None, "KD weight; default tau^2"),
    Opt("gamma", "float", 0.3, "answer-margin weight"),
    Opt("delta", "float", 0.1, "attention-match weight"),
    Opt("top_k", "int", 4, "teacher candidate list size"),
    Opt("margin", "float", 1.0, "ranking margin"),
]

SCHEMAS: dict[str, list[Opt]] = {
    "gen": COMMON_OPTS + [
        Opt("num_passages", "int", 100, "passages to generate"),
        Opt("entities_per_passage", "int", 2, "entities per passage"),
        Opt("attribute_types", "str", "age,color,city,pet,job", "comma-separated attribute kinds"),
        Opt("distractor_rate", "float", 1.0, "probability a passage shares one attribute"),
        Opt("adversarial", "bool", False, "append a distractor sentence per example"),
        Opt("out", "path", "", "output corpus path (default <out_dir>/corpus.json)"),
    ],
    "train-teacher": COMMON_OPTS + MODEL_OPTS + TRAIN_OPTS + [
        Opt("train", "path", "", "training corpus (SQuAD JSON)"),
        Opt("dev", "path", "", "dev corpus for model selection (default: train)"),
        Opt("members", "int", 3, "ensemble size"),
    ],
    "annotate": COMMON_OPTS + [
        Opt("corpus", "path", "", "corpus to annotate (SQuAD JSON)"),
        Opt("extra", "path", "", "optional augmented corpus (gold answers optional)"),
        Opt("checkpoints", "path", "", "comma-separated member checkpoints, or a directory of teacher_*.ckpt"),
        Opt("vocab", "path", "", "vocabulary JSON from train-teacher"),
        Opt("truncate_cap", "int", 400, "passage token cap"),
        Opt("max_span_len", "int", 15, "decoding span length cap"),
        Opt("out", "path", "", "output annotations path (default <out_dir>/annotations.jsonl)"),
    ] + DISTILL_OPTS,
    "train-student": COMMON_OPTS + MODEL_OPTS + TRAIN_OPTS + DISTILL_OPTS + [
        Opt("train", "path", "", "training corpus (SQuAD JSON)"),
        Opt("dev", "path", "", "dev corpus for model selection (default: train)"),
        Opt("extra", "path", "", "optional augmented corpus"),
        Opt("extra_soft_only", "bool", False, "ignore gold answers in the extra corpus"),
        Opt("annotations", "path", "", "distilled dataset from annotate"),
        Opt("vocab", "path", "", "vocabulary JSON from train-teacher"),
        Opt("use_kd", "bool", True, "soft-target distillation term"),
        Opt("use_ans", "bool", True, "answer-margin term"),
        Opt("use_att", "bool", True, "attention-match term"),
        Opt("stagewise", "bool", False, "attention-only warm-up phase first"),
        Opt("warmup_epochs", "int", 5, "stagewise warm-up epochs"),
    ],
    "eval": COMMON_OPTS + [
        Opt("checkpoint", "path", "", "checkpoint to evaluate; comma-separated list averages an ensemble"),
        Opt("corpus", "path", "", "eval corpus (SQuAD JSON)"),
        Opt("vocab", "path", "", "vocabulary JSON"),
        Opt("max_span_len", "int", 15, "decoding span length cap"),
        Opt("predictions_out", "path", "", "predictions path (default <out_dir>/predictions.json)"),
        Opt("report_out", "path", "", "report path (default <out_dir>/eval_report.json)"),
    ],
    "bench": COMMON_OPTS + [
        Opt("student", "path", "", "student checkpoint"),
        Opt("checkpoints", "path", "", "ensemble checkpoints (comma list or directory)"),
        Opt("corpus", "path", "", "corpus to time inference on"),
        Opt("vocab", "path", "", "vocabulary JSON"),
        Opt("repetitions", "int", 5, "timed repetitions (median reported)"),
        Opt("max_span_len", "int", 15, "decoding span length cap"),
    ],
    "gradcheck": COMMON_OPTS + [
        Opt("eps", "float", 1e-5, "finite-difference step"),
        Opt("tol", "float", 1e-4, "relative error tolerance"),
        Opt("max_per_param", "int", 20, "coordinates sampled per parameter"),
    ],
}


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit CLI flags."""
    schema = {o.name: o for o in SCHEMAS[command]}
    values = {name: opt.default for name, opt in schema.items()}
    if args.config:
        file_values = parse_config_file(args.config)
        unknown = sorted(set(file_values) - set(schema))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, raw in file_values.items():
            values[key] = _convert(schema[key], raw)
    for name in schema:
        cli_value = getattr(args, name.replace("-", "_"), None)
        if cli_value is not None:
            values[name] = _convert(schema[name], cli_value)
    return values


def _require(values: dict, *names: str) -> None:
    for n in names:
        if not values[n]:
            raise ConfigError(f"missing required option: {n}")


def _out_path(values: dict, key: str, default_name: str) -> str:
    if values.get(key):
        return values[key]
    os.makedirs(values["out_dir"], exist_ok=True)
    return os.path.join(values["out_dir"], default_name)


def _load_checkpoints(spec: str) -> list[ReaderParams]:
    if os.path.isdir(spec):
        paths = sorted(glob.glob(os.path.join(spec, "teacher_*.ckpt")))
        if not paths:
            raise DataError(f"no teacher_*.ckpt files in {spec}")
    else:
        paths = [p.strip() for p in spec.split(",") if p.strip()]
    return [ReaderParams.load(p) for p in paths]


def _check_vocab(params: ReaderParams, vocab: Vocabulary, path: str) -> None:
    if params.vocab_hash and params.vocab_hash != vocab.hash():
        raise DataError(
            f"checkpoint was trained with vocabulary {params.vocab_hash} but "
            f"{path} hashes to {vocab.hash()}"
        )


def _train_config(values: dict, distilled: bool) -> TrainConfig:
    distill = DistillConfig(
        tau=values.get("tau", 2.0),
        lam=values.get("lam"),
        gamma=values.get("gamma", 0.3),
        delta=values.get("delta", 0.1),
        top_k=values.get("top_k", 4),
        margin=values.get("margin", 1.0),
        max_span_len=values["max_span_len"],
        use_kd=values.get("use_kd", True),
        use_ans=values.get("use_ans", True),
        use_att=values.get("use_att", True),
        stagewise=values.get("stagewise", False),
    )
    config = TrainConfig(
        seed=values["seed"],
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        learning_rate=values["learning_rate"],
        clip_norm=values["clip_norm"],
        warmup_epochs=values.get("warmup_epochs", 5),
        truncate_cap=values["truncate_cap"],
        reader=ReaderConfig(dim=values["dim"], hidden=values["hidden"],
                            window=values["window"], seed=values["seed"]),
        distill=distill,
    )
    return config if distilled else baseline_config(config)


# -- subcommands -------------------------------------------------------------


def cmd_gen(values: dict) -> int:
    spec = SynthSpec(
        seed=values["seed"],
        num_passages=values["num_passages"],
        entities_per_passage=values["entities_per_passage"],
        attribute_types=tuple(t.strip() for t in values["attribute_types"].split(",") if t.strip()),
        distractor_rate=values["distractor_rate"],
        adversarial=values["adversarial"],
    )
    examples = generate_synthetic(spec)
    out = _out_path(values, "out", "corpus.json")
    write_squad_json(examples, out, title="synthetic")
    print(f"wrote {len(examples)} examples to {out} (sha256 {corpus_mod.corpus_hash(out)})")
    return EXIT_OK


def cmd_train_teacher(values: dict) -> int:
    _require(values, "train")
    train_raw = load_squad_json(values["train"])
    dev = load_squad_json(values["dev"]) if values["dev"] else train_raw
    train, dropped = truncate_for_training(train_raw, values["truncate_cap"])
    if dropped:
        print(f"dropped {dropped} training examples with gold spans beyond the cap")
    vocab = Vocabulary.from_examples(train, cap=values["vocab_cap"])
    os.makedirs(values["out_dir"], exist_ok=True)
    vocab_path = os.path.join(values["out_dir"], "vocab.json")
    vocab.save(vocab_path)

    checkpoints = []
    history = []
    for i in range(values["members"]):
        cfg = _train_config({**values, "seed": values["seed"] + i}, distilled=False)
        result = train_model(cfg, train, dev, vocab)
        result.params.vocab_hash = vocab.hash()
        path = os.path.join(values["out_dir"], f"teacher_{i}.ckpt")
        result.params.save(path)
        checkpoints.append(path)
        history.append([r.as_dict() for r in result.history])
        print(f"member {i}: best dev F1 {result.best_f1:.2f} at epoch {result.best_epoch} -> {path}")

    manifest = RunManifest(
        command="train-teacher",
        config={k: v for k, v in values.items() if k != "out"},
        corpus_hashes={"train": corpus_mod.corpus_hash(values["train"]),
                       **({"dev": corpus_mod.corpus_hash(values["dev"])} if values["dev"] else {})},
        checkpoint_paths=checkpoints + [vocab_path],
        metric_history=history,
    )
    manifest.write(os.path.join(values["out_dir"], "teacher_manifest.json"))
    return EXIT_OK


def cmd_annotate(values: dict) -> int:
    _require(values, "corpus", "checkpoints", "vocab")
    vocab = Vocabulary.load(values["vocab"])
    members = _load_checkpoints(values["checkpoints"])
    for mp in members:
        _check_vocab(mp, vocab, values["vocab"])
    examples = load_squad_json(values["corpus"])
    if values["extra"]:
        examples = examples + load_squad_json(values["extra"])
    examples, dropped = truncate_for_training(examples, values["truncate_cap"])
    if dropped:
        print(f"dropped {dropped} examples with gold spans beyond the cap")
    cfg = DistillConfig(
        tau=values["tau"], lam=values["lam"], gamma=values["gamma"],
        delta=values["delta"], top_k=values["top_k"], margin=values["margin"],
        max_span_len=values["max_span_len"], ensemble_size=len(members),
    )
    annotations = [annotate_example(members, ex, vocab, cfg) for ex in examples]
    out = _out_path(values, "out", "annotations.jsonl")
    write_annotations(annotations, out)
    mined = sum(1 for a in annotations if a.confusing_span is not None)
    print(f"wrote {len(annotations)} records to {out} ({mined} with a confusing span, tau={cfg.tau:g})")
    return EXIT_OK


def cmd_train_student(values: dict) -> int:
    _require(values, "train", "annotations", "vocab")
    vocab = Vocabulary.load(values["vocab"])
    train_raw = load_squad_json(values["train"])
    soft_only_ids: set[str] = set()
    if values["extra"]:
        extra = load_squad_json(values["extra"])
        if values["extra_soft_only"]:
            soft_only_ids.update(ex.id for ex in extra)
        train_raw = train_raw + extra
    dev = load_squad_json(values["dev"]) if values["dev"] else train_raw
    train, dropped = truncate_for_training(train_raw, values["truncate_cap"])
    if dropped:
        print(f"dropped {dropped} training examples with gold spans beyond the cap")
    annotations = read_annotations(values["annotations"])
    config = _train_config(values, distilled=True)
    result = train_model(config, train, dev, vocab, annotations=annotations,
                         soft_only_ids=soft_only_ids)
    result.params.vocab_hash = vocab.hash()
    os.makedirs(values["out_dir"], exist_ok=True)
    path = os.path.join(values["out_dir"], "student.ckpt")
    result.params.save(path)
    print(f"student: best dev F1 {result.best_f1:.2f} at epoch {result.best_epoch} -> {path}")

    manifest = RunManifest(
        command="train-student",
        config={k: v for k, v in values.items()},
        corpus_hashes={"train": corpus_mod.corpus_hash(values["train"]),
                       **({"dev": corpus_mod.corpus_hash(values["dev"])} if values["dev"] else {}),
                       **({"extra": corpus_mod.corpus_hash(values["extra"])} if values["extra"] else {})},
        checkpoint_paths=[path],
        metric_history=[r.as_dict() for r in result.history],
        timings={"total_seconds": result.total_seconds},
    )
    manifest.write(os.path.join(values["out_dir"], "student_manifest.json"))
    return EXIT_OK


def cmd_eval(values: dict) -> int:
    _require(values, "checkpoint", "corpus", "vocab")
    vocab = Vocabulary.load(values["vocab"])
    members = _load_checkpoints(values["checkpoint"])
    for mp in members:
        _check_vocab(mp, vocab, values["vocab"])
    examples = load_squad_json(values["corpus"])
    if len(members) == 1:
        preds = predict_answers(members[0], examples, vocab, values["max_span_len"])
    else:
        preds = predict_answers_ensemble(members, examples, vocab, values["max_span_len"])
    report = evaluate(preds, examples)

    pred_path = _out_path(values, "predictions_out", "predictions.json")
    with open(pred_path, "w", encoding="utf-8") as fh:
        json.dump(preds, fh, ensure_ascii=False, indent=1)
        fh.write("\n")
    report_path = _out_path(values, "report_out", "eval_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2)
        fh.write("\n")

    print(f"EM {report.em:.2f}  F1 {report.f1:.2f}  ({report.total} examples, "
          f"{report.adversarial_count} adversarial, {report.missing} missing predictions)")
    for qtype, bucket in sorted(report.per_type.items()):
        print(f"  {qtype:<8} EM {bucket['em']:.2f}  F1 {bucket['f1']:.2f}  n={bucket['count']}")
    print(f"predictions -> {pred_path}")
    print(f"report -> {report_path}")
    return EXIT_OK


def cmd_bench(values: dict) -> int:
    _require(values, "student", "checkpoints", "corpus", "vocab")
    vocab = Vocabulary.load(values["vocab"])
    student = ReaderParams.load(values["student"])
    members = _load_checkpoints(values["checkpoints"])
    for mp in [student] + members:
        _check_vocab(mp, vocab, values["vocab"])
    examples = load_squad_json(values["corpus"])
    report = bench(student, members, examples, vocab,
                   repetitions=values["repetitions"], max_span_len=values["max_span_len"])
    for line in report.lines():
        print(line)
    out = _out_path(values, "out", "bench.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2)
        fh.write("\n")
    print(f"report -> {out}")
    return EXIT_OK


def cmd_gradcheck(values: dict) -> int:
    report = run_gradient_suite(seed=values["seed"], eps=values["eps"],
                                tol=values["tol"], max_per_param=values["max_per_param"])
    for line in report.lines():
        print(line)
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "train-teacher": cmd_train_teacher,
    "annotate": cmd_annotate,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spandistill",
        description="Train, distill, and evaluate extractive span readers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key = value config file")
        for opt in schema:
            p.add_argument(f"--{opt.name.replace('_', '-')}",
                           dest=opt.name, default=None, metavar=opt.kind.upper(),
                           help=f"{opt.help} (default: {opt.default!r})")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve_options(args.command, args)
        return HANDLERS[args.command](values)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        # missing or unreadable input files land here from any subcommand
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SpanDistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
