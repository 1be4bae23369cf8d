"""Training loops, prediction, benchmarking, and run manifests.

One loop serves the CE baseline, every ensemble member, and the distilled
student: the objective is assembled per example by loss_joint, and an all-off
switch set builds exactly the baseline CE graph, so the reduction check can
compare per-epoch losses bit for bit. Runs are deterministic given the seed:
parameter init, shuffling, and batch order all derive from it and execution
is single-threaded.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .distill import DistillConfig, TeacherAnnotation, ensemble_dists, loss_joint
from .errors import ConfigError, DataError, NumericsError
from .evalspan import EvalReport, evaluate, topk_spans
from .reader import ReaderConfig, ReaderParams, bind_params, forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    warmup_epochs: int = 5
    truncate_cap: int = 400
    reader: ReaderConfig = field(default_factory=ReaderConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs/batch_size must be positive, got {self.epochs}/{self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.warmup_epochs < 0 or self.truncate_cap < 1:
            raise ConfigError("warmup_epochs must be >= 0 and truncate_cap >= 1")
        self.reader.validate()
        self.distill.validate()


class Adam:
    """Adaptive-moment update with bias correction, applied in place."""

    def __init__(self, arrays: dict[str, np.ndarray], lr: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.arrays = arrays
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            self.arrays[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass
class _Item:
    example: object
    q_idx: np.ndarray
    p_idx: np.ndarray
    gold: tuple[int, int] | None
    annotation: TeacherAnnotation | None


def _prepare_items(examples, vocab, annotations, soft_only_ids, config: TrainConfig) -> list[_Item]:
    dc = config.distill
    items = []
    for ex in examples:
        gold = ex.gold_spans[0] if ex.gold_spans else None
        if soft_only_ids and ex.id in soft_only_ids:
            gold = None
        ann = annotations.get(ex.id) if annotations else None
        if ann is None and (dc.use_kd or dc.use_att or dc.use_ans or dc.stagewise):
            raise DataError(f"example {ex.id} has no distilled record but distillation is enabled")
        if gold is None and not (dc.use_kd or dc.use_att or dc.stagewise):
            continue
        items.append(_Item(ex, vocab.encode(ex.question_tokens), vocab.encode(ex.passage_tokens), gold, ann))
    if not items:
        raise DataError("no trainable examples after preparation")
    return items


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    dev_em: float
    dev_f1: float
    seconds: float

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch, "phase": self.phase, "train_loss": self.train_loss,
            "dev_em": self.dev_em, "dev_f1": self.dev_f1, "seconds": self.seconds,
        }


@dataclass
class TrainResult:
    params: ReaderParams
    history: list[EpochRecord]
    best_epoch: int
    best_f1: float
    total_seconds: float


def train_model(config: TrainConfig, train_examples, dev_examples, vocab,
                annotations: dict[str, TeacherAnnotation] | None = None,
                soft_only_ids: set | None = None) -> TrainResult:
    """Train one reader. With annotations and enabled switches this is the
    distilled student; with all switches off (or no annotations) it is the
    plain CE trainer used for the baseline and every ensemble member.

    Model selection keeps the epoch with the best dev F1."""
    config.validate()
    dc = config.distill
    if annotations:
        taus = {a.tau for a in annotations.values()}
        if (dc.use_kd or dc.use_att or dc.use_ans or dc.stagewise) and taus != {dc.tau}:
            raise ConfigError(
                f"distilled records computed at tau={sorted(taus)} but config expects tau={dc.tau}"
            )

    params = ReaderParams(len(vocab), replace(config.reader, seed=config.seed),
                          vocab_hash=vocab.hash())
    items = _prepare_items(train_examples, vocab, annotations, soft_only_ids or set(), config)
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(params.arrays, config.learning_rate)

    history: list[EpochRecord] = []
    best: tuple[float, int, ReaderParams] | None = None
    run_start = time.perf_counter()
    for epoch in range(config.epochs):
        epoch_start = time.perf_counter()
        att_only = dc.stagewise and epoch < config.warmup_epochs
        phase = "warmup" if att_only else "joint"
        perm = rng.permutation(len(items))
        loss_sum = 0.0
        seen = 0
        for at in range(0, len(perm), config.batch_size):
            batch = [items[i] for i in perm[at:at + config.batch_size]]
            if att_only:
                batch = [it for it in batch if it.annotation is not None]
                if not batch:
                    continue
            bound = bind_params(params)
            batch_loss = 0.0
            for it in batch:
                tape = Tape()
                out = forward(params, it.q_idx, it.p_idx, tape=tape, bound=bound)
                loss = loss_joint(tape, out, it.gold, it.annotation, dc, att_only=att_only)
                value = float(loss.values)
                if not np.isfinite(value):
                    raise NumericsError(
                        f"non-finite loss at epoch {epoch}, example {it.example.id}"
                    )
                tape.backward(loss, seed=1.0 / len(batch))
                batch_loss += value
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
                     for k, t in bound.items()}
            clip_global_norm(grads, config.clip_norm)
            optimizer.step(grads)
            loss_sum += batch_loss
            seen += len(batch)

        preds = predict_answers(params, dev_examples, vocab, max_span_len=dc.max_span_len)
        report = evaluate(preds, dev_examples)
        record = EpochRecord(
            epoch=epoch, phase=phase, train_loss=loss_sum / max(seen, 1),
            dev_em=report.em, dev_f1=report.f1,
            seconds=time.perf_counter() - epoch_start,
        )
        history.append(record)
        if best is None or report.f1 > best[0]:
            best = (report.f1, epoch, params.copy())

    return TrainResult(
        params=best[2], history=history, best_epoch=best[1], best_f1=best[0],
        total_seconds=time.perf_counter() - run_start,
    )


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Same run with every distillation switch off (pure CE)."""
    return replace(config, distill=replace(
        config.distill, use_kd=False, use_ans=False, use_att=False, stagewise=False))


def train_teacher_ensemble(config: TrainConfig, train_examples, dev_examples, vocab,
                           n_members: int | None = None) -> list[TrainResult]:
    """N independent CE-trained members; member i runs at seed base + i."""
    n = config.distill.ensemble_size if n_members is None else n_members
    if n < 1:
        raise ConfigError(f"ensemble size must be at least 1, got {n}")
    results = []
    for i in range(n):
        member_cfg = baseline_config(replace(config, seed=config.seed + i))
        results.append(train_model(member_cfg, train_examples, dev_examples, vocab))
    return results


# -- prediction --------------------------------------------------------------


def predict_answers(params: ReaderParams, examples, vocab, max_span_len: int = 15) -> dict[str, str]:
    """Argmax span text per example id (the official predictions mapping)."""
    preds = {}
    for ex in examples:
        out = forward(params, vocab.encode(ex.question_tokens), vocab.encode(ex.passage_tokens))
        top = topk_spans(out.start_dist.values, out.end_dist.values, 1,
                         max_span_len, example=ex)
        preds[ex.id] = top[0].text
    return preds


def predict_answers_ensemble(members: list[ReaderParams], examples, vocab,
                             max_span_len: int = 15) -> dict[str, str]:
    preds = {}
    for ex in examples:
        p1, p2 = ensemble_dists(members, ex, vocab)
        top = topk_spans(p1, p2, 1, max_span_len, example=ex)
        preds[ex.id] = top[0].text
    return preds


def eval_params(params: ReaderParams, examples, vocab, max_span_len: int = 15) -> EvalReport:
    return evaluate(predict_answers(params, examples, vocab, max_span_len), examples)


# -- benchmark ---------------------------------------------------------------


@dataclass
class BenchReport:
    repetitions: int
    student_seconds: float
    ensemble_seconds: float
    ratio: float
    student_param_count: int
    member_param_count: int
    ensemble_param_count: int

    def as_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "student_seconds": self.student_seconds,
            "ensemble_seconds": self.ensemble_seconds,
            "ratio": self.ratio,
            "student_param_count": self.student_param_count,
            "member_param_count": self.member_param_count,
            "ensemble_param_count": self.ensemble_param_count,
        }

    def lines(self) -> list[str]:
        return [
            f"student   median {self.student_seconds:.3f}s  params {self.student_param_count}",
            f"ensemble  median {self.ensemble_seconds:.3f}s  params {self.ensemble_param_count}",
            f"ensemble/student time ratio {self.ratio:.2f}",
        ]


def param_count(params: ReaderParams) -> int:
    return sum(a.size for a in params.arrays.values())


def bench(student: ReaderParams, members: list[ReaderParams], examples, vocab,
          repetitions: int = 5, max_span_len: int = 15) -> BenchReport:
    """Median full-corpus inference time, student vs sequential ensemble.

    One untimed warm-up pass per side precedes the timed repetitions."""
    if repetitions < 3:
        raise ConfigError(f"bench needs at least 3 repetitions, got {repetitions}")

    encoded = [(ex, vocab.encode(ex.question_tokens), vocab.encode(ex.passage_tokens))
               for ex in examples]

    def student_pass():
        for ex, q_idx, p_idx in encoded:
            out = forward(student, q_idx, p_idx)
            topk_spans(out.start_dist.values, out.end_dist.values, 1, max_span_len, example=ex)

    def ensemble_pass():
        for ex, q_idx, p_idx in encoded:
            p1 = 0.0
            p2 = 0.0
            for mp in members:
                out = forward(mp, q_idx, p_idx)
                p1 = p1 + out.start_dist.values
                p2 = p2 + out.end_dist.values
            topk_spans(p1 / len(members), p2 / len(members), 1, max_span_len, example=ex)

    def timed(fn):
        fn()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    student_s = timed(student_pass)
    ensemble_s = timed(ensemble_pass)
    member_count = param_count(members[0])
    return BenchReport(
        repetitions=repetitions,
        student_seconds=student_s,
        ensemble_seconds=ensemble_s,
        ratio=ensemble_s / student_s,
        student_param_count=param_count(student),
        member_param_count=member_count,
        ensemble_param_count=sum(param_count(mp) for mp in members),
    )


# -- run manifest ------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    corpus_hashes: dict = field(default_factory=dict)
    checkpoint_paths: list = field(default_factory=list)
    metric_history: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    created: str = ""

    def write(self, path) -> None:
        for ckpt in self.checkpoint_paths:
            if not os.path.exists(ckpt):
                raise DataError(f"manifest references missing file {ckpt}")
        payload = {
            "command": self.command,
            "created": self.created or time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config": self.config,
            "corpus_hashes": self.corpus_hashes,
            "checkpoint_paths": list(self.checkpoint_paths),
            "metric_history": list(self.metric_history),
            "timings": self.timings,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
