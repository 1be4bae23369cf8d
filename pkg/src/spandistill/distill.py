"""Distillation losses and the teacher-side annotation pipeline.

Four loss terms combine into the joint training objective

    L = L_CE + lam * L_KD + gamma * L_ANS + delta * L_ATT

where lam defaults to tau**2. Teacher soft targets are stored already
temperature-scaled; the annotation file records the tau they were computed
at so a student run can refuse mismatched targets. Ensemble aggregation is
the arithmetic mean of member distributions; the confusing answer is chosen
per member from its top-K list and resolved across members by maximum
confidence.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradCheckReport, Tape, Tensor, grad_check
from .errors import ConfigError, DataError, ShapeError
from .evalspan import SpanPrediction, overlap_f1, topk_spans
from .reader import (
    ReaderConfig,
    ReaderOutput,
    ReaderParams,
    bind_params,
    forward,
    forward_example,
)

TAU_GRID = (1.0, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class DistillConfig:
    """Weights and switches for the joint objective.

    tau is tuned on the {1, 2, 3, 5} grid; any positive value is accepted.
    lam=None means the usual tau**2 coupling. Switches map one-to-one to the
    ablations: use_kd off = "- Vanilla KD", use_ans off = "- ANS", use_att
    off = "- ATT"; stagewise warms the student up on attention alone.
    """

    tau: float = 2.0
    lam: float | None = None
    gamma: float = 0.3
    delta: float = 0.1
    top_k: int = 4
    ensemble_size: int = 3
    margin: float = 1.0
    max_span_len: int = 15
    use_kd: bool = True
    use_ans: bool = True
    use_att: bool = True
    stagewise: bool = False

    @property
    def lam_effective(self) -> float:
        return self.tau ** 2 if self.lam is None else self.lam

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.gamma < 0 or self.delta < 0:
            raise ConfigError(f"gamma/delta must be non-negative, got {self.gamma}/{self.delta}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be at least 1, got {self.top_k}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be at least 1, got {self.ensemble_size}")
        if self.max_span_len < 1:
            raise ConfigError(f"max_span_len must be at least 1, got {self.max_span_len}")
        if self.stagewise and not self.use_att:
            raise ConfigError("stagewise warm-up trains the attention term; "
                              "it cannot be combined with use_att=False")


@dataclass
class TeacherAnnotation:
    """Teacher-side record for one example: soft start/end targets at tau,
    the attention matrix, and the mined confusing span if any."""

    example_id: str
    tau: float
    start_soft: np.ndarray
    end_soft: np.ndarray
    attention: np.ndarray
    confusing_span: tuple[int, int] | None = None
    confusing_confidence: float | None = None

    def validate(self) -> None:
        m = self.start_soft.shape[0]
        if self.end_soft.shape != (m,) or self.attention.ndim != 2 or self.attention.shape[0] != m:
            raise ShapeError(
                f"annotation {self.example_id}: shapes {self.start_soft.shape}, "
                f"{self.end_soft.shape}, {self.attention.shape} inconsistent"
            )
        for name, arr in (("start_soft", self.start_soft), ("end_soft", self.end_soft)):
            if abs(arr.sum() - 1.0) > 1e-5:
                raise DataError(f"annotation {self.example_id}: {name} sums to {arr.sum()!r}")
        row_sums = self.attention.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-5:
            raise DataError(f"annotation {self.example_id}: attention rows not normalized")
        if self.confusing_span is not None:
            i, j = self.confusing_span
            if not 0 <= i <= j < m:
                raise DataError(f"annotation {self.example_id}: confusing span ({i}, {j}) out of range")


def softmax_np(logits: np.ndarray, tau: float) -> np.ndarray:
    """Plain-array temperature softmax with the tape op's exact semantics."""
    return Tape(recording=False).softmax_temp(Tensor(logits), tau).values


# -- loss terms --------------------------------------------------------------


def loss_ce(tape: Tape, output: ReaderOutput, gold: tuple[int, int]) -> Tensor:
    """-log p1(k) - log p2(l) at temperature 1."""
    k, l = gold
    m = output.m
    if not (0 <= k < m and 0 <= l < m):
        raise DataError(f"gold span ({k}, {l}) out of range for passage of {m} tokens")
    lp = tape.add(tape.log(tape.pick(output.start_dist, k)),
                  tape.log(tape.pick(output.end_dist, l)))
    return tape.scale(lp, -1.0)


def loss_kd(tape: Tape, output: ReaderOutput, start_soft: np.ndarray,
            end_soft: np.ndarray, tau: float) -> Tensor:
    """Cross entropy of the temperature-tau student against teacher soft
    targets already computed at the same tau. The tau**2 factor is applied in
    loss_joint, not here."""
    m = output.m
    for name, q in (("start_soft", start_soft), ("end_soft", end_soft)):
        if q.shape != (m,):
            raise ShapeError(f"{name} shape {q.shape} does not match passage length {m}")
        if abs(q.sum() - 1.0) > 1e-5:
            raise DataError(f"{name} is not normalized (sum {q.sum()!r})")
    p1 = tape.softmax_temp(output.start_logits, tau)
    p2 = tape.softmax_temp(output.end_logits, tau)
    t1 = tape.sum(tape.mul(Tensor(start_soft), tape.log(p1)))
    t2 = tape.sum(tape.mul(Tensor(end_soft), tape.log(p2)))
    return tape.scale(tape.add(t1, t2), -1.0)


def loss_ans(tape: Tape, output: ReaderOutput, gold: tuple[int, int],
             confusing: tuple[int, int], margin: float = 1.0) -> Tensor:
    """Margin ranking on raw logits: push the gold start/end above the
    confusing start/end by at least the margin."""
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    k, l = gold
    i, j = confusing
    m = output.m
    for pos in (k, l, i, j):
        if not 0 <= pos < m:
            raise DataError(f"span position {pos} out of range for passage of {m} tokens")
    d1 = tape.sub(tape.pick(output.start_logits, k), tape.pick(output.start_logits, i))
    d2 = tape.sub(tape.pick(output.end_logits, l), tape.pick(output.end_logits, j))
    h1 = tape.relu(tape.add_scalar(tape.scale(d1, -1.0), margin))
    h2 = tape.relu(tape.add_scalar(tape.scale(d2, -1.0), margin))
    return tape.add(h1, h2)


def loss_att(tape: Tape, attention: Tensor, teacher_attention: np.ndarray) -> Tensor:
    """Half the summed squared difference between attention matrices. Summed
    over all passage positions as written, not averaged."""
    if attention.values.shape != teacher_attention.shape:
        raise ShapeError(
            f"attention shapes {attention.values.shape} and {teacher_attention.shape} differ"
        )
    diff = tape.sub(Tensor(teacher_attention), attention)
    return tape.scale(tape.sum(tape.mul(diff, diff)), 0.5)


def loss_joint(tape: Tape, output: ReaderOutput, gold: tuple[int, int] | None,
               annotation: TeacherAnnotation | None, config: DistillConfig,
               att_only: bool = False) -> Tensor:
    """Weighted sum of the enabled terms.

    Disabled switches contribute nothing to the tape, so an all-off run
    builds exactly the baseline CE graph. gold=None (unlabeled augmented
    example) drops the CE and ANS terms. att_only=True is the stagewise
    warm-up phase: delta * L_ATT alone.
    """
    config.validate()
    needs_annotation = att_only or config.use_kd or config.use_att
    if needs_annotation and annotation is None:
        raise DataError("distilled record required but missing for this example")
    if annotation is not None and annotation.tau != config.tau:
        raise ConfigError(
            f"annotation computed at tau={annotation.tau} but config expects tau={config.tau}"
        )

    terms: list[Tensor] = []
    if att_only:
        terms.append(tape.scale(loss_att(tape, output.attention, annotation.attention), config.delta))
    else:
        if gold is not None:
            terms.append(loss_ce(tape, output, gold))
        if config.use_kd:
            kd = loss_kd(tape, output, annotation.start_soft, annotation.end_soft, config.tau)
            terms.append(tape.scale(kd, config.lam_effective))
        if (config.use_ans and gold is not None and annotation is not None
                and annotation.confusing_span is not None):
            ans = loss_ans(tape, output, gold, annotation.confusing_span, config.margin)
            terms.append(tape.scale(ans, config.gamma))
        if config.use_att:
            terms.append(tape.scale(loss_att(tape, output.attention, annotation.attention), config.delta))
    if not terms:
        raise ConfigError("joint loss has no enabled terms for this example")
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total


# -- confusing-answer mining -------------------------------------------------


def member_confusing(spans: list[SpanPrediction], gold_texts: list[str]) -> SpanPrediction | None:
    """Highest-confidence candidate with zero word-overlap F1 against every
    gold; None when every candidate overlaps some gold (the skip rule)."""
    if not gold_texts:
        return None
    best = None
    for s in spans:
        if any(overlap_f1(g, s.text) > 0.0 for g in gold_texts):
            continue
        if best is None or s.score > best.score:
            best = s
    return best


def mine_confusing(member_span_lists: list[list[SpanPrediction]],
                   gold_texts: list[str]) -> SpanPrediction | None:
    """Cross-member rule: each member contributes its own confusing pick;
    the highest-confidence contribution wins. Ties keep the earliest member."""
    best = None
    for spans in member_span_lists:
        pick = member_confusing(spans, gold_texts)
        if pick is not None and (best is None or pick.score > best.score):
            best = pick
    return best


# -- ensemble annotation -----------------------------------------------------


def member_annotation(output: ReaderOutput, example, config: DistillConfig) -> TeacherAnnotation:
    q1 = softmax_np(output.start_logits.values, config.tau)
    q2 = softmax_np(output.end_logits.values, config.tau)
    spans = topk_spans(output.start_dist.values, output.end_dist.values,
                       config.top_k, config.max_span_len, example=example)
    pick = member_confusing(spans, example.gold_texts())
    return TeacherAnnotation(
        example_id=example.id,
        tau=config.tau,
        start_soft=q1,
        end_soft=q2,
        attention=output.attention.values,
        confusing_span=(pick.start, pick.end) if pick else None,
        confusing_confidence=pick.score if pick else None,
    )


def aggregate_ensemble(annotations: list[TeacherAnnotation]) -> TeacherAnnotation:
    """Arithmetic mean of member distributions; max-confidence confusing span."""
    if not annotations:
        raise DataError("aggregate_ensemble: no member annotations")
    first = annotations[0]
    for a in annotations[1:]:
        if a.example_id != first.example_id or a.tau != first.tau:
            raise DataError(
                f"aggregate_ensemble: mixed members ({a.example_id}@{a.tau} vs "
                f"{first.example_id}@{first.tau})"
            )
        if (a.start_soft.shape != first.start_soft.shape
                or a.attention.shape != first.attention.shape):
            raise ShapeError(
                f"aggregate_ensemble: member shapes {a.attention.shape} and "
                f"{first.attention.shape} differ"
            )
    n = len(annotations)
    best = None
    for a in annotations:
        if a.confusing_span is not None and (
                best is None or a.confusing_confidence > best.confusing_confidence):
            best = a
    return TeacherAnnotation(
        example_id=first.example_id,
        tau=first.tau,
        start_soft=sum(a.start_soft for a in annotations) / n,
        end_soft=sum(a.end_soft for a in annotations) / n,
        attention=sum(a.attention for a in annotations) / n,
        confusing_span=best.confusing_span if best else None,
        confusing_confidence=best.confusing_confidence if best else None,
    )


def annotate_example(members: list[ReaderParams], example, vocab,
                     config: DistillConfig) -> TeacherAnnotation:
    anns = [member_annotation(forward_example(mp, example, vocab), example, config)
            for mp in members]
    return aggregate_ensemble(anns)


def ensemble_dists(members: list[ReaderParams], example, vocab) -> tuple[np.ndarray, np.ndarray]:
    """Mean temperature-1 start/end distributions across members, for
    ensemble-as-a-model evaluation."""
    outs = [forward_example(mp, example, vocab) for mp in members]
    p1 = sum(o.start_dist.values for o in outs) / len(outs)
    p2 = sum(o.end_dist.values for o in outs) / len(outs)
    return p1, p2


# -- annotation file I/O -----------------------------------------------------


def write_annotations(annotations: list[TeacherAnnotation], path) -> None:
    """One JSON record per line, sorted by example_id."""
    with open(path, "w", encoding="utf-8") as fh:
        for a in sorted(annotations, key=lambda x: x.example_id):
            record = {
                "example_id": a.example_id,
                "tau": a.tau,
                "start_soft": [float(x) for x in a.start_soft],
                "end_soft": [float(x) for x in a.end_soft],
                "attention": [[float(x) for x in row] for row in a.attention],
                "confusing_span": list(a.confusing_span) if a.confusing_span else None,
                "confusing_confidence": a.confusing_confidence,
            }
            fh.write(json.dumps(record))
            fh.write("\n")


def read_annotations(path) -> dict[str, TeacherAnnotation]:
    out: dict[str, TeacherAnnotation] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed annotation record ({e.msg})") from e
            try:
                ann = TeacherAnnotation(
                    example_id=rec["example_id"],
                    tau=float(rec["tau"]),
                    start_soft=np.asarray(rec["start_soft"], dtype=np.float64),
                    end_soft=np.asarray(rec["end_soft"], dtype=np.float64),
                    attention=np.asarray(rec["attention"], dtype=np.float64),
                    confusing_span=tuple(rec["confusing_span"]) if rec["confusing_span"] else None,
                    confusing_confidence=rec["confusing_confidence"],
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad annotation record ({e!r})") from e
            ann.validate()
            if ann.example_id in out:
                raise DataError(f"{path}:{lineno}: duplicate example_id {ann.example_id}")
            out[ann.example_id] = ann
    return out


# -- gradient suite ----------------------------------------------------------


@dataclass
class GradSuiteReport:
    items: list[tuple[str, GradCheckReport]] = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for _, r in self.items)

    def lines(self) -> list[str]:
        out = []
        for name, rep in self.items:
            status = "ok" if rep.passed else f"FAIL ({len(rep.failures())} coords)"
            out.append(f"{name:<16} max_rel_err={rep.max_rel_err:.3e} {status}")
        out.append(f"total runtime {self.runtime_s:.1f}s")
        return out


def run_gradient_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                       max_per_param: int = 20) -> GradSuiteReport:
    """Finite-difference checks for every loss on a small reader instance
    (6-token passage, 3-token question), covering all parameter groups.

    The answer-margin term is checked with both hinges strictly active so the
    kink is never straddled by the eps perturbation.
    """
    rng = np.random.default_rng(seed)
    vocab_size = 24
    rp = ReaderParams(vocab_size, ReaderConfig(dim=6, hidden=7, window=2, seed=seed))
    q_idx = rng.integers(2, vocab_size, size=3)
    p_idx = rng.integers(2, vocab_size, size=6)
    m, n = 6, 3
    gold = (1, 3)
    confusing = (4, 5)
    teacher_att = np.stack([softmax_np(row, 1.0) for row in rng.normal(size=(m, n))])

    bound = bind_params(rp)

    def fwd(tape: Tape) -> ReaderOutput:
        return forward(rp, q_idx, p_idx, tape=tape, bound=bound)

    cases: list[tuple[str, object]] = []
    cases.append(("L_CE", lambda tape: loss_ce(tape, fwd(tape), gold)))
    for tau in TAU_GRID:
        q1 = softmax_np(rng.normal(size=m), tau)
        q2 = softmax_np(rng.normal(size=m), tau)
        cases.append((
            f"L_KD tau={tau:g}",
            lambda tape, q1=q1, q2=q2, tau=tau: loss_kd(tape, fwd(tape), q1, q2, tau),
        ))
    cases.append(("L_ANS", lambda tape: loss_ans(tape, fwd(tape), gold, confusing, margin=1.0)))
    cases.append((
        "L_ATT",
        lambda tape, t=teacher_att: loss_att(tape, fwd(tape).attention, t),
    ))
    joint_ann = TeacherAnnotation(
        example_id="toy", tau=2.0,
        start_soft=softmax_np(rng.normal(size=m), 2.0),
        end_soft=softmax_np(rng.normal(size=m), 2.0),
        attention=teacher_att,
        confusing_span=confusing, confusing_confidence=0.5,
    )
    joint_cfg = DistillConfig(tau=2.0)
    cases.append((
        "L_joint",
        lambda tape: loss_joint(tape, fwd(tape), gold, joint_ann, joint_cfg),
    ))

    report = GradSuiteReport()
    started = time.perf_counter()
    for name, f in cases:
        check_rng = np.random.default_rng(seed + 1)
        report.items.append(
            (name, grad_check(f, bound, eps=eps, tol=tol,
                              max_per_param=max_per_param, rng=check_rng))
        )
    report.runtime_s = time.perf_counter() - started
    return report
