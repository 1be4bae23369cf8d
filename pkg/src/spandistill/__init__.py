"""Knowledge distillation for extractive span readers: a compact student
model trained to match an ensemble's soft span targets, attention, and
answer-ranking preferences, with adversarial-robustness tooling and a
deterministic synthetic corpus generator."""

from .autodiff import Tape, Tensor, grad_check
from .corpus import Example, SynthSpec, Vocabulary, generate_synthetic, load_squad_json
from .distill import (
    DistillConfig,
    TeacherAnnotation,
    aggregate_ensemble,
    loss_ans,
    loss_att,
    loss_ce,
    loss_joint,
    loss_kd,
    mine_confusing,
    run_gradient_suite,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    NotFittedEstimatorError,
    NumericsError,
    ShapeError,
    SpanDistillError,
)
from .estimators import DistilledReader, EnsembleReader, SpanReader
from .evalspan import SpanPrediction, evaluate, normalize_answer, overlap_f1, topk_spans
from .reader import ReaderConfig, ReaderOutput, ReaderParams, forward, forward_example
from .training import TrainConfig, bench, train_model, train_teacher_ensemble

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "DistillConfig",
    "DistilledReader",
    "EnsembleReader",
    "Example",
    "NotFittedEstimatorError",
    "NumericsError",
    "ReaderConfig",
    "ReaderOutput",
    "ReaderParams",
    "ShapeError",
    "SpanDistillError",
    "SpanPrediction",
    "SpanReader",
    "SynthSpec",
    "Tape",
    "TeacherAnnotation",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "aggregate_ensemble",
    "bench",
    "evaluate",
    "forward",
    "forward_example",
    "generate_synthetic",
    "grad_check",
    "load_squad_json",
    "loss_ans",
    "loss_att",
    "loss_ce",
    "loss_joint",
    "loss_kd",
    "mine_confusing",
    "normalize_answer",
    "overlap_f1",
    "run_gradient_suite",
    "topk_spans",
    "train_model",
    "train_teacher_ensemble",
]
