"""Span reader model: embed, contextualize, match question to passage,
and emit start/end logits plus the per-passage-word attention over the
question.

All parameters live in float64 numpy arrays; a forward pass binds them to a
Tape so gradients flow to every group. Checkpoints store float32
little-endian raw arrays behind a one-line JSON header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, parameter
from .errors import ConfigError, DataError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ReaderConfig:
    """Model shape. window is the per-layer context half-width; two layers
    give a receptive field of ±2*window tokens."""

    dim: int = 32
    hidden: int = 32
    window: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.dim < 1 or self.hidden < 1 or self.window < 0:
            raise ConfigError(f"bad reader config {self}")


def _param_shapes(vocab_size: int, cfg: ReaderConfig) -> dict[str, tuple[int, ...]]:
    d, h, w = cfg.dim, cfg.hidden, cfg.window
    span = 2 * w + 1
    return {
        "embed": (vocab_size, d),
        "ctx1_W": (d * span, h),
        "ctx1_b": (h,),
        "ctx2_W": (h * span, h),
        "ctx2_b": (h,),
        "sim_q": (h, h),
        "sim_p": (h, h),
        "fuse_W": (3 * h, h),
        "fuse_b": (h,),
        "start_v": (h, 1),
        "end_v": (3 * h, 1),
    }


class ReaderParams:
    """Named parameter arrays plus the metadata needed to reload them."""

    def __init__(self, vocab_size: int, config: ReaderConfig, vocab_hash: str = ""):
        config.validate()
        if vocab_size < 2:
            raise ConfigError("vocabulary must contain padding and unknown entries")
        self.vocab_size = vocab_size
        self.config = config
        self.vocab_hash = vocab_hash
        rng = np.random.default_rng(config.seed)
        self.arrays: dict[str, np.ndarray] = {}
        for name, shape in _param_shapes(vocab_size, config).items():
            self.arrays[name] = rng.uniform(-0.05, 0.05, size=shape)

    def zero_(self) -> None:
        for a in self.arrays.values():
            a[...] = 0.0

    def copy(self) -> "ReaderParams":
        other = ReaderParams.__new__(ReaderParams)
        other.vocab_size = self.vocab_size
        other.config = self.config
        other.vocab_hash = self.vocab_hash
        other.arrays = {k: v.copy() for k, v in self.arrays.items()}
        return other

    def save(self, path) -> None:
        names = list(self.arrays)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "names": names,
            "shapes": {k: list(self.arrays[k].shape) for k in names},
            "dtype": "float32",
            "byte_order": "little",
            "vocab_size": self.vocab_size,
            "vocab_hash": self.vocab_hash,
            "dim": self.config.dim,
            "hidden": self.config.hidden,
            "window": self.config.window,
            "seed": self.config.seed,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8"))
            fh.write(b"\n")
            for k in names:
                fh.write(self.arrays[k].astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path) -> "ReaderParams":
        with open(path, "rb") as fh:
            line = fh.readline()
            try:
                header = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise DataError(f"{path}: checkpoint header is not JSON ({e})") from e
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(
                    f"{path}: checkpoint format {header.get('format_version')!r}, expected {CHECKPOINT_VERSION}"
                )
            cfg = ReaderConfig(
                dim=header["dim"], hidden=header["hidden"],
                window=header["window"], seed=header.get("seed", 0),
            )
            params = cls.__new__(cls)
            params.vocab_size = header["vocab_size"]
            params.config = cfg
            params.vocab_hash = header.get("vocab_hash", "")
            params.arrays = {}
            expected = _param_shapes(params.vocab_size, cfg)
            if list(header["names"]) != list(expected):
                raise DataError(f"{path}: checkpoint parameter names do not match this model")
            for name in header["names"]:
                shape = tuple(header["shapes"][name])
                if shape != expected[name]:
                    raise DataError(f"{path}: array {name} has shape {shape}, expected {expected[name]}")
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise DataError(f"{path}: checkpoint truncated inside array {name}")
                params.arrays[name] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
            if fh.read(1):
                raise DataError(f"{path}: trailing bytes after last checkpoint array")
        return params


@dataclass
class ReaderOutput:
    """Tensors from one forward pass; backward-capable when the tape records."""

    start_logits: Tensor
    end_logits: Tensor
    attention: Tensor
    start_dist: Tensor
    end_dist: Tensor

    @property
    def m(self) -> int:
        return self.start_logits.values.shape[0]


def bind_params(params: ReaderParams) -> dict[str, Tensor]:
    """Wrap each parameter array in a trainable Tensor. Values alias the
    underlying arrays, so in-place optimizer updates are visible to the next
    binding-free forward call."""
    return {k: parameter(v) for k, v in params.arrays.items()}


def _contextualize(tape: Tape, x: Tensor, p: dict[str, Tensor], window: int) -> Tensor:
    out = x
    for layer in ("ctx1", "ctx2"):
        cols = [tape.shift_rows(out, off) for off in range(-window, window + 1)]
        stacked = tape.concat_cols(cols)
        lin = tape.add_rowvec(tape.matmul(stacked, p[f"{layer}_W"]), p[f"{layer}_b"])
        out = tape.tanh(lin)
    return out


def encode(tape: Tape, p: dict[str, Tensor], q_idx: np.ndarray, p_idx: np.ndarray,
           window: int) -> tuple[Tensor, Tensor]:
    """Question and passage representations (V: n rows, U: m rows)."""
    if len(q_idx) < 1 or len(p_idx) < 1:
        raise DataError("encode needs at least one question and one passage token")
    v = _contextualize(tape, tape.embed(p["embed"], q_idx), p, window)
    u = _contextualize(tape, tape.embed(p["embed"], p_idx), p, window)
    return v, u


def similarity(tape: Tape, p: dict[str, Tensor], v: Tensor, u: Tensor) -> Tensor:
    """E (n×m): scaled dot product of projected question and passage rows."""
    if v.values.shape[1] != u.values.shape[1]:
        raise ShapeError(f"question width {v.values.shape} vs passage width {u.values.shape}")
    h = v.values.shape[1]
    vq = tape.matmul(v, p["sim_q"])
    up = tape.matmul(u, p["sim_p"])
    return tape.scale(tape.matmul(vq, tape.transpose(up)), 1.0 / np.sqrt(h))


def attend_and_fuse(tape: Tape, p: dict[str, Tensor], e: Tensor, v: Tensor,
                    u: Tensor) -> tuple[Tensor, Tensor]:
    """Per-passage-word attention over the question, fused into each word.

    Returns (fused m×h, attention m×n)."""
    att = tape.row_softmax(tape.transpose(e))
    summary = tape.matmul(att, v)
    fused_in = tape.concat_cols([u, summary, tape.mul(u, summary)])
    fused = tape.tanh(tape.add_rowvec(tape.matmul(fused_in, p["fuse_W"]), p["fuse_b"]))
    return fused, att


def forward(params: ReaderParams, q_idx: np.ndarray, p_idx: np.ndarray,
            tape: Tape | None = None, bound: dict[str, Tensor] | None = None) -> ReaderOutput:
    """Full pass. Distributions are at temperature 1; KD re-normalizes the
    same logits at its own temperature. The end head sees the fused passage
    concatenated with a start-probability-weighted summary of it (plus their
    product), a soft stand-in for conditioning the end position on the
    start. Heads are linear in the fused representation: the shorter
    gradient path is what lets the question-to-passage binding emerge."""
    if tape is None:
        tape = Tape(recording=False)
    p = bound if bound is not None else bind_params(params)
    m = len(p_idx)

    v, u = encode(tape, p, q_idx, p_idx, params.config.window)
    e = similarity(tape, p, v, u)
    fused, att = attend_and_fuse(tape, p, e, v, u)

    start_logits = tape.reshape(tape.matmul(fused, p["start_v"]), (m,))
    start_dist = tape.softmax_temp(start_logits, 1.0)

    # The summary alone would only shift every end logit equally; the
    # fused * summary column is what lets the start choice steer the end.
    h = params.config.hidden
    weights = tape.reshape(start_dist, (1, m))
    summary = tape.expand_rows(tape.reshape(tape.matmul(weights, fused), (h,)), m)
    end_in = tape.concat_cols([fused, summary, tape.mul(fused, summary)])
    end_logits = tape.reshape(tape.matmul(end_in, p["end_v"]), (m,))
    end_dist = tape.softmax_temp(end_logits, 1.0)

    return ReaderOutput(
        start_logits=start_logits,
        end_logits=end_logits,
        attention=att,
        start_dist=start_dist,
        end_dist=end_dist,
    )


def forward_example(params: ReaderParams, example, vocab, tape: Tape | None = None,
                    bound: dict[str, Tensor] | None = None) -> ReaderOutput:
    q_idx = vocab.encode(example.question_tokens)
    p_idx = vocab.encode(example.passage_tokens)
    return forward(params, q_idx, p_idx, tape=tape, bound=bound)
