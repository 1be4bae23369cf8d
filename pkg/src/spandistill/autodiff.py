"""Minimal dense-array reverse-mode differentiation on a linear tape.

Arrays are float64 numpy throughout. A Tape records every differentiable
operation in execution order; backward() replays the adjoint closures in
reverse, so each operation is visited exactly once and two backward passes
over identical tapes are bit-identical. There is no broadcasting beyond the
explicit row/column expansion helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericsError, ShapeError

# Masked logit positions receive this before any softmax; exp() underflows to
# an exact 0.0 in float64, so masked probabilities are exactly zero.
MASKED_LOGIT = -1e9


class Tensor:
    """Dense array with an optional same-shape gradient accumulator."""

    __slots__ = ("values", "grad", "needs_grad")

    def __init__(self, values, needs_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, needs_grad={self.needs_grad})"


def parameter(values) -> Tensor:
    """A trainable leaf: gradients accumulate into it during backward."""
    return Tensor(values, needs_grad=True)


def constant(values) -> Tensor:
    """A non-trainable leaf: backward never writes into it."""
    return Tensor(values)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.needs_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeError(f"{op}: shapes {a.values.shape} and {b.values.shape} differ")


def _masked_softmax(x: np.ndarray, tau: float, mask: np.ndarray | None) -> np.ndarray:
    """Stable softmax(x / tau) along the last axis; masked positions exactly 0."""
    z = np.array(x, dtype=np.float64)
    if mask is not None:
        z = np.where(mask, z, MASKED_LOGIT)
    z /= tau
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class Tape:
    """Ordered record of differentiable operations.

    Construct with recording=False for inference: forward values are computed
    but no adjoint closures are kept.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self._steps: list = []

    def __len__(self) -> int:
        return len(self._steps)

    def _emit(self, out: Tensor, step) -> Tensor:
        if self.recording:
            out.needs_grad = True
            self._steps.append(step)
        return out

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(loss)/d(leaf) into every needs_grad leaf on this tape."""
        if not self.recording:
            raise NumericsError("backward() on a non-recording tape")
        if loss.values.shape != ():
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.values.shape}")
        loss.grad = np.asarray(float(seed), dtype=np.float64)
        for step in reversed(self._steps):
            step()

    # -- elementwise -------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same_shape("add", a, b)
        out = Tensor(a.values + b.values)

        def step():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g)
            _accumulate(b, g)

        return self._emit(out, step)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same_shape("sub", a, b)
        out = Tensor(a.values - b.values)

        def step():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g)
            _accumulate(b, -g)

        return self._emit(out, step)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _require_same_shape("mul", a, b)
        av, bv = a.values, b.values
        out = Tensor(av * bv)

        def step():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g * bv)
            _accumulate(b, g * av)

        return self._emit(out, step)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        out = Tensor(a.values * c)

        def step():
            if out.grad is not None:
                _accumulate(a, out.grad * c)

        return self._emit(out, step)

    def add_scalar(self, a: Tensor, c: float) -> Tensor:
        out = Tensor(a.values + float(c))

        def step():
            if out.grad is not None:
                _accumulate(a, out.grad)

        return self._emit(out, step)

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.values)
        out = Tensor(y)

        def step():
            if out.grad is not None:
                _accumulate(a, out.grad * (1.0 - y * y))

        return self._emit(out, step)

    def relu(self, a: Tensor) -> Tensor:
        av = a.values
        out = Tensor(np.maximum(av, 0.0))

        def step():
            if out.grad is not None:
                # subgradient at the kink is 0
                _accumulate(a, out.grad * (av > 0.0))

        return self._emit(out, step)

    def log(self, a: Tensor) -> Tensor:
        av = a.values
        if np.any(av <= 0.0):
            raise NumericsError("log: non-positive input")
        out = Tensor(np.log(av))

        def step():
            if out.grad is not None:
                _accumulate(a, out.grad / av)

        return self._emit(out, step)

    # -- structural --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
            raise ShapeError(f"matmul: shapes {a.values.shape} and {b.values.shape} incompatible")
        av, bv = a.values, b.values
        out = Tensor(av @ bv)

        def step():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)

        return self._emit(out, step)

    def transpose(self, a: Tensor) -> Tensor:
        out = Tensor(a.values.T)

        def step():
            if out.grad is not None:
                _accumulate(a, out.grad.T)

        return self._emit(out, step)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = a.values.shape
        out = Tensor(a.values.reshape(shape))

        def step():
            if out.grad is not None:
                _accumulate(a, out.grad.reshape(old))

        return self._emit(out, step)

    def concat_cols(self, parts: list[Tensor]) -> Tensor:
        if not parts:
            raise ShapeError("concat_cols: empty input")
        rows = parts[0].values.shape[0]
        for p in parts:
            if p.values.ndim != 2 or p.values.shape[0] != rows:
                raise ShapeError(
                    f"concat_cols: shapes {parts[0].values.shape} and {p.values.shape} incompatible"
                )
        widths = [p.values.shape[1] for p in parts]
        out = Tensor(np.concatenate([p.values for p in parts], axis=1))

        def step():
            g = out.grad
            if g is None:
                return
            at = 0
            for p, w in zip(parts, widths):
                _accumulate(p, g[:, at:at + w])
                at += w

        return self._emit(out, step)

    def shift_rows(self, a: Tensor, offset: int) -> Tensor:
        """Rows shifted by `offset` (positive = down), zero padded."""
        if a.values.ndim != 2:
            raise ShapeError(f"shift_rows: need 2-d input, got shape {a.values.shape}")
        n = a.values.shape[0]
        y = np.zeros_like(a.values)
        if offset >= 0:
            y[offset:] = a.values[:n - offset]
        else:
            y[:n + offset] = a.values[-offset:]
        out = Tensor(y)

        def step():
            g = out.grad
            if g is None:
                return
            gx = np.zeros_like(a.values)
            if offset >= 0:
                gx[:n - offset] = g[offset:]
            else:
                gx[-offset:] = g[:n + offset]
            _accumulate(a, gx)

        return self._emit(out, step)

    def add_rowvec(self, a: Tensor, v: Tensor) -> Tensor:
        """Add a length-k vector to every row of an (n, k) matrix."""
        if a.values.ndim != 2 or v.values.shape != (a.values.shape[1],):
            raise ShapeError(f"add_rowvec: shapes {a.values.shape} and {v.values.shape} incompatible")
        out = Tensor(a.values + v.values[None, :])

        def step():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g)
            _accumulate(v, g.sum(axis=0))

        return self._emit(out, step)

    def expand_rows(self, v: Tensor, n: int) -> Tensor:
        """Tile a length-k vector into an (n, k) matrix."""
        if v.values.ndim != 1:
            raise ShapeError(f"expand_rows: need 1-d input, got shape {v.values.shape}")
        out = Tensor(np.tile(v.values, (n, 1)))

        def step():
            if out.grad is not None:
                _accumulate(v, out.grad.sum(axis=0))

        return self._emit(out, step)

    def embed(self, table: Tensor, indices: np.ndarray) -> Tensor:
        """Gather rows of an embedding table; backward scatter-adds."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or table.values.ndim != 2:
            raise ShapeError(
                f"embed: need 1-d indices into a 2-d table, got {idx.shape} and {table.values.shape}"
            )
        if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
            raise NumericsError("embed: token index out of range")
        out = Tensor(table.values[idx])

        def step():
            g = out.grad
            if g is None or not table.needs_grad:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, idx, g)

        return self._emit(out, step)

    def pick(self, x: Tensor, i: int) -> Tensor:
        """Scalar element of a 1-d tensor."""
        if x.values.ndim != 1:
            raise ShapeError(f"pick: need 1-d input, got shape {x.values.shape}")
        if not 0 <= i < x.values.shape[0]:
            raise NumericsError(f"pick: index {i} out of range for length {x.values.shape[0]}")
        out = Tensor(x.values[i])

        def step():
            g = out.grad
            if g is None:
                return
            gx = np.zeros_like(x.values)
            gx[i] = g
            _accumulate(x, gx)

        return self._emit(out, step)

    # -- reductions --------------------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.values.shape
        out = Tensor(a.values.sum())

        def step():
            if out.grad is not None:
                _accumulate(a, np.full(shape, float(out.grad)))

        return self._emit(out, step)

    def mse(self, a: Tensor, b: Tensor) -> Tensor:
        """Mean over all entries of the squared difference."""
        _require_same_shape("mse", a, b)
        d = a.values - b.values
        n = d.size
        out = Tensor((d * d).sum() / n)

        def step():
            g = out.grad
            if g is None:
                return
            scaled = (2.0 / n) * float(g) * d
            _accumulate(a, scaled)
            _accumulate(b, -scaled)

        return self._emit(out, step)

    # -- normalizers -------------------------------------------------------

    def softmax_temp(self, logits: Tensor, tau: float, mask: np.ndarray | None = None) -> Tensor:
        """softmax(logits / tau) over a 1-d tensor; masked positions exactly 0."""
        if tau <= 0.0:
            raise ConfigError(f"softmax temperature must be positive, got {tau}")
        if logits.values.ndim != 1:
            raise ShapeError(f"softmax_temp: need 1-d logits, got shape {logits.values.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != logits.values.shape:
                raise ShapeError(
                    f"softmax_temp: mask shape {mask.shape} does not match logits {logits.values.shape}"
                )
            if not mask.any():
                raise DegenerateInputError("softmax_temp: all positions masked")
        y = _masked_softmax(logits.values, float(tau), mask)
        out = Tensor(y)
        inv_tau = 1.0 / float(tau)

        def step():
            g = out.grad
            if g is None:
                return
            gx = inv_tau * y * (g - np.dot(g, y))
            _accumulate(logits, gx)

        return self._emit(out, step)

    def row_softmax(self, a: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Per-row softmax of a 2-d tensor; optional shared column mask."""
        if a.values.ndim != 2:
            raise ShapeError(f"row_softmax: need 2-d input, got shape {a.values.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (a.values.shape[1],):
                raise ShapeError(
                    f"row_softmax: mask shape {mask.shape} does not match row length {a.values.shape[1]}"
                )
            if not mask.any():
                raise DegenerateInputError("row_softmax: all positions masked")
        y = _masked_softmax(a.values, 1.0, mask)
        out = Tensor(y)

        def step():
            g = out.grad
            if g is None:
                return
            gx = y * (g - (g * y).sum(axis=1, keepdims=True))
            _accumulate(a, gx)

        return self._emit(out, step)


# -- gradient checking -----------------------------------------------------


@dataclass
class CoordReport:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    entries: list[CoordReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def failures(self) -> list[CoordReport]:
        return [e for e in self.entries if not e.ok]


def _eval_scalar(f) -> float:
    loss = f(Tape(recording=False))
    v = float(loss.values)
    if not np.isfinite(v):
        raise NumericsError("grad_check: non-finite function value")
    return v


def grad_check(
    f,
    params: dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of f against central finite differences.

    f takes a Tape and returns a scalar Tensor computed from `params`.
    Relative error uses max(1, |analytic|, |numeric|) as denominator. When
    max_per_param is given, that many coordinates per parameter are sampled
    with rng; otherwise every coordinate is checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"grad_check eps must be in [1e-7, 1e-3], got {eps}")
    for p in params.values():
        p.grad = None
    tape = Tape()
    loss = f(tape)
    if not np.isfinite(float(loss.values)):
        raise NumericsError("grad_check: non-finite function value")
    tape.backward(loss)

    report = GradCheckReport()
    for name, p in sorted(params.items()):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        coords = list(np.ndindex(*p.values.shape)) if p.values.shape else [()]
        if max_per_param is not None and len(coords) > max_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            chosen = rng.choice(len(coords), size=max_per_param, replace=False)
            coords = [coords[i] for i in sorted(chosen)]
        flat = p.values
        for idx in coords:
            x0 = flat[idx]
            flat[idx] = x0 + eps
            f_plus = _eval_scalar(f)
            flat[idx] = x0 - eps
            f_minus = _eval_scalar(f)
            flat[idx] = x0
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx]) if analytic.shape else float(analytic)
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            report.entries.append(CoordReport(name, idx, a, numeric, rel, rel <= tol))
    return report
