"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy float64 array. Differentiable operations record
themselves on the active ``Tape`` (a thread-local stack); ``backward`` replays
the tape in exact reverse execution order and accumulates gradients into every
participating tensor. With no tape active the same operations run forward-only,
which is what inference and finite-difference probing use.

Deliberately small surface: 2-D matrices and 1-D vectors, no broadcasting
except bias addition over the last axis. Shape mismatches raise ``ShapeError``
naming both shapes.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._recorded = False  # True when produced by an op on an open tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _wants_grad(self) -> bool:
        return self.requires_grad or self._recorded

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of executed differentiable operations.

    Usage::

        with Tape() as tape:
            loss = ...   # ops record themselves here
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._recorded = True
        self.nodes.append((out, inputs, backward_fn))


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap raw output data in a Tensor, recording the op if a tape is open.

    ``backward_fn(g)`` receives the upstream gradient and must return one
    gradient array (or None) per input, in order. Extension point for modules
    that define fused operations (slerp, losses).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._wants_grad() for t in inputs):
        inputs = tuple(inputs)

        def _apply(g: np.ndarray, inputs=inputs, backward_fn=backward_fn) -> None:
            grads = backward_fn(g)
            for t, dt in zip(inputs, grads):
                if dt is not None and t._wants_grad():
                    t._accumulate(dt)

        tape.record(out, inputs, _apply)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad for every tensor reachable from a scalar loss.

    Gradients accumulate additively across multiple uses of a tensor.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(out is loss for out, _, _ in tape.nodes):
        raise ContractError("loss was not produced on this tape")
    loss._accumulate(np.ones_like(loss.data))
    for out, _, apply_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        apply_fn(out.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _as2d(name: str, t: Tensor) -> np.ndarray:
    if t.data.ndim != 2:
        raise ShapeError(f"{name} expects a 2-D tensor, got shape {t.shape}")
    return t.data


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with dC/dA = g.Bt and dC/dB = At.g accumulation."""
    da, db = _as2d("matmul", a), _as2d("matmul", b)
    if da.shape[1] != db.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {da.shape} x {db.shape}")

    def bw(g):
        return g @ db.T, da.T @ g

    return record_op(da @ db, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    _as2d("transpose", a)

    def bw(g):
        return (g.T,)

    return record_op(a.data.T.copy(), (a,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bw(g):
        return g, g

    return record_op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")

    def bw(g):
        return g, -g

    return record_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    da, db = a.data, b.data

    def bw(g):
        return g * db, g * da

    return record_op(da * db, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        return (g * s,)

    return record_op(a.data * s, (a,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over the last axis (the only broadcast allowed)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {x.shape} + {b.shape}")

    def bw(g):
        gb = g if g.ndim == 1 else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g, gb

    return record_op(x.data + b.data, (x, b), bw)


def row_softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    dx = _as2d("row_softmax", x)
    shifted = dx - dx.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return ((g - (g * y).sum(axis=1, keepdims=True)) * y,)

    return record_op(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record_op(y, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)

    def bw(g):
        return (g * (cdf + x.data * pdf),)

    return record_op(x.data * cdf, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bw(g):
        return (np.full(shape, float(g)),)

    return record_op(np.asarray(x.data.sum()), (x,), bw)


def row(x: Tensor, i: int) -> Tensor:
    dx = _as2d("row", x)

    def bw(g):
        gx = np.zeros_like(dx)
        gx[i] = g
        return (gx,)

    return record_op(dx[i].copy(), (x,), bw)


def col_slice(x: Tensor, start: int, stop: int) -> Tensor:
    dx = _as2d("col_slice", x)

    def bw(g):
        gx = np.zeros_like(dx)
        gx[:, start:stop] = g
        return (gx,)

    return record_op(dx[:, start:stop].copy(), (x,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D vectors and 2-D matrices of equal width into one matrix."""
    blocks = []
    heights = []
    for p in parts:
        if p.data.ndim == 1:
            blocks.append(p.data[None, :])
            heights.append(1)
        elif p.data.ndim == 2:
            blocks.append(p.data)
            heights.append(p.data.shape[0])
        else:
            raise ShapeError(f"concat_rows got shape {p.shape}")
    widths = {b.shape[1] for b in blocks}
    if len(widths) > 1:
        raise ShapeError(f"concat_rows widths differ: {[b.shape for b in blocks]}")
    parts = tuple(parts)

    def bw(g):
        grads = []
        at = 0
        for p, h in zip(parts, heights):
            piece = g[at:at + h]
            grads.append(piece[0] if p.data.ndim == 1 else piece)
            at += h
        return grads

    return record_op(np.concatenate(blocks, axis=0), parts, bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    blocks = [_as2d("concat_cols", p) for p in parts]
    heights = {b.shape[0] for b in blocks}
    if len(heights) > 1:
        raise ShapeError(f"concat_cols heights differ: {[b.shape for b in blocks]}")
    widths = [b.shape[1] for b in blocks]
    parts = tuple(parts)

    def bw(g):
        grads = []
        at = 0
        for w in widths:
            grads.append(g[:, at:at + w])
            at += w
        return grads

    return record_op(np.concatenate(blocks, axis=1), parts, bw)


def l2_normalize(x: Tensor) -> Tensor:
    """x / ||x||_2 for a 1-D vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got shape {x.shape}")
    norm = float(np.linalg.norm(x.data))
    if norm == 0.0:
        raise ContractError("l2_normalize of the zero vector")
    y = x.data / norm

    def bw(g):
        return ((g - y * float(y @ g)) / norm,)

    return record_op(y, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep

    def bw(g):
        return (g * mask,)

    return record_op(x.data * mask, (x,), bw)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows, log-sum-exp stabilized."""
    z = _as2d("cross_entropy_mean", logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {z.shape}")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    lse = np.log(e.sum(axis=1)) + m[:, 0]
    n = z.shape[0]
    loss = (lse - z[np.arange(n), labels]).mean()
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dz = probs.copy()
        dz[np.arange(n), labels] -= 1.0
        return (dz * (float(g) / n),)

    return record_op(np.asarray(loss), (logits,), bw)


def pairwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Gram matrix S[i, j] = a_i . b_j.

    Computed entrywise with np.dot so that swapping the arguments yields the
    bitwise transpose (dot products are argument-order invariant).
    """
    da, db = _as2d("pairwise_dot", a), _as2d("pairwise_dot", b)
    if da.shape[1] != db.shape[1]:
        raise ShapeError(f"pairwise_dot widths differ: {da.shape} vs {db.shape}")
    s = np.empty((da.shape[0], db.shape[0]))
    for i in range(da.shape[0]):
        for j in range(db.shape[0]):
            s[i, j] = np.dot(da[i], db[j])

    def bw(g):
        return g @ db, g.T @ da

    return record_op(s, (a, b), bw)


def _info_nce_rows(s: np.ndarray) -> float:
    m = s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s - m).sum(axis=1)) + m[:, 0]
    return float((lse - np.diag(s)).mean())


def symmetric_info_nce(scores: Tensor) -> Tensor:
    """0.5 * (row-wise + column-wise) InfoNCE of a square score matrix.

    Matched pairs sit on the diagonal; scores are used as raw logits.
    """
    s = _as2d("symmetric_info_nce", scores)
    n = s.shape[0]
    if n == 0 or s.shape[1] != n:
        raise ContractError(f"symmetric_info_nce needs a nonempty square matrix, got {scores.shape}")
    loss = 0.5 * (_info_nce_rows(s) + _info_nce_rows(s.T))

    def _softmax_rows(m):
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def bw(g):
        eye = np.eye(n)
        d_rows = (_softmax_rows(s) - eye) / n
        d_cols = ((_softmax_rows(s.T) - eye) / n).T
        return (0.5 * float(g) * (d_rows + d_cols),)

    return record_op(np.asarray(loss), (scores,), bw)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``params`` (closed over
    them); relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractError(f"finite_diff_check step must be positive, got {step}")
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
