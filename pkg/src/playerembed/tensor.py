"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active record a closure that
maps the output gradient to input gradients.  ``Tape.backward`` replays the
records in reverse order, which is a valid topological order because every
record is appended after its inputs exist.

Only the operations the encoder and trainer need are provided.  Arrays are
always C-contiguous float64; there are no views or strides exposed.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar used by the encoder
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered list of recorded operations.

    Use as a context manager; operations run inside the block are recorded
    when at least one input requires a gradient.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> list[str]:
        """Accumulate gradients of ``loss`` into every tensor flagged
        ``requires_grad`` that the loss depends on.

        Returns the op names visited, in visiting order.
        """
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        visited = []
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            visited.append(rec.op)
            for inp, g in zip(rec.inputs, rec.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever is left are leaves (parameters / inputs)
        for rec_inputs in self._leaves():
            g = grads.get(id(rec_inputs))
            if g is not None:
                rec_inputs.grad = g if rec_inputs.grad is None else rec_inputs.grad + g
        if loss.requires_grad and not self.records:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return visited

    def _leaves(self):
        produced = {id(r.output) for r in self.records}
        seen = set()
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    yield t


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.records.append(_Record(inputs, out, backward, op))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-axis row vector (bias)."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT_2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), xd * cdf, back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(np.asarray(g).reshape(-1)[0])),))


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, back)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T``; used for the tied output projection."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[1]:
        raise ShapeError(f"matmul_t shape mismatch: {a.shape} @ {b.shape}^T")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd if a.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).T @ ad.reshape(-1, ad.shape[-1]) if b.requires_grad else None
        return ga, gb

    return _record("matmul_t", (a, b), ad @ bd.T, back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def back(g):
        out = np.zeros((rows, g.shape[-1]))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (out,)

    return _record("embedding", (table,), table.data[ids], back)


# ------------------------------------------------------------ normalizers

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis with per-row max subtraction.

    NaN inputs propagate to NaN outputs.
    """
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), s, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        ggain = (flat * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = flat.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _record("layer_norm", (x, gain, bias), xhat * gd + bias.data, back)


# ------------------------------------------------------------------- losses

def cross_entropy_masked(logits: Tensor, targets, mask, normalizer: float | None = None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is set.

    ``normalizer`` replaces the masked-position count as the divisor; the
    trainer uses it to weight sequences within an accumulated batch.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    ld = logits.data
    if ld.ndim != 2 or len(targets) != ld.shape[0] or len(mask) != ld.shape[0]:
        raise ShapeError(f"logits {ld.shape} vs targets {targets.shape} / mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_masked: mask selects zero positions")
    denom = float(count if normalizer is None else normalizer)
    rows = np.flatnonzero(mask)
    sel = ld[rows]
    m = sel.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(sel - m).sum(axis=1))
    nll = lse - sel[np.arange(len(rows)), targets[rows]]
    value = nll.sum() / denom

    def back(g):
        p = np.exp(sel - lse[:, None])
        p[np.arange(len(rows)), targets[rows]] -= 1.0
        out = np.zeros_like(ld)
        out[rows] = p * (float(np.asarray(g).reshape(-1)[0]) / denom)
        return (out,)

    return _record("cross_entropy_masked", (logits,), np.array(value), back)


# -------------------------------------------------------------- custom ops

def custom(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Record an op whose backward rule is supplied by the caller."""
    return _record(op, tuple(inputs), out_data, backward)


# ---------------------------------------------------------------- gradcheck

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               probe: np.ndarray | None = None, rng_seed: int = 0, atol: float = 1e-6) -> float:
    """Compare tape gradients with central finite differences.

    ``fn`` maps the input tensors to an output tensor.  Non-scalar outputs
    are contracted with a fixed random probe so every output entry
    contributes.  The error of one input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, atol)``,
    so a gradient that is identically zero up to rounding (``< atol``) is
    measured in absolute terms.  The maximum over inputs that require a
    gradient is returned.
    """
    targets = [t for t in inputs if t.requires_grad]
    for t in targets:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if probe is None:
        probe = np.random.default_rng(rng_seed).standard_normal(out.shape)
    probe = np.asarray(probe, dtype=np.float64).reshape(out.shape)
    tape.backward(out, seed=probe)

    def scalar() -> float:
        return float((fn(*inputs).data * probe).sum())

    worst = 0.0
    for t in targets:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar()
            flat[i] = orig - step
            fm = scalar()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), atol)
        worst = max(worst, float(np.abs(analytic - numeric).max() / denom))
    return worst
