"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

Ops executed inside ``with Tape():`` are recorded when at least one operand is
trainable or was itself produced on that tape. Outside a tape (or under
``no_grad()``) ops run eagerly and record nothing, which is how inference and
finite-difference evaluation avoid the bookkeeping cost.

``backward`` walks the tape once, newest entry first, and accumulates into the
``.grad`` of every trainable leaf. A tape can be walked only once; optimizers
call ``zero_grad`` between steps.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError, NumericError

LAYER_NORM_EPS = 1e-5

_TAPE_STACK: list["Tape | None"] = []


class Tensor:
    """An n-dimensional float64 array, optionally trainable."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of executed ops.

    Each entry is ``(output, operands, backward_rule)``; operands always precede
    their consumers, so a reverse walk is a valid topological order.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple, rule: Callable) -> None:
        if self.consumed:
            raise ContractError("cannot record on a tape that has already been walked backward")
        out._tape = self
        out.tape_id = len(self.entries)
        self.entries.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _needs(t) -> bool:
    """Whether a backward rule should bother computing a gradient for ``t``."""
    return isinstance(t, Tensor) and (t.requires_grad or t._tape is not None)


def _emit(data: np.ndarray, inputs: tuple, rule: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(isinstance(t, Tensor) and _tracked(t, tape) for t in inputs):
        tape.record(out, inputs, rule)
    return out


def _check_finite(kind: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        # sum propagates inf/nan; cheaper than isfinite().all() on large buffers
        if not math.isfinite(float(np.add.reduce(a, axis=None))) and not np.all(np.isfinite(a)):
            raise NumericError(f"{kind}: non-finite input")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    Raises:
        ContractError: if ``loss`` is not a scalar, was not recorded on a tape,
            or its tape has already been walked.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")
    if tape.consumed:
        raise ContractError("backward already called on this tape; gradients are not re-derived")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, rule in reversed(tape.entries[: loss.tape_id + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = rule(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not isinstance(t, Tensor):
                continue
            if t._tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif t.requires_grad:
                if gi.shape != t.data.shape:
                    gi = _unbroadcast(gi, t.data.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    tape.entries = []


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def rule(g):
        return (_unbroadcast(g, sa) if _needs(a) else None,
                _unbroadcast(g, sb) if _needs(b) else None)

    return _emit(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return (_unbroadcast(g, sa) if _needs(a) else None,
                _unbroadcast(-g, sb) if _needs(b) else None)

    return _emit(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return (_unbroadcast(g * bd, ad.shape) if _needs(a) else None,
                _unbroadcast(g * ad, bd.shape) if _needs(b) else None)

    return _emit(ad * bd, (a, b), rule)


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    pos = x.data > 0

    def rule(g):
        return (g * pos,)

    return _emit(np.where(pos, x.data, 0.0), (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x.data)
    xd = x.data
    ex = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def rule(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (x,), rule)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    _check_finite("log_sigmoid", x.data)
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    ex = np.exp(-np.abs(xd))
    sig_neg = np.where(xd >= 0, ex / (1.0 + ex), 1.0 / (1.0 + ex))

    def rule(g):
        return (g * sig_neg,)

    return _emit(out, (x,), rule)


def log(x: Tensor) -> Tensor:
    _check_finite("log", x.data)
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log: non-positive input")

    def rule(g):
        return (g / xd,)

    return _emit(np.log(xd), (x,), rule)


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.data)
    out = np.exp(x.data)

    def rule(g):
        return (g * out,)

    return _emit(out, (x,), rule)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was not clamped."""
    inside = (x.data >= lo) & (x.data <= hi)

    def rule(g):
        return (g * inside,)

    return _emit(np.clip(x.data, lo, hi), (x,), rule)


# ---------------------------------------------------------------- shape / reduce


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.sum(x.data, axis=axis), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def rule(g):
        return (g.reshape(old),)

    return _emit(x.data.reshape(shape), (x,), rule)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))

    def rule(g):
        return (g.transpose(inv),)

    return _emit(x.data.transpose(axes), (x,), rule)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis`` with a scatter-add backward."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit(np.take(x.data, idx, axis=axis), (x,), rule)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Select ``x[..., ids[...]]`` along the last axis; result has ``ids.shape``."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.shape[:-1] != ids.shape:
        raise DimensionError(f"gather_last: index shape {ids.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit(out, (x,), rule)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if bd.ndim == 2 and ad.ndim > 2:
            if _needs(a):
                ga = g @ bd.T
            if _needs(b):
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if _needs(a):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if _needs(b):
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), rule)


# ---------------------------------------------------------------- network ops


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    _check_finite("embedding_lookup", table.data)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: id out of range for table {table.shape}")
    shape = table.shape

    def rule(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _emit(table.data[ids], (table,), rule)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional elementwise affine terms."""
    _check_finite("layer_norm", x.data)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = xd.shape[-1]
    gd = gamma.data if gamma is not None else None
    out = xhat if gd is None else xhat * gd
    if beta is not None:
        out = out + beta.data

    def rule(g):
        gx = gg = gb = None
        if _needs(beta):
            gb = g.reshape(-1, d).sum(axis=0)
        if _needs(gamma):
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if gd is not None:
            g = g * gd
        if not _needs(x):
            return gx, gg, gb
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), rule)


def _log_softmax_array(xd: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    _check_finite("log_softmax", x.data)
    out = _log_softmax_array(x.data)
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), rule)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0.

    Every row must keep at least one entry.
    """
    _check_finite("softmax", x.data)
    p = np.where(mask, x.data, -np.inf) if mask is not None else x.data.copy()
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def rule(g):
        gx = g * p
        gx -= p * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return _emit(p, (x,), rule)


def softmax_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is 1.

    Args:
        logits: shape (..., V).
        targets: integer ids, shape logits.shape[:-1].
        mask: 0/1 weights, same shape as targets.

    Raises:
        DegenerateBatchError: if the mask selects no position.
    """
    _check_finite("softmax_cross_entropy", logits.data)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    count = mask.sum()
    if count <= 0:
        raise DegenerateBatchError("softmax_cross_entropy: loss mask is empty")
    logp = _log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def rule(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (mask / count)[..., None] * g,)

    return _emit(np.asarray(loss), (logits,), rule)


def sequence_logprobs(logits: Tensor, targets, mask) -> Tensor:
    """Per-row sum of masked target log-probabilities.

    Args:
        logits: shape (B, T, V).
        targets: integer ids (B, T).
        mask: 0/1 weights (B, T).

    Returns:
        Tensor of shape (B,).
    """
    _check_finite("sequence_logprobs", logits.data)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise DimensionError(
            f"sequence_logprobs: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    logp = _log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = (picked * mask).sum(axis=-1)

    def rule(g):
        w = mask * g[:, None]
        grad = -np.exp(logp) * w[..., None]
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) + w[..., None],
                          axis=-1)
        return (grad,)

    return _emit(out, (logits,), rule)


def token_logprobs(logits: Tensor, targets) -> Tensor:
    """Log-softmax of each row of ``logits`` (N, V) read off at ``targets`` (N,)."""
    _check_finite("token_logprobs", logits.data)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"token_logprobs: logits {logits.shape}, targets {targets.shape}")
    logp = _log_softmax_array(logits.data)
    rows = np.arange(targets.size)
    out = logp[rows, targets]

    def rule(g):
        grad = -np.exp(logp) * g[:, None]
        grad[rows, targets] += g
        return (grad,)

    return _emit(out, (logits,), rule)


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    """Sum entries of a 1-D tensor into ``n_segments`` buckets given by ``segments``."""
    segments = np.asarray(segments, dtype=np.int64)
    if x.ndim != 1 or segments.shape != x.shape:
        raise DimensionError(f"segment_sum: values {x.shape}, segments {segments.shape}")
    out = np.bincount(segments, weights=x.data, minlength=n_segments).astype(np.float64)

    def rule(g):
        return (g[segments],)

    return _emit(out, (x,), rule)


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Maximum elementwise relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a scalar tensor and be deterministic. The
    relative error of each element uses the denominator
    ``max(|analytic|, |numeric|, 1e-12)``; non-finite comparisons count as
    infinite error.
    """
    inputs = list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
            t.data = np.array(t.data, dtype=np.float64, order="C", copy=True)
        with Tape():
            out = f(*inputs)
            if out._tape is None:
                analytic = [np.zeros_like(t.data) for t in inputs]
            else:
                backward(out)
                analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        worst = 0.0
        with no_grad():
            for t, an in zip(inputs, analytic):
                flat = t.data.reshape(-1)
                an_flat = an.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f(*inputs).item()
                    flat[i] = orig - eps
                    fm = f(*inputs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    a = an_flat[i]
                    if not (math.isfinite(num) and math.isfinite(a)):
                        return math.inf
                    err = abs(a - num) / max(abs(a), abs(num), 1e-12)
                    worst = max(worst, err)
        return worst
    finally:
        for t, (rg, gr) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = gr


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
