"""Dense float64 tensors, a reverse-mode gradient tape and a finite-difference checker.

Only the operations the losses and toy models need are provided. Every
operation computes its forward value with numpy and, when a :class:`GradTape`
is active and an input requires gradients, records a closure that maps the
output gradient to input gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    pass


class NonFinite(TensorError):
    pass


class ZeroRow(TensorError):
    pass


class DimMismatch(TensorError):
    pass


class BadTargets(TensorError):
    pass


class Tensor:
    """Immutable float64 array with an optional parameter name.

    ``requires_grad`` marks leaves (parameters) and anything computed from
    them while a tape is recording.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.isfinite(arr).all():
            raise NonFinite(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Fresh op outputs: no copy. A NaN or Inf anywhere makes the sum non-finite.
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFinite("non-finite values produced by an operation")
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data, t.requires_grad, t.name = arr, requires_grad, None
        return t

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimMismatch(f"item() needs a single element, tensor has dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data, check=False)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Entry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["GradTape"] = []


class GradTape:
    """Records differentiable operations executed inside ``with GradTape() as tape``.

    ``backward`` replays the record in exact reverse order and returns the
    accumulated gradient of every leaf that requires grad, keyed by name.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if loss.data.size != 1:
            raise DimMismatch("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.name is not None:
                    leaves[key] = inp
        out: dict[str, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if leaf.name in out:
                out[leaf.name] = out[leaf.name] + g
            else:
                out[leaf.name] = g
        return out


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs and bool(_TAPES))
    if out.requires_grad:
        _TAPES[-1].entries.append(_Entry(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _record(out, (a,), lambda g: (g * (out > 0),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimMismatch(f"matmul {a.dims} @ {b.dims}")
    return _record(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None))


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T, (a,), lambda g: (g.T,))


def permute(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _record(np.asarray(a.data.mean()), (a,),
                       lambda g: (np.full(a.shape, float(g) / n),))
    n = a.shape[axis]

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record(a.data.mean(axis=axis), (a,), back)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Row slice ``a[start:stop]``."""

    def back(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop], (a,), back)


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    items = [as_tensor(t) for t in items]
    return _record(np.array([t.item() for t in items]), items,
                   lambda g: [np.asarray(gi) for gi in g])


def grad_scale(a: Tensor, factor: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``factor``."""
    return _record(a.data, (a,), lambda g: (g * factor,))


def dropout_mask(a: Tensor, mask: np.ndarray, keep_scale: float) -> Tensor:
    m = mask * keep_scale
    return _record(a.data * m, (a,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# Row-wise building blocks of the losses


def _row_norms(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if (norms < 1e-30).any():
        raise ZeroRow(f"row {int(np.argmin(norms))} has zero norm")
    return norms


def l2_normalize_rows(m: Tensor) -> Tensor:
    x = m.data
    if x.ndim != 2:
        raise DimMismatch(f"expected a matrix, got dims {m.dims}")
    norms = _row_norms(x)[:, None]
    y = x / norms

    def back(g):
        return ((g - y * np.einsum("ij,ij->i", g, y)[:, None]) / norms,)

    return _record(y, (m,), back)


def l2_normalize_cols(m: Tensor) -> Tensor:
    return transpose(l2_normalize_rows(transpose(m)))


def cosine_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimMismatch(f"cosine_sim_matrix {a.dims} vs {b.dims}")
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(m: Tensor) -> Tensor:
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - np.einsum("ij,ij->i", g, p)[:, None]),)

    return _record(p, (m,), back)


def check_targets(targets: np.ndarray, tol: float = 1e-9) -> None:
    if (targets < 0).any():
        raise BadTargets("negative target mass")
    sums = targets.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise BadTargets(f"target row {int(bad[0])} sums to {sums[bad[0]]:.12g}")


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-sum_j t_ij log softmax(logits)_ij`` (fused log-softmax)."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimMismatch(f"logits {logits.dims} vs targets {list(t.shape)}")
    check_targets(t)
    logp = _log_softmax(logits.data)
    n = logits.shape[0]
    value = -np.einsum("ij,ij->", t, logp) / n

    def back(g):
        p = np.exp(logp)
        return (float(g) * (p * t.sum(axis=1, keepdims=True) - t) / n,)

    return _record(np.asarray(value), (logits,), back)


# ---------------------------------------------------------------------------
# Layers with fused backward


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-feature batch normalization with batch statistics.

    Returns ``(output, batch_mean, batch_var)``; the variance is biased.
    """
    xd = x.data
    mu = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    n = xd.shape[0]

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    out = _record(xhat * gamma.data + beta.data, (x, gamma, beta), back)
    return out, mu, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                    eps: float = 1e-5) -> Tensor:
    inv = 1.0 / np.sqrt(np.asarray(running_var) + eps)
    xhat = (x.data - running_mean) * inv

    def back(g):
        return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(xhat * gamma.data + beta.data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    rel_tol: float
    analytic: list[np.ndarray] = field(repr=False)
    numeric: list[np.ndarray] = field(repr=False)


def backward_grads(f: Callable[..., Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    leaves = [Tensor(p.data, requires_grad=True, name=f"__p{i}") for i, p in enumerate(params)]
    with GradTape() as tape:
        out = f(*leaves)
        grads = tape.backward(out)
    return [grads.get(f"__p{i}", np.zeros(p.shape)) for i, p in enumerate(params)]


def finite_diff_grad_check(f: Callable[..., Tensor], params, eps: float = 1e-5,
                           rel_tol: float = 1e-4, abs_tol: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of ``f(*params)`` with central differences.

    A coordinate whose absolute discrepancy is at most ``abs_tol`` counts as
    exact; otherwise its error is ``|a - n| / max(|a|, |n|)``.
    """
    if isinstance(params, Tensor):
        params = [params]
    params = [as_tensor(p) for p in params]
    analytic = backward_grads(f, params)
    numeric = []
    for k, p in enumerate(params):
        base = p.data.copy()
        num = np.zeros_like(base)
        flat = num.reshape(-1)
        for idx in range(base.size):
            vals = []
            for delta in (eps, -eps):
                moved = base.copy().reshape(-1)
                moved[idx] += delta
                args = list(params)
                args[k] = Tensor(moved.reshape(base.shape), check=False)
                v = f(*args).item()
                if not np.isfinite(v):
                    raise NonFinite(f"f evaluated to {v} during finite differences")
                vals.append(v)
            flat[idx] = (vals[0] - vals[1]) / (2 * eps)
        numeric.append(num)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        denom = np.maximum(np.abs(a), np.abs(n))
        err = np.where(diff <= abs_tol, 0.0, diff / np.where(denom > 0, denom, 1.0))
        if err.size:
            worst = max(worst, float(err.max()))
    return GradCheckReport(worst, worst <= rel_tol, rel_tol, analytic, numeric)


# ---------------------------------------------------------------------------
# TNSR file format

MAGIC = b"TNSR"


def write_tnsr(path, data) -> None:
    arr = np.asarray(data.data if isinstance(data, Tensor) else data)
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tnsr(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 4 * count:
        raise TensorError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return arr.astype(np.float64).reshape(dims)
