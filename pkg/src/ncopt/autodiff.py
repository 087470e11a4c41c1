"""Dense tensors with tape-based reverse-mode differentiation.

Only the operation vocabulary the models need is provided.  Operations run
eagerly on numpy arrays; when a :class:`Tape` is active and at least one input
requires a gradient, the operation is appended to the tape together with a
closure computing the vector-Jacobian product.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, -2.0], requires_grad=True, name="x")
    ...     y = sum_(relu(x))
    >>> backward(tape, y)["x"]
    array([1., 0.], dtype=float32)
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def dtype_scope(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors."""
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        elif isinstance(data, (list, tuple, float, int)):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of executed operations.

    Operations enter the tape in execution order, so every node follows the
    nodes producing its inputs.  A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _check(arr: np.ndarray, kind: str, allow_neg_inf: bool = False) -> None:
    if np.isfinite(arr).all():
        return
    if allow_neg_inf and not np.isnan(arr).any() and not np.isposinf(arr).any():
        return
    raise FloatingPointError(f"non-finite output from {kind}")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, kind: str,
          allow_neg_inf: bool = False) -> Tensor:
    _check(data, kind, allow_neg_inf)
    needs = _TAPES and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=bool(needs))
    if needs:
        _TAPES[-1].nodes.append(_Node(out, tuple(parents), vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise and linear algebra
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    return _make(out, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product following numpy broadcasting (both inputs >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires inputs with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (None if ga is None else _unbroadcast(ga, a.shape), gb)

    return _make(out, (a, b), vjp, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax; entries equal to -inf receive probability exactly zero."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    with np.errstate(divide="ignore"):
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax", allow_neg_inf=True)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; those entries get zero gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g),), "masked_fill", allow_neg_inf=True)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` along the first axis; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather_rows index out of range")
    out = x.data[index]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(out, (x,), vjp, "gather_rows")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select one entry along the last axis per leading position."""
    index = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), vjp, "pick", allow_neg_inf=True)


# ----------------------------------------------------------------------------
# segment aggregation
# ----------------------------------------------------------------------------

class Segments:
    """Precomputed layout mapping E rows onto N segments.

    Rows of a segment are visited in ascending row order, which fixes the
    summation order of every reduction.
    """

    def __init__(self, ids: np.ndarray, num_segments: int):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise IndexError("segment index out of range")
        self.ids = ids
        self.num_segments = int(num_segments)
        self.counts = np.bincount(ids, minlength=num_segments)
        self.width = int(self.counts.max()) if ids.size else 0
        order = np.argsort(ids, kind="stable")
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        pos = np.empty_like(ids)
        pos[order] = np.arange(ids.size) - starts[ids[order]]
        self.order, self.pos = order, pos
        self.dense = bool(np.all(self.counts == self.width)) and np.array_equal(order, np.arange(ids.size))

    def __len__(self) -> int:
        return self.ids.size

    def to_padded(self, values: np.ndarray, fill: float) -> np.ndarray:
        n, w = self.num_segments, self.width
        if self.dense:
            return values.reshape((n, w) + values.shape[1:])
        out = np.full((n, w) + values.shape[1:], fill, dtype=values.dtype)
        out[self.ids, self.pos] = values
        return out

    def from_padded(self, padded: np.ndarray) -> np.ndarray:
        if self.dense:
            return padded.reshape((-1,) + padded.shape[2:])
        return padded[self.ids, self.pos]


def segment_aggregate(values: Tensor, segments: Segments, mode: str = "sum") -> Tensor:
    """Reduce rows of ``values`` (E, d) into (N, d) by segment.

    ``max`` routes the gradient to the lowest-index maximiser.  ``mean`` and
    ``max`` reject empty segments; ``sum`` of an empty segment is zero.
    """
    if values.shape[0] != len(segments):
        raise ValueError("values and segments disagree on the number of rows")
    if mode not in ("sum", "mean", "max"):
        raise ValueError(f"unknown aggregation {mode!r}")
    if mode != "sum" and np.any(segments.counts == 0):
        raise ValueError(f"empty segment under {mode} aggregation")
    n, w = segments.num_segments, segments.width
    feat = values.shape[1:]
    if w == 0:
        return _make(np.zeros((n,) + feat, values.dtype), (values,),
                     lambda g: (np.zeros(values.shape, g.dtype),), "segment_aggregate")

    if mode == "max":
        padded = segments.to_padded(values.data, -np.inf)
        acc = padded[:, 0].copy()
        arg = np.zeros(acc.shape, dtype=np.int64)
        for s in range(1, w):
            better = padded[:, s] > acc
            acc = np.where(better, padded[:, s], acc)
            arg[better] = s

        def vjp(g):
            gp = np.zeros((n, w) + feat, dtype=g.dtype)
            np.put_along_axis(gp, arg[:, None], g[:, None], axis=1)
            return (segments.from_padded(gp),)

        return _make(acc, (values,), vjp, "segment_aggregate")

    padded = segments.to_padded(values.data, 0.0)
    acc = padded[:, 0].copy()
    for s in range(1, w):
        acc = acc + padded[:, s]
    if mode == "sum":
        return _make(acc, (values,), lambda g: (g[segments.ids],), "segment_aggregate")
    inv = (1.0 / segments.counts).astype(values.dtype).reshape((n,) + (1,) * len(feat))
    return _make(acc * inv, (values,), lambda g: ((g * inv)[segments.ids],), "segment_aggregate")


# ----------------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------------

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "batch-stats",
              running: dict | None = None, training: bool = True,
              momentum: float = BN_MOMENTUM, eps: float = NORM_EPS) -> Tensor:
    """Normalize each feature (last axis) across all other axes.

    ``batch-stats`` always uses the current batch.  ``learned`` uses the batch
    during training while updating ``running['mean'|'var']`` in place, and the
    running estimates at evaluation.
    """
    if mode not in ("batch-stats", "learned"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    d = x.shape[-1]
    flat = x.data.reshape(-1, d)
    use_batch = mode == "batch-stats" or training
    if use_batch:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        if mode == "learned" and running is not None:
            unbiased = var * flat.shape[0] / max(flat.shape[0] - 1, 1)
            running["mean"] = ((1 - momentum) * running["mean"] + momentum * mu).astype(running["mean"].dtype)
            running["var"] = ((1 - momentum) * running["var"] + momentum * unbiased).astype(running["var"].dtype)
    else:
        mu, var = running["mean"].astype(x.dtype), running["var"].astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (flat - mu) * invstd
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def vjp(g):
        g2 = g.reshape(-1, d)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if use_batch:
            m = flat.shape[0]
            dx = invstd / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * invstd
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp, "batchnorm")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the feature (last) axis only."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * invstd
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = invstd / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                           - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), vjp, "layernorm")


# ----------------------------------------------------------------------------
# dispatch, backward, gradient checking
# ----------------------------------------------------------------------------

_KINDS = {
    "matmul": matmul, "add": add, "scale": scale, "concat": concat, "relu": relu,
    "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax, "log-softmax": log_softmax,
    "elementwise-multiply": mul, "gather-rows": gather_rows,
    "segment-aggregate": segment_aggregate, "batchnorm": batchnorm,
    "layernorm": layernorm, "masked-fill": masked_fill,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Run an operation by its vocabulary name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def backward(tape: Tape, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(.) back through ``tape``.

    Returns gradients keyed by tensor name for every named leaf reached.  When
    ``params`` is given, the map holds exactly its keys (zeros for parameters
    the loss does not depend on).
    """
    if loss.size != 1:
        raise ValueError("backward needs a scalar loss")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a backward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
            leaves[key] = parent
    tape.nodes = []
    result: dict[str, np.ndarray] = {}
    if id(loss) in grads and loss.name:
        result[loss.name] = grads[id(loss)]
    for key, g in grads.items():
        t = leaves.get(key)
        if t is not None and t.name is not None:
            result[t.name] = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if params is not None:
        result = {k: result.get(k, np.zeros(p.shape, dtype=p.dtype)) for k, p in params.items()}
    return result


def grad_check(fragment: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``fragment`` maps the parameter dict to a scalar and must be deterministic
    and built in double precision.  ``max_entries`` subsamples entries per
    parameter to bound the cost on large tensors.
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
    with no_grad():
        f0 = fragment(params).item()
        if fragment(params).item() != f0:
            raise ValueError("fragment is not deterministic")
    for name, p in params.items():
        p.requires_grad = True
        p.name = name
    with Tape() as tape:
        loss = fragment(params)
    analytic = backward(tape, loss, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            ga = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = fragment(params).item()
                flat[i] = orig - eps
                down = fragment(params).item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst
