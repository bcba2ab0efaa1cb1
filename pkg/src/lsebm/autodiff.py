"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: operations executed inside a ``with Tape()``
block are recorded and a single ``backward`` traversal populates ``grad``
on every ``requires_grad`` leaf reachable from the loss.  Supported
primitives are exactly what small MLP training graphs need: affine maps,
elementwise tanh/relu/exp/log, softmax and log-sum-exp, add/sub/mul,
reductions, clamping and per-row indexing.  Non-finite values are hard
errors at kernel boundaries, never silently propagated.

A Tape and its Tensors are confined to one thread; distinct tapes on
distinct threads may share read-only parameter data.
"""

from __future__ import annotations

import numpy as np

from .errors import DetachedTensor, InvalidShape, NonFiniteInput

_TAPE_STACK: list["Tape"] = []


def _as_array(values) -> np.ndarray:
    # C-contiguous so flat in-place views (optimizers, finite differences)
    # always alias the stored values.
    return np.ascontiguousarray(values, dtype=np.float64)


def _check_finite(a: np.ndarray, what: str = "input"):
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"non-finite {what} encountered")


class Tensor:
    """Dense multi-dimensional float64 array, optionally on a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        _check_finite(self.data, "tensor value")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidShape("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise InvalidShape(
                f"gradient shape {g.shape} != value shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # Operator sugar; constants are wrapped as non-grad tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._entries: list[tuple] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        # requires_grad is captured at record time: freezing a parameter
        # during the forward pass keeps it frozen for the backward pass.
        flags = tuple(t.requires_grad for t in inputs)
        self._entries.append((out, inputs, flags, backward_fn))
        self._produced.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(out_data, "kernel output")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    tape = active_tape()
    tracked = any(
        t.requires_grad or (tape is not None and tape.produced(t)) for t in inputs
    )
    out.requires_grad = tracked
    if tape is not None and tracked:
        tape._record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate.
    """
    if loss.data.size != 1:
        raise InvalidShape("loss must be a scalar")
    if not tape.produced(loss):
        raise DetachedTensor("loss was not produced on this tape")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, flags, backward_fn in reversed(tape._entries):
        up = adjoints.pop(id(out), None)
        if up is None:
            continue
        for t, flag, g in zip(inputs, flags, backward_fn(up)):
            if g is None:
                continue
            if tape.produced(t):
                key = id(t)
                if key in adjoints:
                    adjoints[key] += g
                else:
                    adjoints[key] = np.array(g)
            elif flag:
                t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _broadcast_back(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an upstream gradient back to the (broadcast) input shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise InvalidShape(f"cannot reduce gradient {g.shape} to {shape}")
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _broadcast_back(g, a.data.shape), _broadcast_back(g, b.data.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _broadcast_back(g, a.data.shape), _broadcast_back(-g, b.data.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return (
            _broadcast_back(g * b.data, a.data.shape),
            _broadcast_back(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise InvalidShape("matmul expects 2-D operands")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(out, (a,), bwd)


def logsumexp(a: Tensor) -> Tensor:
    """log sum exp over the last axis, max-shifted so nothing overflows.

    1-D input gives a scalar; (B, K) input gives a (B,) vector.
    """
    if a.data.size == 0 or a.data.shape[-1] == 0:
        raise InvalidShape("logsumexp of an empty vector")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=-1)

    def bwd(g):
        return (np.expand_dims(g, -1) * (e / s),)

    return _make(out, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; shift-invariant by construction."""
    if a.data.size == 0 or a.data.shape[-1] == 0:
        raise InvalidShape("softmax of an empty vector")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the last axis: (B, H) -> (B,); (H,) -> scalar."""
    out = a.data.sum(axis=-1)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, -1), a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def sub_col(a: Tensor, v: Tensor) -> Tensor:
    """Subtract a per-row scalar from every column: (B, K) - (B, 1)."""
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[0],):
        raise InvalidShape("sub_col expects (B, K) and (B,)")
    out = a.data - v.data[:, None]

    def bwd(g):
        return g, -g.sum(axis=-1)

    return _make(out, (a, v), bwd)


def take_per_row(a: Tensor, idx) -> Tensor:
    """Pick one column per row: (B, K)[arange(B), idx] -> (B,)."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise InvalidShape("take_per_row expects (B, K) and B indices")
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _make(out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim not in (1, 2):
        raise InvalidShape("slice_cols expects a 1-D or 2-D tensor")
    out = a.data[..., start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Composite kernels
# ---------------------------------------------------------------------------

def kl_diag_gaussians(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis.

    1-D inputs give a scalar, (B, d) inputs a (B,) vector of per-row KLs.
    """
    if mu.data.shape != logvar.data.shape:
        raise InvalidShape("mu and logvar must have identical shapes")
    if mu.data.shape[-1] < 1:
        raise InvalidShape("KL of empty vectors")
    inner = exp(logvar) + mul(mu, mu) - logvar - _wrap(1.0)
    return 0.5 * sum_rows(inner)


def gaussian_log_prob_rows(x: np.ndarray, mean: Tensor, sigma2: float) -> Tensor:
    """Per-row log N(x; mean, sigma2 * I): (B, D) -> (B,)."""
    x = _as_array(x)
    if x.shape != mean.data.shape:
        raise InvalidShape("observation / mean shape mismatch")
    d = x.shape[-1]
    diff = sub(mean, _wrap(x))
    sq = sum_rows(mul(diff, diff))
    const = -0.5 * d * np.log(2.0 * np.pi * sigma2)
    return _wrap(const) + (-0.5 / sigma2) * sq


def multinomial_log_prob_rows(counts: np.ndarray, logits: Tensor) -> Tensor:
    """Per-row unigram log-likelihood sum_w n_w log softmax(logits)_w.

    The count-multinomial coefficient is constant in the logits and omitted.
    """
    counts = _as_array(counts)
    if counts.shape != logits.data.shape:
        raise InvalidShape("counts / logits shape mismatch")
    from .errors import InvalidInput

    if np.any(counts < 0):
        raise InvalidInput("negative counts")
    logp = sub_col(logits, logsumexp(logits))
    return sum_rows(mul(_wrap(counts), logp))
