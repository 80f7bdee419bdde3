"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps a 2-D (or scalar)
float64 array, differentiable operations are plain functions that record a
backward closure on the active ``Tape``, and ``Tape.backward`` replays those
closures in exact reverse order of forward recording.  Because the tape is
an append-only log of the forward pass, reverse replay is automatically a
valid topological order — no graph search needed.

Conventions:

* everything is float64; inputs are coerced on construction,
* gradients accumulate additively (``+=``), so the backward of a sum of
  losses equals the sum of the individual backward passes,
* a tensor's ``grad`` is ``None`` until backward first writes to it; the
  optimizer clears it back to ``None`` after consuming it,
* with no tape open, the same functions run pure forward (inference mode).
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

from .errors import (
    ConfigurationError,
    MissingGradientError,
    NumericalError,
    ShapeMismatchError,
    ValidationError,
)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an additive gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        """A view of the same values with no gradient connection."""
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {what}")
        return self

    # Small amount of sugar; the library itself mostly calls the functions
    # below directly so the op set stays easy to audit.
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor; uniqueness of names is enforced by the registry."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class ParameterRegistry:
    """Ordered name -> Parameter map; also owns the optimizer's velocity state."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ConfigurationError(f"duplicate parameter name: {param.name!r}")
        self._params[param.name] = param
        return param

    def extend(self, params) -> None:
        for p in params:
            self.add(p)

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def velocity_for(self, param: Parameter) -> np.ndarray:
        v = self._velocity.get(param.name)
        if v is None:
            v = np.zeros_like(param.data)
            self._velocity[param.name] = v
        return v

    def clear_grads(self) -> None:
        for p in self._params.values():
            p.grad = None


class Tape:
    """Append-only record of one forward pass.

    Usage::

        with Tape() as tape:
            loss = ...forward ops...
        tape.backward(loss)

    Backward visits the recorded nodes in exact reverse order; each node's
    closure reads its output gradient and accumulates into its inputs.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"

    def record(self, out: Tensor, backward) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if not loss.requires_grad:
            raise MissingGradientError(
                "backward target does not require grad (was it computed on this tape?)"
            )
        if loss.data.size != 1:
            raise ShapeMismatchError(
                f"backward target must be scalar, got shape {loss.data.shape}"
            )
        loss.accumulate_grad(np.ones_like(loss.data))
        # Each node's output gradient is consumed exactly once: reverse order
        # guarantees all consumers have already contributed.  Clearing it here
        # keeps leaves/parameters as the only persistent accumulators, so a
        # second backward on the same tape adds exactly its own contribution.
        for out, fn in reversed(self._nodes):
            g = out.grad
            if g is not None:
                out.grad = None
                fn(g)


def _recording(*inputs: Tensor) -> "Tape | None":
    """The active tape, if any input wants gradients; else None."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        return tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add: {a.data.shape} + {b.data.shape}") from exc
    out = Tensor(out_data)
    tape = _recording(a, b)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, b=b):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.data.shape))

        tape.record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"mul: {a.data.shape} * {b.data.shape}") from exc
    out = Tensor(out_data)
    tape = _recording(a, b)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, b=b):
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

        tape.record(out, backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, s=s):
            a.accumulate_grad(g * s)

        tape.record(out, backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = _recording(a, b)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, b=b):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        tape.record(out, backward)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a):
            a.accumulate_grad(g.T)

        tape.record(out, backward)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeMismatchError(
            f"slice_cols: [{start}:{stop}] of shape {a.data.shape}"
        )
    out = Tensor(a.data[:, start:stop])
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, start=start, stop=stop):
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a.accumulate_grad(full)

        tape.record(out, backward)
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat_cols: empty list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    tape = _recording(*parts)
    if tape is not None:
        out.requires_grad = True
        widths = [p.data.shape[1] for p in parts]

        def backward(g, parts=parts, widths=widths):
            j = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p.accumulate_grad(g[:, j : j + w])
                j += w

        tape.record(out, backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a):
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

        tape.record(out, backward)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, n=n):
            a.accumulate_grad(np.broadcast_to(g / n, a.data.shape).copy())

        tape.record(out, backward)
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, x=x, cdf=cdf):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            a.accumulate_grad(g * (cdf + x * pdf))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization / regularization / losses


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects 2-D input, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, s=s):
            dot = (g * s).sum(axis=1, keepdims=True)
            a.accumulate_grad(s * (g - dot))

        tape.record(out, backward)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by a learned affine transform."""
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"layer_norm expects 2-D input, got {x.data.shape}")
    n = x.data.shape[1]
    if n < 2:
        raise ConfigurationError(f"layer_norm needs at least 2 features per row, got {n}")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeMismatchError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature count {n}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    tape = _recording(x, gain, bias)
    if tape is not None:
        out.requires_grad = True

        def backward(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, n=n):
            if gain.requires_grad:
                gain.accumulate_grad((g * xhat).sum(axis=0))
            if bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

        tape.record(out, backward)
    return out


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1/(1-rate) at train time."""
    rate = float(rate)
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training:
        return a
    keep = rng.random(a.data.shape) >= rate
    m = keep / (1.0 - rate)
    out = Tensor(a.data * m)
    tape = _recording(a)
    if tape is not None:
        out.requires_grad = True

        def backward(g, a=a, m=m):
            a.accumulate_grad(g * m)

        tape.record(out, backward)
    return out


def cross_entropy_soft(logits: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits)).

    ``target`` rows must be probability distributions: non-negative, each
    summing to 1 within 1e-9.  No gradient flows into the target.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if logits.data.ndim != 2 or t.shape != logits.data.shape:
        raise ShapeMismatchError(
            f"cross_entropy_soft: logits {logits.data.shape} vs target {t.shape}"
        )
    if np.any(t < 0.0):
        raise ValidationError("cross_entropy_soft: target has negative entries")
    row_sums = t.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ValidationError(
            "cross_entropy_soft: target rows must sum to 1 within 1e-9, "
            f"worst deviation {np.max(np.abs(row_sums - 1.0)):.3e}"
        )
    b = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    out = Tensor(-(t * logp).sum(axis=1).mean())
    tape = _recording(logits)
    if tape is not None:
        out.requires_grad = True
        p = e / denom

        def backward(g, logits=logits, p=p, t=t, b=b):
            logits.accumulate_grad((p - t) * (g / b))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    registry: ParameterRegistry,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """Momentum SGD over every parameter in the registry.

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    Gradients must have been populated by a backward pass; they are cleared
    after the update so stale gradients can never leak into the next step.
    """
    for p in registry:
        if p.grad is None:
            raise MissingGradientError(
                f"sgd_step: parameter {p.name!r} has no gradient (backward not run?)"
            )
        v = registry.velocity_for(p)
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= lr * v
        p.grad = None
