"""Dense float64 tensors with reverse-mode gradients.

Only the handful of operations the models need are supported. Every op builds
a node holding a closure that maps the output gradient to gradients for its
parents; ``Tensor.backward`` walks the graph in reverse topological order and
accumulates into the ``grad`` buffers of leaf tensors that require gradients.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an op's domain."""


class EvaluationError(RuntimeError):
    """Raised when a function under gradient check is not finite."""


class Tensor:
    """An n-d float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(Tensor):
    """A named learnable tensor; names look like ``vae.0.enc1.W``."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or not t.is_leaf


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; outputs are plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create an op output; constant-only inputs yield a constant."""
    if not _grad_enabled or not any(_needs_grad(p) for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same_shape(op: str, *tensors: Tensor) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) > 1:
        raise DimensionError(f"{op}: shapes differ: " + ", ".join(str(t.shape) for t in tensors))


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: input must be positive")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * sig,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    mask = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# reductions and reshaping ----------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along axis 0."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _node(x.data[start:stop], (x,), backward)


def permute_last(x: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder the last axis: ``out[..., i] = x[..., perm[i]]``."""
    inverse = np.argsort(perm)
    return _node(x.data[..., perm], (x,), lambda g: (g[..., inverse],))


# products ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward)


def left_matmul(A: np.ndarray, x: Tensor) -> Tensor:
    """``A @ x`` for a constant matrix ``A`` and 2-d tensor ``x``."""
    A = np.asarray(A, dtype=np.float64)
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"left_matmul: cannot multiply {A.shape} by {x.shape}")
    return _node(A @ x.data, (x,), lambda g: (A.T @ g,))


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without ellipses or repeated indices in one operand."""
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    for s in (sa, sb):
        missing = set(s) - set(out) - set(sb if s is sa else sa)
        if missing:
            raise DimensionError(f"einsum2: index {sorted(missing)} summed within one operand")

    def backward(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, b.data),
                np.einsum(f"{out},{sa}->{sb}", g, a.data))

    return _node(np.einsum(spec, a.data, b.data), (a, b), backward)


# model building blocks -----------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0] or W.data.ndim != 2 or b.shape != (W.shape[1],):
        raise DimensionError(f"linear: x{x.shape} W{W.shape} b{b.shape} are incompatible")
    return add(matmul(x, W), b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    c = x.shape[-1]
    if c < 1 or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    if eps <= 0:
        raise DomainError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, c).sum(axis=0)
        gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return _node(out, (x, gamma, beta), backward)


def reparameterize(mu: Tensor, logvar: Tensor, eps_noise) -> Tensor:
    eps_noise = as_tensor(eps_noise)
    _check_same_shape("reparameterize", mu, logvar, eps_noise)
    return add(mu, mul(exp(mul(logvar, 0.5)), eps_noise.data))


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over every element."""
    _check_same_shape("gaussian_kl", mu, logvar)
    terms = sub(add(square(mu), exp(logvar)), add(logvar, 1.0))
    return mul(sum_all(terms), 0.5)


def recon_nll(x_hat: Tensor, x, kind: str = "gaussian") -> Tensor:
    """Negative log-likelihood of ``x`` under the decoder output, summed.

    ``gaussian`` is unit-variance with constants dropped (half squared error);
    ``bernoulli`` treats ``x_hat`` as logits.
    """
    x = as_tensor(x)
    _check_same_shape("recon_nll", x_hat, x)
    if kind == "gaussian":
        return mul(sum_all(square(sub(x_hat, x))), 0.5)
    if kind == "bernoulli":
        if np.any(x.data < 0) or np.any(x.data > 1):
            raise DomainError("recon_nll: bernoulli targets must lie in [0, 1]")
        # softplus(l) - x*l is the stable form of the logistic cross-entropy
        return sum_all(sub(softplus(x_hat), mul(x_hat, x.data)))
    raise DomainError(f"recon_nll: unknown likelihood kind {kind!r}")


# gradient checking ---------------------------------------------------------


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
               eps: float = 1e-6, floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` receives fresh leaf tensors built from ``inputs`` and must return a
    scalar tensor. Relative error per element is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off on
    vanishing gradients from dominating. The maximum over elements is returned.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise DomainError(f"grad_check: eps={eps} outside [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def evaluate(values) -> float:
        out = f({k: Tensor(v) for k, v in values.items()})
        val = float(as_tensor(out).data)
        if not math.isfinite(val):
            raise EvaluationError("grad_check: function value is not finite")
        return val

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    out = as_tensor(f(leaves))
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("grad_check: function value is not finite")
    if _needs_grad(out):
        out.backward()

    worst = 0.0
    for name, value in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(base)
            flat[i] = orig - eps
            lo = evaluate(base)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
