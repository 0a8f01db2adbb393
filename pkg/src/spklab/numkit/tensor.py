"""Dense float64 tensors with reverse-mode autodiff over a recorded tape.

Every differentiable kernel used by the encoders and losses lives here:
affine maps, ReLU, l2-normalize, temperature softmax, cosine similarity,
and the reductions needed to assemble batch losses.  Gradients accumulate
into leaf tensors (requires_grad=True) until explicitly reset, so a leaf
plus its .grad plays the role of a trainable parameter.

All public operations reject non-finite results immediately; a NaN produced
anywhere surfaces at the op that created it instead of three modules later.
"""

import numpy as np

from ..errors import (
    EmptyInput,
    NonFiniteLoss,
    NonFiniteValue,
    NonPositiveTemperature,
    ShapeMismatch,
    ZeroVector,
)

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager disabling tape recording (constant-only computation)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Reverse-accumulate d(self)/d(leaf) into leaf .grad fields."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar")
        topo = []
        seen = set()
        stack = [(self, 0)]
        while stack:
            node, state = stack.pop()
            if state == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, 1))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, 0))
            else:
                topo.append(node)
        for node in topo:
            if node is self:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
            else:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a scalar; use explicit ops for tensor/tensor")
        return mul(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zero_grads(params) -> None:
    for p in params.values():
        p.zero_grad()


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents) or t._backward is not None


def _node(data, parents, backward) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("operation produced NaN/Inf")
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward(out)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- arithmetic ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            a.grad += _unbroadcast(out.grad, a.data.shape)
            b.grad += _unbroadcast(out.grad, b.data.shape)
        return run

    return _node(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
            b.grad += _unbroadcast(out.grad * a.data, b.data.shape)
        return run

    return _node(a.data * b.data, (a, b), bw)


def matmul(a, w) -> Tensor:
    """a @ w with a of shape (B, n) or (n,) and w of shape (n, m)."""
    a, w = as_tensor(a), as_tensor(w)

    def bw(out):
        def run():
            g = out.grad
            if a.data.ndim == 1:
                if _tracked(a):
                    a.grad += w.data @ g
                if _tracked(w):
                    w.grad += np.outer(a.data, g)
            else:
                if _tracked(a):
                    a.grad += g @ w.data.T
                if _tracked(w):
                    w.grad += a.data.T @ g
        return run

    return _node(a.data @ w.data, (a, w), bw)


def transpose(x) -> Tensor:
    x = as_tensor(x)

    def bw(out):
        def run():
            x.grad += out.grad.T
        return run

    return _node(x.data.T, (x,), bw)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeMismatch(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")

    def bw(out):
        def run():
            a.grad += out.grad * b.data
            b.grad += out.grad * a.data
        return run

    return _node(a.data @ b.data, (a, b), bw)


# -- reductions ------------------------------------------------------------

def tsum(x) -> Tensor:
    x = as_tensor(x)

    def bw(out):
        def run():
            x.grad += out.grad
        return run

    return _node(x.data.sum(), (x,), bw)


def tmean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def bw(out):
        def run():
            x.grad += out.grad / n
        return run

    return _node(x.data.mean(), (x,), bw)


def sum_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)

    def bw(out):
        def run():
            x.grad += np.expand_dims(out.grad, axis)
        return run

    return _node(x.data.sum(axis=axis), (x,), bw)


def take_per_row(x, idx) -> Tensor:
    """out[i] = x[i, idx[i]] for a 2-D x."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])

    def bw(out):
        def run():
            np.add.at(x.grad, (rows, idx), out.grad)
        return run

    return _node(x.data[rows, idx], (x,), bw)


def scale_rows(x, v) -> Tensor:
    """Row-wise scaling: out[i, :] = x[i, :] * v[i]."""
    x, v = as_tensor(x), as_tensor(v)

    def bw(out):
        def run():
            x.grad += out.grad * v.data[:, None]
            v.grad += (out.grad * x.data).sum(axis=1)
        return run

    return _node(x.data * v.data[:, None], (x, v), bw)


# -- elementwise -----------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)

    def bw(out):
        def run():
            x.grad += out.grad * (x.data > 0.0)
        return run

    return _node(np.maximum(x.data, 0.0), (x,), bw)


def tlog(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)

    def bw(out):
        def run():
            x.grad += out.grad / x.data
        return run

    return _node(data, (x,), bw)


def texp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)

    def bw(out):
        def run():
            x.grad += out.grad * out.data
        return run

    return _node(data, (x,), bw)


def tsqrt(x) -> Tensor:
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bw(out):
        def run():
            x.grad += out.grad * 0.5 / out.data
        return run

    return _node(data, (x,), bw)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes wherever the input lies inside [lo, hi]."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def bw(out):
        def run():
            x.grad += out.grad * mask
        return run

    return _node(np.clip(x.data, lo, hi), (x,), bw)


# -- normalizations and similarities ---------------------------------------

def l2_normalize(v) -> Tensor:
    """Normalize to unit length along the last axis (row-wise for 2-D)."""
    v = as_tensor(v)
    norms = np.linalg.norm(v.data, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVector("cannot l2-normalize a zero vector")
    y = v.data / norms

    def bw(out):
        def run():
            g = out.grad
            proj = (g * out.data).sum(axis=-1, keepdims=True)
            v.grad += (g - out.data * proj) / norms
        return run

    return _node(y, (v,), bw)


def softmax_temp(logits, temperature: float) -> Tensor:
    """softmax(logits / temperature) along the last axis."""
    x = as_tensor(logits)
    if x.data.size == 0:
        raise EmptyInput("softmax_temp on empty input")
    if not temperature > 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            proj = (g * out.data).sum(axis=-1, keepdims=True)
            x.grad += out.data * (g - proj) / temperature
        return run

    return _node(y, (x,), bw)


def log_softmax_temp(logits, temperature: float) -> Tensor:
    x = as_tensor(logits)
    if x.data.size == 0:
        raise EmptyInput("log_softmax_temp on empty input")
    if not temperature > 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def bw(out):
        def run():
            g = out.grad
            x.grad += (g - sm * g.sum(axis=-1, keepdims=True)) / temperature
        return run

    return _node(y, (x,), bw)


def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeMismatch("cosine_similarity expects 1-D vectors")
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    c = float(a.data @ b.data) / (na * nb)

    def bw(out):
        def run():
            g = out.grad
            a.grad += g * (b.data / (na * nb) - c * a.data / (na * na))
            b.grad += g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return run

    return _node(c, (a, b), bw)


# -- gradient verification -------------------------------------------------

def grad_check(f, params: dict, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    f maps the params dict to a scalar Tensor.  Relative error per coordinate
    is |analytic - numeric| / max(1, |analytic|).  Resets grads as a side
    effect.
    """
    if not 1e-8 < epsilon < 1e-2:
        raise ValueError(f"epsilon {epsilon} outside (1e-8, 1e-2)")
    zero_grads(params)
    try:
        loss = f(params)
    except NonFiniteValue as exc:
        raise NonFiniteLoss(str(exc)) from exc
    if not np.isfinite(loss.data).all():
        raise NonFiniteLoss("loss is not finite")
    loss.backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}

    worst = 0.0
    with no_grad():
        for k, p in params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = f(params).item()
                flat[i] = orig - epsilon
                lo = f(params).item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * epsilon)
                a = analytic[k].reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a))
                worst = max(worst, err)
    zero_grads(params)
    return worst
