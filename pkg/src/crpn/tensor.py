"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass: each op returns a new Tensor
holding references to its parents and a closure that routes the incoming
gradient to them. ``backward`` walks the graph in reverse topological
order, accumulating into ``.grad`` (call ``zero_grad`` between steps).
Graphs are released by ordinary garbage collection once the root goes out
of scope.

Conventions that matter for gradient checking:
  - ReLU uses subgradient 0 at exactly 0.
  - clamp_min passes gradient only strictly above the clamp value.
Finite-difference probes must therefore avoid sitting on those kinks.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += grad

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        The root must be a single-element tensor. Repeated calls (on fresh
        graphs over the same leaves) accumulate until grads are zeroed.
        """
        if self.values.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {self.shape}")
        order = _topo_order(self)
        self._accumulate(np.ones_like(self.values))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # arithmetic sugar used when composing losses
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return scale(self, scalar)

    __rmul__ = __mul__


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order; deterministic for a fixed graph."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_node(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Assemble an op result; hook for custom differentiable ops.

    ``backward_fn(grad)`` must accumulate into each requires_grad parent
    via ``parent._accumulate``.
    """
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def param(values, rng=None, shape=None, std: float = 0.01) -> Tensor:
    """Trainable tensor. With rng+shape, draws zero-mean Gaussian entries."""
    if rng is not None:
        if shape is None:
            raise ValueError("param(rng=...) needs an explicit shape")
        n = int(np.prod(shape))
        values = np.array(rng.normals(n, 0.0, std), dtype=np.float64).reshape(shape)
    return Tensor(values, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward_fn(grad):
        if a.requires_grad:
            a._accumulate(grad)
        if b.requires_grad:
            b._accumulate(grad)

    return make_node(a.values + b.values, (a, b), backward_fn)


def add_scaled(a: Tensor, wa: float, b: Tensor, wb: float) -> Tensor:
    """wa*a + wb*b elementwise; the fusion primitive for both chains."""
    if a.shape != b.shape:
        raise ValueError(f"add_scaled shape mismatch: {a.shape} vs {b.shape}")

    def backward_fn(grad):
        if a.requires_grad:
            a._accumulate(wa * grad)
        if b.requires_grad:
            b._accumulate(wb * grad)

    return make_node(wa * a.values + wb * b.values, (a, b), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    def backward_fn(grad):
        x._accumulate(s * grad)

    return make_node(s * x.values, (x,), backward_fn)


def mul_const(x: Tensor, weights: np.ndarray) -> Tensor:
    """Elementwise product with a constant array (no grad through weights)."""
    w = np.asarray(weights, dtype=np.float64)

    def backward_fn(grad):
        x._accumulate(w * grad)

    return make_node(x.values * w, (x,), backward_fn)


def sub_const(x: Tensor, offset: np.ndarray) -> Tensor:
    def backward_fn(grad):
        x._accumulate(grad)

    return make_node(x.values - np.asarray(offset, dtype=np.float64), (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward_fn(grad):
        x._accumulate(grad * mask)

    return make_node(np.maximum(x.values, 0.0), (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    def backward_fn(grad):
        x._accumulate(grad / x.values)

    return make_node(np.log(x.values), (x,), backward_fn)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.values > floor

    def backward_fn(grad):
        x._accumulate(grad * mask)

    return make_node(np.maximum(x.values, floor), (x,), backward_fn)


def tsum(x: Tensor) -> Tensor:
    def backward_fn(grad):
        x._accumulate(np.full_like(x.values, float(grad)))

    return make_node(np.asarray(x.values.sum()), (x,), backward_fn)


def tmean(x: Tensor) -> Tensor:
    n = x.values.size

    def backward_fn(grad):
        x._accumulate(np.full_like(x.values, float(grad) / n))

    return make_node(np.asarray(x.values.mean()), (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward_fn(grad):
        x._accumulate(grad.reshape(x.values.shape))

    return make_node(x.values.reshape(shape), (x,), backward_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(grad):
        x._accumulate(grad.transpose(inverse))

    return make_node(np.ascontiguousarray(x.values.transpose(axes)), (x,), backward_fn)


def take_rows(x: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)

    def backward_fn(grad):
        gx = np.zeros_like(x.values)
        np.add.at(gx, rows, grad)
        x._accumulate(gx)

    return make_node(x.values[rows], (x,), backward_fn)


def take_pairs(x: Tensor, rows, cols) -> Tensor:
    """x[rows[i], cols[i]] for each i; used to pick per-sample class scores."""
    if x.values.ndim != 2:
        raise ValueError(f"take_pairs expects a 2-d tensor, got shape {x.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward_fn(grad):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (rows, cols), grad)
        x._accumulate(gx)

    return make_node(x.values[rows, cols], (x,), backward_fn)


def smooth_l1_elem(x: Tensor) -> Tensor:
    """0.5*x^2 inside |x|<1, |x|-0.5 outside, elementwise."""
    v = x.values
    inner = np.abs(v) < 1.0

    def backward_fn(grad):
        x._accumulate(grad * np.where(inner, v, np.sign(v)))

    return make_node(np.where(inner, 0.5 * v * v, np.abs(v) - 0.5), (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if x.shape[-1] < 2:
        raise ValueError(f"softmax needs at least 2 classes, got {x.shape[-1]}")
    if not np.all(np.isfinite(x.values)):
        raise ValueError("softmax input contains non-finite values")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(grad):
        dot = (grad * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (grad - dot))

    return make_node(y, (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.values.ndim != 2 or weight.values.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")

    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(grad @ weight.values.T)
        if weight.requires_grad:
            weight._accumulate(x.values.T @ grad)
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=0))

    return make_node(x.values @ weight.values + bias.values, (x, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# convolution and pooling


@lru_cache(maxsize=None)
def _conv_indices(channels: int, kh: int, kw: int, out_h: int, out_w: int, stride: int):
    """Gather indices mapping a padded input to im2col columns."""
    c_idx = np.repeat(np.arange(channels), kh * kw)
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    i_idx = np.tile(ky.reshape(-1), channels)[:, None] + (stride * oy).reshape(-1)[None, :]
    j_idx = np.tile(kx.reshape(-1), channels)[:, None] + (stride * ox).reshape(-1)[None, :]
    c_idx = np.broadcast_to(c_idx[:, None], i_idx.shape)
    return c_idx, i_idx, j_idx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.values.ndim != 4 or kernel.values.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: kernel {kernel.shape} vs input {x.shape}")
    if bias.shape != (k,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel count {k}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.values
    c_idx, i_idx, j_idx = _conv_indices(c, kh, kw, out_h, out_w, stride)
    cols = xp[:, c_idx, i_idx, j_idx]  # [n, c*kh*kw, out_h*out_w]
    w_mat = kernel.values.reshape(k, -1)
    out = np.matmul(w_mat, cols)  # [n, k, out_h*out_w]
    out += bias.values[None, :, None]
    out = out.reshape(n, k, out_h, out_w)

    def backward_fn(grad):
        g = grad.reshape(n, k, -1)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        if kernel.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(gw.reshape(kernel.shape))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (np.arange(n)[:, None, None], c_idx, i_idx, j_idx), dcols)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return make_node(out, (x, kernel, bias), backward_fn)


def avgpool2d(x: Tensor, size: int) -> Tensor:
    if x.values.ndim != 4:
        raise ValueError(f"avgpool2d expects a 4-d tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avgpool2d size {size} does not divide spatial dims of {x.shape}")
    pooled = x.values.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def backward_fn(grad):
        g = np.repeat(np.repeat(grad, size, axis=2), size, axis=3) / (size * size)
        x._accumulate(g)

    return make_node(pooled, (x,), backward_fn)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(f, point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"gradcheck eps must lie in [1e-7, 1e-3], got {eps}")
    x = Tensor(point.values.copy(), requires_grad=True)
    out = f(x)
    if out.values.size != 1:
        raise ValueError("gradcheck target function must be scalar-valued")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.values)

    flat = x.values.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(Tensor(x.values)).item()
        flat[i] = orig - eps
        f_minus = f(Tensor(x.values)).item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(err.max()) if err.size else 0.0
