"""Dense tensors with a small reverse-mode autodiff tape.

Only what the training loop needs is here: 2-D convolution, batch norm,
pooling, linear layers, a cross-entropy head and a handful of elementwise
ops. No general broadcasting; each op documents the shapes it accepts.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = {"float32": np.float32, "float64": np.float64}


class Tensor:
    """A dense array plus the bookkeeping for reverse-mode differentiation.

    The dtype is fixed at construction (float32 for training, float64 for
    gradient checks).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; operands must match shapes exactly (or be python scalars)
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        return add(self, -other) if isinstance(other, Tensor) else add_scalar(self, -other)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"precision mismatch: {dt} vs {t.dtype}")
    return dt


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward called twice on the same graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _result(a.data + a.dtype.type(s), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return mul_scalar(tensor_sum(a), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather ``a.ravel()[flat_index]`` as a 1-D tensor."""
    idx = np.asarray(flat_index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(int(np.prod(shape)), dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out.reshape(shape),)

    return _result(a.data.reshape(-1)[idx], (a,), bw)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at 0 is taken as 0."""
    norm = np.sqrt(np.sum(a.data * a.data))
    d = a.data

    def bw(g):
        if norm == 0:
            return (np.zeros_like(d),)
        return (g * d / norm,)

    return _result(np.asarray(norm, dtype=a.dtype), (a,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Floor-mode output length; raises when the window does not fit at all."""
    span = size + 2 * padding - kernel
    if span < 0:
        raise ValueError(f"empty conv output: size={size} kernel={kernel} stride={stride} padding={padding}")
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,C,H,W]`` with ``w[N,C,K,K]`` (no bias)."""
    _check_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    N, Cw, K, K2 = w.shape
    if K != K2:
        raise ValueError(f"conv2d: kernel must be square, got {K}x{K2}")
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    Ho = conv_output_size(H, K, stride, padding)
    Wo = conv_output_size(W, K, stride, padding)
    xp = _pad(x.data, padding)
    # windows: [B, C, Ho, Wo, K, K]
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * K * K)
    wmat = w.data.reshape(N, C * K * K)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, N).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, N)
        gw = (gmat.T @ cols).reshape(N, C, K, K) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, K, K)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for p in range(K):
                for q in range(K):
                    gxp[:, :, p : p + stride * Ho : stride, q : q + stride * Wo : stride] += gcols[
                        :, :, :, :, p, q
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gw

    return _result(out, (x, w), bw)


def masked_weight(w: Tensor, skeleton: Tensor) -> Tensor:
    """``w[N,C,K,K] * skeleton[K,K]`` with the skeleton broadcast over (N, C)."""
    _check_dtype(w, skeleton)
    if w.shape[2:] != skeleton.shape:
        raise ValueError(f"skeleton shape {skeleton.shape} does not match kernel {w.shape[2:]}")
    wd, sd = w.data, skeleton.data
    return _result(wd * sd, (w, skeleton), lambda g: (g * sd, np.einsum("ncpq,ncpq->pq", g, wd)))


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply channel ``c`` of ``x[B,C,H,W]`` by ``scale[c]``."""
    _check_dtype(x, scale)
    if scale.shape != (x.shape[1],):
        raise ValueError(f"channel_scale: scale shape {scale.shape} vs {x.shape[1]} channels")
    xd, sd = x.data, scale.data
    s4 = sd.reshape(1, -1, 1, 1)
    return _result(xd * s4, (x, scale), lambda g: (g * s4, np.einsum("bchw,bchw->c", g, xd)))


# ---------------------------------------------------------------------------
# normalization and pooling


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm over (B, H, W). Running stats are updated in place when training."""
    _check_dtype(x, gamma, beta)
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm2d: parameter shape mismatch for {C} channels")
    xd = x.data
    if training:
        m = B * H * W
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    gd = gamma.data.reshape(1, C, 1, 1)
    out = xhat * gd + beta.data.reshape(1, C, 1, 1)

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if training:
            m = B * H * W
            gx = (inv.reshape(1, C, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, C, 1, 1)
        return gx, ggamma, gbeta

    return _result(out.astype(xd.dtype), (x, gamma, beta), bw)


def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or size
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - size) // stride + 1
    Wo = (W + 2 * padding - size) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"maxpool2d: window {size} larger than padded input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (size, size), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        pr, pc = np.divmod(arg, size)
        rows = pr + (np.arange(Ho) * stride).reshape(1, 1, Ho, 1)
        cols = pc + (np.arange(Wo) * stride).reshape(1, 1, 1, Wo)
        bi = np.arange(B).reshape(B, 1, 1, 1)
        ci = np.arange(C).reshape(1, C, 1, 1)
        np.add.at(gxp, (bi, ci, rows, cols), g)
        return (gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp,)

    return _result(np.ascontiguousarray(out), (x,), bw)


def global_avgpool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    scale = x.dtype.type(1.0 / (H * W))
    return _result(
        x.data.mean(axis=(2, 3)).astype(x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] * scale, (B, C, H, W)).copy(),),
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x[B,in] @ w[out,in].T + b[out]``."""
    _check_dtype(x, w, b)
    if x.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"linear: shapes x={x.shape} w={w.shape} b={b.shape}")
    xd, wd = x.data, w.data
    return _result(xd @ wd.T + b.data, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits[B,classes]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1
        return (p * (g / B),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# reference path used by gradient checks


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad
