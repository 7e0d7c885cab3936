"""Dense float32 tensors with reverse-mode automatic differentiation.

Small by design: only the operations a sequential CNN needs (conv, relu,
pooling, linear, softmax cross-entropy, elementwise add/mul, per-channel
scaling) plus SGD with momentum and weight decay. No broadcasting beyond
bias-add and channel scaling; every other shape must match exactly.

Gradients accumulate additively into ``Tensor.grad`` until explicitly
zeroed, so multi-batch gradient estimates come for free.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar loss.

    Grads add onto whatever is already stored, matching the accumulate-
    until-zeroed contract.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    # reverse topological order; each node's local grad lives in node.grad
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()
    # interior nodes are transient; free their buffers but keep leaf grads
    for node in reversed(topo):
        if node._backward is not None:
            node.grad = None
            node._parents = ()
            node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def back():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    out = _result(out_data, (a, b), back)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def back():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    out = _result(out_data, (a, b), back)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(dtype=np.float32), dtype=np.float32)

    def back():
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad, x.data.shape))

    out = _result(out_data, (x,), back)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def back():
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    out = _result(out_data, (x,), back)
    return out


# ---------------------------------------------------------------------------
# conv / pool / linear


def _conv_out_extent(extent: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    span = extent + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d output {axis}-extent ({extent} + 2*{padding} - {kernel}) / {stride} + 1 "
            "is not a positive integer"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, kh, stride, padding, "H")
    wo = _conv_out_extent(w, kw, stride, padding, "W")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    dx_pad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float32)
    dview = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx_pad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dview[:, :, i, j]
    if padding:
        return dx_pad[:, :, padding:-padding, padding:-padding]
    return dx_pad


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,Kh,Kw] filters plus bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [Cout,Cin,Kh,Kw], got {weight.data.shape}")
    n, cin, h, w = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    if cin != wcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.data.shape}")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    out_data += bias.data[None, :, None, None]

    def back():
        g = out.grad.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            dw = np.einsum("nol,nkl->ok", g, cols, dtype=np.float32)
            weight.accumulate_grad(dw.reshape(weight.data.shape))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            x.accumulate_grad(_col2im(dcols, x.data.shape, kh, kw, stride, padding, ho, wo))

    out = _result(out_data, (x, weight, bias), back)
    return out


def maxpool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    if stride is None:
        stride = size
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    for extent, axis in ((h, "H"), (w, "W")):
        span = extent - size
        if span < 0 or span % stride != 0:
            raise ShapeError(
                f"maxpool2d {axis}-extent ({extent} - {size}) / {stride} + 1 is not a positive integer"
            )
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    sn, sc, sh, sw = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, ho, wo, size, size),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = np.ascontiguousarray(windows).reshape(n, c, ho, wo, size * size)
    argmax = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def back():
        dx = np.zeros_like(x.data)
        rows = np.arange(ho)[None, None, :, None] * stride + argmax // size
        cols_ = np.arange(wo)[None, None, None, :] * stride + argmax % size
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn, cc, rows, cols_), out.grad)
        x.accumulate_grad(dx)

    out = _result(out_data, (x,), back)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3), dtype=np.float32)

    def back():
        g = out.grad[:, :, None, None] / np.float32(h * w)
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).astype(np.float32))

    out = _result(out_data, (x,), back)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of [N,F] by weight [out,F] and bias [out]."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear input must be [N,F], got {x.data.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"linear weight must be [out,{x.data.shape[1]}], got {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.data.shape[0]},)")
    out_data = x.data @ weight.data.T + bias.data

    def back():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    out = _result(out_data, (x, weight, bias), back)
    return out


def channel_scale(x: Tensor, factors: Tensor) -> Tensor:
    """Multiply channel c of a [N,C,H,W] tensor by the c-th factor entry."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_scale input must be [N,C,H,W], got {x.data.shape}")
    c = x.data.shape[1]
    if factors.data.shape != (c,):
        raise ShapeError(f"channel_scale factors must have shape ({c},), got {factors.data.shape}")
    out_data = x.data * factors.data[None, :, None, None]

    def back():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g * factors.data[None, :, None, None])
        if factors.requires_grad:
            factors.accumulate_grad((g * x.data).sum(axis=(0, 2, 3)))

    out = _result(out_data, (x, factors), back)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N,K] logits against integer labels [N]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    loss = np.asarray(-log_probs[np.arange(n), labels].mean(dtype=np.float32), dtype=np.float32)

    def back():
        g = probs.copy()
        g[np.arange(n), labels] -= 1.0
        g *= out.grad / np.float32(n)
        logits.accumulate_grad(g)

    out = _result(loss, (logits,), back)
    return out


# ---------------------------------------------------------------------------
# optimizer


class OptimizerState:
    """Per-parameter SGD state: momentum buffer plus hyperparameters."""

    __slots__ = ("velocity", "learning_rate", "momentum", "weight_decay")

    def __init__(self, param: Tensor, learning_rate: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0,1), got {momentum}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        self.velocity = np.zeros_like(param.data)
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)


def sgd_step(params: Sequence[Tensor], states: Sequence[OptimizerState]) -> None:
    """Apply one SGD update to each param with its paired state.

    v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    """
    if len(params) != len(states):
        raise ShapeError(f"{len(params)} params paired with {len(states)} states")
    for p, st in zip(params, states):
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient; run backward first")
        if st.velocity.shape != p.data.shape:
            raise ShapeError(
                f"momentum buffer shape {st.velocity.shape} does not match param {p.data.shape}"
            )
        v = st.velocity
        v *= np.float32(st.momentum)
        v += p.grad
        if st.weight_decay:
            v += np.float32(st.weight_decay) * p.data
        p.data -= np.float32(st.learning_rate) * v


class SGD:
    """Convenience wrapper pairing parameter groups with OptimizerState."""

    def __init__(self, groups, momentum: float = 0.0, weight_decay: float = 0.0):
        # groups: list of {"params": [...], "lr": float}
        if not groups or not isinstance(groups[0], dict):
            raise TypeError("SGD expects a list of {'params': [...], 'lr': ...} groups")
        self.params: list[Tensor] = []
        self.states: list[OptimizerState] = []
        for g in groups:
            for p in g["params"]:
                self.params.append(p)
                self.states.append(
                    OptimizerState(p, g["lr"], momentum=momentum, weight_decay=weight_decay)
                )

    @classmethod
    def single_group(cls, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        return cls([{"params": list(params), "lr": lr}], momentum=momentum,
                   weight_decay=weight_decay)

    def step(self) -> None:
        sgd_step(self.params, self.states)

    def zero_grad(self) -> None:
        zero_grads(self.params)
