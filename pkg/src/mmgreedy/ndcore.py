"""Dense float64 tensors with reverse-mode autodiff and the layers the fused network needs.

Every op takes and returns :class:`Tensor`. A graph is only recorded when at least
one input requires a gradient, so evaluation passes cost plain numpy time.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    # operator sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every graph node reachable from a scalar ``loss``.

    Leaves are not zeroed here; callers reset gradients between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    # intermediate grads are transient; leaves keep accumulating
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None if node._parents else node.grad


# ---------------------------------------------------------------------------
# elementwise


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def elementwise(kind: str, a, b=None) -> Tensor:
    """Entrywise op. ``kind`` is one of add, sub, mul, relu, sigmoid, scale.

    The second operand must have the same shape as ``a`` or be a scalar; for
    ``scale`` it is a python number.
    """
    a = as_tensor(a)
    if kind in ("relu", "sigmoid"):
        if kind == "relu":
            mask = a.data > 0
            data = np.where(mask, a.data, 0.0)

            def bw(g):
                _accumulate(a, g * mask)
        else:
            data = sigmoid_np(a.data)

            def bw(g):
                _accumulate(a, g * data * (1.0 - data))
        return _result(data, (a,), bw)

    if kind == "scale":
        c = float(b)

        def bw(g):
            _accumulate(a, g * c)
        return _result(a.data * c, (a,), bw)

    b = as_tensor(b)
    if b.shape != a.shape and b.size != 1:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} are not compatible")
    scalar_b = b.shape != a.shape

    def reduce_b(g):
        return np.sum(g).reshape(b.shape) if scalar_b else g

    if kind == "add":
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, reduce_b(g))
        return _result(a.data + b.data, (a, b), bw)
    if kind == "sub":
        def bw(g):
            _accumulate(a, g)
            _accumulate(b, reduce_b(-g))
        return _result(a.data - b.data, (a, b), bw)
    if kind == "mul":
        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, reduce_b(g * a.data))
        return _result(a.data * b.data, (a, b), bw)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def relu(a) -> Tensor:
    return elementwise("relu", a)


def sigmoid(a) -> Tensor:
    return elementwise("sigmoid", a)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _result(np.sum(a.data), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(g):
        _accumulate(a, g.reshape(old))
    return _result(a.data.reshape(shape), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)
    return _result(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Batched affine map ``x @ weight + bias`` with x of shape (B, in)."""
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
    return _result(out_data, parents, bw)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B,C,H,W) with kernel (F,C,kh,kw); no kernel flip."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # (B,C,Ho,Wo,kh,kw)
    # columns laid out (C*kh*kw, B*Ho*Wo) so the backward scatter works on contiguous blocks
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
    kmat = kernel.data.reshape(F, C * kh * kw)
    out = (kmat @ cols).reshape(F, B, Ho, Wo).transpose(1, 0, 2, 3)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(F, B * Ho * Wo)
        if kernel.requires_grad:
            _accumulate(kernel, (gmat @ cols.T).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros((C, B, Hp, Wp), dtype=DTYPE)
            hi = stride * (Ho - 1) + 1
            wi = stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            _accumulate(x, dxp.transpose(1, 0, 2, 3))
    return _result(np.ascontiguousarray(out), (x, kernel), bw)


# ---------------------------------------------------------------------------
# channel-wise pieces of the fusion gate


def _sum_spatial(x: np.ndarray) -> np.ndarray:
    """Sum (B, C, *spatial) over the spatial axes; einsum is far faster than ndarray.sum here."""
    return np.einsum("bcs->bc", x.reshape(x.shape[0], x.shape[1], -1))


def _sum_but_channel(x: np.ndarray) -> np.ndarray:
    return np.einsum("bcs->c", x.reshape(x.shape[0], x.shape[1], -1))


def global_avg_pool(a, channel_first: bool = True, batched: bool = True) -> Tensor:
    """Per-channel mean over all spatial axes.

    Layouts: (B, C, *spatial) by default; ``batched=False`` takes one sample
    (C, *spatial); ``channel_first=False`` moves the channel axis last. With no
    spatial axes the input is returned unchanged.
    """
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("global_avg_pool: empty tensor")
    nd = a.data.ndim
    lead = 1 if batched else 0
    if channel_first:
        axes = tuple(range(lead + 1, nd))
    else:
        axes = tuple(range(lead, nd - 1))
    if not axes:
        return a
    n = int(np.prod([a.shape[i] for i in axes]))
    if channel_first and batched and a.data.flags.c_contiguous:
        data = _sum_spatial(a.data) / n
    else:
        data = a.data.mean(axis=axes)
    shape = a.shape

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axes) / n, shape))
    return _result(data, (a,), bw)


def concat_channels(a, b) -> Tensor:
    """Concatenate along the last axis; rank-1 vectors or (B, C) batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (1, 2):
        raise ShapeError(f"concat_channels: incompatible ranks {a.shape} and {b.shape}")
    if a.data.ndim == 2 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_channels: batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[-1]

    def bw(g):
        _accumulate(a, g[..., :ca])
        _accumulate(b, g[..., ca:])
    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), bw)


def channel_scale(a, w, channel_axis: int | None = None) -> Tensor:
    """Scale channel c of ``a`` by ``2 * sigmoid(w_c)``.

    A rank-1 gate (C,) applies to ``channel_axis`` of ``a`` (default 0 for a
    vector, else 1, i.e. the batched (B, C, *spatial) layout). A rank-2 gate
    (B, C) is per-sample on a (B, C, *spatial) input.
    """
    a, w = as_tensor(a), as_tensor(w)
    if w.data.ndim == 1:
        lead = channel_axis if channel_axis is not None else (0 if a.data.ndim == 1 else 1)
        if lead >= a.data.ndim or a.shape[lead] != w.shape[0]:
            raise ShapeError(f"channel_scale: {a.shape} has no channel axis of length {w.shape[0]}")
    else:
        if a.shape[:2] != w.shape:
            raise ShapeError(f"channel_scale: gate {w.shape} does not match input {a.shape}")
        lead = 0
    expand = (None,) * lead + (slice(None),) * w.data.ndim + (None,) * (a.data.ndim - lead - w.data.ndim)
    sig = sigmoid_np(w.data)
    factor = 2.0 * sig
    fb = factor[expand]
    out = a.data * fb

    def bw(g):
        _accumulate(a, g * fb)
        if w.requires_grad:
            red = tuple(i for i in range(a.data.ndim) if expand[i] is None)
            gw = np.sum(g * a.data, axis=red) if red else g * a.data
            _accumulate(w, gw * 2.0 * sig * (1.0 - sig))
    return _result(out, (a, w), bw)


# ---------------------------------------------------------------------------
# normalization and loss


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization on (B, C, ...).

    In training mode the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    expand = (None, slice(None)) + (None,) * (x.data.ndim - 2)
    n = x.size // x.shape[1]
    if training:
        mean = _sum_but_channel(x.data) / n
        centered = x.data - mean[expand]
        var = _sum_but_channel(centered * centered) / n
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[expand]) * inv[expand]
    out = gamma.data[expand] * xhat + beta.data[expand]

    def bw(g):
        g = np.ascontiguousarray(g)
        sum_g = _sum_but_channel(g)
        sum_gx = _sum_but_channel(g * xhat)
        _accumulate(gamma, sum_gx)
        _accumulate(beta, sum_g)
        if x.requires_grad:
            gx = g * gamma.data[expand]
            if training:
                m1 = (gamma.data * sum_g / n)[expand]
                m2 = (gamma.data * sum_gx / n)[expand]
                _accumulate(x, inv[expand] * (gx - m1 - xhat * m2))
            else:
                _accumulate(x, gx * inv[expand])
    return _result(out, (x, gamma, beta), bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch-mean cross-entropy of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"cross-entropy: labels must lie in [0, {K})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / B)
    return _result(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# parameters, init, norms


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def group_sq_norm(group: Iterable) -> float:
    """Sum of squares over every array (or Tensor) in ``group``."""
    arrays = [t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE) for t in group]
    if not arrays:
        raise ValueError("group_sq_norm: empty group")
    return float(sum(np.dot(a.ravel(), a.ravel()) for a in arrays))


def grad_check(build: Callable[[int], tuple[list[Tensor], Callable[[], Tensor]]], seed: int,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(seed)`` returns ``(params, loss_fn)`` where ``loss_fn()`` recomputes the
    scalar loss from the current parameter values. The error for each entry is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    params, loss_fn = build(seed)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                up = float(loss_fn().data)
                flat[i] = orig - step
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
