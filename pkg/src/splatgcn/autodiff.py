"""Dense f64 tensors with reverse-mode gradients, SGD, and checkpoints.

A `Tensor` is a node in a dynamically recorded graph: each op closes over its
inputs and registers a backward function that scatters the upstream gradient
into them. `backward(loss)` runs the closures in reverse topological order.
Every op output is checked for NaN/Inf; a non-finite value is a hard failure.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError


class Tensor:
    """A node holding f64 values, an optional gradient, and its provenance."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, parents=(), backward=None, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError("non-finite values produced in tensor graph")
        self.values = arr
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self._parents
        )

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf with persistent gradient and momentum buffers."""

    __slots__ = ("name", "momentum")

    def __init__(self, values, name: str):
        super().__init__(np.array(values, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.values)
        self.momentum = np.zeros_like(self.values)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.values.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an upstream gradient contribution into a node."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate gradients of every parameter reachable from a scalar loss."""
    if loss.values.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.values.shape}")
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.values)
    loss.grad += np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if not isinstance(node, Parameter):
                node.grad = None  # free intermediate buffers


# exposed under the contract name as well
gradients = backward


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.values.shape))
        accumulate(b, _unbroadcast(g, b.values.shape))

    return Tensor(a.values + b.values, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return Tensor(a.values * b.values, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise DimensionError(f"matmul needs 2D+ operands, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        accumulate(a, _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.values.shape))
        accumulate(b, _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.values.shape))

    return Tensor(a.values @ b.values, (a, b), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.values)

    def bwd(g):
        accumulate(a, g * (1.0 - y * y))

    return Tensor(y, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.values
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        accumulate(a, g * y * (1.0 - y))

    return Tensor(y, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0

    def bwd(g):
        accumulate(a, g * mask)

    return Tensor(np.where(mask, a.values, 0.0), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        accumulate(a, g.reshape(a.values.shape))

    return Tensor(a.values.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def bwd(g):
        accumulate(a, g.transpose(inverse))

    return Tensor(a.values.transpose(axes), (a,), bwd)


def concatenate(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(t, g[tuple(idx)])

    return Tensor(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), bwd)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = axis if axis is None or isinstance(axis, tuple) else (axis,)

    def bwd(g):
        if axes is None:
            accumulate(a, np.broadcast_to(g, a.values.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        accumulate(a, np.broadcast_to(g, a.values.shape).copy())

    return Tensor(a.values.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = axis if axis is None or isinstance(axis, tuple) else (axis,)
    if axes is None:
        count = a.values.size
    else:
        count = int(np.prod([a.values.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axes, keepdims), 1.0 / count)


def global_avg_pool(a, axes) -> Tensor:
    """Mean over the given spatial/temporal axes."""
    return mean(a, axis=axes, keepdims=False)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor(y, (a,), bwd)


def cross_entropy_with_softmax(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of integer labels against (N, K) logits."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.values.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.values.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must be ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = log_probs[np.arange(n), labels]

    def bwd(g):
        p = np.exp(log_probs)
        p[np.arange(n), labels] -= 1.0
        accumulate(logits, float(g) * p / n)

    return Tensor(-picked.mean(), (logits,), bwd)


# ---------------------------------------------------------------------------
# fused structured primitives
# ---------------------------------------------------------------------------

def channel_map(x, w, b=None) -> Tensor:
    """Per-location linear map over the channel axis of (N, C, A, B) inputs.

    Equivalent to a 1x1 convolution with weight (C_in, C_out).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.values.ndim != 4:
        raise DimensionError(f"channel_map input must be 4D, got {x.shape}")
    if x.values.shape[1] != w.values.shape[0]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    y = np.einsum("ncab,co->noab", x.values, w.values)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        y = y + b.values[None, :, None, None]
        parents.append(b)

    def bwd(g):
        accumulate(x, np.einsum("noab,co->ncab", g, w.values))
        accumulate(w, np.einsum("ncab,noab->co", x.values, g))
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))

    return Tensor(y, tuple(parents), bwd)


def node_mix(x, adj) -> Tensor:
    """Aggregate joint features along the last axis with an adjacency.

    x is (N, C, T, V); adj is (V, V) or per-sample (N, V, V). Output node u
    collects sum_v adj[u, v] * x[..., v].
    """
    x, adj = _as_tensor(x), _as_tensor(adj)
    if x.values.ndim != 4:
        raise DimensionError(f"node_mix input must be (N, C, T, V), got {x.shape}")
    v = x.values.shape[3]
    if adj.values.shape[-2:] != (v, v):
        raise DimensionError(f"adjacency {adj.shape} does not match V={v}")
    if adj.values.ndim == 2:
        y = np.einsum("nctv,uv->nctu", x.values, adj.values)

        def bwd(g):
            accumulate(x, np.einsum("nctu,uv->nctv", g, adj.values))
            accumulate(adj, np.einsum("nctu,nctv->uv", g, x.values))

    elif adj.values.ndim == 3:
        y = np.einsum("nctv,nuv->nctu", x.values, adj.values)

        def bwd(g):
            accumulate(x, np.einsum("nctu,nuv->nctv", g, adj.values))
            accumulate(adj, np.einsum("nctu,nctv->nuv", g, x.values))

    else:
        raise DimensionError(f"adjacency must be 2D or 3D, got {adj.shape}")
    return Tensor(y, (x, adj), bwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution of (N, C, H, W) with (O, C, kh, kw), integer stride."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise DimensionError(f"conv2d needs 4D input/weight, got {x.shape} and {w.shape}")
    if x.values.shape[1] != w.values.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    n, c, h, wd = x.values.shape
    o, _, kh, kw = w.values.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.values
    y = np.zeros((n, o, ho, wo))
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride]
            y += np.einsum("nchw,oc->nohw", sl, w.values[:, :, i, j])
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        y += b.values[None, :, None, None]
        parents.append(b)

    def bwd(g):
        dxp = np.zeros((n, c, hp, wp))
        dw = np.zeros_like(w.values)
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride]
                dw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, sl)
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += \
                    np.einsum("nohw,oc->nchw", g, w.values[:, :, i, j])
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        accumulate(x, dx)
        accumulate(w, dw)
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))

    return Tensor(y, tuple(parents), bwd)


def time_conv(x, w, b=None, stride: int = 1, dilation: int = 1) -> Tensor:
    """Temporal convolution along axis 2 of (N, C, T, V) with (O, C, k) weights.

    Zero padding of dilation * (k - 1) // 2 keeps stride-1 outputs at length T
    and makes stride-2 outputs ceil(T / 2) for odd kernels.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.values.ndim != 4 or w.values.ndim != 3:
        raise DimensionError(f"time_conv needs (N,C,T,V) and (O,C,k), got {x.shape} and {w.shape}")
    if x.values.shape[1] != w.values.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1 or dilation < 1:
        raise ConfigError(f"stride/dilation must be >= 1, got {stride}/{dilation}")
    n, c, t, v = x.values.shape
    o, _, k = w.values.shape
    pad = dilation * (k - 1) // 2
    tp = t + 2 * pad
    span = dilation * (k - 1) + 1
    if tp < span:
        raise DimensionError(f"dilated kernel span {span} exceeds padded length {tp}")
    to = (tp - span) // stride + 1
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else x.values
    y = np.zeros((n, o, to, v))
    for j in range(k):
        sl = xp[:, :, j * dilation:j * dilation + stride * (to - 1) + 1:stride, :]
        y += np.einsum("nctv,oc->notv", sl, w.values[:, :, j])
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        y += b.values[None, :, None, None]
        parents.append(b)

    def bwd(g):
        dxp = np.zeros((n, c, tp, v))
        dw = np.zeros_like(w.values)
        for j in range(k):
            sl = xp[:, :, j * dilation:j * dilation + stride * (to - 1) + 1:stride, :]
            dw[:, :, j] = np.einsum("notv,nctv->oc", g, sl)
            dxp[:, :, j * dilation:j * dilation + stride * (to - 1) + 1:stride, :] += \
                np.einsum("notv,oc->nctv", g, w.values[:, :, j])
        dx = dxp[:, :, pad:pad + t, :] if pad else dxp
        accumulate(x, dx)
        accumulate(w, dw)
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))

    return Tensor(y, tuple(parents), bwd)


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool,
              momentum: float = 0.1, eps: float = 1e-5,
              update_running: bool = True) -> Tensor:
    """Per-channel normalization of axis 1 with learned scale and shift.

    Training mode normalizes with batch statistics and (optionally) updates
    the running buffers in place; eval mode uses the running averages.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.values.shape[1]
    if gamma.values.shape != (c,) or beta.values.shape != (c,):
        raise DimensionError(f"scale/shift must be ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0,) + tuple(range(2, x.values.ndim))
    shape = (1, c) + (1,) * (x.values.ndim - 2)
    count = x.values.size // c
    if training:
        m = x.values.mean(axis=axes)
        centered = x.values - m.reshape(shape)
        var = (centered ** 2).mean(axis=axes)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = centered * ivar.reshape(shape)
        if update_running:
            correction = count / (count - 1) if count > 1 else 1.0
            running_mean *= 1.0 - momentum
            running_mean += momentum * m
            running_var *= 1.0 - momentum
            running_var += momentum * var * correction

        def bwd(g):
            accumulate(gamma, (g * xhat).sum(axis=axes))
            accumulate(beta, g.sum(axis=axes))
            dxhat = g * gamma.values.reshape(shape)
            term = (dxhat.sum(axis=axes, keepdims=True)
                    + xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            accumulate(x, (dxhat - term / count) * ivar.reshape(shape))

    else:
        ivar = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.values - running_mean.reshape(shape)) * ivar.reshape(shape)

        def bwd(g):
            accumulate(gamma, (g * xhat).sum(axis=axes))
            accumulate(beta, g.sum(axis=axes))
            accumulate(x, g * (gamma.values * ivar).reshape(shape))

    y = gamma.values.reshape(shape) * xhat + beta.values.reshape(shape)
    return Tensor(y, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# optimization and persistence
# ---------------------------------------------------------------------------

def sgd_step(params, lr: float, momentum: float = 0.9,
             weight_decay: float = 4e-4, nesterov: bool = True) -> None:
    """Momentum SGD with classic L2 decay added to the gradient."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    for p in params:
        g = p.grad + weight_decay * p.values
        p.momentum *= momentum
        p.momentum += g
        step = g + momentum * p.momentum if nesterov else p.momentum
        p.values -= lr * step


def save_checkpoint(path, params, state: dict[str, np.ndarray],
                    epoch: int, config_json: str = "") -> None:
    """Bit-exact container: parameters, momenta, extra state, epoch, config."""
    arrays = {"__epoch": np.array(epoch, dtype=np.int64),
              "__config": np.array(config_json)}
    for p in params:
        arrays[f"param/{p.name}"] = p.values
        arrays[f"momentum/{p.name}"] = p.momentum
    for key, val in state.items():
        arrays[f"state/{key}"] = val
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of `save_checkpoint`; returns (params, momenta, state, epoch, config)."""
    with np.load(path, allow_pickle=False) as data:
        params, momenta, state = {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = data[key]
            elif key.startswith("momentum/"):
                momenta[key[len("momentum/"):]] = data[key]
            elif key.startswith("state/"):
                state[key[len("state/"):]] = data[key]
        epoch = int(data["__epoch"])
        config_json = str(data["__config"])
    return params, momenta, state, epoch, config_json
