"""Minimal deterministic reverse-mode autodiff on numpy arrays.

Implements exactly the layer set the segmentation model needs: 2-D
convolution (cross-correlation, zero padding), batch normalization with
running statistics, ReLU, nearest-neighbor 2x upsampling, channel
concatenation, elementwise arithmetic and a weighted softmax
cross-entropy loss.

Activations use N,C,H,W layout; conv kernels use O,I,kH,kW. Ops preserve
the input dtype, so the same code paths run in float32 for training and
float64 for finite-difference checks. All reductions run in a fixed
index order, which makes forward and backward bit-deterministic for a
given build configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ParameterStore",
    "BNLayerState",
    "no_grad",
    "add",
    "sub",
    "mul",
    "tsum",
    "relu",
    "conv2d",
    "upsample_nearest2x",
    "concat_channels",
    "batchnorm",
    "weighted_softmax_ce",
    "backward",
]


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar backward, repeated backward)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (eval/collect passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array plus the tape bookkeeping needed for reverse mode.

    ``grad`` is allocated lazily during :func:`backward`. Leaf tensors
    created with ``requires_grad=True`` keep their accumulated gradient
    across backward calls until explicitly reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = np.asarray(data)
        self.grad = None
        if _grad_enabled:
            self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
            self._parents = _parents
        else:
            self.requires_grad = requires_grad
            self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _set_backward(out: Tensor, fn) -> None:
    # keep the closure (and the intermediates it captures) only when the
    # tape is live and someone upstream actually needs a gradient
    if _grad_enabled and out.requires_grad:
        out._backward = fn


@dataclass
class Parameter:
    """A named leaf tensor with a persistent gradient buffer."""

    name: str
    value: Tensor

    @classmethod
    def create(cls, name: str, data: np.ndarray) -> "Parameter":
        return cls(name=name, value=Tensor(np.asarray(data), requires_grad=True))

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, arr: np.ndarray) -> None:
        if arr.shape != self.value.data.shape:
            raise ValueError(f"shape mismatch assigning to {self.name}")
        self.value.data = np.asarray(arr)

    @property
    def grad(self):
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None


class ParameterStore:
    """Ordered name -> Parameter map; names are unique full paths."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter.create(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}


@dataclass
class BNLayerState:
    """Learnable affine plus running statistics for one BN layer.

    Running variance uses the biased (1/N) convention, matching the
    batch statistics and the exact-moment aggregation used for test-time
    adaptation.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]

    def validate(self) -> None:
        c = self.channels
        for arr, label in ((self.beta.data, "beta"), (self.running_mean, "running_mean"),
                           (self.running_var, "running_var")):
            if arr.shape != (c,):
                raise ValueError(f"BN state field {label} has shape {arr.shape}, expected ({c},)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if not (0 < self.momentum <= 1):
            raise ValueError("momentum must lie in (0, 1]")


def _t(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    _set_backward(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    _set_backward(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _set_backward(out, bwd)
    return out


def tsum(a) -> Tensor:
    """Sum all elements to a scalar tensor."""
    a = _t(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype), _parents=(a,))

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))

    _set_backward(out, bwd)
    return out


def relu(a) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = _t(a)
    out = Tensor(np.maximum(a.data, 0), _parents=(a,))
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    _set_backward(out, bwd)
    return out


def upsample_nearest2x(a) -> Tensor:
    """Each pixel replicated into a 2x2 block; backward sums the block."""
    a = _t(a)
    if a.data.ndim != 4:
        raise ValueError("upsample_nearest2x expects N,C,H,W input")
    out = Tensor(a.data.repeat(2, axis=2).repeat(2, axis=3), _parents=(a,))
    n, c, h, w = a.shape

    def bwd(g):
        _accum(a, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    _set_backward(out, bwd)
    return out


def concat_channels(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects N,C,H,W inputs")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), _parents=(a, b))

    def bwd(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    _set_backward(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; differentiable in x, w, b."""
    x, w, b = _t(x), _t(w), _t(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x:(N,I,H,W) and w:(O,I,kH,kW)")
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input has {ci}, kernel expects {ci_w}")
    if b.data.shape != (co,):
        raise ValueError(f"conv2d bias must have shape ({co},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw or (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(
            f"conv2d output size not integral for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")

    xp = _pad2d(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    y = cols @ w.data.reshape(co, -1).T
    y += b.data
    y = np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    out = Tensor(y, _parents=(x, w, b))

    def bwd(g):
        gc = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        if w.requires_grad:
            _accum(w, (gc.T @ cols).reshape(w.shape))
        if b.requires_grad:
            _accum(b, gc.sum(axis=0))
        if x.requires_grad:
            # input grad as a full correlation of the stride-dilated output
            # grad with the io-swapped, spatially flipped kernel
            if stride > 1:
                gd = np.zeros((n, co, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                              dtype=g.dtype)
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            wt = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gp = _pad2d(gd, kh - 1) if kh > 1 else gd
            colsg, gh, gw = _im2col(gp, kh, kw, 1)
            dxp = colsg @ wt.reshape(ci, -1).T
            dxp = dxp.reshape(n, gh, gw, ci).transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, np.ascontiguousarray(dxp))

    _set_backward(out, bwd)
    return out


# ---------------------------------------------------------------------------
# batch normalization


def _bn_axes_stats(x: np.ndarray):
    # biased per-channel moments over N,H,W
    mean = x.mean(axis=(0, 2, 3))
    var = np.square(x - mean[None, :, None, None]).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm(x, state: BNLayerState, mode: str = "train", stats=None):
    """Batch normalization over N,H,W per channel.

    mode="train": normalize with the current batch's biased moments, then
    apply the affine; running stats get the EMA update
    new = (1-momentum)*old + momentum*batch.

    mode="eval": normalize with the running statistics (or with ``stats``,
    a (mean, var) pair, when given -- used by adapted model views).

    mode="collect": output as in eval, but also returns the exact batch
    moments of the *input* as ``(count, mean, m2)`` in float64, without
    touching the running statistics. Returns ``(Tensor, moments)``.
    """
    x = _t(x)
    if x.data.ndim != 4:
        raise ValueError("batchnorm expects N,C,H,W input")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ValueError(f"batchnorm channel mismatch: input has {c}, state has {state.channels}")
    if n * h * w == 0:
        raise ValueError("batchnorm on an empty batch")
    gamma, beta = state.gamma.value, state.beta.value
    eps = state.eps

    if mode == "train":
        mean, var = _bn_axes_stats(x.data)
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * istd[None, :, None, None]
        y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
        out = Tensor(y, _parents=(x, gamma, beta))
        cnt = n * h * w

        def bwd(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (istd[None, :, None, None] / cnt) * (cnt * dxhat - s1 - xhat * s2)
                _accum(x, dx)

        _set_backward(out, bwd)
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean + m * mean).astype(
            state.running_mean.dtype)
        state.running_var = ((1.0 - m) * state.running_var + m * var).astype(
            state.running_var.dtype)
        state.num_batches_tracked += 1
        return out

    if mode not in ("eval", "collect"):
        raise ValueError(f"unknown batchnorm mode: {mode!r}")

    if stats is not None:
        rmean, rvar = stats
    else:
        rmean, rvar = state.running_mean, state.running_var
    istd = 1.0 / np.sqrt(rvar + eps)
    xhat = (x.data - rmean[None, :, None, None]) * istd[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y, _parents=(x, gamma, beta))

    def bwd_frozen(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, g * (gamma.data * istd)[None, :, None, None])

    _set_backward(out, bwd_frozen)

    if mode == "collect":
        x64 = x.data.astype(np.float64)
        mean64 = x64.mean(axis=(0, 2, 3))
        m2 = np.square(x64 - mean64[None, :, None, None]).sum(axis=(0, 2, 3))
        return out, (n * h * w, mean64, m2)
    return out


# ---------------------------------------------------------------------------
# loss


def weighted_softmax_ce(logits, target: np.ndarray, class_weights: np.ndarray) -> Tensor:
    """Weight-normalized mean of per-pixel weighted cross-entropy.

    loss = sum_px w[t_px] * (-log softmax(logits)[t_px]) / sum_px w[t_px]
    """
    logits = _t(logits)
    if logits.data.ndim != 4:
        raise ValueError("weighted_softmax_ce expects logits of shape N,K,H,W")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if not np.issubdtype(target.dtype, np.integer):
        raise ValueError("target must be an integer mask")
    if target.min() < 0 or target.max() >= k:
        raise ValueError(f"target class out of range [0, {k})")
    cw = np.asarray(class_weights, dtype=logits.dtype)
    if cw.shape != (k,):
        raise ValueError(f"class_weights must have shape ({k},)")
    if np.any(cw <= 0):
        raise ValueError("class weights must be positive")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)

    ni, hi, wi = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    logp_t = logp[ni, target, hi, wi]
    wpix = cw[target]
    wsum = wpix.sum(dtype=logits.dtype)
    loss = -(wpix * logp_t).sum(dtype=logits.dtype) / wsum
    out = Tensor(np.asarray(loss, dtype=logits.dtype), _parents=(logits,))

    def bwd(g):
        if logits.requires_grad:
            p = ez / sez
            onehot_scaled = np.zeros_like(p)
            onehot_scaled[ni, target, hi, wi] = 1.0
            dl = p * wpix[:, None, :, :] - onehot_scaled * wpix[:, None, :, :]
            _accum(logits, (g / wsum) * dl)

    _set_backward(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Reverse-topological gradient accumulation from a scalar node.

    A node graph can be swept only once; rebuilding the forward pass
    resets the tape. Parameters not reachable from the loss simply keep a
    zero (None) gradient.
    """
    if loss.size != 1:
        raise GraphError("backward requires a scalar loss node")
    if loss._done:
        raise GraphError("backward already ran on this graph; rebuild the forward pass")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._done = True
