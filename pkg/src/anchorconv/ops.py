"""Neural-network operations: convolution, batch norm, ReLU, pooling, linear,
softmax cross-entropy, plus the small element-wise helpers the architectures
need. All ops are differentiable and record onto the active Graph.

Image tensors are NCHW (batch, channel, height, width), row-major float64.
Convolutions carry no bias: every convolution in the supported architectures
is followed by a batch norm whose shift subsumes it.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Graph, Tensor


def _record(op, inputs, out, backward):
    g = Graph.current()
    if g is not None:
        g.record(op, inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, hout: int, wout: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride]
    return cols.reshape(n, c * kh * kw, hout * wout)


def _col2im(dcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, hout: int, wout: int) -> np.ndarray:
    n, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=np.float64)
    dcols = dcols.reshape(n, c, kh, kw, hout, wout)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an (out, in, kh, kw) kernel.

    Zero padding, floor-divided output extents, no bias. Kernel spatial dims
    must be odd.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got {list(x.shape)}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {list(kernel.shape)}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"non-positive output extent {hout}x{wout}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, hout, wout)          # (N, Cin*kh*kw, P)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out_mat = np.matmul(kmat, cols)                          # (N, Cout, P)
    out = Tensor(out_mat.reshape(n, cout, hout, wout))

    def bwd(gout, needs):
        gmat = gout.reshape(n, cout, hout * wout)
        gx = gk = None
        if needs[0]:
            dcols = np.matmul(kmat.T, gmat)                  # (N, Cin*kh*kw, P)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, hout, wout)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        if needs[1]:
            gk = np.einsum("nop,nkp->ok", gmat, cols).reshape(kernel.shape)
        return gx, gk

    return _record("conv2d", (x, kernel), out, bwd)


# ---------------------------------------------------------------------------
# batch normalization

class BNState:
    """Per-channel batch-norm state: trainable scale/shift plus running stats.

    ``gamma``/``beta`` are trainable tensors, ``running_mean``/``running_var``
    are buffers updated with momentum in train mode and read in eval mode.
    ``mode`` selects the behaviour ("train" or "eval").
    """

    def __init__(
        self,
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        c = gamma.size
        for t, label in ((beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
            if t.size != c:
                raise ShapeError(f"{label} length {t.size} != channel count {c}")
        if not (0.0 < momentum < 1.0):
            raise ShapeError(f"momentum must lie in (0,1), got {momentum}")
        if eps <= 0:
            raise ShapeError(f"eps must be positive, got {eps}")
        self.gamma = gamma
        self.beta = beta
        self.running_mean = running_mean
        self.running_var = running_var
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    @property
    def channels(self) -> int:
        return self.gamma.size


def batchnorm(x: Tensor, state: BNState) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes of NCHW input.

    Train mode normalizes with batch statistics (population variance) and
    updates the running statistics; eval mode normalizes with the stored
    running statistics. Both modes apply ``gamma * xhat + beta`` and are
    differentiable in x, gamma, and beta.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4-D NCHW, got {list(x.shape)}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError(f"input has {c} channels, batch-norm state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)

    if state.mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError(f"train-mode batchnorm needs N*H*W >= 2, got {m}")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean) * inv_std
        out = Tensor(gview * xhat + bview)

        mom = state.momentum
        state.running_mean.data *= 1.0 - mom
        state.running_mean.data += mom * mean.reshape(c)
        state.running_var.data *= 1.0 - mom
        state.running_var.data += mom * var.reshape(c)

        def bwd(gout, needs):
            gx = gg = gb = None
            if needs[0]:
                gmean = gout.mean(axis=(0, 2, 3), keepdims=True)
                gxhat_mean = (gout * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = gview * inv_std * (gout - gmean - xhat * gxhat_mean)
            if needs[1]:
                gg = (gout * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
            if needs[2]:
                gb = gout.sum(axis=(0, 2, 3)).reshape(beta.shape)
            return gx, gg, gb

    elif state.mode == "eval":
        rmean = state.running_mean.data.reshape(1, c, 1, 1)
        inv_std = 1.0 / np.sqrt(state.running_var.data.reshape(1, c, 1, 1) + state.eps)
        xhat = (x.data - rmean) * inv_std
        out = Tensor(gview * xhat + bview)

        def bwd(gout, needs):
            gx = gg = gb = None
            if needs[0]:
                gx = gout * gview * inv_std
            if needs[1]:
                gg = (gout * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
            if needs[2]:
                gb = gout.sum(axis=(0, 2, 3)).reshape(beta.shape)
            return gx, gg, gb

    else:
        raise ShapeError(f"unknown batchnorm mode {state.mode!r}")

    return _record("batchnorm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# activations, pooling, classifier head

def relu(x: Tensor) -> Tensor:
    """Element-wise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def bwd(gout, needs):
        return (gout * mask,) if needs[0] else (None,)

    return _record("relu", (x,), out, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; H and W must be even.

    The gradient routes to the window argmax, first occurrence (row-major
    within the window) on ties.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 input must be 4-D NCHW, got {list(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(windows, axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bwd(gout, needs):
        if not needs[0]:
            return (None,)
        gw = np.zeros((n, c, ho, wo, 4), dtype=np.float64)
        np.put_along_axis(gw, idx[..., None], gout[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _record("maxpool2", (x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane per (sample, channel): NCHW -> NC."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-D NCHW, got {list(x.shape)}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(gout, needs):
        if not needs[0]:
            return (None,)
        return (np.broadcast_to(gout[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _record("global_avg_pool", (x,), out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for (N, D) input and (K, D) weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("linear expects x (N,D), weight (K,D), bias (K)")
    n, d = x.shape
    k, dw = weight.shape
    if dw != d or bias.shape[0] != k:
        raise ShapeError(f"linear shape mismatch: x (N,{d}), weight ({k},{dw}), bias ({bias.shape[0]})")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def bwd(gout, needs):
        gx = gout @ weight.data if needs[0] else None
        gw = gout.T @ x.data if needs[1] else None
        gb = gout.sum(axis=0) if needs[2] else None
        return gx, gw, gb

    return _record("linear", (x, weight, bias), out, bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by max-subtraction. ``labels`` is a plain integer sequence;
    each entry must lie in [0, K).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {list(logits.shape)}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"need {n} labels, got shape {list(y.shape)}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = Tensor(np.float64((lse[:, 0] - z[np.arange(n), y]).mean()))

    def bwd(gout, needs):
        if not needs[0]:
            return (None,)
        p = np.exp(z - lse)
        p[np.arange(n), y] -= 1.0
        return (p * (float(gout) / n),)

    return _record("softmax_cross_entropy", (logits,), loss, bwd)


# ---------------------------------------------------------------------------
# element-wise helpers

def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum of two same-shape tensors (residual shortcuts)."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    out = Tensor(a.data + b.data)

    def bwd(gout, needs):
        return (gout if needs[0] else None, gout.copy() if needs[1] else None)

    return _record("add", (a, b), out, bwd)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar dot product of a tensor with a constant same-shape array."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {list(w.shape)} != tensor shape {list(x.shape)}")
    out = Tensor(np.float64((x.data * w).sum()))

    def bwd(gout, needs):
        return (w * float(gout),) if needs[0] else (None,)

    return _record("weighted_sum", (x,), out, bwd)


def filter_mean(x: Tensor, channel: int) -> Tensor:
    """Mean over batch and space of one channel of an NCHW activation map."""
    if x.data.ndim != 4:
        raise ShapeError(f"filter_mean input must be 4-D NCHW, got {list(x.shape)}")
    n, c, h, w = x.shape
    if not (0 <= channel < c):
        raise ShapeError(f"channel {channel} out of range [0, {c})")
    out = Tensor(np.float64(x.data[:, channel].mean()))

    def bwd(gout, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        gx[:, channel] = float(gout) / (n * h * w)
        return (gx,)

    return _record("filter_mean", (x,), out, bwd)
