"""Layer primitives: 2-D convolution, batch norm, activations, pooling, classifier head.

Activations are laid out N,C,H,W; conv kernels OutC,InC,KH,KW. Convolution is
cross-correlation (no kernel flip) with zero padding, evaluated as a gemm over
patches gathered with KH*KW strided slices. The backward pass re-gathers the
patches instead of caching them, trading a little compute for bounded memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import NonFiniteError, Tensor, accumulate, record_op

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
COL_CACHE_BYTES = 32 * 1024 * 1024  # per-conv cap on cached patch matrices


class OpError(ValueError):
    pass


@dataclass
class Conv2dParams:
    weight: Tensor            # (OutC, InC, KH, KW)
    bias: Tensor | None = None   # (OutC,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise OpError(f"conv weight must be 4-D, got shape {tuple(self.weight.shape)}")
        _, _, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise OpError(f"conv kernel must be square 1x1 or 3x3, got {kh}x{kw}")
        if self.stride < 1:
            raise OpError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise OpError(f"conv padding must be >= 0, got {self.padding}")


@dataclass
class BatchNormParams:
    gamma: Tensor             # (C,)
    beta: Tensor              # (C,)
    running_mean: np.ndarray  # (C,) state, not trainable
    running_var: np.ndarray   # (C,)
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise OpError(f"BN momentum must lie in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise OpError(f"BN epsilon must be positive, got {self.epsilon}")


@dataclass
class GateParams:
    """1x1 conv + bias feeding a sigmoid; produces per-element coefficients in (0,1)."""

    weight: Tensor  # (C, C, 1, 1)
    bias: Tensor    # (C,), initialized to the configured gate bias


def _gather_cols(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
                 oh: int, ow: int) -> np.ndarray:
    """Patch matrix of shape (C*KH*KW, N*OH*OW), channel-major so the conv gemm
    runs directly on reshape views with no internal copies."""
    n, c, h, w = x.shape
    if kh == 1 and padding == 0:
        if stride == 1:
            return x.transpose(1, 0, 2, 3).reshape(c, n * oh * ow)
        return np.ascontiguousarray(
            x[:, :, ::stride, ::stride].transpose(1, 0, 2, 3)).reshape(c, n * oh * ow)
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    col = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return col.reshape(c * kh * kw, n * oh * ow)


def _conv_out_hw(h: int, w: int, kh: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kh) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> np.ndarray:
    outc, _, kh, kw = w.shape
    n = x.shape[0]
    oh, ow = _conv_out_hw(x.shape[2], x.shape[3], kh, stride, padding)
    col2d = _gather_cols(x, kh, kw, stride, padding, oh, ow)
    out2d = w.reshape(outc, -1) @ col2d
    out = np.ascontiguousarray(out2d.reshape(outc, n, oh, ow).transpose(1, 0, 2, 3))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Zero-padded strided cross-correlation, differentiable in x, weight, bias."""
    if x.data.ndim != 4:
        raise OpError(f"conv2d input must be 4-D (N,C,H,W), got shape {tuple(x.shape)}")
    outc, inc, kh, kw = p.weight.shape
    if x.shape[1] != inc:
        raise OpError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {inc}")
    if not np.isfinite(p.weight.data).all():
        raise NonFiniteError("conv2d weight contains non-finite values")
    stride, padding = p.stride, p.padding

    b = p.bias.data if p.bias is not None else None
    n, h, w_in = x.shape[0], x.shape[2], x.shape[3]
    oh, ow = _conv_out_hw(h, w_in, kh, stride, padding)
    col2d = _gather_cols(x.data, kh, kw, stride, padding, oh, ow)
    out2d = p.weight.data.reshape(outc, -1) @ col2d
    out_data = np.ascontiguousarray(out2d.reshape(outc, n, oh, ow).transpose(1, 0, 2, 3))
    if b is not None:
        out_data += b[None, :, None, None]
    # Keep the patch matrix for backward only while it is small; large ones
    # (full-size training batches) are re-gathered to keep memory flat.
    col_saved = col2d if col2d.nbytes <= COL_CACHE_BYTES else None
    del col2d

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def fwd():
        return _conv_forward(x.data, p.weight.data, b, stride, padding)

    def bwd(g):
        if p.bias is not None and p.bias.requires_grad:
            accumulate(p.bias, g.sum(axis=(0, 2, 3)))
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(outc, n * oh * ow)
        if p.weight.requires_grad:
            col2d = col_saved if col_saved is not None else _gather_cols(
                x.data, kh, kw, stride, padding, oh, ow)
            accumulate(p.weight, (g2d @ col2d.T).reshape(outc, inc, kh, kw))
        if x.requires_grad:
            dcol = (p.weight.data.reshape(outc, -1).T @ g2d).reshape(inc, kh, kw, n, oh, ow)
            if kh == 1 and padding == 0 and stride == 1:
                dx = dcol.reshape(inc, n, h, w_in).transpose(1, 0, 2, 3)
            else:
                dxp = np.zeros((inc, n, h + 2 * padding, w_in + 2 * padding), dtype=x.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcol[:, i, j]
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w_in]
                dx = dxp.transpose(1, 0, 2, 3)
            accumulate(x, dx)

    return record_op("conv2d", inputs, out_data, fwd, bwd)


def batchnorm(x: Tensor, p: BatchNormParams, mode: str | None = None) -> Tensor:
    """Per-channel batch normalization over the N,H,W axes.

    Train mode normalizes with batch statistics and folds them into the
    running buffers (running <- momentum*running + (1-momentum)*batch); eval
    mode reads only the running buffers.
    """
    mode = p.mode if mode is None else mode
    if mode not in ("train", "eval"):
        raise OpError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 4:
        raise OpError(f"batchnorm input must be 4-D, got shape {tuple(x.shape)}")
    if (p.running_var < 0).any():
        raise OpError("batchnorm running_var has negative entries")

    gamma = p.gamma.data[None, :, None, None]
    beta = p.beta.data[None, :, None, None]

    if mode == "train":
        if x.shape[0] < 2:
            raise OpError(f"batchnorm train mode needs batch size >= 2, got {x.shape[0]}")
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = np.mean(xc * xc, axis=(0, 2, 3))
        p.running_mean *= p.momentum
        p.running_mean += (1.0 - p.momentum) * mean
        p.running_var *= p.momentum
        p.running_var += (1.0 - p.momentum) * var
    else:
        mean = p.running_mean.astype(x.data.dtype)
        var = p.running_var.astype(x.data.dtype)
        xc = x.data - mean[None, :, None, None]

    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(p.epsilon))
    xhat = xc * inv_std[None, :, None, None]
    out_data = gamma * xhat + beta

    m = x.shape[0] * x.shape[2] * x.shape[3]

    def fwd():
        if mode == "train":
            mu = x.data.mean(axis=(0, 2, 3))
            v = x.data.var(axis=(0, 2, 3))
        else:
            mu, v = mean, var
        istd = 1.0 / np.sqrt(v + x.data.dtype.type(p.epsilon))
        return gamma * ((x.data - mu[None, :, None, None]) * istd[None, :, None, None]) + beta

    def bwd(g):
        if p.beta.requires_grad:
            accumulate(p.beta, g.sum(axis=(0, 2, 3)))
        if p.gamma.requires_grad:
            accumulate(p.gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if mode == "train":
                dxhat = g * gamma
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = g * gamma * inv_std[None, :, None, None]
            accumulate(x, dx)

    return record_op("batchnorm", (x, p.gamma, p.beta), out_data, fwd, bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    if not np.isfinite(x.data).all():
        raise NonFiniteError("relu input contains non-finite values")
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0

    def bwd(g):
        accumulate(x, g * mask)

    return record_op("relu", (x,), out_data, lambda: np.maximum(x.data, 0), bwd)


def sigmoid(x: Tensor) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NonFiniteError("sigmoid input contains non-finite values")
    d = x.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def fwd():
        return np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)

    def bwd(g):
        accumulate(x, g * out_data * (1.0 - out_data))

    return record_op("sigmoid", (x,), out_data, fwd, bwd)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and scales
    survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise OpError(f"dropout rate must lie in [0,1), got {rate}")
    if not np.isfinite(x.data).all():
        raise NonFiniteError("dropout input contains non-finite values")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise OpError("dropout in train mode needs a seeded rng")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)

    def bwd(g):
        accumulate(x, g * mask)

    return record_op("dropout", (x,), x.data * mask, lambda: x.data * mask, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.data.ndim != 4:
        raise OpError(f"global_avg_pool input must be 4-D, got shape {tuple(x.shape)}")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return record_op("global_avg_pool", (x,), out_data, lambda: x.data.mean(axis=(2, 3)), bwd)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x (N,D), w (D,K), b (K,)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise OpError(f"fully_connected shape mismatch: x {tuple(x.shape)} vs w {tuple(w.shape)}")
    out_data = x.data @ w.data + b.data

    def bwd(g):
        if x.requires_grad:
            accumulate(x, g @ w.data.T)
        if w.requires_grad:
            accumulate(w, x.data.T @ g)
        if b.requires_grad:
            accumulate(b, g.sum(axis=0))

    return record_op("fully_connected", (x, w, b), out_data, lambda: x.data @ w.data + b.data, bwd)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels; shape-(1,) loss."""
    if logits.data.ndim != 2:
        raise OpError(f"softmax_xent logits must be 2-D, got shape {tuple(logits.shape)}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise OpError(f"softmax_xent labels must have shape ({n},), got {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise OpError(f"label {bad} out of range [0, {k})")

    def compute():
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        loss = -logp[np.arange(n), labels].mean()
        return np.array([loss], dtype=logits.data.dtype), np.exp(logp)

    out_data, probs = compute()

    def bwd(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            accumulate(logits, g[0] * d / n)

    return record_op("softmax_xent", (logits,), out_data, lambda: compute()[0], bwd)


def zero_pad_shortcut(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free dimension-matching shortcut: subsample spatially by
    ``stride`` and zero-pad the channel dimension up to ``out_channels``."""
    n, c, h, w = x.shape
    if out_channels < c:
        raise OpError(f"zero_pad_shortcut cannot shrink channels ({c} -> {out_channels})")
    oh = (h + stride - 1) // stride
    ow = (w + stride - 1) // stride
    out_data = np.zeros((n, out_channels, oh, ow), dtype=x.data.dtype)
    out_data[:, :c] = x.data[:, :, ::stride, ::stride]

    def fwd():
        o = np.zeros((n, out_channels, oh, ow), dtype=x.data.dtype)
        o[:, :c] = x.data[:, :, ::stride, ::stride]
        return o

    def bwd(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, :, ::stride, ::stride] = g[:, :c]
            accumulate(x, dx)

    return record_op("zero_pad_shortcut", (x,), out_data, fwd, bwd)
