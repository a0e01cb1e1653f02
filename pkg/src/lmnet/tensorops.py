"""Dense-tensor layer primitives with analytic backward passes.

Tensors are C-contiguous float32 numpy arrays laid out [channels, height,
width] for feature maps and [out_ch, in_ch, kh, kw] for kernels. All
convolutions are cross-correlations (no kernel flip) with stride 1 and
zero padding.

Two forward paths exist for convolution: a direct tap-by-tap
accumulation (the reference) and an im2col + matrix-multiply fast path.
Both produce the same result within float32 accumulation-order noise
(<= 1e-5); the fast path is the default everywhere performance matters.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import CorruptIndicesError, InvalidArgumentError

Tensor = np.ndarray

_default_conv_method = "im2col"


@contextmanager
def conv_method(method: str):
    """Temporarily pin the convolution path used when callers pass
    method=None (the whole network does). Not thread-safe; intended for
    benchmarks and tests."""
    global _default_conv_method
    if method not in ("im2col", "direct"):
        raise InvalidArgumentError(f"unknown conv method {method!r}")
    previous = _default_conv_method
    _default_conv_method = method
    try:
        yield
    finally:
        _default_conv_method = previous


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one convolution layer.

    ``padding`` is pixels added per side. With padding equal to half the
    effective kernel extent the output keeps the input's spatial size.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    dilation: int = 1
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.dilation < 1:
            raise InvalidArgumentError(f"dilation must be positive, got {self.dilation}")
        if self.stride != 1:
            raise InvalidArgumentError("only stride 1 is supported")
        if self.padding < 0:
            raise InvalidArgumentError("padding must be non-negative")

    @property
    def effective_extent(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return (kh + (kh - 1) * (self.dilation - 1), kw + (kw - 1) * (self.dilation - 1))

    @classmethod
    def same_padded(
        cls, in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1
    ) -> "ConvSpec":
        """Square kernel with the unique padding that preserves spatial size."""
        extent = kernel_size + (kernel_size - 1) * (dilation - 1)
        if extent % 2 == 0:
            raise InvalidArgumentError("same padding needs an odd effective extent")
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=(kernel_size, kernel_size),
            dilation=dilation,
            padding=extent // 2,
        )

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        eh, ew = self.effective_extent
        oh = h + 2 * self.padding - eh + 1
        ow = w + 2 * self.padding - ew + 1
        if oh < 1 or ow < 1:
            raise InvalidArgumentError(
                f"kernel extent {eh}x{ew} exceeds padded input {h + 2 * self.padding}"
                f"x{w + 2 * self.padding}"
            )
        return oh, ow


def _as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def _check_conv_args(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec):
    if x.ndim != 3:
        raise InvalidArgumentError(f"input must be [C, H, W], got ndim {x.ndim}")
    if x.shape[0] != spec.in_channels:
        raise InvalidArgumentError(
            f"input channels {x.shape[0]} != spec.in_channels {spec.in_channels}"
        )
    if tuple(weights.shape) != spec.weight_shape():
        raise InvalidArgumentError(
            f"weights shape {tuple(weights.shape)} != expected {spec.weight_shape()}"
        )
    if bias.shape != (spec.out_channels,):
        raise InvalidArgumentError(
            f"bias shape {tuple(bias.shape)} != ({spec.out_channels},)"
        )


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """Patch matrix [in_ch * kh * kw, oh * ow] from a padded input."""
    kh, kw = spec.kernel
    d = spec.dilation
    cin = xp.shape[0]
    if kh == 1 and kw == 1:
        return xp.reshape(cin, oh * ow)
    cols = np.empty((cin, kh * kw, oh * ow), dtype=np.float32)
    tap_view = cols.reshape(cin, kh * kw, oh, ow)
    t = 0
    for ky in range(kh):
        for kx in range(kw):
            tap_view[:, t] = xp[:, ky * d : ky * d + oh, kx * d : kx * d + ow]
            t += 1
    return cols.reshape(cin * kh * kw, oh * ow)


def conv2d(
    x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec, method: str | None = None
) -> Tensor:
    """Dilated 2D cross-correlation.

    ``method`` selects the direct reference path or the im2col fast path
    (None follows the module default, normally im2col); both satisfy the
    same contract.
    """
    x, weights, bias = _as_f32(x), _as_f32(weights), _as_f32(bias)
    _check_conv_args(x, weights, bias, spec)
    oh, ow = spec.out_spatial(x.shape[1], x.shape[2])
    xp = _pad(x, spec.padding)
    if method is None:
        method = _default_conv_method
    if method == "im2col":
        cols = _im2col(xp, spec, oh, ow)
        out = np.matmul(weights.reshape(spec.out_channels, -1), cols)
        out += bias[:, None]
        return out.reshape(spec.out_channels, oh, ow)
    if method == "direct":
        kh, kw = spec.kernel
        d = spec.dilation
        out = np.empty((spec.out_channels, oh, ow), dtype=np.float32)
        out[:] = bias[:, None, None]
        for ic in range(spec.in_channels):
            plane = xp[ic]
            for ky in range(kh):
                for kx in range(kw):
                    win = plane[ky * d : ky * d + oh, kx * d : kx * d + ow]
                    out += weights[:, ic, ky, kx][:, None, None] * win
        return out
    raise InvalidArgumentError(f"unknown conv method {method!r}")


def conv2d_backward(
    x: Tensor, weights: Tensor, grad_out: Tensor, spec: ConvSpec
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of conv2d with respect to (input, weights, bias)."""
    x, weights, grad_out = _as_f32(x), _as_f32(weights), _as_f32(grad_out)
    if x.shape[0] != spec.in_channels:
        raise InvalidArgumentError(
            f"input channels {x.shape[0]} != spec.in_channels {spec.in_channels}"
        )
    oh, ow = spec.out_spatial(x.shape[1], x.shape[2])
    if grad_out.shape != (spec.out_channels, oh, ow):
        raise InvalidArgumentError(
            f"grad_out shape {tuple(grad_out.shape)} != ({spec.out_channels}, {oh}, {ow})"
        )
    kh, kw = spec.kernel
    d, p = spec.dilation, spec.padding
    g2 = grad_out.reshape(spec.out_channels, -1)

    grad_bias = grad_out.sum(axis=(1, 2))

    xp = _pad(x, p)
    cols = _im2col(xp, spec, oh, ow)
    grad_weights = (g2 @ cols.T).reshape(weights.shape)

    gcols = weights.reshape(spec.out_channels, -1).T @ g2
    gcols = gcols.reshape(spec.in_channels, kh, kw, oh, ow)
    gxp = np.zeros_like(xp)
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, ky * d : ky * d + oh, kx * d : kx * d + ow] += gcols[:, ky, kx]
    grad_input = gxp if p == 0 else np.ascontiguousarray(gxp[:, p:-p, p:-p])
    return grad_input, grad_weights, grad_bias


def maxpool2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns the pooled map and, per output cell, the flat index of the
    maximum into the input tensor. Ties pick the smallest flat index.
    """
    x = _as_f32(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise InvalidArgumentError(f"spatial dims must be even, got {h}x{w}")
    # The four window positions in input flat order; strict > comparisons
    # keep the earlier (smaller flat index) element on ties.
    p00 = x[:, 0::2, 0::2]
    p01 = x[:, 0::2, 1::2]
    p10 = x[:, 1::2, 0::2]
    p11 = x[:, 1::2, 1::2]
    top_is_right = p01 > p00
    top = np.where(top_is_right, p01, p00)
    bot_is_right = p11 > p10
    bot = np.where(bot_is_right, p11, p10)
    bot_wins = bot > top
    out = np.where(bot_wins, bot, top)
    local = np.where(
        bot_wins,
        2 + bot_is_right.astype(np.int64),
        top_is_right.astype(np.int64),
    )
    dy, dx = local >> 1, local & 1
    ci = np.arange(c)[:, None, None]
    rows = 2 * np.arange(h // 2)[None, :, None] + dy
    cols = 2 * np.arange(w // 2)[None, None, :] + dx
    indices = (ci * h + rows) * w + cols
    return out, indices


def maxpool2_backward(indices: np.ndarray, grad_out: Tensor, in_shape) -> Tensor:
    """Scatter pooled-output gradients back to the argmax positions."""
    grad_out = _as_f32(grad_out)
    gx = np.zeros(int(np.prod(in_shape)), dtype=np.float32)
    gx[indices.ravel()] = grad_out.ravel()
    return gx.reshape(in_shape)


def maxunpool2(x: Tensor, indices: np.ndarray, out_shape) -> Tensor:
    """Scatter values to the recorded argmax positions; everything else 0."""
    x = _as_f32(x)
    if x.shape != indices.shape:
        raise InvalidArgumentError(
            f"input shape {tuple(x.shape)} != indices shape {tuple(indices.shape)}"
        )
    out_shape = tuple(int(v) for v in out_shape)
    total = int(np.prod(out_shape))
    flat = indices.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= total):
        raise CorruptIndicesError(
            f"pool index out of range for output shape {out_shape}"
        )
    out = np.zeros(total, dtype=np.float32)
    out[flat] = x.ravel()
    return out.reshape(out_shape)


def maxunpool2_backward(indices: np.ndarray, grad_out: Tensor) -> Tensor:
    """Gather gradients from the scattered positions."""
    grad_out = _as_f32(grad_out)
    return grad_out.ravel()[indices.ravel()].reshape(indices.shape)


def relu(x: Tensor) -> Tensor:
    return np.maximum(_as_f32(x), np.float32(0.0))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return _as_f32(grad_out) * (np.asarray(x) > 0)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis of a [C, H, W] map."""
    x = _as_f32(x)
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_channels_backward(probs: Tensor, grad_out: Tensor) -> Tensor:
    probs, grad_out = _as_f32(probs), _as_f32(grad_out)
    dot = (grad_out * probs).sum(axis=0, keepdims=True)
    return probs * (grad_out - dot)


def dropout(
    x: Tensor, rate: float, rng_seed: int, training: bool
) -> tuple[Tensor, Tensor]:
    """Inverted dropout: zero units with probability ``rate`` and scale
    survivors by 1/(1-rate) so inference is the identity.

    Returns the output and the applied mask (0 or the survivor scale);
    the mask is all ones outside training or at rate 0. Bit-reproducible
    for a fixed seed.
    """
    x = _as_f32(x)
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(np.float32) * np.float32(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(mask: Tensor, grad_out: Tensor) -> Tensor:
    return _as_f32(grad_out) * mask


def receptive_field(schedule) -> tuple[int, int]:
    """Receptive field of a stack of stride-1 convolutions.

    Starts at 1x1 and grows by (kernel - 1) * dilation per layer and axis.
    """
    rh = rw = 1
    for spec in schedule:
        kh, kw = spec.kernel
        rh += (kh - 1) * spec.dilation
        rw += (kw - 1) * spec.dilation
    return rh, rw


def receptive_field_per_layer(schedule) -> list[tuple[int, int]]:
    """Cumulative receptive field after each layer of a schedule."""
    out = []
    rh = rw = 1
    for spec in schedule:
        kh, kw = spec.kernel
        rh += (kh - 1) * spec.dilation
        rw += (kw - 1) * spec.dilation
        out.append((rh, rw))
    return out


def distinct_scale_receptive_fields(schedule) -> list[tuple[int, int]]:
    """Per-layer context coverage counting each dilation scale once.

    Repeated layers at an already-seen dilation deepen features inside the
    context window that scale already covers, so under this accounting
    they do not widen it. This is the convention behind the architecture's
    advertised per-layer figures; ``receptive_field_per_layer`` gives the
    strict cumulative growth instead.
    """
    out = []
    rh = rw = 1
    seen: set[int] = set()
    for spec in schedule:
        kh, kw = spec.kernel
        if spec.dilation not in seen and (kh > 1 or kw > 1):
            rh += (kh - 1) * spec.dilation
            rw += (kw - 1) * spec.dilation
            seen.add(spec.dilation)
        out.append((rh, rw))
    return out
