"""Layer specifications and their forward maps on Tensors (NHWC layout)."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ACTIVATION_NAMES = ("softplus", "relu", "linear")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def conv_out(n: int, k: int, s: int, p: int) -> int:
    """Output length floor((n + 2p - k)/s) + 1; leftover rows/cols are dropped."""
    return (n + 2 * p - k) // s + 1


def _check_activation(name):
    if name not in ACTIVATION_NAMES:
        raise ValueError(f"activation must be one of {ACTIVATION_NAMES}, got {name!r}")


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "linear"

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("units must be positive")
        _check_activation(self.activation)

    kind = "dense"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ValueError(f"Dense needs a flat input, got shape {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return {"kernel": (in_shape[0], self.units), "bias": (self.units,)}

    def fan(self, in_shape):
        return in_shape[0], self.units

    def forward(self, x, params):
        return ad.ACTIVATIONS[self.activation](x @ params["kernel"] + params["bias"])


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    activation: str = "relu"

    kind = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.filters < 1 or min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("filters/kernel/stride must be positive and padding non-negative")
        _check_activation(self.activation)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"Conv2D needs (H, W, C) input, got {in_shape}")
        H, W, _ = in_shape
        ho = conv_out(H, self.kernel[0], self.stride[0], self.padding[0])
        wo = conv_out(W, self.kernel[1], self.stride[1], self.padding[1])
        if ho < 1 or wo < 1:
            raise ValueError(f"Conv2D output would be empty for input {in_shape}")
        return (ho, wo, self.filters)

    def param_shapes(self, in_shape):
        kh, kw = self.kernel
        return {"kernel": (kh * kw * in_shape[2], self.filters), "bias": (self.filters,)}

    def fan(self, in_shape):
        kh, kw = self.kernel
        return kh * kw * in_shape[2], kh * kw * self.filters

    def forward(self, x, params):
        B, H, W, C = x.shape
        ho, wo, _ = self.out_shape((H, W, C))
        idx = _window_index(B, H, W, C, self.kernel, self.stride, self.padding)
        cols = ad.gather_flat(x, idx.ravel(), idx.shape)
        y = cols @ params["kernel"] + params["bias"]
        return ad.ACTIVATIONS[self.activation](y.reshape(B, ho, wo, self.filters))


@dataclass(frozen=True)
class MaxPool2D:
    kernel: tuple = (2, 2)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    kind = "maxpool2d"

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("invalid pooling geometry")
        if self.padding[0] >= self.kernel[0] or self.padding[1] >= self.kernel[1]:
            raise ValueError("pooling padding must be smaller than the kernel")

    def out_shape(self, in_shape):
        H, W, C = in_shape
        return (
            conv_out(H, self.kernel[0], self.stride[0], self.padding[0]),
            conv_out(W, self.kernel[1], self.stride[1], self.padding[1]),
            C,
        )

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params):
        B, H, W, C = x.shape
        ho, wo, _ = self.out_shape((H, W, C))
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=-np.inf)
        best, off = None, None
        # strict comparison: ties go to the first element in row-major window order
        for di in range(kh):
            for dj in range(kw):
                v = xp[:, di : di + sh * (ho - 1) + 1 : sh, dj : dj + sw * (wo - 1) + 1 : sw, :]
                if best is None:
                    best, off = v.copy(), np.zeros(v.shape, dtype=np.intp)
                    continue
                better = v > best
                best[better] = v[better]
                off[better] = (di * W + dj) * C
        chosen = _pool_base(B, H, W, C, self.stride, self.padding, ho, wo) + off
        return ad.gather_flat(x, chosen.ravel(), (B, ho, wo, C))


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1)


@dataclass(frozen=True)
class Concat:
    """Appends the network's auxiliary input (e.g. strain components) to a flat activation."""

    branch: str = "aux"

    kind = "concat"

    def out_shape(self, in_shape, aux_dim=0):
        return (in_shape[0] + aux_dim,)

    def param_shapes(self, in_shape):
        return {}

    def forward(self, x, params, aux=None):
        if aux is None:
            raise ValueError("Concat layer needs an auxiliary input")
        return ad.concat([x, aux], axis=1)


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, MaxPool2D, Flatten, Concat)}


def layer_to_dict(layer) -> dict:
    d = {"type": layer.kind}
    for k in getattr(layer, "__dataclass_fields__", {}):
        v = getattr(layer, k)
        d[k] = list(v) if isinstance(v, tuple) else v
    return d


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


@functools.lru_cache(maxsize=512)
def _window_index(B, H, W, C, kernel, stride, padding) -> np.ndarray:
    """Flat NHWC source index of every (output pixel, kh, kw, c); -1 marks padding."""
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    ho, wo = conv_out(H, kh, sh, ph), conv_out(W, kw, sw, pw)
    oy = np.arange(ho)[:, None] * sh - ph + np.arange(kh)[None, :]  # (ho, kh)
    ox = np.arange(wo)[:, None] * sw - pw + np.arange(kw)[None, :]  # (wo, kw)
    r = oy[:, None, :, None]
    q = ox[None, :, None, :]
    valid = (r >= 0) & (r < H) & (q >= 0) & (q < W)  # (ho, wo, kh, kw)
    pix = np.where(valid, r * W + q, -1)
    b = np.arange(B)[:, None, None, None, None, None]
    c = np.arange(C)
    flat = (b * H * W + pix[None, ..., None]) * C + c
    flat = np.where(pix[None, ..., None] >= 0, flat, -1)
    out = flat.reshape(B * ho * wo, kh * kw * C)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=512)
def _pool_base(B, H, W, C, stride, padding, ho, wo) -> np.ndarray:
    """Flat NHWC index of the top-left corner of every pooling window."""
    r = np.arange(ho) * stride[0] - padding[0]
    q = np.arange(wo) * stride[1] - padding[1]
    b = np.arange(B)[:, None, None, None]
    out = ((b * H + r[None, :, None, None]) * W + q[None, None, :, None]) * C + np.arange(C)
    out.setflags(write=False)
    return out
