"""Octave convolution operators.

Feature maps are factorized into a full-resolution high-frequency branch
and a half-resolution low-frequency branch. All tensors are batched,
``(N, C, H, W)``; an empty branch is a tensor with zero channels.

The low->high path upsamples (nearest, x2) *before* convolving, which
avoids the checkerboard pattern of convolve-then-upsample / transposed
convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import OddSpatialDims, ShapeMismatch

PATHS = ("hh", "hl", "lh", "ll")


def split_channels(channels, alpha):
    """Return ``(high, low)`` channel counts; low = floor(alpha * channels)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    low = int(math.floor(alpha * channels + 1e-9))
    return channels - low, low


@dataclass
class FrequencyFeature:
    high: torch.Tensor
    low: torch.Tensor

    def __post_init__(self):
        if self.high.dim() != 4 or self.low.dim() != 4:
            raise ShapeMismatch("frequency branches must be (N, C, H, W) tensors")
        h, w = self.high.shape[-2:]
        if tuple(self.low.shape[-2:]) != (h // 2, w // 2) or h % 2 or w % 2:
            raise ShapeMismatch(
                f"low branch {tuple(self.low.shape[-2:])} must be half of high {(h, w)}")
        if self.channels == 0:
            raise ShapeMismatch("frequency feature has no channels")

    @property
    def channels(self):
        return self.high.shape[1] + self.low.shape[1]

    @property
    def alpha(self):
        return self.low.shape[1] / self.channels

    def map(self, fn):
        return FrequencyFeature(fn(self.high), fn(self.low))

    def __add__(self, other):
        return FrequencyFeature(self.high + other.high, self.low + other.low)

    def __mul__(self, scalar):
        return FrequencyFeature(self.high * scalar, self.low * scalar)

    __rmul__ = __mul__


def _check_even(x):
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise OddSpatialDims(f"spatial dims must be even, got {h}x{w}")


def downsample(x):
    if x.shape[1] == 0:  # pooling kernels reject empty channel dims
        return x.new_zeros(x.shape[0], 0, x.shape[2] // 2, x.shape[3] // 2)
    return F.avg_pool2d(x, kernel_size=2, stride=2)


def upsample(x):
    if x.shape[1] == 0:
        return x.new_zeros(x.shape[0], 0, x.shape[2] * 2, x.shape[3] * 2)
    return F.interpolate(x, scale_factor=2, mode="nearest")


def oct_split(x, alpha):
    """Factorize a plain feature map into (high, low) branches."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    _check_even(x)
    c_high, _ = split_channels(x.shape[1], alpha)
    return FrequencyFeature(x[:, :c_high], downsample(x[:, c_high:]))


def oct_merge(f):
    """Upsample the low branch and concatenate it after the high branch."""
    if f.low.shape[1] == 0:
        return f.high
    return torch.cat([f.high, upsample(f.low)], dim=1)


@dataclass(frozen=True)
class OctConvSpec:
    in_channels: int
    out_channels: int
    alpha_in: float = 0.5
    alpha_out: float = 0.5
    kernel: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        split_channels(self.in_channels, self.alpha_in)
        split_channels(self.out_channels, self.alpha_out)

    @property
    def padding(self):
        return self.kernel // 2

    @property
    def in_split(self):
        return split_channels(self.in_channels, self.alpha_in)

    @property
    def out_split(self):
        return split_channels(self.out_channels, self.alpha_out)

    def path_shapes(self):
        """Weight shape of every non-empty path, keyed by path name."""
        (ih, il), (oh, ol) = self.in_split, self.out_split
        dims = {"hh": (oh, ih), "hl": (ol, ih), "lh": (oh, il), "ll": (ol, il)}
        k = self.kernel
        return {p: (o, i, k, k) for p, (o, i) in dims.items() if o > 0 and i > 0}


def oct_conv_forward(f, spec, weights):
    """Four-path octave convolution.

    ``weights`` maps path names (``"hh"``, ``"hl"``, ``"lh"``, ``"ll"``) to
    ``(weight, bias_or_None)``. Missing paths contribute nothing.
    """
    (ih, il) = spec.in_split
    if f.high.shape[1] != ih or f.low.shape[1] != il:
        raise ShapeMismatch(
            f"input channels ({f.high.shape[1]}, {f.low.shape[1]}) do not match spec ({ih}, {il})")
    for path, shape in spec.path_shapes().items():
        if path not in weights or tuple(weights[path][0].shape) != shape:
            got = None if path not in weights else tuple(weights[path][0].shape)
            raise ShapeMismatch(f"path {path}: expected weight {shape}, got {got}")

    s, p = spec.stride, spec.padding
    n, _, h, w = f.high.shape
    oh, ol = spec.out_split
    ho, wo = (h // s, w // s)

    def conv(path, x):
        wt, b = weights[path]
        return F.conv2d(x, wt, b, stride=s, padding=p)

    high = f.high.new_zeros((n, oh, ho, wo))
    low = f.high.new_zeros((n, ol, ho // 2, wo // 2))
    if "hh" in weights and oh and ih:
        high = high + conv("hh", f.high)
    if "lh" in weights and oh and il:
        high = high + conv("lh", upsample(f.low))
    if "ll" in weights and ol and il:
        low = low + conv("ll", f.low)
    if "hl" in weights and ol and ih:
        low = low + conv("hl", downsample(f.high))
    return FrequencyFeature(high, low)


def oct_conv_backward(f, spec, weights, grad_high, grad_low):
    """Gradients of ``<grad_out, oct_conv_forward(f)>``.

    Returns ``(weight_grads, (grad_in_high, grad_in_low))`` where
    ``weight_grads`` mirrors the ``weights`` mapping.
    """
    high = f.high.detach().requires_grad_(True)
    low = f.low.detach().requires_grad_(True)
    leaves = {}
    for path, (wt, b) in weights.items():
        leaves[path] = (wt.detach().requires_grad_(True),
                        None if b is None else b.detach().requires_grad_(True))
    out = oct_conv_forward(FrequencyFeature(high, low), spec, leaves)
    if out.high.shape != grad_high.shape or out.low.shape != grad_low.shape:
        raise ShapeMismatch("upstream gradient shapes do not match the forward output")

    inputs = [high, low]
    order = []
    for path, (wt, b) in leaves.items():
        inputs.append(wt)
        order.append((path, "w"))
        if b is not None:
            inputs.append(b)
            order.append((path, "b"))
    scalar = (out.high * grad_high).sum() + (out.low * grad_low).sum()
    grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for g, x in zip(grads, inputs)]

    weight_grads = {}
    for (path, kind), g in zip(order, grads[2:]):
        wg, bg = weight_grads.get(path, (None, None))
        weight_grads[path] = (g, bg) if kind == "w" else (wg, g)
    return weight_grads, (grads[0], grads[1])


class OctConv2d(nn.Module):
    """Module wrapper around :func:`oct_conv_forward` with separate weights per path.

    A bias, when enabled, lives on one path per output branch: ``hh`` (else
    ``lh``) for high, ``ll`` (else ``hl``) for low.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, alpha_in=0.5,
                 alpha_out=0.5, stride=1, bias=True):
        super().__init__()
        self.spec = OctConvSpec(in_channels, out_channels, alpha_in, alpha_out,
                                kernel_size, stride)
        shapes = self.spec.path_shapes()
        bias_paths = {"hh" if "hh" in shapes else "lh", "ll" if "ll" in shapes else "hl"}
        self.convs = nn.ModuleDict()
        for path in PATHS:
            if path in shapes:
                o, i, k, _ = shapes[path]
                self.convs[path] = nn.Conv2d(i, o, k, bias=bias and path in bias_paths)

    def weights(self):
        return {p: (c.weight, c.bias) for p, c in self.convs.items()}

    def forward(self, f):
        return oct_conv_forward(f, self.spec, self.weights())

    def extra_repr(self):
        s = self.spec
        return (f"{s.in_channels}->{s.out_channels}, k={s.kernel}, stride={s.stride}, "
                f"alpha=({s.alpha_in}, {s.alpha_out})")
