"""Loss terms, the ``valid``/``crops`` patch operators and feature extractors."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ExtractorUnavailable, NonFiniteComponent, ShapeMismatch

LOG_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_pix: float = 10.0
    lambda_perct: float = 1.0
    lambda_gan: float = 1.0
    lambda_patch: float = 1.0

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError(f"loss weights must be finite and non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self):
        return (self.lambda_pix, self.lambda_perct, self.lambda_gan, self.lambda_patch)

    def as_dict(self):
        return dict(zip(LOSS_TERMS, self.as_tuple()))


LOSS_TERMS = ("pix", "perct", "gan", "patch")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _neg_log(p):
    return -torch.log(torch.clamp(p, min=LOG_EPS))


def loss_pix(out, gt, norm="l1"):
    """Mean absolute (``l1``) or squared (``l2``) pixel error."""
    _same_shape(out, gt)
    diff = out - gt
    if norm == "l1":
        return diff.abs().mean()
    if norm == "l2":
        return diff.pow(2).mean()
    raise ValueError(f"unknown pixel norm {norm!r}")


def loss_gan_generator(out, D):
    return _neg_log(D(out)).mean()


def loss_gan_discriminator(real, fake, D):
    _same_shape(real, fake)
    return (_neg_log(D(real)) + _neg_log(1.0 - D(fake))).mean()


# --------------------------------------------------------------------------
# valid / crops
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidRegion:
    """Half-open box ``[row_min, row_max) x [col_min, col_max)``."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    @property
    def height(self):
        return self.row_max - self.row_min

    @property
    def width(self):
        return self.col_max - self.col_min

    def as_tuple(self):
        return (self.row_min, self.row_max, self.col_min, self.col_max)


def _as_image_stack(batch):
    a = batch.detach().cpu().numpy() if torch.is_tensor(batch) else np.asarray(batch)
    if a.ndim == 2:
        a = a[None]
    elif a.ndim == 4:
        a = a.max(axis=1)
    if a.ndim != 3 or a.shape[0] == 0:
        raise ShapeMismatch(f"valid() expects a non-empty image batch, got shape {a.shape}")
    return a


def valid(batch, threshold=0.0):
    """Tight bounding box of pixels above ``threshold`` for every image.

    An image with no foreground gets the full-image box.
    """
    regions = []
    for img in _as_image_stack(batch):
        fg = img > threshold
        rows = np.flatnonzero(fg.any(axis=1))
        cols = np.flatnonzero(fg.any(axis=0))
        if rows.size == 0:
            regions.append(ValidRegion(0, img.shape[0], 0, img.shape[1]))
        else:
            regions.append(ValidRegion(int(rows[0]), int(rows[-1]) + 1,
                                       int(cols[0]), int(cols[-1]) + 1))
    return regions


def patch_side_range(full):
    """Allowed patch sides for a full image dimension: [ceil(S/3), floor(S/2)]."""
    if full < 6:
        raise ValueError(f"image dimension {full} too small for patch sampling (need >= 6)")
    lo, hi = -(-full // 3), full // 2
    return lo, hi


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    height: int
    width: int
    out_height: int
    out_width: int


def sample_crop_box(region, full_shape, rng):
    """Draw patch sides from the full image size and a position in ``region``.

    When the region is smaller than the drawn side, the crop is clipped to
    the region and later resized up to the drawn side.
    """
    sides = []
    starts = []
    for full, lo_edge, extent in ((full_shape[0], region.row_min, region.height),
                                  (full_shape[1], region.col_min, region.width)):
        lo, hi = patch_side_range(full)
        s = int(rng.integers(lo, hi + 1))
        take = min(s, extent)
        start = lo_edge + int(rng.integers(0, extent - take + 1))
        sides.append((take, s))
        starts.append(start)
    (th, sh), (tw, sw) = sides
    return CropBox(starts[0], starts[1], th, tw, sh, sw)


def apply_crop(image, box):
    """Cut ``box`` out of a (C, H, W) tensor, resizing clipped crops."""
    patch = image[:, box.top:box.top + box.height, box.left:box.left + box.width]
    if (box.height, box.width) != (box.out_height, box.out_width):
        patch = F.interpolate(patch[None], size=(box.out_height, box.out_width),
                              mode="bilinear", align_corners=False)[0]
    return patch


def crops(image, region, rng):
    """One random patch from a (C, H, W) image inside ``region``."""
    return apply_crop(image, sample_crop_box(region, image.shape[-2:], rng))


def _to_judge(patch, size):
    return F.interpolate(patch[None], size=(size, size), mode="bilinear", align_corners=False)[0]


def sample_patch_sets(out, gt, n_patches, n_refs, rng, judge_size, threshold=0.0):
    """Crop candidate and reference patches for the patch judge.

    Valid regions come from ``gt`` and are applied to both images, since a
    sigmoid output is never exactly background. Returns
    ``(fake, real, refs)`` with shapes ``(B*n, C, P, P)``, ``(B*n, C, P, P)``
    and ``(B*n, R, C, P, P)``; ``real`` are extra ground-truth crops used as
    positives when training the judge.
    """
    _same_shape(out, gt)
    if n_patches < 1 or n_refs < 1:
        raise ValueError("n_patches and n_refs must be >= 1")
    regions = valid(gt, threshold)
    full = tuple(gt.shape[-2:])
    fake, real, refs = [], [], []
    for b, region in enumerate(regions):
        for _ in range(n_patches):
            fake.append(_to_judge(crops(out[b], region, rng), judge_size))
            real.append(_to_judge(crops(gt[b], region, rng), judge_size))
            refs.append(torch.stack([_to_judge(crops(gt[b], region, rng), judge_size)
                                     for _ in range(n_refs)]))
    return torch.stack(fake), torch.stack(real), torch.stack(refs)


def loss_patch(out, gt, judge, n_patches, rng, n_refs=4, judge_size=64, threshold=0.0):
    """Mean ``-log judge(fake crop, reference crops)`` over sampled patches."""
    fake, _, refs = sample_patch_sets(out, gt, n_patches, n_refs, rng, judge_size, threshold)
    return _neg_log(judge(fake, refs)).mean()


def loss_patch_discriminator(fake, real, refs, judge):
    """Judge update: real-vs-real pairs are positives, fake-vs-real negatives."""
    return (_neg_log(judge(real, refs)) + _neg_log(1.0 - judge(fake, refs))).mean()


# --------------------------------------------------------------------------
# perceptual features
# --------------------------------------------------------------------------

# (out_channels or "M" for max-pool) of the VGG-19 feature stack up to conv4_1
_VGG19_PREFIX = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512]
VGG19_TAPS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1")


class FeatureExtractor(nn.Module):
    """Frozen conv stack exposing four activations, shallow to deep."""

    def __init__(self, layers, taps, tap_names=VGG19_TAPS, in_channels=3,
                 mean=None, std=None):
        super().__init__()
        if list(taps) != sorted(taps) or len(taps) != 4:
            raise ValueError("need four taps ordered shallow to deep")
        self.layers = layers
        self.taps = tuple(taps)
        self.tap_names = tuple(tap_names)
        self.in_channels = in_channels
        self.register_buffer("mean", torch.tensor(mean or [0.0] * in_channels).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std or [1.0] * in_channels).view(1, -1, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        return super().train(False)

    def forward(self, x):
        if x.shape[1] == 1 and self.in_channels != 1:
            x = x.expand(-1, self.in_channels, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
                if len(feats) == len(self.taps):
                    break
        return feats


def _vgg_prefix_layers(width_scale=1.0, in_channels=3):
    layers, c_in, taps = [], in_channels, []
    block_start = True
    for v in _VGG19_PREFIX:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
            block_start = True
            continue
        c = max(1, int(v * width_scale))
        layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()]
        if block_start:
            taps.append(len(layers) - 1)
            block_start = False
        c_in = c
    return nn.Sequential(*layers), taps


def random_feature_extractor(width_scale=0.25, seed=0):
    """VGG-19-shaped extractor with fixed random weights (works offline)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        layers, taps = _vgg_prefix_layers(width_scale)
        for m in layers:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
    return FeatureExtractor(layers, taps)


def cache_dir():
    return Path(os.environ.get("M2M_CACHE", Path.home() / ".cache" / "macro2micro"))


VGG19_WEIGHTS_FILE = "vgg19-dcbb9e9d.pth"


def vgg19_extractor(weights_path=None):
    """ImageNet VGG-19 taps; weights are read from ``$M2M_CACHE``, never downloaded."""
    path = Path(weights_path) if weights_path else cache_dir() / VGG19_WEIGHTS_FILE
    if not path.is_file():
        raise ExtractorUnavailable(f"VGG-19 weights not found at {path}")
    try:
        from torchvision.models import vgg19

        net = vgg19(weights=None)
        net.load_state_dict(torch.load(path, map_location="cpu"))
    except Exception as exc:
        raise ExtractorUnavailable(f"cannot load VGG-19 weights from {path}: {exc}") from exc
    layers = net.features[:21]
    taps = [1, 6, 11, 20]  # relu after conv1_1, conv2_1, conv3_1, conv4_1
    return FeatureExtractor(layers, taps, mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225])


def make_extractor(name="random", **kwargs):
    if name == "random":
        return random_feature_extractor(**kwargs)
    if name == "vgg19":
        return vgg19_extractor(**kwargs)
    raise ExtractorUnavailable(f"unknown feature extractor {name!r}")


def loss_perceptual(out, gt, fx):
    """Sum over taps of ||f(out) - f(gt)||_2 / (feature element count), batch-averaged."""
    _same_shape(out, gt)
    if fx is None:
        raise ExtractorUnavailable("no feature extractor configured")
    total = out.new_zeros(())
    for fo, fg in zip(fx(out), fx(gt)):
        diff = (fo - fg).flatten(1)
        total = total + (torch.linalg.vector_norm(diff, dim=1) / diff.shape[1]).mean()
    return total


def loss_total(components, weights):
    """Weighted sum of the four terms; ``components`` maps term name -> scalar."""
    w = weights.as_dict()
    total = 0.0
    for name in LOSS_TERMS:
        value = components.get(name, 0.0)
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteComponent(f"loss component {name} is {v}")
        if w[name] != 0.0:
            total = total + w[name] * value
    return total
