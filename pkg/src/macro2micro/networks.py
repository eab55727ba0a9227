"""Encoder, generator and the two discriminators.

Default shapes for a 256x256 input: the encoder emits a high branch of
(128, 64, 64) and a low branch of (128, 32, 32); the generator maps that
back to a single 256x256 channel in [0, 1].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptyReferenceSet, ShapeMismatch
from .octave import FrequencyFeature, OctConv2d, oct_merge, oct_split, split_channels

BUNDLE_VERSION = "macro2micro-bundle/1"


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``feature_channels`` is the encoder output width summed over both
    branches; ``alpha`` sets the low-frequency share of it.
    """

    input_size: int = 256
    in_channels: int = 1
    stem_channels: int = 64
    feature_channels: int = 256
    alpha: float = 0.5
    n_down: int = 2
    n_res_blocks: int = 4
    norm: str = "instance"
    disc_channels: int = 64
    disc_layers: int = 5
    patch_size: int = 64
    patch_channels: int = 32
    patch_embed: int = 256

    def __post_init__(self):
        if self.input_size % (2 ** (self.n_down + 1)):
            raise ShapeMismatch(
                f"input_size {self.input_size} must be divisible by {2 ** (self.n_down + 1)}")
        if self.norm not in ("instance", "none"):
            raise ValueError("norm must be 'instance' or 'none'")
        if self.feature_channels % (2 ** self.n_down):
            raise ValueError("feature_channels must be divisible by 2**n_down")

    @property
    def feature_channels_high(self):
        return split_channels(self.feature_channels, self.alpha)[0]

    @property
    def feature_channels_low(self):
        return split_channels(self.feature_channels, self.alpha)[1]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _norm(kind, channels):
    if kind == "none" or channels == 0:
        return nn.Identity()
    return nn.InstanceNorm2d(channels, affine=True)


class OctNormAct(nn.Module):
    """Per-branch normalization followed by an optional ReLU."""

    def __init__(self, channels, alpha, norm, act=True):
        super().__init__()
        ch, cl = split_channels(channels, alpha)
        self.norm_h = _norm(norm, ch)
        self.norm_l = _norm(norm, cl)
        self.act = act

    def forward(self, f):
        high, low = self.norm_h(f.high), self.norm_l(f.low)
        if self.act:
            high, low = F.relu(high), F.relu(low)
        return FrequencyFeature(high, low)


class OctResBlock(nn.Module):
    def __init__(self, channels, alpha, norm):
        super().__init__()
        self.conv1 = OctConv2d(channels, channels, 3, alpha, alpha, bias=norm == "none")
        self.post1 = OctNormAct(channels, alpha, norm)
        self.conv2 = OctConv2d(channels, channels, 3, alpha, alpha, bias=norm == "none")
        self.post2 = OctNormAct(channels, alpha, norm, act=False)

    def forward(self, f):
        return f + self.post2(self.conv2(self.post1(self.conv1(f))))


class Encoder(nn.Module):
    """Stem conv, octave split, then strided octave convs."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_channels, 7, padding=3, bias=cfg.norm == "none"),
            _norm(cfg.norm, cfg.stem_channels),
            nn.ReLU(),
        )
        widths = [cfg.stem_channels] + [
            cfg.feature_channels // 2 ** (cfg.n_down - 1 - i) for i in range(cfg.n_down)]
        self.down = nn.ModuleList()
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            self.down.append(nn.ModuleDict({
                "conv": OctConv2d(c_in, c_out, 3, cfg.alpha, cfg.alpha, stride=2,
                                  bias=cfg.norm == "none"),
                "post": OctNormAct(c_out, cfg.alpha, cfg.norm),
            }))

    def forward(self, x, return_all=False):
        size = self.cfg.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.cfg.in_channels, size, size):
            raise ShapeMismatch(
                f"encoder expects (N, {self.cfg.in_channels}, {size}, {size}), got {tuple(x.shape)}")
        f = oct_split(self.stem(x), self.cfg.alpha)
        trace = [f]
        for stage in self.down:
            f = stage["post"](stage["conv"](f))
            trace.append(f)
        return (f, trace) if return_all else f


class Generator(nn.Module):
    """Octave residual body, upsample + standard conv stages, merge head."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_channels
        self.blocks = nn.ModuleList(OctResBlock(c, cfg.alpha, cfg.norm)
                                    for _ in range(cfg.n_res_blocks))
        self.up = nn.ModuleList()
        for _ in range(cfg.n_down):
            ch, cl = split_channels(c, cfg.alpha)
            nh, nl = split_channels(c // 2, cfg.alpha)
            stage = nn.ModuleDict()
            if ch:
                stage["high"] = nn.Sequential(
                    nn.Conv2d(ch, nh, 3, padding=1, bias=cfg.norm == "none"),
                    _norm(cfg.norm, nh), nn.ReLU())
            if cl:
                stage["low"] = nn.Sequential(
                    nn.Conv2d(cl, nl, 3, padding=1, bias=cfg.norm == "none"),
                    _norm(cfg.norm, nl), nn.ReLU())
            self.up.append(stage)
            c //= 2
        self.head = nn.Conv2d(c, cfg.in_channels, 7, padding=3)

    def forward(self, f, return_all=False):
        cfg = self.cfg
        side = cfg.input_size // 2 ** cfg.n_down
        ch, cl = split_channels(cfg.feature_channels, cfg.alpha)
        if (tuple(f.high.shape[1:]) != (ch, side, side)
                or tuple(f.low.shape[1:]) != (cl, side // 2, side // 2)):
            raise ShapeMismatch(
                f"generator expects high ({ch}, {side}, {side}) / low ({cl}, {side // 2}, "
                f"{side // 2}); got {tuple(f.high.shape[1:])} / {tuple(f.low.shape[1:])}")
        trace = []
        for block in self.blocks:
            f = block(f)
            trace.append(f)
        for stage in self.up:
            high = F.interpolate(f.high, scale_factor=2, mode="nearest")
            low = F.interpolate(f.low, scale_factor=2, mode="nearest")
            f = FrequencyFeature(stage["high"](high) if "high" in stage else high[:, :0],
                                 stage["low"](low) if "low" in stage else low[:, :0])
            trace.append(f)
        out = torch.sigmoid(self.head(oct_merge(f)))
        return (out, trace) if return_all else out


class Discriminator(nn.Module):
    """Strided conv stack with leaky activations; one sigmoid score per image."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        layers, c_in, c = [], cfg.in_channels, cfg.disc_channels
        for _ in range(cfg.disc_layers - 1):
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in, c = c, min(c * 2, cfg.disc_channels * 8)
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def logits(self, x):
        size = self.cfg.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.cfg.in_channels, size, size):
            raise ShapeMismatch(f"discriminator expects (N, 1, {size}, {size}), got {tuple(x.shape)}")
        return self.net(x).mean(dim=(1, 2, 3))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def resize_patches(patches, size):
    return F.interpolate(patches, size=(size, size), mode="bilinear", align_corners=False)


class PatchDiscriminator(nn.Module):
    """Co-occurrence judge: is a patch plausible given a set of reference patches?

    Every patch is resized to ``cfg.patch_size`` and embedded; reference
    embeddings are mean-pooled, concatenated with the candidate embedding
    and classified.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.patch_channels
        p = cfg.patch_size
        self.encoder = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 8 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(8 * c, 8 * c, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(8 * c * (p // 16) ** 2, cfg.patch_embed),
        )
        e = cfg.patch_embed
        self.classifier = nn.Sequential(
            nn.LeakyReLU(0.2),
            nn.Linear(2 * e, 2 * e), nn.LeakyReLU(0.2),
            nn.Linear(2 * e, e), nn.LeakyReLU(0.2),
            nn.Linear(e, 1),
        )

    def embed(self, patches):
        return self.encoder(resize_patches(patches, self.cfg.patch_size))

    def logits(self, fake, refs):
        """``fake``: (B, 1, h, w); ``refs``: (B, R, 1, h', w') or a list of (R, 1, h', w')."""
        if isinstance(refs, (list, tuple)):
            if len(refs) != fake.shape[0]:
                raise ShapeMismatch("one reference set per candidate patch is required")
            if any(r.shape[0] == 0 for r in refs):
                raise EmptyReferenceSet("patch judge needs at least one reference patch")
            ref_emb = torch.stack([self.embed(r).mean(dim=0) for r in refs])
        else:
            if refs.dim() != 5 or refs.shape[0] != fake.shape[0]:
                raise ShapeMismatch(f"refs must be (B, R, C, h, w), got {tuple(refs.shape)}")
            b, r = refs.shape[:2]
            if r == 0:
                raise EmptyReferenceSet("patch judge needs at least one reference patch")
            ref_emb = self.embed(refs.flatten(0, 1)).view(b, r, -1).mean(dim=1)
        return self.classifier(torch.cat([self.embed(fake), ref_emb], dim=1)).squeeze(1)

    def forward(self, fake, refs):
        return torch.sigmoid(self.logits(fake, refs))


@dataclass
class ModelBundle:
    encoder: Encoder
    generator: Generator
    discriminator: Discriminator
    patch_discriminator: PatchDiscriminator
    config: ModelConfig
    version: str = BUNDLE_VERSION
    meta: dict = field(default_factory=dict)

    COMPONENTS = ("encoder", "generator", "discriminator", "patch_discriminator")

    def modules(self):
        return {name: getattr(self, name) for name in self.COMPONENTS}

    def named_arrays(self):
        """Flat ``{"component.param": tensor}`` view used by checkpoints."""
        out = {}
        for name, mod in self.modules().items():
            for key, t in mod.state_dict().items():
                out[f"{name}.{key}"] = t
        return out

    def to(self, device=None, dtype=None):
        for mod in self.modules().values():
            mod.to(device=device, dtype=dtype)
        return self

    def train(self, mode=True):
        for mod in self.modules().values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def generator_parameters(self):
        return list(self.encoder.parameters()) + list(self.generator.parameters())

    def discriminator_parameters(self):
        return list(self.discriminator.parameters()) + list(self.patch_discriminator.parameters())

    def config_dict(self):
        return asdict(self.config)


def build_bundle(config=None, seed=0):
    """Construct all four networks with parameters drawn from ``seed``."""
    config = config or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bundle = ModelBundle(Encoder(config), Generator(config), Discriminator(config),
                             PatchDiscriminator(config), config)
    bundle.meta["seed"] = seed
    return bundle


def encode(bundle, x):
    return bundle.encoder(x)


def generate(bundle, f):
    return bundle.generator(f)


def discriminate(bundle, x):
    return bundle.discriminator(x)


def patch_discriminate(bundle, fake_patch, reference_patches):
    return bundle.patch_discriminator(fake_patch, reference_patches)


def count_parameters(*modules):
    return sum(p.numel() for m in modules for p in m.parameters())
