import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from macro2micro import objectives as obj
from macro2micro.errors import ExtractorUnavailable, NonFiniteComponent, ShapeMismatch
from macro2micro.networks import ModelConfig, build_bundle
from macro2micro.objectives import (CropBox, LossWeights, ValidRegion, apply_crop, crops,
                                    loss_gan_discriminator, loss_gan_generator, loss_patch,
                                    loss_patch_discriminator, loss_perceptual, loss_pix,
                                    loss_total, patch_side_range, random_feature_extractor,
                                    sample_crop_box, valid)
from macro2micro.volume_io import make_synthetic_pairs


def _rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class ConstJudge(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, fake, refs):
        return torch.full((fake.shape[0],), self.value, dtype=fake.dtype)


class ToyD(nn.Module):
    """sigmoid(a * mean(x) + b)."""

    def __init__(self, a=0.7, b=-0.2):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(a, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(b, dtype=torch.float64))

    def forward(self, x):
        return torch.sigmoid(self.a * x.mean(dim=(1, 2, 3)) + self.b)


# -- pixel ------------------------------------------------------------------

def test_loss_pix_basic():
    x = _rand(2, 1, 8, 8)
    assert loss_pix(x, x).item() == 0.0
    assert loss_pix(x, x + 0.1).item() == pytest.approx(0.1, abs=1e-6)
    with pytest.raises(ShapeMismatch):
        loss_pix(x, x[:, :, :4])
    with pytest.raises(ValueError):
        loss_pix(x, x, norm="l3")


def test_loss_pix_brute_force():
    a, b = _rand(3, 1, 16, 16, seed=1), _rand(3, 1, 16, 16, seed=2)
    an, bn = a.numpy().astype(np.float64), b.numpy().astype(np.float64)
    total = 0.0
    for v in (an - bn).ravel():
        total += abs(v)
    assert loss_pix(a, b).item() == pytest.approx(total / an.size, abs=1e-7)
    assert loss_pix(a, b, "l2").item() == pytest.approx(np.mean((an - bn) ** 2), abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_pix_symmetric_nonnegative(seed):
    a, b = _rand(1, 1, 6, 6, seed=seed), _rand(1, 1, 6, 6, seed=seed + 1)
    assert loss_pix(a, b).item() == loss_pix(b, a).item() >= 0


# -- GAN --------------------------------------------------------------------

def test_gan_generator_half():
    d = lambda x: torch.full((x.shape[0],), 0.5)  # noqa: E731
    assert loss_gan_generator(_rand(4, 1, 8, 8), d).item() == pytest.approx(math.log(2), abs=1e-6)


def test_gan_discriminator_limits():
    eps = 1e-6
    real, fake = torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4)
    d = lambda x: torch.where(x.mean(dim=(1, 2, 3)) > 0.5, 1 - eps, eps)  # noqa: E731
    val = loss_gan_discriminator(real, fake, d).item()
    assert val == pytest.approx(-2 * math.log(1 - eps), abs=1e-6)
    # clamp keeps a perfect D finite
    d0 = lambda x: torch.where(x.mean(dim=(1, 2, 3)) > 0.5, 0.0, 1.0)  # noqa: E731
    assert loss_gan_discriminator(real, fake, d0).item() == pytest.approx(-2 * math.log(1e-8), rel=1e-6)


def test_gan_gradients_fd():
    d = ToyD()
    real = _rand(3, 1, 4, 4, seed=3, dtype=torch.float64)
    fake = _rand(3, 1, 4, 4, seed=4, dtype=torch.float64)
    for fn in (lambda: loss_gan_generator(fake, d), lambda: loss_gan_discriminator(real, fake, d)):
        d.zero_grad()
        fn().backward()
        for p in (d.a, d.b):
            h = 1e-4
            with torch.no_grad():
                p += h
                up = fn().item()
                p -= 2 * h
                dn = fn().item()
                p += h
            fd = (up - dn) / (2 * h)
            assert abs(fd - p.grad.item()) <= 1e-3 * max(abs(fd), 1e-8)


# -- valid / crops ----------------------------------------------------------

def test_valid_box_example():
    img = np.zeros((64, 64))
    img[10:50, 20:60] = 1.0
    assert valid(img)[0].as_tuple() == (10, 50, 20, 60)
    assert valid(np.zeros((64, 64)))[0].as_tuple() == (0, 64, 0, 64)


def _brute_box(img, thr=0.0):
    rows = [r for r in range(img.shape[0]) for c in range(img.shape[1]) if img[r, c] > thr]
    cols = [c for r in range(img.shape[0]) for c in range(img.shape[1]) if img[r, c] > thr]
    if not rows:
        return (0, img.shape[0], 0, img.shape[1])
    return (min(rows), max(rows) + 1, min(cols), max(cols) + 1)


def test_valid_matches_scan():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h, w = rng.integers(1, 20, size=2)
        img = (rng.random((h, w)) < rng.uniform(0, 0.2)).astype(float)
        assert valid(img)[0].as_tuple() == _brute_box(img)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 0.9))
def test_valid_contains_foreground(seed, thr):
    img = np.random.default_rng(seed).random((12, 15))
    r = valid(img, thr)[0]
    inside = np.zeros_like(img, dtype=bool)
    inside[r.row_min:r.row_max, r.col_min:r.col_max] = True
    assert not np.any((img > thr) & ~inside)


def test_valid_batched_tensor():
    batch = torch.zeros(3, 1, 16, 16)
    batch[0, 0, 2:5, 3:9] = 1
    batch[2, 0, 15, 0] = 0.3
    assert [r.as_tuple() for r in valid(batch)] == [(2, 5, 3, 9), (0, 16, 0, 16), (15, 16, 0, 1)]


def test_patch_side_range():
    assert patch_side_range(256) == (86, 128)
    assert patch_side_range(6) == (2, 3)
    assert patch_side_range(64) == (22, 32)
    with pytest.raises(ValueError):
        patch_side_range(5)


def test_crop_sides_audit():
    rng = np.random.default_rng(0)
    region = ValidRegion(0, 256, 0, 256)
    sides = np.array([[b.out_height, b.out_width]
                      for b in (sample_crop_box(region, (256, 256), rng) for _ in range(10_000))])
    assert sides.min() == 86 and sides.max() == 128


def test_crop_inside_region_and_clip_resize():
    rng = np.random.default_rng(1)
    region = ValidRegion(100, 130, 40, 200)  # 30 rows: smaller than any drawn side
    img = torch.zeros(1, 256, 256)
    img[:, 100:130, 40:200] = 1.0
    for _ in range(200):
        box = sample_crop_box(region, (256, 256), rng)
        assert region.row_min <= box.top and box.top + box.height <= region.row_max
        assert region.col_min <= box.left and box.left + box.width <= region.col_max
        assert box.height == 30
        patch = apply_crop(img, box)
        assert patch.shape == (1, box.out_height, box.out_width)
        assert torch.allclose(patch, torch.ones_like(patch))


def test_crops_deterministic():
    img = _rand(1, 64, 64)
    region = ValidRegion(5, 60, 5, 60)
    a = crops(img, region, np.random.default_rng(7))
    b = crops(img, region, np.random.default_rng(7))
    assert torch.equal(a, b)


def test_apply_crop_exact():
    img = torch.arange(100.0).view(1, 10, 10)
    patch = apply_crop(img, CropBox(2, 3, 4, 5, 4, 5))
    assert torch.equal(patch, img[:, 2:6, 3:8])


# -- patch loss -------------------------------------------------------------

def test_patch_loss_constant_judge():
    out, gt = _rand(2, 1, 32, 32, seed=1), _rand(2, 1, 32, 32, seed=2)
    val = loss_patch(out, gt, ConstJudge(0.5), 3, np.random.default_rng(0), judge_size=16)
    assert val.item() == pytest.approx(math.log(2), abs=1e-6)


def test_patch_loss_reproducible():
    out, gt = _rand(1, 1, 32, 32, seed=1), _rand(1, 1, 32, 32, seed=2)
    judge = lambda f, r: torch.sigmoid(f.mean(dim=(1, 2, 3)) - r.mean(dim=(1, 2, 3, 4)))  # noqa: E731
    a = loss_patch(out, gt, judge, 1, np.random.default_rng(5), n_refs=2, judge_size=16)
    b = loss_patch(out, gt, judge, 1, np.random.default_rng(5), n_refs=2, judge_size=16)
    assert a.item() == b.item()


def test_patch_loss_hand_unrolled():
    out, gt = _rand(2, 1, 48, 48, seed=3), torch.zeros(2, 1, 48, 48)
    gt[0, 0, 8:40, 4:44] = _rand(32, 40, seed=4)
    gt[1, 0, 12:30, 10:20] = 0.5
    judge = lambda f, r: torch.sigmoid(  # noqa: E731
        3 * f.mean(dim=(1, 2, 3)) - 2 * r.mean(dim=(1, 2, 3, 4)) + f.std(dim=(1, 2, 3)))
    n, R, P = 3, 2, 16
    got = loss_patch(out, gt, judge, n, np.random.default_rng(11), n_refs=R, judge_size=P).item()

    # replay the same draws by hand: per image, per patch: fake, real, then R references
    rng = np.random.default_rng(11)
    boxes = {0: (8, 40, 4, 44), 1: (12, 30, 10, 20)}
    lo, hi = 16, 24
    vals = []
    for b in range(2):
        r0, r1, c0, c1 = boxes[b]
        for _ in range(n):
            draws = []
            for _k in range(2 + R):
                sides = []
                for lo_edge, extent in ((r0, r1 - r0), (c0, c1 - c0)):
                    s = int(rng.integers(lo, hi + 1))
                    take = min(s, extent)
                    start = lo_edge + int(rng.integers(0, extent - take + 1))
                    sides.append((start, take, s))
                draws.append(sides)

            def cut(img, d):
                (t, th, sh), (l, tw, sw) = d
                p = img[:, t:t + th, l:l + tw]
                if (th, tw) != (sh, sw):
                    p = F.interpolate(p[None], size=(sh, sw), mode="bilinear",
                                      align_corners=False)[0]
                return F.interpolate(p[None], size=(P, P), mode="bilinear", align_corners=False)[0]

            fake = cut(out[b], draws[0])[None]
            refs = torch.stack([cut(gt[b], d) for d in draws[2:]])[None]
            vals.append(-math.log(max(judge(fake, refs).item(), 1e-8)))
    assert got == pytest.approx(float(np.mean(vals)), abs=1e-6)


def test_patch_discriminator_loss_constant():
    fake = real = torch.zeros(4, 1, 8, 8)
    refs = torch.zeros(4, 2, 1, 8, 8)
    assert loss_patch_discriminator(fake, real, refs, ConstJudge(0.5)).item() == \
        pytest.approx(2 * math.log(2), abs=1e-6)


# -- perceptual -------------------------------------------------------------

def test_perceptual_identity_and_stability():
    fx = random_feature_extractor()
    x = _rand(2, 1, 32, 32, seed=5)
    y = _rand(2, 1, 32, 32, seed=6)
    assert loss_perceptual(x, x, fx).item() == 0.0
    a = loss_perceptual(x, y, fx).item()
    b = loss_perceptual(x, y, random_feature_extractor()).item()
    assert a == b > 0


def test_perceptual_brute_force():
    fx = random_feature_extractor(width_scale=0.125, seed=3).double()
    x = _rand(2, 1, 24, 24, seed=7, dtype=torch.float64)
    y = _rand(2, 1, 24, 24, seed=8, dtype=torch.float64)
    # run the layer list by hand and collect taps
    expected = 0.0
    for i in range(2):
        a = x[i:i + 1].expand(-1, 3, -1, -1)
        b = y[i:i + 1].expand(-1, 3, -1, -1)
        for k, layer in enumerate(fx.layers):
            a, b = layer(a), layer(b)
            if k in fx.taps:
                d = (a - b).detach().numpy().ravel()
                expected += math.sqrt(sum(v * v for v in d)) / d.size / 2
            if k == fx.taps[-1]:
                break
    assert loss_perceptual(x, y, fx).item() == pytest.approx(expected, abs=1e-6)


def test_extractor_frozen_and_tap_order():
    fx = random_feature_extractor()
    assert not any(p.requires_grad for p in fx.parameters())
    fx.train()
    assert not fx.training
    feats = fx(_rand(1, 1, 32, 32))
    assert [f.shape[-1] for f in feats] == [32, 16, 8, 4]


def test_vgg_missing_weights(tmp_path, monkeypatch):
    monkeypatch.setenv("M2M_CACHE", str(tmp_path))
    with pytest.raises(ExtractorUnavailable):
        obj.make_extractor("vgg19")
    with pytest.raises(ExtractorUnavailable):
        obj.make_extractor("resnet")
    with pytest.raises(ExtractorUnavailable):
        loss_perceptual(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 8), None)


# -- total ------------------------------------------------------------------

def test_loss_total_examples():
    comps = {"pix": torch.tensor(0.3), "perct": torch.tensor(2.0), "gan": torch.tensor(5.0),
             "patch": torch.tensor(7.0)}
    assert float(loss_total(comps, LossWeights(1, 0, 0, 0))) == pytest.approx(0.3)
    ones = {k: 1.0 for k in obj.LOSS_TERMS}
    assert loss_total(ones, LossWeights(1, 1, 1, 1)) == 4.0


def test_loss_total_dot_product():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.random(4) * 10
        w = rng.random(4) * 10
        got = loss_total(dict(zip(obj.LOSS_TERMS, map(float, c))), LossWeights(*w))
        assert got == pytest.approx(float(np.dot(c, w)), abs=1e-12)


def test_loss_total_linear_in_lambda():
    comps = {"pix": 0.5, "perct": 0.25, "gan": 0.7, "patch": 0.9}
    base = loss_total(comps, LossWeights(1, 1, 1, 1))
    for i, name in enumerate(obj.LOSS_TERMS):
        w = [1.0] * 4
        w[i] = 3.0
        assert loss_total(comps, LossWeights(*w)) - base == pytest.approx(2 * comps[name])


def test_loss_total_nonfinite():
    with pytest.raises(NonFiniteComponent):
        loss_total({"pix": float("nan")}, LossWeights())
    with pytest.raises(NonFiniteComponent):
        loss_total({"gan": torch.tensor(float("inf"))}, LossWeights(1, 0, 0, 0))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1, 1)
    assert LossWeights().as_tuple() == (10.0, 1.0, 1.0, 1.0)


def test_loss_gradients_wrt_output_fd():
    out = _rand(1, 1, 12, 12, seed=9, dtype=torch.float64).requires_grad_(True)
    gt = _rand(1, 1, 12, 12, seed=10, dtype=torch.float64)
    fx = random_feature_extractor(width_scale=0.125, seed=1).double()
    d = ToyD()
    terms = [lambda o: loss_pix(o, gt, "l2"),
             lambda o: loss_perceptual(o, gt, fx),
             lambda o: loss_gan_generator(o, d)]
    rng = np.random.default_rng(2)
    for fn in terms:
        (g,) = torch.autograd.grad(fn(out), out)
        for _ in range(10):
            i, j = rng.integers(0, 12, size=2)
            h = 1e-5
            p, m = out.detach().clone(), out.detach().clone()
            p[0, 0, i, j] += h
            m[0, 0, i, j] -= h
            fd = (fn(p).item() - fn(m).item()) / (2 * h)
            an = g[0, 0, i, j].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-7)


# -- whole-pipeline gradients ----------------------------------------------

def _toy_total(bundle, src, tgt, fx, weights):
    fake = bundle.generator(bundle.encoder(src))
    comps = {
        "pix": loss_pix(fake, tgt),
        "perct": loss_perceptual(fake, tgt, fx),
        "gan": loss_gan_generator(fake, bundle.discriminator),
        "patch": loss_patch(fake, tgt, bundle.patch_discriminator, 2,
                            np.random.default_rng([7, 0, 2]), n_refs=2, judge_size=16),
    }
    return loss_total(comps, weights)


def toy_gradient_check(norm, h, n_params, seed=0):
    """Worst relative error between central FD and autograd of L_total.

    Toy pipeline: 4-channel stem, 8-channel octave features, 32x32 images,
    all four loss terms with a fixed patch rng. Float64 throughout.
    """
    cfg = ModelConfig(input_size=32, stem_channels=4, feature_channels=8, n_res_blocks=1,
                      disc_channels=4, disc_layers=3, patch_size=16, patch_channels=4,
                      patch_embed=4, norm=norm)
    bundle = build_bundle(cfg, seed=seed).to(dtype=torch.float64).train()
    fx = random_feature_extractor(width_scale=0.125, seed=0).double()
    pairs = make_synthetic_pairs(2, 32, seed=4)
    src = torch.from_numpy(np.stack([p.source for p in pairs])[:, None]).double()
    tgt = torch.from_numpy(np.stack([p.target for p in pairs])[:, None]).double()
    weights = LossWeights()
    params = bundle.generator_parameters()
    analytic = torch.autograd.grad(_toy_total(bundle, src, tgt, fx, weights), params)
    offsets = np.concatenate([[0], np.cumsum([p.numel() for p in params])])
    picks = np.random.default_rng(seed).choice(offsets[-1], size=n_params, replace=False)
    worst = 0.0
    with torch.no_grad():
        for k in picks:
            t = int(np.searchsorted(offsets, k, side="right") - 1)
            idx = np.unravel_index(k - offsets[t], params[t].shape)
            orig = params[t][idx].item()
            params[t][idx] = orig + h
            up = _toy_total(bundle, src, tgt, fx, weights).item()
            params[t][idx] = orig - h
            down = _toy_total(bundle, src, tgt, fx, weights).item()
            params[t][idx] = orig
            fd = (up - down) / (2 * h)
            an = analytic[t][idx].item()
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def test_pipeline_gradients_with_instance_norm():
    # instance norm over 4x4 low-frequency maps is too curved for h=1e-4
    assert toy_gradient_check(norm="instance", h=1e-5, n_params=50) < 1e-3
