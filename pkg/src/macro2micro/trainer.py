"""Adversarial training loop, checkpoint/resume, and inference."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .checkpoint import load_checkpoint, save_bundle
from .errors import EmptyDataset, MalformedCheckpoint, NonFiniteLoss, ShapeMismatch
from .evaluation.metrics import aggregate, image_metrics, masked_metrics
from .networks import ModelBundle, ModelConfig, build_bundle
from .volume_io import (DatasetManifest, Modality, SlicePair, central_index, crop_center,
                        extract_slice, load_volume, normalize, pad_center)

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "loss_pix", "loss_perct", "loss_gan", "loss_patch",
              "loss_total", "wall_ms")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 8
    epochs: int = 200
    max_steps: int | None = None
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    loss_weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    image_size: int = 256
    checkpoint_every: int = 0
    device: str = "cpu"
    grad_clip: float = 0.0
    pix_norm: str = "l1"
    n_patches: int = 8
    n_refs: int = 4
    bg_threshold: float = 0.0
    wm_threshold: float = 0.2
    extractor: str = "random"
    extractor_width: float = 0.25
    validate_every: int = 1
    debug: bool = False
    model: ModelConfig | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = obj.LossWeights(**self.loss_weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.model is None:
            self.model = ModelConfig(input_size=self.image_size)
        if self.model.input_size != self.image_size:
            raise ShapeMismatch(
                f"model input_size {self.model.input_size} != image_size {self.image_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainState:
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    running: dict = field(default_factory=dict)
    extractor: object = None


def init_state(bundle, cfg):
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(bundle.discriminator_parameters(), lr=cfg.learning_rate, betas=betas)
    kwargs = {"width_scale": cfg.extractor_width, "seed": 0} if cfg.extractor == "random" else {}
    fx = obj.make_extractor(cfg.extractor, **kwargs)
    dtype = next(bundle.encoder.parameters()).dtype
    fx = fx.to(device=cfg.device, dtype=dtype)
    return TrainState(opt_g, opt_d, extractor=fx)


def step_rng(seed, step):
    """Patch-sampling stream for one step; a pure function of (seed, step)."""
    return np.random.default_rng([seed, step, 2])


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch, 1]).permutation(n)


def _set_requires_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def batch_tensors(batch, size, device="cpu", dtype=torch.float32):
    src = np.stack([pad_center(p.source.astype(np.float32), size) for p in batch])
    tgt = np.stack([pad_center(p.target.astype(np.float32), size) for p in batch])
    to = lambda a: torch.from_numpy(a)[:, None].to(device=device, dtype=dtype)  # noqa: E731
    return to(src), to(tgt)


def _finite_or_raise(values, state, where):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        dump = {"step": state.step, "epoch": state.epoch, "where": where, "losses": values}
        raise NonFiniteLoss(f"non-finite loss at step {state.step} ({where}): {bad}", dump)


def train_step(batch, bundle, state, cfg):
    """One discriminator update followed by one encoder/generator update.

    Returns ``(bundle, state, losses)`` where ``losses`` holds plain floats
    for each term, the weighted total and the two discriminator losses.
    """
    if not batch:
        raise EmptyDataset("empty batch")
    w = cfg.loss_weights
    dtype = next(bundle.encoder.parameters()).dtype
    src, tgt = batch_tensors(batch, cfg.image_size, cfg.device, dtype)
    rng = step_rng(cfg.seed, state.step)
    judge_size = bundle.config.patch_size
    bundle.train()

    fake = bundle.generator(bundle.encoder(src))

    # discriminators
    d_losses = {"d": 0.0, "pd": 0.0}
    if w.lambda_gan > 0 or w.lambda_patch > 0:
        _set_requires_grad(bundle.discriminator_parameters(), True)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d = fake.new_zeros(())
        if w.lambda_gan > 0:
            ld = obj.loss_gan_discriminator(tgt, fake.detach(), bundle.discriminator)
            d_losses["d"] = float(ld.detach())
            loss_d = loss_d + ld
        if w.lambda_patch > 0:
            pf, pr, refs = obj.sample_patch_sets(fake.detach(), tgt, cfg.n_patches, cfg.n_refs,
                                                 rng, judge_size, cfg.bg_threshold)
            lpd = obj.loss_patch_discriminator(pf, pr, refs, bundle.patch_discriminator)
            d_losses["pd"] = float(lpd.detach())
            loss_d = loss_d + lpd
        _finite_or_raise(d_losses, state, "discriminator")
        loss_d.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(bundle.discriminator_parameters(), cfg.grad_clip)
        state.opt_d.step()

    # encoder + generator
    _set_requires_grad(bundle.discriminator_parameters(), False)
    try:
        comps = {}
        comps["pix"] = obj.loss_pix(fake, tgt, cfg.pix_norm)
        with torch.set_grad_enabled(w.lambda_perct > 0):
            comps["perct"] = obj.loss_perceptual(fake, tgt, state.extractor)
        with torch.set_grad_enabled(w.lambda_gan > 0):
            comps["gan"] = obj.loss_gan_generator(fake, bundle.discriminator)
        with torch.set_grad_enabled(w.lambda_patch > 0):
            comps["patch"] = obj.loss_patch(fake, tgt, bundle.patch_discriminator, cfg.n_patches,
                                            rng, cfg.n_refs, judge_size, cfg.bg_threshold)
        values = {k: float(v.detach()) for k, v in comps.items()}
        _finite_or_raise(values, state, "generator")
        total = obj.loss_total(comps, w)
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(bundle.generator_parameters(), cfg.grad_clip)
        state.opt_g.step()
    finally:
        _set_requires_grad(bundle.discriminator_parameters(), True)

    if cfg.debug:
        for name, mod in bundle.modules().items():
            for pname, p in mod.named_parameters():
                if not torch.isfinite(p).all():
                    raise NonFiniteLoss(f"parameter {name}.{pname} became non-finite",
                                        {"step": state.step, "param": f"{name}.{pname}"})

    losses = dict(values)
    losses["total"] = float(total.detach())
    losses.update(d_losses)
    state.step += 1
    run = state.running
    run["count"] = run.get("count", 0) + 1
    for k, v in losses.items():
        run[k] = run.get(k, 0.0) + v
    return bundle, state, losses


# --------------------------------------------------------------------------
# checkpoints with training state
# --------------------------------------------------------------------------

def _optimizer_arrays(prefix, opt):
    out = {}
    sd = opt.state_dict()["state"]
    for idx, st in sd.items():
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"{prefix}.{idx}.{key}"] = st[key]
        out[f"{prefix}.{idx}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def _load_optimizer(prefix, opt, arrays):
    sd = opt.state_dict()
    state = {}
    for name in [k for k in arrays if k.startswith(prefix + ".")]:
        _, idx, key = name.rsplit(".", 2)
        state.setdefault(int(idx), {})[key] = arrays[name]
    new_state = {}
    for idx, st in state.items():
        if set(st) != {"exp_avg", "exp_avg_sq", "step"}:
            raise MalformedCheckpoint(f"incomplete optimizer state for {prefix}.{idx}")
        new_state[idx] = {"step": torch.tensor(float(st["step"][0])),
                          "exp_avg": torch.from_numpy(st["exp_avg"]),
                          "exp_avg_sq": torch.from_numpy(st["exp_avg_sq"])}
    sd["state"] = new_state
    opt.load_state_dict(sd)


def save_training_checkpoint(path, bundle, state, cfg):
    arrays = {}
    arrays.update(_optimizer_arrays("optim.g", state.opt_g))
    arrays.update(_optimizer_arrays("optim.d", state.opt_d))
    extra = {"train_state": {"step": state.step, "epoch": state.epoch, "running": state.running},
             "train_config": cfg.to_dict()}
    save_bundle(bundle, path, optimizer_arrays=arrays, extra=extra)


def load_training_checkpoint(path, cfg):
    """Rebuild ``(bundle, state)`` so that training continues bit-for-bit."""
    bundle, header, arrays = load_checkpoint(path)
    bundle.to(device=cfg.device)
    state = init_state(bundle, cfg)
    _load_optimizer("optim.g", state.opt_g, arrays)
    _load_optimizer("optim.d", state.opt_d, arrays)
    ts = header.get("extra", {}).get("train_state")
    if ts is None:
        raise MalformedCheckpoint(f"{path}: no training state recorded")
    state.step, state.epoch, state.running = ts["step"], ts["epoch"], dict(ts["running"])
    return bundle, state


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

TASK_MODALITIES = {"t1_to_fa": (Modality.T1, Modality.FA),
                   "fa_to_tract": (Modality.FA, Modality.TRACT)}


def load_pairs(manifest, view="axial", offsets=(0,), task="t1_to_fa"):
    """Normalized 2D training pairs from a manifest of 2D or 3D files.

    3D volumes contribute the slices at ``central + offset`` for every offset;
    2D files contribute themselves.
    """
    src_mod, tgt_mod = TASK_MODALITIES[task]
    pairs = []
    for e in manifest.entries:
        src = normalize(load_volume(e.source_path, src_mod, e.subject_id))
        tgt = normalize(load_volume(e.target_path, tgt_mod, e.subject_id))
        if src.shape != tgt.shape:
            raise ShapeMismatch(f"{e.subject_id}: source {src.shape} vs target {tgt.shape}")
        if src.shape[2] == 1:
            pairs.append(SlicePair(src.data[:, :, 0], tgt.data[:, :, 0], "axial", 0, e.subject_id))
            continue
        for off in offsets:
            idx = central_index(src, view) + int(off)
            pairs.append(SlicePair(extract_slice(src, view, idx), extract_slice(tgt, view, idx),
                                   view, idx, e.subject_id))
    return pairs


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def synthesize(bundle, x, return_time=False):
    """Run encoder + generator on one slice (H, W) or a batch (N, H, W).

    With ``return_time`` the mean wall-clock seconds per slice is returned too.
    """
    arr = x.detach().cpu().numpy() if torch.is_tensor(x) else np.asarray(x)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    size = bundle.config.input_size
    if arr.ndim != 3 or arr.shape[1:] != (size, size):
        raise ShapeMismatch(f"synthesize expects ({size}, {size}) slices, got {arr.shape}")
    param = next(bundle.encoder.parameters())
    inp = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[:, None]
    inp = inp.to(device=param.device, dtype=param.dtype)
    bundle.eval()
    t0 = time.perf_counter()
    with torch.inference_mode():
        out = bundle.generator(bundle.encoder(inp))
    elapsed = time.perf_counter() - t0
    out = out[:, 0].float().cpu().numpy()
    out = out[0] if single else out
    return (out, elapsed / arr.shape[0]) if return_time else out


def slice_predictor(model, image_size=None):
    """Wrap a bundle (or a batch callable) into ``f(N, h, w) -> (N, h, w)``.

    Slices smaller than the model resolution are zero-padded about the
    centre and cropped back afterwards.
    """
    if isinstance(model, ModelBundle):
        size = model.config.input_size
        run = lambda batch: synthesize(model, batch)  # noqa: E731
    else:
        size = image_size
        run = model

    def predict(batch):
        batch = np.asarray(batch, dtype=np.float32)
        if size is None or batch.shape[1:] == (size, size):
            return np.asarray(run(batch), dtype=np.float32)
        out = run(pad_center(batch, size))
        return np.ascontiguousarray(crop_center(np.asarray(out, dtype=np.float32), batch.shape[1:]))

    return predict


def validation_reports(bundle, pairs, wm_threshold=0.2):
    """Per-subject ``(whole, wm_or_None)`` metric reports on held-out pairs."""
    predict = slice_predictor(bundle)
    out = []
    for p in pairs:
        pred = predict(p.source[None])[0]
        wm = masked_metrics(pred, p.target, wm_threshold) if (p.target > wm_threshold).any() else None
        out.append((image_metrics(pred, p.target), wm))
    return out


def summarize_validation(per_subject):
    whole = aggregate([w for w, _ in per_subject], "whole")
    wms = [m for _, m in per_subject if m is not None]
    return whole, (aggregate(wms, "wm") if wms else None)


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------

@dataclass
class FitResult:
    bundle: ModelBundle
    log: list
    val_reports: list
    state: TrainState


def _as_pairs(data, view, offsets, task):
    if isinstance(data, DatasetManifest):
        return load_pairs(data, view, offsets, task)
    return list(data) if data is not None else []


def fit(train, cfg, val=None, out_dir=None, resume_from=None, log_path=None,
        view="axial", slice_offsets=(0,), task="t1_to_fa"):
    """Train on a manifest (or list of SlicePairs) for ``cfg.epochs`` epochs.

    Batch composition is a pure function of (seed, epoch, step), so resuming
    from a checkpoint reproduces the uninterrupted run exactly.
    """
    pairs = _as_pairs(train, view, slice_offsets, task)
    val_pairs = _as_pairs(val, view, slice_offsets, task)
    if resume_from is not None:
        bundle, state = load_training_checkpoint(resume_from, cfg)
    else:
        bundle = build_bundle(cfg.model, seed=cfg.seed).to(device=cfg.device)
        bundle.meta.update(view=view, task=task)
        if cfg.epochs == 0:
            return FitResult(bundle, [], [], init_state(bundle, cfg))
        if not pairs:
            raise EmptyDataset("training split is empty")
        state = init_state(bundle, cfg)
    if not pairs and cfg.epochs > 0:
        raise EmptyDataset("training split is empty")

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a" if resume_from else "w", encoding="utf-8") if log_path else None

    n = len(pairs)
    per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total_steps = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    records, val_reports = [], []
    try:
        while state.step < total_steps:
            epoch, j = divmod(state.step, per_epoch)
            state.epoch = epoch
            order = epoch_order(cfg.seed, epoch, n)
            batch = [pairs[i] for i in order[j * cfg.batch_size:(j + 1) * cfg.batch_size]]
            t0 = time.perf_counter()
            try:
                bundle, state, losses = train_step(batch, bundle, state, cfg)
            except NonFiniteLoss as exc:
                if out_dir:
                    (out_dir / "nonfinite_dump.json").write_text(json.dumps(exc.dump, indent=2))
                raise
            rec = {"step": state.step, "epoch": epoch,
                   "loss_pix": losses["pix"], "loss_perct": losses["perct"],
                   "loss_gan": losses["gan"], "loss_patch": losses["patch"],
                   "loss_total": losses["total"],
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
                   "loss_d": losses["d"], "loss_pd": losses["pd"],
                   "view": view, "slices": [p.tag for p in batch]}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_training_checkpoint(out_dir / f"step{state.step:07d}.m2m", bundle, state, cfg)
            epoch_done = state.step % per_epoch == 0 or state.step == total_steps
            if val_pairs and epoch_done and ((epoch + 1) % max(cfg.validate_every, 1) == 0
                                             or state.step == total_steps):
                whole, wm = summarize_validation(validation_reports(bundle, val_pairs,
                                                                    cfg.wm_threshold))
                val_reports.append({"epoch": epoch, "step": state.step, "whole": whole, "wm": wm})
                log.info("epoch %d step %d val SSIM %.4f PSNR %.3f", epoch, state.step,
                         whole.ssim, whole.psnr_db)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        save_training_checkpoint(out_dir / "final.m2m", bundle, state, cfg)
    return FitResult(bundle, records, val_reports, state)
