"""Task pipelines: per-view training and tri-view 3D assembly."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch
from .trainer import fit, slice_predictor
from .volume_io import VIEWS, VolumeGrid, normalize_array, stack_slices, view_axis

log = logging.getLogger(__name__)


def train_three_views(train, cfg, val=None, out_dir=None, slice_offsets=(0,), task="fa_to_tract",
                      views=VIEWS):
    """Train one bundle per view on slices cut along that view only.

    Returns ``{view: FitResult}``. With ``out_dir`` each view writes its
    checkpoints and step log under ``out_dir/<view>/`` plus a copy of the
    final checkpoint as ``out_dir/<view>.m2m``.
    """
    results = {}
    for view in views:
        vdir = Path(out_dir) / view if out_dir else None
        log_path = vdir / "train_log.ndjson" if vdir else None
        if vdir:
            vdir.mkdir(parents=True, exist_ok=True)
        res = fit(train, cfg, val=val, out_dir=vdir, log_path=log_path, view=view,
                  slice_offsets=slice_offsets, task=task)
        if out_dir:
            (Path(out_dir) / f"{view}.m2m").write_bytes((vdir / "final.m2m").read_bytes())
        results[view] = res
        log.info("view %s trained for %d steps", view, res.state.step)
    return results


def _view_items(bundles):
    if isinstance(bundles, dict):
        items = list(bundles.items())
    else:
        items = list(bundles)
        if items and not isinstance(items[0], tuple):
            items = list(zip(VIEWS, items))
    views = [v for v, _ in items]
    if sorted(views) != sorted(VIEWS):
        raise ValueError(f"need exactly one model per view {VIEWS}, got {views}")
    return items


def synthesize_view_stack(model, data, view, image_size=None, batch_size=16):
    """Synthesize every slice of ``data`` along ``view`` and restack them."""
    predict = slice_predictor(model, image_size)
    axis = view_axis(view)
    slices = np.moveaxis(data, axis, 0)
    out = []
    for start in range(0, slices.shape[0], batch_size):
        chunk = np.ascontiguousarray(slices[start:start + batch_size])
        pred = predict(chunk)
        if pred.shape != chunk.shape:
            raise ShapeMismatch(f"{view} model returned {pred.shape} for slices {chunk.shape}")
        out.extend(pred)
    return stack_slices(out, view).astype(np.float32)


def mean_merge(stacks):
    """Voxelwise mean of the view stacks, independent of their order.

    Values are sorted per voxel before a float64 summation, so any
    permutation of the inputs yields bit-identical output.
    """
    arr = np.stack([np.asarray(s, dtype=np.float64) for s in stacks])
    arr.sort(axis=0)
    return (arr.sum(axis=0) / arr.shape[0]).astype(np.float32)


def triview_synthesize(bundles, source, image_size=None, normalize_input=True):
    """Assemble a 3D volume from three per-view 2D models.

    ``bundles`` is ``{view: model}``, a sequence of ``(view, model)`` pairs,
    or three models in axial/coronal/sagittal order. A model is a
    ModelBundle or a callable on (N, H, W) slice batches. Slices smaller
    than a bundle's resolution are zero-padded and cropped back.
    """
    items = _view_items(bundles)
    data = source.data.astype(np.float32)
    if normalize_input:
        data = normalize_array(data)
    stacks = [synthesize_view_stack(m, data, v, image_size) for v, m in items]
    shapes = {s.shape for s in stacks}
    if len(shapes) != 1:
        raise ShapeMismatch(f"view stacks disagree in shape: {shapes}")
    merged = np.clip(mean_merge(stacks), 0.0, 1.0)
    return replace(source, data=merged, modality="TRACT")


def stack_views(bundles, source, image_size=None, normalize_input=True):
    """The three per-view stacks behind :func:`triview_synthesize` (for inspection)."""
    data = source.data.astype(np.float32)
    if normalize_input:
        data = normalize_array(data)
    return {v: synthesize_view_stack(m, data, v, image_size) for v, m in _view_items(bundles)}
