"""Embedding, phenotype-probe and slice-offset analyses of synthesized images."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from sklearn.decomposition import IncrementalPCA
from sklearn.linear_model import LogisticRegressionCV, RidgeCV
from sklearn.metrics import accuracy_score, mean_squared_error, roc_auc_score
from sklearn.model_selection import KFold, StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ..errors import DegenerateData, DegenerateLabels, ShapeMismatch
from ..volume_io import VolumeGrid, central_index, extract_slice, normalize_array
from .metrics import aggregate, image_metrics, masked_metrics

PCA_BATCH_SIZE = 200


def shared_foreground_mask(stack):
    """Pixels that are non-zero in at least one image of ``stack`` (N, ...)."""
    return np.any(np.asarray(stack) != 0, axis=0)


def _flatten(images, mask=None):
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    return x if mask is None else x[:, mask.ravel()]


@dataclass
class PcaEmbedding:
    coordinates: dict
    explained_variance_ratio: np.ndarray
    centroid_distances: dict = field(default_factory=dict)
    matched_distance: float | None = None
    n_features: int = 0


def pca_embed(groups, batch_size=PCA_BATCH_SIZE, matched=("gt", "generated")):
    """Two-component incremental PCA over the union of image groups.

    ``groups`` maps a group name to an (N, H, W) stack. Background pixels
    shared by every image are dropped first. ``matched_distance`` is the
    mean Euclidean distance between same-index images of the two groups
    named in ``matched`` (when both exist).
    """
    names = list(groups)
    stacks = [np.asarray(groups[n], dtype=np.float64) for n in names]
    if not stacks:
        raise DegenerateData("no image groups given")
    shape = stacks[0].shape[1:]
    for n, s in zip(names, stacks):
        if s.shape[0] < 3:
            raise DegenerateData(f"group {n!r} has fewer than 3 images")
        if s.shape[1:] != shape:
            raise ShapeMismatch(f"group {n!r} has image shape {s.shape[1:]}, expected {shape}")
    everything = np.concatenate(stacks)
    mask = shared_foreground_mask(everything)
    x = _flatten(everything, mask)
    if x.shape[1] < 2:
        raise DegenerateData("fewer than two foreground pixels")

    ipca = IncrementalPCA(n_components=2, batch_size=batch_size)
    ipca.fit(x)
    ev = ipca.explained_variance_
    if not np.all(np.isfinite(ev)) or ev[0] <= 0 or ev[1] <= 1e-12 * ev[0]:
        raise DegenerateData("data have rank < 2")

    coords = {}
    start = 0
    proj = ipca.transform(x)
    for n, s in zip(names, stacks):
        coords[n] = proj[start:start + s.shape[0]]
        start += s.shape[0]

    centroid = {}
    for a, b in itertools.combinations(names, 2):
        centroid[(a, b)] = float(np.linalg.norm(coords[a].mean(0) - coords[b].mean(0)))
    matched_distance = None
    ga, gb = matched
    if ga in coords and gb in coords:
        if len(coords[ga]) != len(coords[gb]):
            raise ShapeMismatch("matched groups must list the same subjects in the same order")
        matched_distance = float(np.linalg.norm(coords[ga] - coords[gb], axis=1).mean())
    return PcaEmbedding(coords, np.asarray(ipca.explained_variance_ratio_), centroid,
                        matched_distance, int(mask.sum()))


def linear_probe(features, labels, task="binary", folds=5, seed=0, mask=None):
    """Cross-validated L2-penalized GLM on flattened images.

    Binary tasks report pooled out-of-fold ``auroc`` and ``accuracy``;
    regression reports ``corr_coef`` and ``mse``. The penalty strength is
    chosen by an inner 3-fold search inside every outer fold.
    """
    feats = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if feats.shape[0] != y.shape[0]:
        raise ShapeMismatch("features and labels disagree on sample count")
    if feats.ndim > 2:
        if mask is None:
            mask = shared_foreground_mask(feats)
        x = _flatten(feats, mask)
    else:
        x = feats

    if task == "binary":
        classes, counts = np.unique(y, return_counts=True)
        if len(classes) != 2 or counts.min() < folds:
            raise DegenerateLabels(f"binary probe needs two classes with >= {folds} samples each")
        y01 = (y == classes[1]).astype(int)
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        scores = np.zeros(len(y01))
        for tr, te in splitter.split(x, y01):
            model = make_pipeline(
                StandardScaler(),
                LogisticRegressionCV(Cs=np.logspace(-4, 2, 7), cv=3, max_iter=2000))
            model.fit(x[tr], y01[tr])
            scores[te] = model.predict_proba(x[te])[:, 1]
        return {"auroc": float(roc_auc_score(y01, scores)),
                "accuracy": float(accuracy_score(y01, scores >= 0.5))}

    if task == "regression":
        y = y.astype(np.float64)
        if np.ptp(y) == 0:
            raise DegenerateLabels("regression labels are constant")
        splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
        pred = np.zeros(len(y))
        for tr, te in splitter.split(x):
            model = make_pipeline(StandardScaler(), RidgeCV(alphas=np.logspace(-3, 4, 15), cv=3))
            model.fit(x[tr], y[tr])
            pred[te] = model.predict(x[te])
        corr = float(np.corrcoef(pred, y)[0, 1]) if np.ptp(pred) > 0 else 0.0
        return {"corr_coef": corr, "mse": float(mean_squared_error(y, pred))}

    raise ValueError(f"unknown probe task {task!r}")


@dataclass
class ProfileRow:
    offset: int
    whole: object
    wm: object = None


def distance_profile(model, volumes, view, offsets, image_size=None, wm_threshold=None):
    """Score synthesis at slice offsets from the central slice.

    ``model`` is a bundle or a callable mapping an (N, H, W) batch to the
    same shape; ``volumes`` is a list of ``(source, target)`` VolumeGrids.
    Volumes are min-max normalized before slicing.
    """
    from ..trainer import slice_predictor

    predict = slice_predictor(model, image_size)
    prepared = []
    for src, tgt in volumes:
        s = src.data if isinstance(src, VolumeGrid) else np.asarray(src)
        t = tgt.data if isinstance(tgt, VolumeGrid) else np.asarray(tgt)
        if s.shape != t.shape:
            raise ShapeMismatch("source and target volumes differ in shape")
        prepared.append((normalize_array(s), normalize_array(t)))

    rows = []
    for d in offsets:
        whole, wm = [], []
        for s, t in prepared:
            idx = central_index(s, view) + int(d)
            src_slice = extract_slice(s, view, idx)
            gt_slice = extract_slice(t, view, idx)
            pred = predict(src_slice[None])[0]
            whole.append(image_metrics(pred, gt_slice))
            if wm_threshold is not None and (gt_slice > wm_threshold).any():
                wm.append(masked_metrics(pred, gt_slice, wm_threshold))
        rows.append(ProfileRow(int(d), aggregate(whole, "whole"),
                               aggregate(wm, "wm") if wm else None))
    return rows
