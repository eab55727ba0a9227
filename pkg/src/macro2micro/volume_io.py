"""Volume loading, normalization, slicing and synthetic paired data.

Axis convention: volumes are stored as ``(x, y, z)``.

* axial    -> fixed z -> ``data[:, :, k]``
* coronal  -> fixed y -> ``data[:, k, :]``
* sagittal -> fixed x -> ``data[k, :, :]``

2D images are carried as volumes of shape ``(H, W, 1)`` so that the axial
slice 0 is the image itself.
"""
from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import AllNonFinite, IndexOutOfRange, MalformedVolume, MissingFile, ShapeMismatch

VIEWS = ("axial", "coronal", "sagittal")
_VIEW_AXIS = {"axial": 2, "coronal": 1, "sagittal": 0}


class Modality(str, enum.Enum):
    T1 = "T1"
    FA = "FA"
    TRACT = "TRACT"
    MD = "MD"
    OTHER = "OTHER"


@dataclass
class VolumeGrid:
    data: np.ndarray
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)
    modality: Modality = Modality.OTHER
    subject_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise MalformedVolume(f"expected a 3D grid, got shape {data.shape}")
        self.data = data
        vs = tuple(float(v) for v in self.voxel_size_mm)
        if len(vs) != 3 or not all(v > 0 for v in vs):
            raise MalformedVolume(f"voxel sizes must be 3 positive values, got {vs}")
        self.voxel_size_mm = vs
        self.modality = Modality(self.modality)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class SlicePair:
    source: np.ndarray
    target: np.ndarray
    view: str = "axial"
    slice_index: int = 0
    subject_id: str = ""

    def __post_init__(self):
        if self.source.shape != self.target.shape or self.source.ndim != 2:
            raise ShapeMismatch(
                f"source {self.source.shape} and target {self.target.shape} must be equal 2D shapes")
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")

    @property
    def tag(self):
        return f"{self.subject_id}:{self.view}:{self.slice_index}"


@dataclass
class ManifestEntry:
    subject_id: str
    source_path: str
    target_path: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate subject ids in {self.split} split")

    def __len__(self):
        return len(self.entries)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def _is_nifti(path):
    name = str(path).lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def load_volume(path, modality=Modality.OTHER, subject_id=None):
    """Read a NIfTI-1 volume or a grayscale PNG slice.

    Intensities are returned exactly as stored (no scaling, no dtype change
    beyond what the file format implies).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such volume file: {path}")
    if subject_id is None:
        subject_id = path.name.split(".")[0]
    name = path.name.lower()
    try:
        if _is_nifti(path):
            import nibabel as nib

            img = nib.load(str(path))
            data = np.asanyarray(img.dataobj)
            zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
        elif name.endswith(".png"):
            from PIL import Image

            with Image.open(path) as im:
                if im.mode not in ("L", "I;16", "I;16B", "I"):
                    raise MalformedVolume(f"unsupported PNG mode {im.mode}")
                data = np.array(im)
            if data.dtype == np.int32:
                data = data.astype(np.uint16)
            zooms = (1.0, 1.0, 1.0)
        else:
            raise MalformedVolume(f"unsupported volume format: {path.name}")
    except MalformedVolume:
        raise
    except Exception as exc:  # nibabel/Pillow raise a zoo of types on bad headers
        raise MalformedVolume(f"cannot parse {path}: {exc}") from exc

    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim not in (2, 3):
        raise MalformedVolume(f"{path}: expected 2D or 3D data, got shape {data.shape}")
    zooms = tuple(z if z > 0 else 1.0 for z in (zooms + (1.0, 1.0, 1.0))[:3])
    return VolumeGrid(np.array(data), zooms, modality, subject_id)


def save_volume(v, path):
    """Write ``v`` losslessly. PNG output requires integer data and depth 1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        import nibabel as nib

        affine = np.diag(list(v.voxel_size_mm) + [1.0])
        img = nib.Nifti1Image(v.data, affine)
        img.header.set_data_dtype(v.data.dtype)
        img.header.set_zooms(v.voxel_size_mm)
        tmp = path.with_name(".tmp-" + path.name)
        nib.save(img, str(tmp))
        os.replace(tmp, path)
    elif path.name.lower().endswith(".png"):
        from PIL import Image

        if v.data.shape[2] != 1 or v.data.dtype not in (np.uint8, np.uint16):
            raise MalformedVolume("PNG output needs a single uint8/uint16 slice")
        Image.fromarray(v.data[:, :, 0]).save(path)
    else:
        raise MalformedVolume(f"unsupported volume format: {path.name}")


# --------------------------------------------------------------------------
# intensity and geometry
# --------------------------------------------------------------------------

def normalize_array(a):
    """Min-max rescale of an array into float32 [0, 1]; non-finite -> 0."""
    a = np.asarray(a, dtype=np.float64)
    finite = np.isfinite(a)
    if not finite.any():
        raise AllNonFinite("grid has no finite values")
    lo = a[finite].min()
    hi = a[finite].max()
    out = np.zeros(a.shape, dtype=np.float64)
    if hi > lo:
        out[finite] = (a[finite] - lo) / (hi - lo)
    return out.astype(np.float32)


def normalize(v):
    """Per-volume min-max normalization; constant volumes map to zeros."""
    return replace(v, data=normalize_array(v.data))


def view_axis(view):
    try:
        return _VIEW_AXIS[view]
    except KeyError:
        raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}") from None


def central_index(v, view):
    shape = v.shape if isinstance(v, VolumeGrid) else np.shape(v)
    return shape[view_axis(view)] // 2


def extract_slice(v, view, index):
    data = v.data if isinstance(v, VolumeGrid) else np.asarray(v)
    axis = view_axis(view)
    extent = data.shape[axis]
    if not 0 <= index < extent:
        raise IndexOutOfRange(f"{view} index {index} outside [0, {extent})")
    return np.take(data, index, axis=axis)


def stack_slices(slices, view):
    """Inverse of extracting every slice along ``view``."""
    return np.stack(list(slices), axis=view_axis(view))


def pad_center(img, size):
    """Zero-pad a 2D array symmetrically up to ``size`` x ``size``."""
    h, w = img.shape[-2:]
    if h > size or w > size:
        raise ShapeMismatch(f"image {h}x{w} larger than model size {size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros(img.shape[:-2] + (size, size), dtype=img.dtype)
    out[..., top:top + h, left:left + w] = img
    return out


def crop_center(img, shape):
    """Undo :func:`pad_center`."""
    h, w = shape
    size_h, size_w = img.shape[-2:]
    top, left = (size_h - h) // 2, (size_w - w) // 2
    return img[..., top:top + h, left:left + w]


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def _synthetic_fields(shape, rng):
    ndim = len(shape)
    size = shape[0]
    coords = np.meshgrid(*[np.linspace(-1, 1, s) for s in shape], indexing="ij")
    radii = rng.uniform(0.55, 0.8, size=ndim)
    centre = rng.uniform(-0.08, 0.08, size=ndim)
    r = np.sqrt(sum(((c - m) / q) ** 2 for c, m, q in zip(coords, centre, radii)))
    wobble = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=size / 8, mode="wrap")
    wobble /= np.abs(wobble).max() + 1e-12
    mask = (r + 0.15 * wobble) < 1.0

    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=size / 16, mode="wrap")
    field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12)
    source = np.where(mask, 0.25 + 0.75 * field_, 0.0)

    grad = np.sqrt(sum(ndimage.sobel(field_, axis=a) ** 2 for a in range(ndim)))
    grad = ndimage.gaussian_filter(grad, sigma=1.0)
    target = np.where(mask, grad, 0.0)
    target /= target.max() + 1e-12
    return source.astype(np.float32), target.astype(np.float32)


def make_synthetic_pairs(n, size, seed):
    """Deterministic paired 2D images with a learnable source->target map.

    Source is a smooth random intensity field inside a blob-shaped "brain"
    mask; target is the gradient magnitude of that field inside the mask.
    """
    if n < 1 or size < 16:
        raise ValueError("need n >= 1 and size >= 16")
    pairs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        src, tgt = _synthetic_fields((size, size), rng)
        pairs.append(SlicePair(src, tgt, "axial", 0, f"syn{seed}-{i:04d}"))
    return pairs


def make_synthetic_volume_pair(size, seed, subject_id=None):
    """3D analogue of :func:`make_synthetic_pairs` (isotropic by construction)."""
    rng = np.random.default_rng([seed, 7919])
    src, tgt = _synthetic_fields((size, size, size), rng)
    sid = subject_id or f"vol{seed:04d}"
    return (VolumeGrid(src, (1.0, 1.0, 1.0), Modality.T1, sid),
            VolumeGrid(tgt, (1.0, 1.0, 1.0), Modality.FA, sid))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

MANIFEST_HEADER = ["subject_id", "source_path", "target_path", "split"]


def read_manifest(path):
    """Parse a manifest CSV into ``{split: DatasetManifest}``.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}")
    by_split = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            entry = ManifestEntry(
                row["subject_id"],
                str((path.parent / row["source_path"]).resolve()),
                str((path.parent / row["target_path"]).resolve()),
            )
            by_split.setdefault(row["split"], []).append(entry)
    manifests = {s: DatasetManifest(e, s) for s, e in by_split.items()}
    seen = {}
    for split, m in manifests.items():
        for e in m.entries:
            if e.subject_id in seen:
                raise ValueError(
                    f"subject {e.subject_id} appears in both {seen[e.subject_id]} and {split}")
            seen[e.subject_id] = split
    return manifests


def write_manifest(manifests, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for m in manifests:
            for e in m.entries:
                w.writerow([e.subject_id,
                            os.path.relpath(e.source_path, path.parent),
                            os.path.relpath(e.target_path, path.parent),
                            m.split])
