"""Affine transform module: labelled rotated, translated and rescaled views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import TRAIN_RANGE, Slice2D, rescale_array, rotate_array, translate_array

ROTATIONS = (0.0, 90.0, 180.0, 270.0)
TRANSLATIONS = ((-30.0, -30.0), (-30.0, 30.0), (30.0, -30.0), (30.0, 30.0))
SCALES = (0.9, 1.1, 1.2)
VIEW_COUNTS = (1, 2, 4)
TRANSFORM_TYPES = ("rot", "trans", "scale")
CLASS_COUNTS = {"rot": len(ROTATIONS), "trans": len(TRANSLATIONS), "scale": len(SCALES)}


@dataclass
class ViewBatch:
    """``k`` views per transform type for each of ``n_images`` source images.

    Views are ``(M, H, W)`` arrays with ``M = n_images * k``; labels index
    ``ROTATIONS``, ``TRANSLATIONS`` and ``SCALES``.
    """

    rot_views: np.ndarray
    rot_labels: np.ndarray
    trans_views: np.ndarray
    trans_labels: np.ndarray
    scale_views: np.ndarray
    scale_labels: np.ndarray
    k: int
    source_kind: str = "real"

    def __len__(self) -> int:
        return len(self.rot_labels) + len(self.trans_labels) + len(self.scale_labels)

    def of_type(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"{kind}_views"), getattr(self, f"{kind}_labels")

    @property
    def views(self) -> list[tuple[np.ndarray, str, int]]:
        return [(img, kind, int(label))
                for kind in TRANSFORM_TYPES
                for img, label in zip(*self.of_type(kind))]


def _labels(n_classes: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k <= n_classes:
        return rng.permutation(n_classes)[:k]
    # every class once, the surplus drawn with replacement
    extra = rng.integers(0, n_classes, size=k - n_classes)
    return np.concatenate([rng.permutation(n_classes), extra])


def apply_view(images: np.ndarray, kind: str, label: int, fill: float = TRAIN_RANGE[0]) -> np.ndarray:
    """Apply the class-``label`` transform of type ``kind`` to an image stack."""
    if kind == "rot":
        return rotate_array(images, ROTATIONS[label], "nearest", fill)
    if kind == "trans":
        dx, dy = TRANSLATIONS[label]
        return translate_array(images, dx, dy, "nearest", fill)
    if kind == "scale":
        return rescale_array(images, SCALES[label], "bilinear", fill)
    raise ValueError(f"unknown transform type {kind!r}")


def atm_sample_views(images, k: int, rng: np.random.Generator, source_kind: str = "real",
                     fill: float = TRAIN_RANGE[0]) -> ViewBatch:
    """Draw ``k`` labelled views of each type for one image or an ``(N, H, W)`` stack.

    Class labels are drawn without replacement per image while ``k`` does
    not exceed the class count; for ``k = 4`` on the three scale classes each
    class appears once and one more is drawn with replacement. Rotation and
    translation views use nearest-neighbour sampling (exact index moves),
    scale views are bilinear.
    """
    if k not in VIEW_COUNTS:
        raise ValueError(f"views per transform must be one of {VIEW_COUNTS}, got {k}")
    if source_kind not in ("real", "fake"):
        raise ValueError(f"source_kind must be 'real' or 'fake', got {source_kind!r}")
    if isinstance(images, Slice2D):
        arr = images.pixels[None]
    else:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    n = arr.shape[0]
    out = {}
    for kind in TRANSFORM_TYPES:
        labels = np.stack([_labels(CLASS_COUNTS[kind], k, rng) for _ in range(n)]).reshape(-1)
        src = np.repeat(np.arange(n), k)
        views = np.empty((n * k,) + arr.shape[1:], dtype=np.float64)
        for label in np.unique(labels):
            idx = np.nonzero(labels == label)[0]
            views[idx] = apply_view(arr[src[idx]], kind, int(label), fill)
        out[f"{kind}_views"] = views
        out[f"{kind}_labels"] = labels.astype(np.int64)
    return ViewBatch(k=k, source_kind=source_kind, **out)
