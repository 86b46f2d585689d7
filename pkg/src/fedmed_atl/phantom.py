"""Synthetic two-modality brain phantoms.

Each subject is a stack of axial slices made of nested soft-edged ellipses
(scalp, CSF rim, grey matter, white matter, two ventricles) whose geometry is
jittered per subject and tapers towards the ends of the stack. The resulting
tissue *structure field* ``s`` (values in [0, 1]) drives both modalities::

    A = clip(s + texture_A * head, 0, 1)
    B = clip(remap(s) + texture_B * head, 0, 1)

where ``remap`` is a fixed smooth monotone intensity transfer (see
``MODALITY_MAPS``) and the textures are smooth low-amplitude random fields
that differ between modalities. Images are finally mapped to the training
range [-1, 1] and rounded to float32 so they survive the archive format
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mud import Corpus, Volume

MODALITY_MAPS = {
    "square": lambda v: v ** 2,
    "cube": lambda v: v ** 3,
    "smoothstep": lambda v: v * v * (3.0 - 2.0 * v),
}

# tissue intensities of the structure field (modality A contrast)
SCALP, CSF, GREY, WHITE = 0.85, 0.25, 0.5, 0.78
TEXTURE_AMPLITUDE = {"A": 0.02, "B": 0.025}


@dataclass(frozen=True)
class PhantomSpec:
    n_volumes: int = 20
    slices_per_volume: int = 8
    image_size: int = 64
    seed: int = 0
    modality_map: str = "square"

    def __post_init__(self):
        if self.n_volumes < 2:
            raise ValueError("a phantom corpus needs at least 2 volumes so pairs can be unpaired")
        if self.slices_per_volume < 1:
            raise ValueError("slices_per_volume must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.modality_map not in MODALITY_MAPS:
            raise ValueError(f"unknown modality map {self.modality_map!r}")


def phantom_remap(values: np.ndarray, name: str = "square") -> np.ndarray:
    """The ground-truth A-to-B intensity transfer on the [0, 1] structure field."""
    return MODALITY_MAPS[name](np.asarray(values, dtype=np.float64))


def subject_geometry(seed: int, index: int) -> dict:
    rng = np.random.default_rng([seed, index, 0])
    return {
        "cx": rng.uniform(-0.03, 0.03),
        "cy": rng.uniform(-0.03, 0.03),
        "ax": rng.uniform(0.34, 0.40),
        "ay": rng.uniform(0.40, 0.46),
        "theta": np.deg2rad(rng.uniform(-12, 12)),
        "vent_dx": rng.uniform(0.05, 0.09),
        "vent_len": rng.uniform(0.08, 0.13),
        "vent_tilt": np.deg2rad(rng.uniform(8, 22)),
        "wm": rng.uniform(0.6, 0.7),
    }


def _soft_ellipse(u, v, cx, cy, ax, ay, theta, n):
    c, s = np.cos(theta), np.sin(theta)
    du, dv = u - cx, v - cy
    ru = (du * c + dv * s) / ax
    rv = (-du * s + dv * c) / ay
    r = np.sqrt(ru ** 2 + rv ** 2)
    # edge ramp about one pixel wide
    return 1.0 / (1.0 + np.exp(-(1.0 - r) * min(ax, ay) * n * 2.0))


def structure_field(geom: dict, z: int, depth: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tissue structure field and soft head mask of one slice."""
    t = (z + 0.5) / depth
    taper = 0.75 + 0.25 * np.sqrt(max(0.0, 1.0 - (2 * t - 1) ** 2))
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    u = (xs - (n - 1) / 2) / n
    v = (ys - (n - 1) / 2) / n
    g = geom
    ax, ay = g["ax"] * taper, g["ay"] * taper

    def ell(scale_x, scale_y=None, cx=0.0, cy=0.0, theta=0.0):
        scale_y = scale_x if scale_y is None else scale_y
        return _soft_ellipse(u, v, g["cx"] + cx, g["cy"] + cy, scale_x, scale_y, g["theta"] + theta, n)

    head = ell(ax, ay)
    s = SCALP * head
    for scale, value in ((0.9, CSF), (0.84, GREY), (g["wm"], WHITE)):
        m = ell(ax * scale, ay * scale)
        s = s * (1 - m) + value * m
    vlen = g["vent_len"] * taper
    for side in (-1, 1):
        m = ell(0.035 * taper, vlen, side * g["vent_dx"] * taper, -0.02, side * g["vent_tilt"])
        s = s * (1 - m) + CSF * m
    return s, head


def _smooth_field(rng: np.random.Generator, n: int, cells: int = 6) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    pos = np.linspace(0, cells - 1, n)
    rows = np.stack([np.interp(pos, np.arange(cells), row) for row in coarse])
    return np.stack([np.interp(pos, np.arange(cells), col) for col in rows.T], axis=1)


def texture_field(seed: int, index: int, z: int, modality: str, n: int) -> np.ndarray:
    tag = 1 if modality == "A" else 2
    rng = np.random.default_rng([seed, index, tag, z])
    return TEXTURE_AMPLITUDE[modality] * _smooth_field(rng, n)


def render_slice(spec: PhantomSpec, index: int, z: int) -> tuple[np.ndarray, np.ndarray]:
    """Modality A and B of one slice in the metric range [0, 1], float64."""
    n = spec.image_size
    s, head = structure_field(subject_geometry(spec.seed, index), z, spec.slices_per_volume, n)
    a = np.clip(s + texture_field(spec.seed, index, z, "A", n) * head, 0.0, 1.0)
    b = np.clip(phantom_remap(s, spec.modality_map)
                + texture_field(spec.seed, index, z, "B", n) * head, 0.0, 1.0)
    return a, b


def _to_train(x: np.ndarray) -> np.ndarray:
    return (2.0 * x - 1.0).astype(np.float32).astype(np.float64)


def generate_phantom(spec: PhantomSpec) -> Corpus:
    corpus = Corpus()
    zs = tuple(range(spec.slices_per_volume))
    for i in range(spec.n_volumes):
        slices = [render_slice(spec, i, z) for z in zs]
        a = _to_train(np.stack([p[0] for p in slices]))
        b = _to_train(np.stack([p[1] for p in slices]))
        subject = f"sub{i:03d}"
        corpus.volumes[subject] = Volume(subject, a, b, zs)
    return corpus
