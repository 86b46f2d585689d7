"""Misaligned unpaired data (MUD) construction.

A two-modality corpus is split across virtual hospitals at volume
granularity, each hospital forms paired or unpaired slice pairs, and every
image in a pair receives its own random affine distortion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imaging import (
    IDENTITY,
    TRAIN_RANGE,
    AffineParams,
    InterpSpec,
    Slice2D,
    apply_affine,
    center_crop_array,
    normalize_array,
)

PROPORTION_TOL = 1e-9


@dataclass(frozen=True)
class NoiseLevel:
    name: str
    rotation_range: tuple[float, float]
    translation_range: tuple[float, float]
    scale_range: tuple[float, float]

    def contains(self, p: AffineParams) -> bool:
        def inside(v, rng):
            return rng[0] <= v <= rng[1]

        return (
            inside(p.rotation_deg, self.rotation_range)
            and inside(p.translate_x, self.translation_range)
            and inside(p.translate_y, self.translation_range)
            and inside(p.scale_ratio, self.scale_range)
        )


NOISE_NONE = NoiseLevel("none", (0.0, 0.0), (0.0, 0.0), (1.0, 1.0))
NOISE_SLIGHT = NoiseLevel("slight", (-3.0, 3.0), (-15.0, 15.0), (0.9, 1.1))
NOISE_SEVERE = NoiseLevel("severe", (-90.0, 90.0), (-30.0, 30.0), (0.9, 1.2))
NOISE_LEVELS = {n.name: n for n in (NOISE_NONE, NOISE_SLIGHT, NOISE_SEVERE)}

# distortions resample with bilinear interpolation onto a black background
DISTORT_INTERP = InterpSpec("bilinear")


def noise_level(name: str | NoiseLevel) -> NoiseLevel:
    if isinstance(name, NoiseLevel):
        return name
    try:
        return NOISE_LEVELS[name]
    except KeyError:
        raise ValueError(f"unknown noise level {name!r}; expected one of {sorted(NOISE_LEVELS)}") from None


@dataclass(frozen=True)
class SamplePair:
    img_a: Slice2D
    img_b: Slice2D
    subject_a: str
    subject_b: str
    slice_index: int
    applied_a: AffineParams = IDENTITY
    applied_b: AffineParams = IDENTITY

    @property
    def paired(self) -> bool:
        return self.subject_a == self.subject_b

    @property
    def distorted(self) -> bool:
        return not (self.applied_a.is_identity and self.applied_b.is_identity)


@dataclass(frozen=True)
class ClientSpec:
    """One virtual hospital.

    ``pairing`` is ``"paired"``, ``"unpaired"`` or ``"mixed"``; for mixed
    clients ``paired_fraction`` of the volumes keep their own partner.
    """

    client_id: str
    proportion: float
    pairing: str = "unpaired"
    noise: NoiseLevel = NOISE_SEVERE
    paired_fraction: float = 0.5

    def __post_init__(self):
        if not 0 < self.proportion <= 1:
            raise ValueError(f"client {self.client_id}: proportion must be in (0, 1], got {self.proportion}")
        if self.pairing not in ("paired", "unpaired", "mixed"):
            raise ValueError(f"client {self.client_id}: unknown pairing {self.pairing!r}")
        if not 0 <= self.paired_fraction <= 1:
            raise ValueError(f"client {self.client_id}: paired_fraction must be in [0, 1]")
        object.__setattr__(self, "noise", noise_level(self.noise))


def hospital_scenario(noise: str | NoiseLevel = "severe") -> list[ClientSpec]:
    """Four hospitals holding 40/30/20/10 % of the volumes; only the first is paired."""
    noise = noise_level(noise)
    return [
        ClientSpec("client1", 0.4, "paired", noise),
        ClientSpec("client2", 0.3, "unpaired", noise),
        ClientSpec("client3", 0.2, "unpaired", noise),
        ClientSpec("client4", 0.1, "unpaired", noise),
    ]


@dataclass(frozen=True)
class Volume:
    """Both modalities of one subject as ``(Z, H, W)`` stacks in the training range."""

    subject: str
    a: np.ndarray
    b: np.ndarray
    slice_indices: tuple[int, ...]

    def __post_init__(self):
        if self.a.shape != self.b.shape or self.a.shape[0] != len(self.slice_indices):
            raise ValueError(f"volume {self.subject}: inconsistent stack shapes")

    def slice(self, modality: str, z: int) -> Slice2D:
        try:
            k = self.slice_indices.index(z)
        except ValueError:
            raise KeyError(f"subject {self.subject!r} has no slice {z}") from None
        stack = self.a if modality == "A" else self.b
        return Slice2D(stack[k], TRAIN_RANGE)


@dataclass
class Corpus:
    volumes: dict[str, Volume] = field(default_factory=dict)

    @property
    def subjects(self) -> list[str]:
        return list(self.volumes)

    @property
    def n_images(self) -> int:
        return sum(len(v.slice_indices) for v in self.volumes.values())

    def __len__(self) -> int:
        return len(self.volumes)

    def subset(self, subjects: Iterable[str]) -> Corpus:
        return Corpus({s: self.volumes[s] for s in subjects})

    def slice(self, subject: str, modality: str, z: int) -> Slice2D:
        if subject not in self.volumes:
            raise KeyError(f"unknown subject {subject!r}")
        return self.volumes[subject].slice(modality, z)


@dataclass
class ClientDataset:
    client_id: str
    subjects: list[str]
    pairs: list[SamplePair]
    proportion: float
    spec: ClientSpec

    def __len__(self) -> int:
        return len(self.pairs)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Modality A and B images stacked as ``(N, H, W)`` float32 arrays."""
        a = np.stack([p.img_a.pixels for p in self.pairs]).astype(np.float32)
        b = np.stack([p.img_b.pixels for p in self.pairs]).astype(np.float32)
        return a, b


# --- sampling -----------------------------------------------------------------

def sample_affine(noise: NoiseLevel, rng: np.random.Generator) -> AffineParams:
    """Draw each affine component independently and uniformly from its interval."""
    rot = rng.uniform(*noise.rotation_range)
    tx = rng.uniform(*noise.translation_range)
    ty = rng.uniform(*noise.translation_range)
    scale = rng.uniform(*noise.scale_range)
    return AffineParams(rot, tx, ty, scale)


def make_pair(corpus: Corpus, subject_a: str, subject_b: str, slice_index: int) -> SamplePair:
    return SamplePair(
        img_a=corpus.slice(subject_a, "A", slice_index),
        img_b=corpus.slice(subject_b, "B", slice_index),
        subject_a=subject_a,
        subject_b=subject_b,
        slice_index=slice_index,
    )


def distort_pair(pair: SamplePair, noise: NoiseLevel, rng: np.random.Generator) -> SamplePair:
    """Misalign both images with two independent affine draws."""
    if pair.distorted:
        raise RuntimeError(
            f"pair ({pair.subject_a}, {pair.subject_b}, z={pair.slice_index}) is already distorted"
        )
    pa = sample_affine(noise, rng)
    pb = sample_affine(noise, rng)
    return replace(
        pair,
        img_a=apply_affine(pair.img_a, pa, DISTORT_INTERP),
        img_b=apply_affine(pair.img_b, pb, DISTORT_INTERP),
        applied_a=pa,
        applied_b=pb,
    )


# --- partitioning -------------------------------------------------------------

def shard_sizes(total: int, proportions: Sequence[float]) -> list[int]:
    """Round each share half-up; whatever is left over goes to the largest client."""
    check_proportions(proportions)
    sizes = [int(math.floor(p * total + 0.5)) for p in proportions]
    largest = max(range(len(proportions)), key=lambda i: proportions[i])
    sizes[largest] += total - sum(sizes)
    if min(sizes) < 0:
        raise ValueError(f"cannot split {total} units into shares {list(proportions)}")
    return sizes


def check_proportions(proportions: Sequence[float]) -> None:
    if not proportions:
        raise ValueError("at least one client is required")
    if any(p <= 0 for p in proportions):
        raise ValueError(f"proportions must be positive, got {list(proportions)}")
    if abs(sum(proportions) - 1.0) > PROPORTION_TOL:
        raise ValueError(f"client proportions must sum to 1, got {sum(proportions)!r}")


def _partners(subjects: list[str], spec: ClientSpec, rng: np.random.Generator) -> dict[str, str]:
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    if spec.pairing == "paired":
        n_paired = len(order)
    elif spec.pairing == "unpaired":
        n_paired = 0
    else:
        n_paired = int(math.floor(spec.paired_fraction * len(order) + 0.5))
    if len(order) - n_paired == 1:
        if spec.pairing == "unpaired":
            raise ValueError(f"client {spec.client_id}: unpairing needs at least 2 volumes")
        n_paired += 1  # a lone leftover volume has nobody to swap with
    partners = {s: s for s in order[:n_paired]}
    rest = order[n_paired:]
    # cyclic shift of a shuffled order is a derangement
    for i, s in enumerate(rest):
        partners[s] = rest[(i + 1) % len(rest)]
    return partners


def build_client_pairs(corpus: Corpus, subjects: list[str], spec: ClientSpec,
                       rng: np.random.Generator) -> list[SamplePair]:
    partners = _partners(subjects, spec, rng)
    pairs = []
    for s in subjects:
        w = partners[s]
        shared = sorted(set(corpus.volumes[s].slice_indices) & set(corpus.volumes[w].slice_indices))
        for z in shared:
            pair = make_pair(corpus, s, w, z)
            if spec.noise is not NOISE_NONE:
                pair = distort_pair(pair, spec.noise, rng)
            pairs.append(pair)
    return pairs


def partition_clients(corpus: Corpus, specs: Sequence[ClientSpec],
                      rng: np.random.Generator) -> list[ClientDataset]:
    """Split volumes across clients, then build each client's (mis)aligned pairs."""
    proportions = [s.proportion for s in specs]
    check_proportions(proportions)
    if len(corpus) < len(specs):
        raise ValueError(f"{len(corpus)} volumes cannot feed {len(specs)} clients")
    sizes = shard_sizes(len(corpus), proportions)
    if min(sizes) == 0:
        raise ValueError(f"volume shares {sizes} leave a client empty; add volumes")
    subjects = corpus.subjects
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    datasets, start = [], 0
    for spec, n in zip(specs, sizes):
        shard = sorted(order[start:start + n])
        start += n
        pairs = build_client_pairs(corpus, shard, spec, rng)
        datasets.append(ClientDataset(spec.client_id, shard, pairs, n / len(corpus), spec))
    return datasets


def redistort(dataset: ClientDataset, corpus: Corpus, rng: np.random.Generator) -> ClientDataset:
    """Fresh misalignment draws for the same pairing (per-epoch resampling mode)."""
    pairs = []
    for p in dataset.pairs:
        clean = make_pair(corpus, p.subject_a, p.subject_b, p.slice_index)
        if dataset.spec.noise is not NOISE_NONE:
            clean = distort_pair(clean, dataset.spec.noise, rng)
        pairs.append(clean)
    return replace(dataset, pairs=pairs)


def split_holdout(corpus: Corpus, n_test: int, rng: np.random.Generator) -> tuple[Corpus, Corpus]:
    """Hold out ``n_test`` whole volumes for evaluation."""
    if not 0 <= n_test < len(corpus):
        raise ValueError(f"cannot hold out {n_test} of {len(corpus)} volumes")
    subjects = corpus.subjects
    picked = set(subjects[i] for i in rng.permutation(len(subjects))[:n_test])
    train = corpus.subset(s for s in subjects if s not in picked)
    test = corpus.subset(s for s in subjects if s in picked)
    return train, test


def aligned_pairs(corpus: Corpus) -> list[SamplePair]:
    """Undistorted same-subject pairs, the evaluation ground truth."""
    return [make_pair(corpus, s, s, z) for s, v in corpus.volumes.items() for z in v.slice_indices]


def write_manifest(path: str | Path, datasets: Iterable[ClientDataset]) -> None:
    """One CSV row per sample pair with its pairing flag and applied distortions."""
    cols = ["client_id", "subject_a", "subject_b", "slice_index", "paired",
            "rot_a", "tx_a", "ty_a", "scale_a", "rot_b", "tx_b", "ty_b", "scale_b"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for ds in datasets:
            for p in ds.pairs:
                w.writerow([ds.client_id, p.subject_a, p.subject_b, p.slice_index, int(p.paired),
                            *map(repr, p.applied_a.as_tuple()), *map(repr, p.applied_b.as_tuple())])


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in ("slice_index", "paired"):
                row[k] = int(row[k])
            for k in ("rot_a", "tx_a", "ty_a", "scale_a", "rot_b", "tx_b", "ty_b", "scale_b"):
                row[k] = float(row[k])
            rows.append(row)
    return rows


def load_slice_corpus(path: str | Path, slice_lo: int = 50, slice_hi: int = 80,
                      out_size: int = 256) -> Corpus:
    """Read an archive directory, keep slices ``slice_lo..slice_hi`` (inclusive),
    center-crop them to ``out_size`` and normalize to the training range."""
    from .archive import read_volume

    root = Path(path)
    dir_a, dir_b = root / "A", root / "B"
    corpus = Corpus()
    if not dir_a.is_dir():
        return corpus
    for file_a in sorted(dir_a.glob("*.fmv")):
        vol_a = read_volume(file_a)
        file_b = dir_b / file_a.name
        if not file_b.exists():
            raise FileNotFoundError(f"{file_b}: no modality-B volume for subject {vol_a.subject!r}")
        vol_b = read_volume(file_b)
        if vol_a.z_first != vol_b.z_first or vol_a.data.shape != vol_b.data.shape:
            raise ValueError(f"{file_a.name}: modality A and B stacks disagree in geometry")
        zs = [vol_a.z_first + k for k in range(vol_a.data.shape[0])]
        keep = [k for k, z in enumerate(zs) if slice_lo <= z <= slice_hi]
        if not keep:
            continue
        stacks = []
        for vol in (vol_a, vol_b):
            sl = center_crop_array(vol.data[keep], out_size, out_size)
            stacks.append(normalize_array(sl, vol.value_range, TRAIN_RANGE))
        corpus.volumes[vol_a.subject] = Volume(vol_a.subject, stacks[0], stacks[1],
                                               tuple(zs[k] for k in keep))
    return corpus
