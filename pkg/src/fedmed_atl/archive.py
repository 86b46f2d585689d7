"""Volume archive files (``*.fmv``).

An archive is a directory with one sub-directory per modality (``A/`` and
``B/``) and one file per subject volume, named ``<subject>.fmv`` in both.

File layout, all little-endian::

    offset  size  field
    0       6     magic  b"FMVOL\\x00"
    6       2     format version (uint16, currently 1)
    8       4     z index of the first slice (int32)
    12      4     depth, number of slices (uint32)
    16      4     height (uint32)
    20      4     width (uint32)
    24      1     dtype code (uint8, 1 = float32)
    25      4     intensity range low (float32)
    29      4     intensity range high (float32)
    33      2     subject id length in bytes (uint16)
    35      n     subject id, UTF-8
    35+n    ...   depth*height*width float32 pixels, z-major then row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FMVOL\x00"
VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<6sHiIIIBffH")


class ArchiveError(ValueError):
    """A volume file that does not follow the documented layout."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass(frozen=True)
class VolumeFile:
    subject: str
    z_first: int
    data: np.ndarray  # (Z, H, W) float64
    value_range: tuple[float, float]


def write_volume(path: str | Path, subject: str, data: np.ndarray, z_first: int = 0,
                 value_range: tuple[float, float] | None = None) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"volume must be (Z, H, W), got shape {data.shape}")
    if value_range is None:
        value_range = (float(data.min()), float(data.max()))
    sid = subject.encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, z_first, *data.shape, DTYPE_FLOAT32,
                          value_range[0], value_range[1], len(sid))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sid)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> VolumeFile:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArchiveError(path, len(raw), f"truncated header ({len(raw)} < {_HEADER.size} bytes)")
    magic, version, z_first, depth, height, width, dtype, lo, hi, n_sid = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveError(path, 0, f"bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveError(path, 6, f"unsupported format version {version}")
    if dtype != DTYPE_FLOAT32:
        raise ArchiveError(path, 24, f"unsupported dtype code {dtype}")
    if not lo < hi:
        raise ArchiveError(path, 25, f"degenerate intensity range ({lo}, {hi})")
    offset = _HEADER.size
    if len(raw) < offset + n_sid:
        raise ArchiveError(path, len(raw), "truncated subject id")
    try:
        subject = raw[offset:offset + n_sid].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ArchiveError(path, offset + exc.start, "subject id is not UTF-8") from None
    offset += n_sid
    expected = depth * height * width * 4
    if len(raw) - offset != expected:
        raise ArchiveError(path, len(raw),
                           f"pixel payload is {len(raw) - offset} bytes, header promises {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(depth, height, width)
    return VolumeFile(subject, z_first, data.astype(np.float64), (float(lo), float(hi)))


def write_corpus(corpus, root: str | Path) -> list[Path]:
    """Write every volume of a corpus (training range) into an archive directory."""
    root = Path(root)
    written = []
    for subject, vol in corpus.volumes.items():
        zs = vol.slice_indices
        if list(zs) != list(range(zs[0], zs[0] + len(zs))):
            raise ValueError(f"subject {subject}: slice indices must be contiguous to archive")
        for modality, stack in (("A", vol.a), ("B", vol.b)):
            path = root / modality / f"{subject}.fmv"
            write_volume(path, subject, stack, zs[0], (-1.0, 1.0))
            written.append(path)
    return written
