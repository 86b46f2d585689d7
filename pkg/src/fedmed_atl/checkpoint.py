"""Checkpoint container for server generators and client critics.

Layout, little-endian::

    8 bytes   magic b"FMCKPT\\x00\\x00"
    uint32    format version (1)
    uint32    metadata length M
    M bytes   metadata, UTF-8 JSON (round index, seeds, config digest, nets)
    uint32    number of sections S
    S times:
      uint16  name length L
      L bytes section name, UTF-8 ("gen_ab", "gen_ba",
              "client/<id>/disc_a", "client/<id>/disc_b")
      uint64  number of values K
      4K bytes float32 values (flat parameter vector)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .networks import NetConfig, init_discriminator, init_generator, parameters_as_vector, vector_to_parameters

MAGIC = b"FMCKPT\x00\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, server, clients=(), metadata: dict | None = None) -> Path:
    sections = {"gen_ab": server.gen_ab, "gen_ba": server.gen_ba}
    for c in sorted(clients, key=lambda c: c.client_id):
        sections[f"client/{c.client_id}/disc_a"] = c.disc_a
        sections[f"client/{c.client_id}/disc_b"] = c.disc_b
    meta = {"round_index": server.round_index, "registry": server.registry, **(metadata or {})}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(sections)))
        for name, model in sections.items():
            vec = parameters_as_vector(model).double().numpy().astype("<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<Q", vec.size))
            fh.write(vec.tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(metadata, {section name: float32 vector})``."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n_meta = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(n_meta, "metadata").decode("utf-8"))
    (n_sections,) = struct.unpack("<I", take(4, "section count"))
    sections = {}
    for _ in range(n_sections):
        (n_name,) = struct.unpack("<H", take(2, "section name length"))
        name = take(n_name, "section name").decode("utf-8")
        (count,) = struct.unpack("<Q", take(8, "value count"))
        sections[name] = np.frombuffer(take(4 * count, name), dtype="<f4").copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, sections


def restore_generator(sections: dict, name: str, net: NetConfig) -> torch.nn.Module:
    template = init_generator(net.gen_depth, net.gen_base, seed=0)
    return vector_to_parameters(torch.from_numpy(sections[name]), template)


def restore_discriminator(sections: dict, name: str, net: NetConfig) -> torch.nn.Module:
    template = init_discriminator(net.disc_base, net.disc_layers, seed=0)
    return vector_to_parameters(torch.from_numpy(sections[name]), template)
