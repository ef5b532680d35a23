"""Binary parameter containers.

Layout (all integers little-endian ``uint32``)::

    magic        4 bytes  b"FDLC"
    version      uint32   (currently 1)
    header_len   uint32
    header       header_len bytes of UTF-8 JSON, keys sorted
    n_tensors    uint32
    n_tensors times:
        name_len  uint32
        name      name_len bytes UTF-8
        rank      uint32
        extents   rank x uint32
        payload   prod(extents) x float64, little-endian, row-major

For base models the header carries ``kind="base_model"``, the ArchSpec
fields and the init seed.
"""

from __future__ import annotations

import json
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError
from .layers import ArchSpec, LayerGraph, build

MAGIC = b"FDLC"
VERSION = 1


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"{path}: not a parameter container")
    version, head_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    header = json.loads(bytes(take(head_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return header, tensors


def spec_to_dict(spec: ArchSpec) -> dict:
    return {
        "family": spec.family,
        "width_scale": str(Fraction(spec.width_scale).limit_denominator(10**6)),
        "input_shape": list(spec.input_shape),
        "n_classes": spec.n_classes,
    }


def spec_from_dict(d: dict) -> ArchSpec:
    return ArchSpec(d["family"], Fraction(d["width_scale"]), tuple(d["input_shape"]), int(d["n_classes"]))


def save_model(path, model: LayerGraph) -> None:
    header = {"kind": "base_model", "arch": spec_to_dict(model.spec), "seed": model.seed}
    write_container(path, header, model.state())


def load_model(path) -> LayerGraph:
    header, tensors = read_container(path)
    if header.get("kind") != "base_model":
        raise FormatError(f"{path}: not a base-model checkpoint")
    model = build(spec_from_dict(header["arch"]), seed=0)
    model.seed = header.get("seed")
    try:
        model.load_state(tensors)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model
