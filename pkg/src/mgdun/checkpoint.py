"""Checkpoint files: a text manifest followed by MGT1 tensor sections.

    MGDUN-CKPT 1
    T=4
    scale=2
    ...
    section denoiser.enc0.conv0.weight 2320
    ...
    end
    <MGT1 blob><MGT1 blob>...

Section sizes are byte lengths of the blobs that follow ``end`` in manifest
order. Optimizer state, when present, is stored as ``adam.m.<name>`` and
``adam.v.<name>`` sections plus an ``adam_step`` manifest key.
"""

from __future__ import annotations

import dataclasses
import os
import tempfile
from pathlib import Path

import numpy as np

from . import mgt
from .network import MgdunModel, ModelConfig

HEADER = "MGDUN-CKPT 1"


class CheckpointError(ValueError):
    pass


def _encode_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


def _decode_config(meta: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in meta:
            raise CheckpointError(f"manifest is missing {f.name!r}")
        raw = meta[f.name]
        if f.type in ("bool", bool):
            kwargs[f.name] = raw == "1"
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def to_bytes(model: MgdunModel, adam=None) -> bytes:
    lines = [HEADER]
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name}={_encode_value(getattr(model.cfg, f.name))}")
    sections: list[tuple[str, bytes]] = [(n, mgt.to_bytes(p.data)) for n, p in model.named_parameters()]
    if adam is not None:
        lines.append(f"adam_step={adam.step}")
        for name in sorted(adam.m):
            sections.append((f"adam.m.{name}", mgt.to_bytes(adam.m[name])))
            sections.append((f"adam.v.{name}", mgt.to_bytes(adam.v[name])))
    for name, blob in sections:
        lines.append(f"section {name} {len(blob)}")
    lines.append("end")
    head = ("\n".join(lines) + "\n").encode("ascii")
    return head + b"".join(blob for _, blob in sections)


def save(path: str | Path, model: MgdunModel, adam=None) -> None:
    """Write atomically so an interrupted save never clobbers the previous file."""
    path = Path(path)
    data = to_bytes(model, adam)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def from_bytes(buf: bytes):
    """Return (model, adam_state_or_None)."""
    from .training import AdamState

    if not buf.startswith(HEADER.encode("ascii") + b"\n"):
        raise CheckpointError(f"not a checkpoint: expected header {HEADER!r}")
    end = buf.find(b"\nend\n")
    if end < 0:
        raise CheckpointError("manifest has no 'end' line")
    manifest = buf[:end].decode("ascii").split("\n")[1:]
    offset = end + len(b"\nend\n")
    meta: dict[str, str] = {}
    sections: list[tuple[str, int]] = []
    for line in manifest:
        if line.startswith("section "):
            _, name, size = line.split(" ")
            sections.append((name, int(size)))
        else:
            key, _, value = line.partition("=")
            meta[key] = value
    model = MgdunModel(_decode_config(meta))
    params = dict(model.named_parameters())
    arrays: dict[str, np.ndarray] = {}
    for name, size in sections:
        try:
            arr = mgt.from_bytes(buf[offset:offset + size])
        except mgt.FormatError as exc:
            raise CheckpointError(f"section {name}: {exc}") from None
        arrays[name] = arr
        offset += size
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after the last section")
    missing = [n for n in params if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        arr = arrays.pop(name)
        if arr.size != p.data.size:
            raise CheckpointError(f"{name}: stored {arr.shape} does not fit parameter {p.shape}")
        p.data = arr.reshape(p.shape).copy()
    adam = None
    if "adam_step" in meta:
        adam = AdamState(step=int(meta["adam_step"]))
        for name, p in params.items():
            if f"adam.m.{name}" in arrays:
                adam.m[name] = arrays.pop(f"adam.m.{name}").reshape(p.shape).copy()
                adam.v[name] = arrays.pop(f"adam.v.{name}").reshape(p.shape).copy()
    if arrays:
        raise CheckpointError(f"unknown sections: {sorted(arrays)[:5]}")
    return model, adam


def load(path: str | Path):
    return from_bytes(Path(path).read_bytes())
