"""Checkpoint file format shared by the segmentation and in-painting networks.

Layout: 4-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then the tensor payload. The header records the model kind, its config, the
training iteration/seed, the role tag (segmentation only) and a directory of
named tensors; every tensor is stored as little-endian f32 (integer buffers
are cast, their original dtype recorded). Save/load round-trips bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .mlm import MaskInpainter, MlmConfig, MlmState
from .segnet import SegConfig, SegState, UNet3D

MAGIC = b"ISCK"

_DTYPE_TAGS = {
    torch.float32: "f32",
    torch.int64: "i64",
    torch.int32: "i32",
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _header_for(state: MlmState | SegState) -> dict:
    if isinstance(state, MlmState):
        return {"kind": "mlm", "config": dataclasses.asdict(state.config),
                "iter": state.iteration, "seed": state.seed}
    if isinstance(state, SegState):
        return {"kind": "seg", "config": dataclasses.asdict(state.config),
                "iter": state.iteration, "seed": state.seed, "role": state.role}
    raise TypeError(f"cannot checkpoint object of type {type(state)!r}")


def save_checkpoint(state: MlmState | SegState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header_for(state)
    sd = state.net.state_dict()
    directory = []
    blobs = []
    offset = 0
    for name in sorted(sd):
        t = sd[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_TAGS:
            raise TypeError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        blob = t.to(torch.float32).numpy().astype("<f4").tobytes()
        directory.append(
            {"name": name, "shape": list(t.shape), "dtype": _DTYPE_TAGS[t.dtype],
             "offset": offset, "numel": t.numel()}
        )
        blobs.append(blob)
        offset += len(blob)
    header["tensors"] = directory
    header_bytes = json.dumps(header).encode("utf-8")
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: str | Path) -> MlmState | SegState:
    path = Path(path)
    with path.open("rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()

    sd = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        raw = np.frombuffer(payload, dtype="<f4", count=entry["numel"], offset=start)
        t = torch.from_numpy(raw.copy()).reshape(entry["shape"])
        sd[entry["name"]] = t.to(_TAG_DTYPES[entry["dtype"]])

    if header["kind"] == "mlm":
        cfg = MlmConfig(**header["config"])
        net = MaskInpainter(cfg)
        net.load_state_dict(sd)
        net.eval()
        return MlmState(cfg, net, iteration=header["iter"], seed=header["seed"])
    if header["kind"] == "seg":
        cfg = SegConfig(**header["config"])
        net = UNet3D(cfg)
        net.load_state_dict(sd)
        net.eval()
        return SegState(cfg, net, role=header["role"], iteration=header["iter"],
                        seed=header["seed"])
    raise ValueError(f"{path}: unknown checkpoint kind {header['kind']!r}")


def state_checksum(state: MlmState | SegState) -> str:
    """SHA-256 over the sorted parameter/buffer bytes; cheap identity probe."""
    h = hashlib.sha256()
    sd = state.net.state_dict()
    for name in sorted(sd):
        h.update(name.encode())
        h.update(sd[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
