"""File formats: the native volume format and a read-only NIfTI-1 ingestion path.

Native format, one logical volume = two files sharing a stem:

  <name>.vol.json   header: {"shape": [H, W, D], "spacing": [sx, sy, sz],
                             "origin": [ox, oy, oz], "dtype": "f32"|"u8",
                             "kind": "image"|"mask"}
  <name>.vol.raw    payload: little-endian, row-major (C order)

Images and soft masks store f32; binary label masks store u8. Round-trips are
bit-exact.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .volume import GridLike, LabelMask, SoftMask, Volume

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _stem(path: str | Path) -> Path:
    """Strip a trailing .vol.json / .vol.raw / .vol so callers can pass any of them."""
    p = Path(path)
    name = p.name
    for suffix in (".vol.json", ".vol.raw", ".vol"):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def save_volume(v: GridLike, path: str | Path) -> Path:
    """Write a Volume/LabelMask/SoftMask pair of files; returns the header path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(v, Volume):
        kind, dtype = "image", "f32"
    elif isinstance(v, LabelMask):
        kind, dtype = "mask", "u8"
    elif isinstance(v, SoftMask):
        kind, dtype = "mask", "f32"
    else:
        raise TypeError(f"cannot save object of type {type(v)!r}")
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": dtype,
        "kind": kind,
    }
    header_path = stem.with_name(stem.name + ".vol.json")
    raw_path = stem.with_name(stem.name + ".vol.raw")
    header_path.write_text(json.dumps(header, indent=1) + "\n")
    np.ascontiguousarray(v.data).astype(_DTYPES[dtype]).tofile(raw_path)
    return header_path


def load_volume(path: str | Path) -> GridLike:
    """Load a native-format volume; the kind/dtype pair selects the return type."""
    stem = _stem(path)
    header_path = stem.with_name(stem.name + ".vol.json")
    raw_path = stem.with_name(stem.name + ".vol.raw")
    header = json.loads(header_path.read_text())
    shape = tuple(int(s) for s in header["shape"])
    dtype = _DTYPES[header["dtype"]]
    data = np.fromfile(raw_path, dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{raw_path}: payload has {data.size} voxels, header says {shape}")
    data = data.reshape(shape)
    spacing = tuple(header["spacing"])
    origin = tuple(header["origin"])
    if header["kind"] == "image":
        return Volume(data, spacing, origin)
    if header["dtype"] == "u8":
        return LabelMask(data, spacing, origin)
    return SoftMask(data, spacing, origin)


# ---------------------------------------------------------------------------
# NIfTI-1 ingestion (read-only). Minimal header parse, enough to convert scans
# into the native format; kept out of the core pipeline on purpose.
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    256: np.dtype("i1"),
    512: np.dtype("u2"),
    768: np.dtype("u4"),
}


def read_nifti(path: str | Path, kind: str = "image") -> GridLike:
    """Read a single-frame .nii / .nii.gz file into a native grid type.

    `kind` is "image" (intensities, scl slope/intercept applied) or "mask"
    (values > 0.5 become foreground).
    """
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    p = Path(path)
    opener = gzip.open if p.name.endswith(".gz") else open
    with opener(p, "rb") as f:
        blob = f.read()
    if len(blob) < 352:
        raise ValueError(f"{p}: too short to be a NIfTI-1 file")

    for end in ("<", ">"):
        sizeof_hdr = struct.unpack(end + "i", blob[:4])[0]
        if sizeof_hdr == 348:
            break
    else:
        raise ValueError(f"{p}: not a NIfTI-1 file (bad sizeof_hdr)")
    magic = blob[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise ValueError(f"{p}: unsupported magic {magic!r}")

    dim = struct.unpack(end + "8h", blob[40:56])
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4 : 1 + ndim]):
        raise ValueError(f"{p}: only single-frame 3D volumes are supported, dim={dim}")
    shape = (dim[1], dim[2], dim[3])
    datatype = struct.unpack(end + "h", blob[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{p}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack(end + "8f", blob[76:108])
    vox_offset = int(struct.unpack(end + "f", blob[108:112])[0])
    scl_slope, scl_inter = struct.unpack(end + "2f", blob[112:120])
    qoffset = struct.unpack(end + "3f", blob[268:280])

    dt = _NIFTI_DTYPES[datatype].newbyteorder(end)
    count = int(np.prod(shape))
    data = np.frombuffer(blob, dtype=dt, count=count, offset=vox_offset)
    # NIfTI stores the first axis fastest
    data = data.reshape(shape, order="F").astype(np.float32)
    if kind == "image":
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            slope = scl_slope if scl_slope != 0.0 else 1.0
            data = data * slope + scl_inter

    spacing = tuple(abs(x) if x != 0 else 1.0 for x in pixdim[1:4])
    origin = tuple(float(x) for x in qoffset)
    if kind == "mask":
        return LabelMask((data > 0.5).astype(np.uint8), spacing, origin)
    return Volume(data, spacing, origin)
