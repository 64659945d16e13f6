"""Volume container plus the VOL1 and minimal NIfTI-1 readers/writers."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Tuple

import numpy as np

from .autodiff.serialization import decode_tsr, encode_tsr
from .errors import FormatError, ShapeError

NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


@dataclass
class Volume:
    """A stack of 2-D slices, shape (slices, H, W)."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_unit: str = "HU"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ShapeError(f"Volume data must be (slices, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("Volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise FormatError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    def replace(self, **changes) -> "Volume":
        return replace(self, **changes)

    def slices(self):
        return list(self.data)


def save_vol1(path, volume: Volume) -> None:
    """VOL1: directory with ``manifest.json`` and a ``data.tsr`` payload."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "VOL1",
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "dtype": "float64",
        "intensity_unit": volume.intensity_unit,
        "meta": volume.meta,
    }
    (d / "data.tsr").write_bytes(encode_tsr(volume.data))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_vol1(path) -> Volume:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read VOL1 manifest in {d}: {exc}") from exc
    if manifest.get("format") != "VOL1":
        raise FormatError("manifest is not VOL1")
    data = decode_tsr((d / "data.tsr").read_bytes())
    if list(data.shape) != list(manifest["shape"]):
        raise FormatError(f"payload shape {data.shape} != manifest shape {manifest['shape']}")
    return Volume(data, tuple(manifest["spacing"]), manifest.get("intensity_unit", "HU"), manifest.get("meta", {}))


def write_nifti(path, data: np.ndarray, datatype: int = 16, spacing=(1.0, 1.0, 1.0),
                scl_slope: float = 1.0, scl_inter: float = 0.0) -> None:
    """Write a single-file uncompressed NIfTI-1 volume.

    ``data`` is given as (slices, H, W) and stored with x = W fastest.
    """
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype {datatype}")
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ShapeError("write_nifti expects (slices, H, W)")
    z, y, x = arr.shape
    dt = _NIFTI_DTYPES[datatype]
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, x, y, z, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[2], spacing[1], spacing[0], 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = b"n+1\0"
    payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(hdr) + b"\0" * 4 + payload)


def import_nifti(path) -> Volume:
    """Read an uncompressed single-file NIfTI-1 (int16 or float32) volume,
    applying ``scl_slope`` / ``scl_inter``."""
    buf = Path(path).read_bytes()
    if len(buf) < NIFTI_HEADER_SIZE:
        raise FormatError("file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected {NIFTI_HEADER_SIZE}")
    if buf[344:348] != b"n+1\0":
        raise FormatError("bad NIfTI magic (only single-file 'n+1' is supported)")
    dims = struct.unpack_from("<8h", buf, 40)
    datatype, _bitpix = struct.unpack_from("<hh", buf, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from("<8f", buf, 76)
    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    slope, inter = struct.unpack_from("<ff", buf, 112)
    ndim = dims[0]
    if not 2 <= ndim <= 3:
        raise FormatError(f"only 2-D/3-D volumes are supported, got dim[0]={ndim}")
    x, y = dims[1], dims[2]
    z = dims[3] if ndim == 3 else 1
    dt = _NIFTI_DTYPES[datatype]
    off = int(vox_offset)
    n = x * y * z
    if len(buf) < off + n * dt.itemsize:
        raise FormatError("truncated NIfTI payload")
    data = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(z, y, x).astype(np.float64)
    if slope != 0.0 and np.isfinite(slope):
        data = data * slope + inter
    spacing = (pixdim[3] if ndim == 3 and pixdim[3] > 0 else 1.0,
               pixdim[2] if pixdim[2] > 0 else 1.0,
               pixdim[1] if pixdim[1] > 0 else 1.0)
    return Volume(data, spacing, "HU", {"source": str(path), "datatype": datatype})
