"""Volumetric scan handling: canonical disk format, NIfTI-1 import,
isotropic resampling, cube padding, and intensity normalization.

A volume is stored as a (nz, ny, nx) float32 array; the flat buffer is
x-fastest, so the on-disk raw payload is simply the C-order bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError, FormatError, UnsupportedFormatError
from .util import round_half_up

HU = "HU"
NORM255 = "norm255"

HU_CLAMP_LO = -1024.0
HU_CLAMP_HI = 600.0
AIR_HU = -1024.0
TARGET_SPACING_MM = 1.5
CUBE_DIM = 256


@dataclass
class Volume:
    """A 3-D scan with voxel spacing and a declared intensity domain."""

    values: np.ndarray
    spacing_mm: tuple[float, float, float]
    intensity: str = HU

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DimensionError(f"volume must be 3-D, got shape {self.values.shape}")
        if any(d < 1 for d in self.values.shape):
            raise DimensionError(f"volume dims must be >= 1, got {self.values.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ContractError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.intensity not in (HU, NORM255):
            raise ContractError(f"unknown intensity domain {self.intensity!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


def save_volume(vol: Volume, path: str | Path) -> tuple[Path, Path]:
    """Write <base>.vol.json + <base>.vol.raw (float32 LE, x-fastest)."""
    json_path, raw_path = _sidecar_paths(path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "dtype": "f32le",
        "order": "x-fastest",
        "intensity": vol.intensity if vol.intensity == HU else NORM255,
    }
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.ascontiguousarray(vol.values, dtype="<f4").tobytes())
    return json_path, raw_path


def load_volume(path: str | Path) -> Volume:
    json_path, raw_path = _sidecar_paths(path)
    try:
        header = json.loads(json_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read volume header {json_path}: {exc}") from exc
    for key in ("dims", "spacing_mm", "dtype", "order", "intensity"):
        if key not in header:
            raise FormatError(f"volume header missing field {key!r}")
    if header["dtype"] != "f32le":
        raise FormatError(f"unknown dtype tag {header['dtype']!r}")
    if header["order"] != "x-fastest":
        raise FormatError(f"unknown order tag {header['order']!r}")
    if header["intensity"] not in (HU, NORM255):
        raise FormatError(f"unknown intensity tag {header['intensity']!r}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise FormatError(f"header dims must have three entries, got {header['dims']}")
    payload = raw_path.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(
            f"payload length mismatch: header implies {expected} bytes, file has {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(values.copy(), tuple(float(s) for s in header["spacing_mm"]), header["intensity"])


def _sidecar_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".vol.json", ".vol.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    base = p.with_name(name)
    return base.with_name(base.name + ".vol.json"), base.with_name(base.name + ".vol.raw")


# ---------------------------------------------------------------------------
# NIfTI-1 import (read-only, minimal field set)

_NIFTI_INT16 = 4
_NIFTI_FLOAT32 = 16


def import_nifti(path: str | Path) -> Volume:
    """Read a single-file NIfTI-1 volume (int16 or float32, 3-D).

    Only dim, pixdim, datatype, scl_slope, scl_inter, and vox_offset are
    honored. The stored x-fastest payload maps directly onto the
    (nz, ny, nx) array layout.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 348:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    magic = blob[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError(f"{path}: two-file NIfTI pairs are not supported")
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: not a single-file NIfTI-1 volume")

    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise FormatError(f"{path}: bad sizeof_hdr {sizeof_hdr}")

    dim = struct.unpack_from(endian + "8h", blob, 40)
    datatype, _bitpix = struct.unpack_from(endian + "2h", blob, 70)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)

    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise UnsupportedFormatError(f"{path}: only 3-D volumes are supported (dim={dim})")
    nx, ny, nz = int(dim[1]), int(dim[2]), int(dim[3])
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {dim[1:4]}")

    if datatype == _NIFTI_INT16:
        np_dtype = np.dtype(endian + "i2")
    elif datatype == _NIFTI_FLOAT32:
        np_dtype = np.dtype(endian + "f4")
    else:
        raise UnsupportedFormatError(f"{path}: datatype {datatype} not supported (int16/float32 only)")

    offset = int(vox_offset)
    count = nx * ny * nz
    data = np.frombuffer(blob, dtype=np_dtype, count=count, offset=offset)
    if data.size != count:
        raise FormatError(f"{path}: payload truncated")
    values = data.astype(np.float32)
    if scl_slope != 0.0:
        values = values * np.float32(scl_slope) + np.float32(scl_inter)
    values = values.reshape(nz, ny, nx)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return Volume(values, spacing, HU)


# ---------------------------------------------------------------------------
# Interpolation cores


def linear_interp_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation of `arr` at fractional indices along one axis.

    Coordinates outside [0, n-1] clamp to the border sample.
    """
    n = arr.shape[axis]
    c = np.asarray(coords, dtype=np.float64)
    i0 = np.floor(c).astype(np.int64)
    frac = c - i0
    i0 = np.clip(i0, 0, n - 1)
    i1 = np.clip(i0 + 1, 0, n - 1)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(c)
    w = frac.reshape(shape)
    return lo * (1.0 - w) + hi * w


def bilinear_plane_sample(values: np.ndarray, yy: np.ndarray, xx: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample every z-slice of (nz, ny, nx) `values` at fractional (yy, xx).

    `yy` and `xx` share a shape; positions outside the plane blend toward
    `fill`. Returns (nz, *yy.shape) float64.
    """
    _, ny, nx = values.shape
    y = np.asarray(yy, dtype=np.float64)
    x = np.asarray(xx, dtype=np.float64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    fy = y - y0
    fx = x - x0
    v = values.astype(np.float64, copy=False)
    out = np.zeros((values.shape[0],) + y.shape, dtype=np.float64)

    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        yi = y0 + dy
        y_ok = (yi >= 0) & (yi < ny)
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            ok = y_ok & (xi >= 0) & (xi < nx)
            corner = np.where(ok, v[:, np.clip(yi, 0, ny - 1), np.clip(xi, 0, nx - 1)], fill)
            out += (wy * wx) * corner
    return out


def resample_isotropic(vol: Volume, target_mm: float = TARGET_SPACING_MM) -> Volume:
    """Trilinearly resample onto an isotropic grid covering the same extent.

    New dims are round(old_dim * old_spacing / target), never below 1; when
    the grid already matches the target spacing the values pass through
    unchanged.
    """
    if target_mm <= 0:
        raise ContractError(f"target spacing must be positive, got {target_mm}")
    new_dims = tuple(
        max(1, round_half_up(d * s / target_mm)) for d, s in zip(vol.dims, vol.spacing_mm)
    )
    out = vol.values.astype(np.float64)
    for axis in range(3):
        ratio = target_mm / vol.spacing_mm[axis]
        coords = np.arange(new_dims[axis], dtype=np.float64) * ratio
        out = linear_interp_axis(out, coords, axis)
    return Volume(out.astype(np.float32), (target_mm,) * 3, vol.intensity)


def pad_crop_to_cube(vol: Volume, n: int = CUBE_DIM, fill: float | None = None) -> Volume:
    """Center the volume in an n-cubed grid, cropping overflow axes.

    The fill defaults to air (-1024 HU) before normalization and 0 after.
    """
    if n < 1:
        raise ContractError(f"cube dim must be >= 1, got {n}")
    if fill is None:
        fill = AIR_HU if vol.intensity == HU else 0.0
    out = np.full((n, n, n), np.float32(fill), dtype=np.float32)
    src_slices = []
    dst_slices = []
    for d in vol.dims:
        if d >= n:
            start = (d - n) // 2
            src_slices.append(slice(start, start + n))
            dst_slices.append(slice(0, n))
        else:
            start = (n - d) // 2
            src_slices.append(slice(0, d))
            dst_slices.append(slice(start, start + d))
    out[tuple(dst_slices)] = vol.values[tuple(src_slices)]
    return Volume(out, vol.spacing_mm, vol.intensity)


def normalize_intensity(vol: Volume) -> Volume:
    """Clamp HU to [-1024, 600] and map affinely onto [0, 255]."""
    if vol.intensity != HU:
        raise ContractError("volume is already normalized; normalize_intensity expects HU input")
    clipped = np.clip(vol.values.astype(np.float64), HU_CLAMP_LO, HU_CLAMP_HI)
    scaled = (clipped - HU_CLAMP_LO) * (255.0 / (HU_CLAMP_HI - HU_CLAMP_LO))
    return Volume(scaled.astype(np.float32), vol.spacing_mm, NORM255)


def preprocess_volume(
    vol: Volume, target_mm: float = TARGET_SPACING_MM, cube: int = CUBE_DIM
) -> Volume:
    """Full ingest path: isotropic resample, center in a cube, normalize."""
    iso = resample_isotropic(vol, target_mm)
    boxed = pad_crop_to_cube(iso, cube)
    return normalize_intensity(boxed)
