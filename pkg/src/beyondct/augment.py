"""On-the-fly stochastic augmentation for normalized volumes.

Each transform kind is independently included in a sampled plan; plans are
pure data, so applying the same plan to the same volume always reproduces
the same output regardless of scheduling. Geometric transforms act in the
axial plane (about z) and resample in place with border fill 0; the final
output is clamped back to [0, 255].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError
from .volume import NORM255, Volume, bilinear_plane_sample, linear_interp_axis
from .util import round_half_up

# Canonical application order: intensity first, then geometry, then blur,
# then noise, so plans are reproducible byte-for-byte.
TRANSFORM_ORDER = (
    "value_shift",
    "contrast",
    "crop_pad",
    "flip",
    "scale_xy",
    "translate",
    "rotate",
    "shear",
    "blur",
    "noise",
)

BLUR_KINDS = ("gaussian", "average", "median")
FLIP_AXES = ("horizontal", "vertical")


@dataclass(frozen=True)
class AugmentConfig:
    """Transform parameter ranges and inclusion probabilities."""

    value_shift_range: tuple[float, float] = (-0.25, 0.25)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    crop_pad_frac: float = 0.10
    flip_prob: float = 0.5
    scale_xy_range: tuple[float, float] = (0.8, 1.2)
    translate_frac: float = 0.15
    rotate_deg_range: tuple[float, float] = (-90.0, 90.0)
    shear_deg_range: tuple[float, float] = (-15.0, 15.0)
    blur_kinds: tuple[str, ...] = BLUR_KINDS
    noise_std_range: tuple[float, float] = (0.0, 51.0)
    include_prob: float = 0.5

    def __post_init__(self) -> None:
        problems = []
        for name in ("value_shift_range", "contrast_range", "scale_xy_range",
                     "rotate_deg_range", "shear_deg_range", "noise_std_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                problems.append(f"{name} must be ordered, got ({lo}, {hi})")
        for name in ("crop_pad_frac", "translate_frac"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("flip_prob", "include_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                problems.append(f"{name} must be in [0, 1], got {p}")
        bad_kinds = [k for k in self.blur_kinds if k not in BLUR_KINDS]
        if bad_kinds:
            problems.append(f"unknown blur kinds {bad_kinds}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class AugmentPlan:
    """An ordered, fully sampled list of (kind, parameters) steps."""

    steps: tuple[tuple[str, dict], ...]
    seed: int


def sample_plan(cfg: AugmentConfig, seed: int) -> AugmentPlan:
    """Draw a random subset of transforms with parameters from their ranges.

    Every kind enters independently with probability include_prob; the flip
    axis itself is chosen horizontal with probability flip_prob, otherwise
    vertical.
    """
    rng = np.random.default_rng(seed)
    steps: list[tuple[str, dict]] = []
    for kind in TRANSFORM_ORDER:
        if rng.random() >= cfg.include_prob:
            continue
        if kind == "value_shift":
            params = {"fraction": float(rng.uniform(*cfg.value_shift_range))}
        elif kind == "contrast":
            params = {"factor": float(rng.uniform(*cfg.contrast_range))}
        elif kind == "crop_pad":
            f = cfg.crop_pad_frac
            params = {"factors": tuple(float(v) for v in rng.uniform(1 - f, 1 + f, size=3))}
        elif kind == "flip":
            params = {"axis": "horizontal" if rng.random() < cfg.flip_prob else "vertical"}
        elif kind == "scale_xy":
            params = {
                "fx": float(rng.uniform(*cfg.scale_xy_range)),
                "fy": float(rng.uniform(*cfg.scale_xy_range)),
            }
        elif kind == "translate":
            t = cfg.translate_frac
            params = {"dx_frac": float(rng.uniform(-t, t)), "dy_frac": float(rng.uniform(-t, t))}
        elif kind == "rotate":
            params = {"degrees": float(rng.uniform(*cfg.rotate_deg_range))}
        elif kind == "shear":
            params = {"degrees": float(rng.uniform(*cfg.shear_deg_range))}
        elif kind == "blur":
            params = {"kind": str(cfg.blur_kinds[rng.integers(len(cfg.blur_kinds))])}
        else:  # noise
            params = {
                "std": float(rng.uniform(*cfg.noise_std_range)),
                "seed": int(rng.integers(0, 2**63)),
            }
        steps.append((kind, params))
    return AugmentPlan(tuple(steps), seed)


def apply_plan(vol: Volume, plan: AugmentPlan) -> Volume:
    """Run the plan's transforms in order and clamp the result to [0, 255]."""
    if vol.intensity != NORM255:
        raise ContractError("augmentation expects a normalized volume")
    arr = vol.values.astype(np.float64)
    for kind, params in plan.steps:
        arr = _KERNELS[kind](arr, **params)
    arr = np.clip(arr, 0.0, 255.0)
    return Volume(arr.astype(np.float32), vol.spacing_mm, NORM255)


# ---------------------------------------------------------------------------
# Transform kernels. Each validates its parameter against the canonical
# range and preserves the array shape.


def _require(ok: bool, message: str) -> None:
    if not ok:
        raise ContractError(message)


def value_shift(arr: np.ndarray, fraction: float) -> np.ndarray:
    _require(-0.25 <= fraction <= 0.25, f"value shift fraction {fraction} outside [-0.25, 0.25]")
    return arr * (1.0 + fraction)


def contrast(arr: np.ndarray, factor: float) -> np.ndarray:
    _require(0.8 <= factor <= 1.2, f"contrast factor {factor} outside [0.8, 1.2]")
    mean = arr.mean()
    return mean + factor * (arr - mean)


def crop_or_pad(arr: np.ndarray, factors: float | tuple[float, float, float]) -> np.ndarray:
    """Crop (factor < 1) or zero-pad (factor > 1) each axis, centered, then
    stretch back to the original dims so batch shapes stay fixed."""
    if np.isscalar(factors):
        factors = (float(factors),) * 3
    out = arr
    for axis, f in enumerate(factors):
        _require(0.9 <= f <= 1.1, f"crop/pad factor {f} outside [0.9, 1.1]")
        d = out.shape[axis]
        m = max(1, round_half_up(d * f))
        if m == d:
            continue
        if m < d:
            start = (d - m) // 2
            idx = [slice(None)] * 3
            idx[axis] = slice(start, start + m)
            resized = out[tuple(idx)]
        else:
            lo = (m - d) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (lo, m - d - lo)
            resized = np.pad(out, pad, mode="constant", constant_values=0.0)
        if d > 1:
            coords = np.arange(d, dtype=np.float64) * ((m - 1) / (d - 1))
        else:
            coords = np.zeros(1)
        out = linear_interp_axis(resized, coords, axis)
    return out


def flip(arr: np.ndarray, axis: str) -> np.ndarray:
    _require(axis in FLIP_AXES, f"flip axis must be one of {FLIP_AXES}, got {axis!r}")
    return arr[:, :, ::-1].copy() if axis == "horizontal" else arr[:, ::-1, :].copy()


def _plane_grid(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, float]:
    _, ny, nx = arr.shape
    yy, xx = np.meshgrid(
        np.arange(ny, dtype=np.float64), np.arange(nx, dtype=np.float64), indexing="ij"
    )
    return yy, xx, (ny - 1) / 2.0, (nx - 1) / 2.0


def scale_xy(arr: np.ndarray, fx: float, fy: float) -> np.ndarray:
    _require(0.8 <= fx <= 1.2 and 0.8 <= fy <= 1.2, f"scale factors ({fx}, {fy}) outside [0.8, 1.2]")
    yy, xx, cy, cx = _plane_grid(arr)
    return bilinear_plane_sample(arr, cy + (yy - cy) / fy, cx + (xx - cx) / fx, fill=0.0)


def translate(arr: np.ndarray, dx_frac: float, dy_frac: float) -> np.ndarray:
    _require(
        -0.15 <= dx_frac <= 0.15 and -0.15 <= dy_frac <= 0.15,
        f"translation fractions ({dx_frac}, {dy_frac}) outside [-0.15, 0.15]",
    )
    _, ny, nx = arr.shape
    yy, xx, _, _ = _plane_grid(arr)
    return bilinear_plane_sample(arr, yy - dy_frac * ny, xx - dx_frac * nx, fill=0.0)


def rotate_inplane(arr: np.ndarray, degrees: float) -> np.ndarray:
    _require(-90.0 <= degrees <= 90.0, f"rotation {degrees} outside [-90, 90] degrees")
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    yy, xx, cy, cx = _plane_grid(arr)
    dx, dy = xx - cx, yy - cy
    return bilinear_plane_sample(arr, cy - s * dx + c * dy, cx + c * dx + s * dy, fill=0.0)


def shear_inplane(arr: np.ndarray, degrees: float) -> np.ndarray:
    _require(-15.0 <= degrees <= 15.0, f"shear {degrees} outside [-15, 15] degrees")
    k = math.tan(math.radians(degrees))
    yy, xx, cy, cx = _plane_grid(arr)
    return bilinear_plane_sample(arr, yy, xx - k * (yy - cy), fill=0.0)


def blur(arr: np.ndarray, kind: str) -> np.ndarray:
    """Size-3 blur window; the gaussian variant uses sigma 1."""
    if kind == "gaussian":
        return ndimage.gaussian_filter(arr, sigma=1.0, truncate=1.0, mode="constant", cval=0.0)
    if kind == "average":
        return ndimage.uniform_filter(arr, size=3, mode="constant", cval=0.0)
    if kind == "median":
        return ndimage.median_filter(arr, size=3, mode="constant", cval=0.0)
    raise ContractError(f"unknown blur kind {kind!r}")


def gaussian_noise(arr: np.ndarray, std: float, seed: int) -> np.ndarray:
    _require(0.0 <= std <= 51.0, f"noise std {std} outside [0, 51]")
    if std == 0.0:
        return arr
    rng = np.random.default_rng(seed)
    return arr + rng.normal(0.0, std, size=arr.shape)


_KERNELS: dict[str, Callable[..., np.ndarray]] = {
    "value_shift": value_shift,
    "contrast": contrast,
    "crop_pad": crop_or_pad,
    "flip": flip,
    "scale_xy": scale_xy,
    "translate": translate,
    "rotate": rotate_inplane,
    "shear": shear_inplane,
    "blur": blur,
    "noise": gaussian_noise,
}
