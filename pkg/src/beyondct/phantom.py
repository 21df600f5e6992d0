"""Synthetic phantom cohort: ellipsoidal air-filled "lungs" inside a
soft-tissue block, with lung-function ground truth defined by an analytic
law on measured air volume and height. Lets the full pipeline's learning
behavior be verified without clinical data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import DemographicsRecord
from .train import CohortSample, PftRecord, save_manifest
from .util import round_half_up
from .volume import HU, Volume, preprocess_volume, save_volume

# Layout constants, as fractions of the cube edge: the body block and the
# two lung centers. Ellipsoids must fit inside the body block.
BODY_HALF_X = 0.42
BODY_HALF_Y = 0.35
BODY_HALF_Z = 0.38
LUNG_CENTER_X = 0.20


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensity, demographics ranges, and the target law.

    The law: FVC = alpha * measured_air_liters + beta * height_inches +
    noise(sigma); FEV1 = gamma' * FVC with gamma' drawn within
    gamma_jitter of gamma and clipped to (0, 1].
    """

    cube_mm: float = 96.0
    spacing_mm: float = 1.5
    semi_axes_x_mm: tuple[float, float] = (10.0, 16.0)
    semi_axes_y_mm: tuple[float, float] = (14.0, 22.0)
    semi_axes_z_mm: tuple[float, float] = (20.0, 30.0)
    lung_hu: float = -850.0
    body_hu: float = 40.0
    background_hu: float = -1000.0
    air_threshold_hu: float = -500.0
    age_range: tuple[float, float] = (45.0, 80.0)
    height_range_in: tuple[float, float] = (58.0, 76.0)
    weight_range_lb: tuple[float, float] = (110.0, 250.0)
    cigs_range: tuple[float, float] = (5.0, 60.0)
    smoke_years_range: tuple[float, float] = (10.0, 50.0)
    alpha: float = 40.0
    beta: float = 0.0
    gamma: float = 0.75
    gamma_jitter: float = 0.05
    sigma: float = 0.0

    def __post_init__(self) -> None:
        problems = []
        if self.cube_mm <= 0 or self.spacing_mm <= 0:
            problems.append("cube_mm and spacing_mm must be positive")
        for name in ("semi_axes_x_mm", "semi_axes_y_mm", "semi_axes_z_mm",
                     "age_range", "height_range_in", "weight_range_lb",
                     "cigs_range", "smoke_years_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                problems.append(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.semi_axes_x_mm[1] > (BODY_HALF_X - LUNG_CENTER_X) * self.cube_mm:
            problems.append("x semi-axis range does not fit between lung center and body wall")
        if self.semi_axes_y_mm[1] > BODY_HALF_Y * self.cube_mm:
            problems.append("y semi-axis range exceeds the body block")
        if self.semi_axes_z_mm[1] > BODY_HALF_Z * self.cube_mm:
            problems.append("z semi-axis range exceeds the body block")
        if not self.lung_hu < self.air_threshold_hu <= self.body_hu:
            problems.append("need lung_hu < air_threshold_hu <= body_hu")
        if not self.background_hu < self.air_threshold_hu:
            problems.append("background must read as air (below threshold)")
        if self.alpha <= 0:
            problems.append(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.gamma <= 1:
            problems.append(f"gamma must be in (0, 1], got {self.gamma}")
        if self.gamma_jitter < 0 or self.sigma < 0 or self.beta < 0:
            problems.append("gamma_jitter, sigma, and beta must be >= 0")
        if problems:
            raise ContractError("; ".join(problems))

    @property
    def grid(self) -> int:
        return max(1, round_half_up(self.cube_mm / self.spacing_mm))


@dataclass(frozen=True)
class PhantomSample:
    """One generated phantom: the raw HU volume plus its ground truth."""

    subject_id: str
    scan_id: str
    volume: Volume
    demographics: DemographicsRecord
    pft: PftRecord
    air_volume_l: float


def _ellipsoid_mask(zz, yy, xx, center_mm, semi_axes):
    ax, ay, az = semi_axes
    cx, cy, cz = center_mm
    return (
        ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2
    ) <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> PhantomSample:
    """Deterministically build one phantom volume and its ground truth."""
    rng = np.random.default_rng(seed)
    ax = float(rng.uniform(*spec.semi_axes_x_mm))
    ay = float(rng.uniform(*spec.semi_axes_y_mm))
    az = float(rng.uniform(*spec.semi_axes_z_mm))

    n = spec.grid
    half = (n - 1) / 2.0
    coords = (np.arange(n, dtype=np.float64) - half) * spec.spacing_mm
    zz = coords[:, None, None]
    yy = coords[None, :, None]
    xx = coords[None, None, :]

    values = np.full((n, n, n), spec.background_hu, dtype=np.float32)
    body = (
        (np.abs(xx) <= BODY_HALF_X * spec.cube_mm)
        & (np.abs(yy) <= BODY_HALF_Y * spec.cube_mm)
        & (np.abs(zz) <= BODY_HALF_Z * spec.cube_mm)
    )
    values[body] = spec.body_hu
    offset = LUNG_CENTER_X * spec.cube_mm
    for cx in (-offset, offset):
        lung = _ellipsoid_mask(zz, yy, xx, (cx, 0.0, 0.0), (ax, ay, az))
        values[lung] = spec.lung_hu

    vol = Volume(values, (spec.spacing_mm,) * 3, HU)
    air_l = air_volume(vol, spec.air_threshold_hu)

    demo = DemographicsRecord(
        age=float(rng.uniform(*spec.age_range)),
        sex=int(rng.integers(0, 2)),
        height_in=float(rng.uniform(*spec.height_range_in)),
        weight_lb=float(rng.uniform(*spec.weight_range_lb)),
        smoking_status=int(rng.integers(0, 2)),
        cigs_per_day=float(rng.uniform(*spec.cigs_range)),
        smoke_years=float(rng.uniform(*spec.smoke_years_range)),
    )
    gamma_eff = float(
        np.clip(spec.gamma + rng.uniform(-spec.gamma_jitter, spec.gamma_jitter), 1e-3, 1.0)
    )
    noise = float(rng.normal(0.0, spec.sigma)) if spec.sigma > 0 else 0.0
    fvc = spec.alpha * air_l + spec.beta * demo.height_in + noise
    fvc = max(fvc, 0.1)  # keep the record physiologic under extreme noise
    pft = PftRecord(fvc_l=fvc, fev1_l=gamma_eff * fvc)
    sid = f"P{seed:06d}"
    return PhantomSample(sid, f"{sid}-S1", vol, demo, pft, air_l)


def air_volume(vol: Volume, threshold_hu: float = -500.0) -> float:
    """Liters of sub-threshold voxels inside the body's bounding box."""
    if vol.intensity != HU:
        raise ContractError("air volume is defined on HU-domain volumes")
    body = vol.values >= threshold_hu
    if not body.any():
        return 0.0
    slices = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.where(body.any(axis=other))[0]
        slices.append(slice(hits[0], hits[-1] + 1))
    region = vol.values[tuple(slices)]
    voxel_mm3 = float(np.prod(vol.spacing_mm))
    return float((region < threshold_hu).sum()) * voxel_mm3 / 1e6


def write_cohort(
    spec: PhantomSpec,
    n_subjects: int,
    seed: int,
    out_dir: str | Path,
    preprocess: bool = True,
) -> tuple[Path, list[CohortSample]]:
    """Generate phantoms, write volumes (preprocessed to the normalized
    grid by default) plus a manifest CSV; returns the manifest path and rows.
    """
    if n_subjects < 1:
        raise ContractError(f"need at least one subject, got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples: list[CohortSample] = []
    for i in range(n_subjects):
        phantom = generate_phantom(spec, seed + i)
        vol = phantom.volume
        if preprocess:
            vol = preprocess_volume(vol, target_mm=spec.spacing_mm, cube=spec.grid)
        name = phantom.subject_id
        save_volume(vol, out_dir / name)
        samples.append(
            CohortSample(
                subject_id=phantom.subject_id,
                scan_id=phantom.scan_id,
                volume_path=f"{name}.vol.json",
                demographics=phantom.demographics,
                pft=phantom.pft,
            )
        )
    manifest = out_dir / "manifest.csv"
    save_manifest(samples, manifest)
    return manifest, samples
