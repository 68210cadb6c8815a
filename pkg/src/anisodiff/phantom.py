"""Synthetic retina-like phantoms and the slice-spacing quantification demo."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .volume import (
    ContractError,
    EnFaceImage,
    Volume,
    decimate_slices,
    enface_projection,
    upsample_slices_linear,
    upsample_slices_nearest,
    upsample_slices_tricubic,
)

# Vitreous background over five tissue bands (RPE is the bright 0.8 band). Values stay in [-0.8, 0.8].
BAND_INTENSITIES = (-0.8, 0.55, -0.25, -0.45, 0.8, 0.0)
BAND_DEPTHS = (0.25, 0.31, 0.40, 0.55, 0.60)  # boundaries as fractions of H
RPE_BOUNDARY = 3  # boundary index pushed upward by drusen
VESSEL_INTENSITY = -0.6
SHADOW_STRENGTH = 0.6
# vessels cross B-scans obliquely; one running inside a single B-scan would shadow
# the whole slice and defeat profile-based registration
VESSEL_ANGLE_RANGE = (np.pi / 6, 5 * np.pi / 6)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 64, 48)  # (W, H, D)
    spacing_mm: tuple[float, float, float] = (0.011, 0.0039, 0.030)
    n_drusen: int = 3
    drusen_radius_range: tuple[float, float] = (3.0, 6.0)
    n_vessels: int = 2
    vessel_radius_range: tuple[float, float] = (1.0, 2.0)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        W, H, D = self.dims
        if min(self.dims) < 1:
            raise ContractError(f"dims must be positive, got {self.dims}")
        if D % 8:
            raise ContractError(f"slice count {D} must be divisible by 8")
        if min(self.n_drusen, self.n_vessels) < 0 or self.noise_sigma < 0:
            raise ContractError("counts and noise_sigma must be non-negative")
        lo, hi = self.drusen_radius_range
        if not 0 < lo <= hi or hi >= min(W, D):
            raise ContractError(f"drusen radii {self.drusen_radius_range} invalid for dims {self.dims}")
        lo, hi = self.vessel_radius_range
        if not 0 < lo <= hi or hi >= min(W, H, D):
            raise ContractError(f"vessel radii {self.vessel_radius_range} invalid for dims {self.dims}")


@dataclass(frozen=True)
class LesionSpec:
    center: tuple[float, float, float]  # mm, (x, y, z)
    semi_axes: tuple[float, float, float]  # mm
    intensity: float = 1.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _boundaries(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Boundary depths (n_bound, W) in voxels: gentle curvature along x only."""
    W, H, _ = spec.dims
    x = np.arange(W) / max(W - 1, 1)
    curve = 0.04 * H * (x - 0.5) ** 2 * 4 + 0.01 * H * np.sin(2 * np.pi * x + rng.uniform(0, 2 * np.pi))
    return np.array([f * H + curve for f in BAND_DEPTHS])


def make_phantom(spec: PhantomSpec) -> tuple[Volume, EnFaceImage, dict]:
    """Layered phantom with drusen bumps, vessels with shadows, and speckle.

    Returns (noisy volume, en-face projection of the noise-free volume, meta).
    """
    W, H, D = spec.dims
    rng = np.random.default_rng(spec.seed)
    bounds = _boundaries(spec, rng)  # (B, W)
    zz, xx = np.meshgrid(np.arange(D), np.arange(W), indexing="ij")  # (D, W)

    drusen = []
    bump = np.zeros((D, W))
    for _ in range(spec.n_drusen):
        r = float(rng.uniform(*spec.drusen_radius_range))
        cx = float(rng.uniform(r, W - 1 - r))
        cz = float(rng.uniform(min(r, (D - 1) / 2), max(D - 1 - r, (D - 1) / 2)))
        height = float(rng.uniform(0.5, 1.0) * r)
        bump += height * np.exp(-((xx - cx) ** 2 + (zz - cz) ** 2) / (2 * r * r))
        drusen.append({"center_xz": [cx, cz], "radius": r, "height": height})

    # boundary depth per (z, x); drusen lift the RPE boundary only
    depth = np.broadcast_to(bounds[:, None, :], (len(bounds), D, W)).copy()
    depth[RPE_BOUNDARY] -= bump
    depth[RPE_BOUNDARY] = np.maximum(depth[RPE_BOUNDARY], depth[RPE_BOUNDARY - 1] + 1.0)
    if depth.min() < 0 or depth.max() > H - 1:
        raise ContractError("layer geometry exceeds volume height")

    y = np.arange(H, dtype=np.float64)[None, :, None]  # broadcast to (D, H, W)
    vol = np.full((D, H, W), BAND_INTENSITIES[0], dtype=np.float64)
    for k in range(len(BAND_DEPTHS)):
        step = _sigmoid((y - depth[k][:, None, :]) / 0.5)
        vol += (BAND_INTENSITIES[k + 1] - BAND_INTENSITIES[k]) * step

    vessels = []
    for _ in range(spec.n_vessels):
        r = float(rng.uniform(*spec.vessel_radius_range))
        theta = float(rng.uniform(*VESSEL_ANGLE_RANGE))
        cx = float(rng.uniform(0.25 * W, 0.75 * W))
        cz = float(rng.uniform(0.25 * D, 0.75 * D))
        vessels.append(_vessel_geometry(cx, cz, theta, r, bounds))
    for ves in vessels:
        _draw_vessel(vol, ves)

    clean = Volume(vol.astype(np.float32), spec.spacing_mm)
    enface = enface_projection(clean)
    if spec.noise_sigma > 0:
        speckle = 1.0 + spec.noise_sigma * rng.standard_normal(vol.shape)
        noisy = np.clip(vol * speckle, -1.0, 1.0).astype(np.float32)
    else:
        noisy = clean.data.copy()
    meta = {
        "spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
        "drusen": drusen,
        "vessels": vessels,
        "band_intensities": list(BAND_INTENSITIES),
    }
    return Volume(noisy, spec.spacing_mm), enface, meta


def _vessel_geometry(cx: float, cz: float, theta: float, r: float, bounds: np.ndarray) -> dict:
    # vessels sit inside the second band, just below the inner surface
    xi = int(np.clip(round(cx), 0, bounds.shape[1] - 1))
    depth = float(0.5 * (bounds[0, xi] + bounds[1, xi]))
    return {"center_xz": [cx, cz], "angle": theta, "radius": r, "depth": depth}


def _draw_vessel(vol: np.ndarray, ves: dict) -> None:
    D, H, W = vol.shape
    (cx, cz), theta, r, yv = ves["center_xz"], ves["angle"], ves["radius"], ves["depth"]
    zz, xx = np.meshgrid(np.arange(D), np.arange(W), indexing="ij")
    # distance in the en-face plane to the line through (cx, cz) with direction (cos, sin) in (x, z)
    dperp = np.abs((xx - cx) * np.sin(theta) - (zz - cz) * np.cos(theta))[:, None, :]
    y = np.arange(H, dtype=np.float64)[None, :, None]
    tube = np.exp(-(dperp**2 + (y - yv) ** 2) / (2 * r * r))
    shadow = SHADOW_STRENGTH * np.exp(-(dperp**2) / (2 * r * r)) * _sigmoid((y - yv - r) / 0.5)
    vol += shadow * (BAND_INTENSITIES[0] - vol)
    vol += tube * (VESSEL_INTENSITY - vol)


def phantom_pair(spec: PhantomSpec) -> tuple[Volume, Volume, EnFaceImage, dict]:
    """(hr, lr, enface, meta) with lr the 8x decimated hr."""
    hr, ef, meta = make_phantom(spec)
    return hr, decimate_slices(hr, 8, 4), ef, meta


# -- quantification ---------------------------------------------------------


def quantify_lesion(v: Volume, threshold: float, spacing_mm: Sequence[float] | None = None) -> float:
    sp = v.spacing if spacing_mm is None else spacing_mm
    return float(np.count_nonzero(v.data >= threshold)) * float(np.prod(sp))


def rasterize_lesion(
    lesion: LesionSpec, dims: Sequence[int], spacing_mm: Sequence[float], supersample: int = 4
) -> Volume:
    """Partial-volume rasterisation: each voxel holds intensity x covered fraction."""
    W, H, D = dims
    sx, sy, sz = spacing_mm
    (cx, cy, cz), (a, b, c) = lesion.center, lesion.semi_axes
    for center, semi, n, sp in zip(lesion.center, lesion.semi_axes, dims, spacing_mm):
        if center - semi < 0 or center + semi > n * sp:
            raise ContractError(f"lesion {lesion} exceeds volume bounds")
    k = supersample
    off = (np.arange(k) + 0.5) / k - 0.5
    out = np.zeros((D, H, W))
    # voxel i covers [i*sp, (i+1)*sp), centre at (i+0.5)*sp
    gx = ((np.arange(W)[:, None] + 0.5 + off[None]) * sx - cx) / a  # (W, k)
    gy = ((np.arange(H)[:, None] + 0.5 + off[None]) * sy - cy) / b
    gz = ((np.arange(D)[:, None] + 0.5 + off[None]) * sz - cz) / c
    for iz in range(k):
        for iy in range(k):
            q = gz[:, iz, None, None] ** 2 + gy[None, :, iy, None] ** 2
            inside = (q[..., None] + gx[None, None, :, :] ** 2) <= 1.0  # (D, H, W, k)
            out += inside.sum(axis=-1)
    return Volume((lesion.intensity * out / k**3).astype(np.float32), tuple(spacing_mm))


RECONSTRUCTORS = {
    "nearest": upsample_slices_nearest,
    "linear": upsample_slices_linear,
    "tricubic": upsample_slices_tricubic,
}


@dataclass
class SweepRow:
    spacing: float
    estimate_mm3: float
    relative_error: float


@dataclass
class SweepTable:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["spacing", "estimate_mm3", "relative_error"])
        for r in self.rows:
            w.writerow([repr(r.spacing), repr(r.estimate_mm3), repr(r.relative_error)])
        return buf.getvalue()


def spacing_sweep(
    lesion: LesionSpec,
    spacings: Sequence[int] = (1, 2, 4, 8),
    reconstructor: str = "tricubic",
    dims: Sequence[int] = (64, 64, 64),
    base_spacing_mm: Sequence[float] = (0.05, 0.05, 0.05),
) -> SweepTable:
    """Lesion volume estimate after z-decimation and reconstruction at each factor.

    ``spacings`` are integer multiples of the base slice spacing. The analytic
    truth is 4/3 pi abc; voxels at or above half the lesion intensity count.
    """
    if reconstructor not in RECONSTRUCTORS:
        raise ContractError(f"unknown reconstructor {reconstructor!r}")
    if any(int(f) != f or f < 1 for f in spacings):
        raise ContractError(f"spacings must be positive integer factors, got {spacings}")
    truth = 4.0 / 3.0 * np.pi * float(np.prod(lesion.semi_axes))
    hr = rasterize_lesion(lesion, dims, base_spacing_mm)
    table = SweepTable()
    for f in spacings:
        f = int(f)
        if f == 1:
            rec = hr
        else:
            off = f // 2
            rec = RECONSTRUCTORS[reconstructor](decimate_slices(hr, f, off), f, off)
        est = quantify_lesion(rec, 0.5 * lesion.intensity, base_spacing_mm)
        table.rows.append(SweepRow(f * base_spacing_mm[2], est, (est - truth) / truth))
    return table
