"""Volume and en-face containers, patch I/O, slice-axis resampling, registration.

Arrays are stored in (z, y, x) order with x fastest: ``data[z, y, x]``.
z is the slice (B-scan) axis, y the axial depth, x the lateral axis.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class BoundsError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # mm for (x, y, z)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be 3-D and non-empty, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractError("volume contains non-finite values")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(W, H, D)."""
        return self.w, self.h, self.d

    def like(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, dict(self.meta))


@dataclass
class EnFaceImage:
    """2-D image in the x-z plane, stored as ``data[z, x]``."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)  # mm for (x, z)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ShapeError(f"en-face data must be 2-D and non-empty, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractError("en-face image contains non-finite values")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class PatchRegion:
    origin: tuple[int, int, int]  # (x0, y0, z0)
    size: tuple[int, int, int]  # (w, h, d)

    def __post_init__(self):
        if any(s < 1 for s in self.size):
            raise ShapeError(f"patch sizes must be >= 1, got {self.size}")

    def slices(self) -> tuple[slice, slice, slice]:
        """Index tuple into a (z, y, x) array."""
        (x0, y0, z0), (w, h, d) = self.origin, self.size
        return slice(z0, z0 + d), slice(y0, y0 + h), slice(x0, x0 + w)

    def inside(self, dims: Sequence[int]) -> bool:
        return all(o >= 0 and o + s <= n for o, s, n in zip(self.origin, self.size, dims))

    def intersect(self, other: "PatchRegion") -> "PatchRegion | None":
        lo = [max(a, b) for a, b in zip(self.origin, other.origin)]
        hi = [
            min(a + s, b + t)
            for a, s, b, t in zip(self.origin, self.size, other.origin, other.size)
        ]
        if any(h <= l for l, h in zip(lo, hi)):
            return None
        return PatchRegion(tuple(lo), tuple(h - l for l, h in zip(lo, hi)))


@dataclass(frozen=True)
class SliceMask:
    known: tuple[int, ...]

    def __post_init__(self):
        k = tuple(int(i) for i in self.known)
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ContractError("known slice indices must be strictly increasing")
        object.__setattr__(self, "known", k)

    @classmethod
    def periodic(cls, depth: int, factor: int = 8, offset: int = 4) -> "SliceMask":
        return cls(tuple(range(offset, depth, factor)))

    def as_bool(self, depth: int) -> np.ndarray:
        if self.known and (self.known[0] < 0 or self.known[-1] >= depth):
            raise BoundsError(f"known slices out of range for depth {depth}")
        m = np.zeros(depth, dtype=bool)
        m[list(self.known)] = True
        return m


# -- patches ---------------------------------------------------------------


def extract_patch(v: Volume, r: PatchRegion) -> Volume:
    if not r.inside(v.dims):
        raise BoundsError(f"region {r} outside volume of dims {v.dims}")
    return Volume(v.data[r.slices()].copy(), v.spacing)


def insert_patch(v: Volume, r: PatchRegion, patch: Volume) -> Volume:
    if patch.dims != tuple(r.size):
        raise ShapeError(f"patch dims {patch.dims} != region size {r.size}")
    if not r.inside(v.dims):
        raise BoundsError(f"region {r} outside volume of dims {v.dims}")
    out = v.data.copy()
    out[r.slices()] = patch.data
    return Volume(out, v.spacing)


# -- slice-axis resampling -------------------------------------------------


def _check_factor(factor: int, known_offset: int) -> None:
    if int(factor) != factor or factor < 1:
        raise ContractError(f"factor must be a positive integer, got {factor}")
    if not 0 <= known_offset < factor:
        raise ContractError(f"known_offset must lie in [0, {factor}), got {known_offset}")


def _hr_spacing(lr: Volume, factor: int) -> tuple[float, float, float]:
    sx, sy, sz = lr.spacing
    return sx, sy, sz / factor


def upsample_slices_linear(lr: Volume, factor: int = 8, known_offset: int = 4) -> Volume:
    _check_factor(factor, known_offset)
    d_lr = lr.d
    z = np.arange(factor * d_lr)
    u = np.clip((z - known_offset) / factor, 0, d_lr - 1)
    i0 = np.minimum(np.floor(u).astype(int), d_lr - 1)
    i1 = np.minimum(i0 + 1, d_lr - 1)
    f = (u - i0)[:, None, None]
    src = lr.data.astype(np.float64)
    out = ((1.0 - f) * src[i0] + f * src[i1]).astype(np.float32)
    out[known_offset::factor] = lr.data
    return Volume(out, _hr_spacing(lr, factor))


def cubic_weights(t: np.ndarray, kernel: str = "lagrange") -> np.ndarray:
    """Tap weights for samples at offsets -1, 0, 1, 2 evaluated at fraction t."""
    t = np.asarray(t, dtype=np.float64)
    if kernel == "lagrange":
        w = [
            -t * (t - 1) * (t - 2) / 6,
            (t + 1) * (t - 1) * (t - 2) / 2,
            -(t + 1) * t * (t - 2) / 2,
            (t + 1) * t * (t - 1) / 6,
        ]
    elif kernel == "catmull-rom":
        t2, t3 = t * t, t * t * t
        w = [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ]
    else:
        raise ContractError(f"unknown cubic kernel {kernel!r}")
    return np.stack(w, axis=-1)


def upsample_slices_tricubic(
    lr: Volume, factor: int = 8, known_offset: int = 4, kernel: str = "lagrange"
) -> Volume:
    """Cubic convolution along z, applied independently per (x, y) column.

    In-plane resolution is unchanged, so the 3-D tricubic baseline reduces to a
    1-D cubic along the slice axis. Control slices are edge-replicated.
    With fewer than 4 LR slices falls back to linear and sets
    ``meta["interp_fallback"] = "linear"``.
    """
    _check_factor(factor, known_offset)
    d_lr = lr.d
    if d_lr < 4:
        out = upsample_slices_linear(lr, factor, known_offset)
        out.meta["interp_fallback"] = "linear"
        return out
    z = np.arange(factor * d_lr)
    u = (z - known_offset) / factor
    i = np.floor(u).astype(int)
    t = u - i
    w = cubic_weights(t, kernel)
    src = lr.data.astype(np.float64)
    out = np.zeros((len(z),) + lr.data.shape[1:], dtype=np.float64)
    for k, off in enumerate((-1, 0, 1, 2)):
        idx = np.clip(i + off, 0, d_lr - 1)
        out += w[:, k, None, None] * src[idx]
    out = out.astype(np.float32)
    out[known_offset::factor] = lr.data
    return Volume(out, _hr_spacing(lr, factor))


def upsample_slices_nearest(lr: Volume, factor: int = 8, known_offset: int = 4) -> Volume:
    _check_factor(factor, known_offset)
    z = np.arange(factor * lr.d)
    idx = np.clip(np.round((z - known_offset) / factor).astype(int), 0, lr.d - 1)
    return Volume(lr.data[idx].copy(), _hr_spacing(lr, factor))


def decimate_slices(hr: Volume, factor: int = 8, known_offset: int = 4) -> Volume:
    _check_factor(factor, known_offset)
    if hr.d % factor:
        raise ContractError(f"slice count {hr.d} not divisible by {factor}")
    sx, sy, sz = hr.spacing
    return Volume(hr.data[known_offset::factor].copy(), (sx, sy, sz * factor))


# -- registration ----------------------------------------------------------


def _shift_rows(a: np.ndarray, s: int, axis: int = 0) -> np.ndarray:
    """Translate along ``axis`` by s rows (positive = towards larger index), zero-fill."""
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(s) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if s >= 0:
        src[axis], dst[axis] = slice(0, n - s), slice(s, n)
    else:
        src[axis], dst[axis] = slice(-s, n), slice(0, n + s)
    out[tuple(dst)] = a[tuple(src)]
    return out


def _profile_cost(profile: np.ndarray, ref: np.ndarray, s: int) -> float:
    # full-length MSE with the vacated rows zero-filled, so large shifts pay for
    # the rows they empty instead of matching a short flat band
    if abs(s) >= len(profile):
        return np.inf
    return float(np.mean((_shift_rows(profile, s) - ref) ** 2))


def register_bscans_vertical(v: Volume, max_shift: int = 32) -> tuple[Volume, list[int]]:
    """Align each B-scan vertically to its registered predecessor.

    Each slice is collapsed to a depth profile (mean over x). For slice k the
    relative shift s in [-max_shift, max_shift] minimising the profile MSE
    against slice k-1's registered profile is chosen (ties: smaller |s|, then
    negative), and the cumulative shift is applied with zero fill. Returns the
    registered volume and the applied per-slice shifts (slice 0 is fixed).
    """
    if max_shift < 0:
        raise ContractError("max_shift must be >= 0")
    data = v.data
    profiles = data.astype(np.float64).mean(axis=2)  # (D, H)
    candidates = sorted(range(-max_shift, max_shift + 1), key=lambda s: (abs(s), s))
    out = data.copy()
    shifts = [0]
    ref = profiles[0]
    for k in range(1, v.d):
        prev = shifts[-1]
        best, best_cost = prev, np.inf
        for s in candidates:
            total = prev + s
            cost = _profile_cost(profiles[k], ref, total)
            if cost < best_cost:
                best, best_cost = total, cost
        shifts.append(best)
        if best:
            out[k] = _shift_rows(data[k], best, axis=0)
        ref = _shift_rows(profiles[k], best)
    return Volume(out, v.spacing), shifts


# -- intensity normalization and projections --------------------------------


def normalize_generated_slices(v: Volume, mask: SliceMask, eps: float = 1e-8) -> Volume:
    known = mask.as_bool(v.d)
    if not known.any() or known.all():
        raise ContractError("need both known and generated slices to normalise")
    x = v.data.astype(np.float64)
    mu_k, sd_k = x[known].mean(), x[known].std()
    gen = x[~known]
    mu_g, sd_g = gen.mean(), gen.std()
    if sd_g < eps:
        gen = gen - mu_g + mu_k
    else:
        gen = mu_k + (gen - mu_g) * (sd_k / sd_g)
    out = v.data.copy()
    out[~known] = gen.astype(np.float32)
    return Volume(out, v.spacing)


def enface_projection(v: Volume) -> EnFaceImage:
    img = v.data.astype(np.float64).mean(axis=1).astype(np.float32)
    return EnFaceImage(img, (v.spacing[0], v.spacing[2]))


def enface_as_volume(e: EnFaceImage) -> Volume:
    """En-face image in the AVOL convention: a volume with h = 1."""
    sx, sz = e.spacing
    return Volume(e.data[:, None, :], (sx, 1.0, sz))


def volume_as_enface(v: Volume) -> EnFaceImage:
    if v.h != 1:
        raise ShapeError(f"en-face AVOL must have h=1, got h={v.h}")
    return EnFaceImage(v.data[:, 0, :], (v.spacing[0], v.spacing[2]))


# -- AVOL container --------------------------------------------------------

AVOL_MAGIC = b"AVOL1\n"


def write_avol(path: str | Path, v: Volume | EnFaceImage) -> None:
    if isinstance(v, EnFaceImage):
        v = enface_as_volume(v)
    header = {
        "w": v.w,
        "h": v.h,
        "d": v.d,
        "spacing_mm": list(v.spacing),
        "dtype": "f32",
        "order": "zyx",
    }
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(AVOL_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_avol(path: str | Path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:6] != AVOL_MAGIC:
        raise ValueError(f"{path}: not an AVOL file")
    (n,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10 : 10 + n].decode("utf-8"))
    if header.get("dtype") != "f32" or header.get("order") != "zyx":
        raise ValueError(f"{path}: unsupported dtype/order {header}")
    w, h, d = header["w"], header["h"], header["d"]
    body = raw[10 + n :]
    if len(body) != 4 * w * h * d:
        raise ValueError(f"{path}: payload size {len(body)} != 4*{w}*{h}*{d}")
    data = np.frombuffer(body, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return Volume(data, tuple(header["spacing_mm"]))


def read_enface(path: str | Path) -> EnFaceImage:
    return volume_as_enface(read_avol(path))


def stack_slices(slices: Iterable[np.ndarray], spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.stack(list(slices)), spacing)
