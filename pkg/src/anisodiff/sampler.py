"""Full-volume generation with overlapping patches, DDIM, CFG and RePaint compositing."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .conditioning import ConditioningBundle, assemble_input, cfg_combine
from .denoiser import Denoiser
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, forward_noise, timestep_pairs
from .volume import (
    ContractError,
    EnFaceImage,
    PatchRegion,
    ShapeError,
    SliceMask,
    Volume,
    extract_patch,
    normalize_generated_slices,
    register_bscans_vertical,
    upsample_slices_linear,
)

log = logging.getLogger(__name__)

FACTOR = 8
KNOWN_OFFSET = 4


class SamplingDiverged(RuntimeError):
    def __init__(self, t: int, stats: dict):
        super().__init__(f"non-finite sampler state at t={t}: {stats}")
        self.t, self.stats = t, stats


@dataclass(frozen=True)
class SamplingPlan:
    patch_size: tuple[int, int, int] = (496, 496, 16)  # (w, h, d)
    overlap_fraction: tuple[float, float, float] = (0.25, 0.25, 0.50)
    ddim_steps: int = 100
    guidance_scale: float = 2.0
    seed: int = 0
    resample_steps: int = 0
    enface_active: bool = True
    register_max_shift: int = 32

    def __post_init__(self):
        if any(not 0.0 <= o < 1.0 for o in self.overlap_fraction):
            raise ContractError(f"overlaps must lie in [0, 1), got {self.overlap_fraction}")
        if min(self.patch_size) < 1 or self.ddim_steps < 1:
            raise ContractError("patch sizes and ddim_steps must be positive")
        if self.guidance_scale < 0:
            raise ContractError("guidance scale must be >= 0")
        if self.resample_steps != 0:
            raise ContractError("RePaint resampling is not supported (resample_steps must be 0)")

    def strides(self) -> tuple[int, int, int]:
        return tuple(
            max(1, int(round(p * (1.0 - o)))) for p, o in zip(self.patch_size, self.overlap_fraction)
        )


@dataclass
class PatchTask:
    region: PatchRegion
    known_mask: np.ndarray  # bool, (d, h, w) over the patch


def _axis_origins(n: int, p: int, stride: int) -> list[int]:
    origins = list(range(0, n - p + 1, stride))
    if origins[-1] + p < n:
        origins.append(n - p)
    return origins


def global_known_planes(depth: int) -> np.ndarray:
    m = np.zeros(depth, dtype=bool)
    m[KNOWN_OFFSET::FACTOR] = True
    return m


def plan_patches(target_dims: Sequence[int], plan: SamplingPlan) -> list[PatchTask]:
    """Sliding-window tasks ordered lexicographically in (z, y, x) of their origins.

    A task's known mask marks the global known slices plus everything already
    covered by earlier tasks.
    """
    dims = tuple(int(n) for n in target_dims)
    if any(p > n for p, n in zip(plan.patch_size, dims)):
        raise ContractError(f"patch {plan.patch_size} larger than volume {dims}")
    ox, oy, oz = (_axis_origins(n, p, s) for n, p, s in zip(dims, plan.patch_size, plan.strides()))
    known_z = global_known_planes(dims[2])
    tasks: list[PatchTask] = []
    for z in oz:
        for y in oy:
            for x in ox:
                r = PatchRegion((x, y, z), plan.patch_size)
                w, h, d = r.size
                mask = np.zeros((d, h, w), dtype=bool)
                mask[known_z[z : z + d]] = True
                for prev in tasks:
                    inter = prev.region.intersect(r)
                    if inter is not None:
                        local = PatchRegion(
                            tuple(a - b for a, b in zip(inter.origin, r.origin)), inter.size
                        )
                        mask[local.slices()] = True
                tasks.append(PatchTask(r, mask))
    return tasks


def repaint_compose(
    known: np.ndarray,
    denoised_prev: np.ndarray,
    mask: np.ndarray,
    t_prev: int,
    eps: np.ndarray,
    s: NoiseSchedule,
) -> np.ndarray:
    known = known.data if isinstance(known, Volume) else known
    denoised_prev = denoised_prev.data if isinstance(denoised_prev, Volume) else denoised_prev
    if not (known.shape == denoised_prev.shape == mask.shape == np.shape(eps)):
        raise ShapeError(
            f"shape mismatch: known {known.shape}, denoised {denoised_prev.shape}, "
            f"mask {mask.shape}, eps {np.shape(eps)}"
        )
    noised = known.astype(np.float32) if t_prev == 0 else forward_noise(known, eps, t_prev, s)
    return np.where(mask, noised, denoised_prev).astype(np.float32)


def patch_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_patch(
    task: PatchTask,
    bundle: ConditioningBundle,
    d: Denoiser,
    s: NoiseSchedule,
    plan: SamplingPlan,
    rng: np.random.Generator,
    known: np.ndarray | None = None,
    progress: Callable[[int], None] | None = None,
) -> np.ndarray:
    """DDIM with CFG, re-imposing the known region at every step.

    ``known`` holds the clean values for voxels in ``task.known_mask``;
    by default the conditioning volume supplies them.
    """
    shape = task.known_mask.shape
    if bundle.lr_up.data.shape != shape:
        raise ShapeError(f"bundle shape {bundle.lr_up.data.shape} != task shape {shape}")
    known = bundle.lr_up.data if known is None else known
    uncond = bundle.without_enface()
    w = plan.guidance_scale
    x = rng.standard_normal(shape).astype(np.float32)
    for t, t_prev in timestep_pairs(ddim_timesteps(s.T, plan.ddim_steps)):
        v = d.predict(assemble_input(x, bundle, task.region), t)
        if w != 1.0:
            v_u = d.predict(assemble_input(x, uncond, task.region), t)
            v = cfg_combine(v_u, v, w)
        x = ddim_step(x, v, t, t_prev, s)
        eps = rng.standard_normal(shape).astype(np.float32)
        x = repaint_compose(known, x, task.known_mask, t_prev, eps, s)
        if not np.all(np.isfinite(x)):
            finite = x[np.isfinite(x)]
            stats = {
                "nonfinite": int(x.size - finite.size),
                "mean": float(finite.mean()) if finite.size else float("nan"),
            }
            raise SamplingDiverged(t, stats)
        if progress is not None:
            progress(t)
    return x


def sample_volume(
    lr: Volume,
    enface: EnFaceImage,
    d: Denoiser,
    s: NoiseSchedule,
    plan: SamplingPlan,
    progress: Callable[[int, int, int], None] | None = None,
) -> Volume:
    """Upsample ``lr`` 8x along z, conditioned on the registered en-face image.

    Output slices z = 8j + 4 equal registered LR slice j bit-exactly.
    ``progress(patch_index, n_patches, t)`` is called after every DDIM step.
    """
    target = (lr.w, lr.h, FACTOR * lr.d)
    if enface.data.shape != (target[2], target[0]):
        raise ShapeError(
            f"en-face shape (D, W)={enface.data.shape} must equal {(target[2], target[0])}"
        )
    tasks = plan_patches(target, plan)

    registered, shifts = register_bscans_vertical(lr, plan.register_max_shift)
    scaffold = upsample_slices_linear(registered, FACTOR, KNOWN_OFFSET)
    out = scaffold.data.copy()
    log.info("sampling %d patches, registration shifts %s", len(tasks), shifts)
    for i, task in enumerate(tasks):
        r = task.region
        (x0, _, z0), (w, _, dd) = r.origin, r.size
        bundle = ConditioningBundle(
            extract_patch(scaffold, r),
            EnFaceImage(enface.data[z0 : z0 + dd, x0 : x0 + w], enface.spacing),
            enface_active=plan.enface_active,
        )
        cb = None if progress is None else (lambda t, i=i: progress(i, len(tasks), t))
        patch = sample_patch(task, bundle, d, s, plan, patch_seed(plan.seed, i), out[r.slices()], cb)
        out[r.slices()] = patch
    result = Volume(out, scaffold.spacing)
    result = normalize_generated_slices(result, SliceMask.periodic(target[2], FACTOR, KNOWN_OFFSET))
    result.meta["registration_shifts"] = shifts
    return result
