"""Denoiser input assembly and classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .volume import ContractError, EnFaceImage, PatchRegion, ShapeError, Volume


@dataclass(frozen=True)
class CfgConfig:
    w: float = 2.0
    p_uncond: float = 0.1

    def __post_init__(self):
        if self.w < 0:
            raise ContractError(f"guidance scale must be >= 0, got {self.w}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ContractError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")


@dataclass(frozen=True)
class ConditioningBundle:
    lr_up: Volume
    enface: EnFaceImage
    enface_active: bool = True

    def __post_init__(self):
        if self.enface.data.shape != (self.lr_up.d, self.lr_up.w):
            raise ShapeError(
                f"en-face shape (D, W)={self.enface.data.shape} does not match "
                f"volume (D, W)={(self.lr_up.d, self.lr_up.w)}"
            )

    def without_enface(self) -> "ConditioningBundle":
        return replace(self, enface_active=False)


@dataclass
class StackedInput:
    """Three channels ``[x_t, lr_up, enface_volume]`` as one (3, D, H, W) array.

    ``region`` optionally records where the patch sits in the full
    high-resolution grid.
    """

    channels: np.ndarray
    region: PatchRegion | None = None

    @property
    def x_t(self) -> np.ndarray:
        return self.channels[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels.shape[1:]


def repeat_enface(e: EnFaceImage, H: int) -> Volume:
    if H < 1:
        raise ContractError(f"H must be >= 1, got {H}")
    d, w = e.data.shape
    data = np.broadcast_to(e.data[:, None, :], (d, H, w)).copy()
    return Volume(data, (e.spacing[0], 1.0, e.spacing[1]))


def assemble_input(
    x_t: Volume | np.ndarray, bundle: ConditioningBundle, region: PatchRegion | None = None
) -> StackedInput:
    xt = x_t.data if isinstance(x_t, Volume) else np.asarray(x_t, dtype=np.float32)
    lr = bundle.lr_up.data
    if xt.shape != lr.shape:
        raise ShapeError(f"x_t shape {xt.shape} != conditioning shape {lr.shape}")
    ch = np.empty((3,) + lr.shape, dtype=np.float32)
    ch[0] = xt
    ch[1] = lr
    if bundle.enface_active:
        ch[2] = bundle.enface.data[:, None, :]
    else:
        ch[2] = 0.0
    return StackedInput(ch, region)


def cfg_dropout(bundle: ConditioningBundle, u: float, cfg: CfgConfig) -> ConditioningBundle:
    # only the en-face channel is dropped; the low-resolution volume always stays
    return replace(bundle, enface_active=bundle.enface_active and not (u < cfg.p_uncond))


def cfg_combine(v_uncond, v_cond, w: float):
    vu = v_uncond.data if isinstance(v_uncond, Volume) else np.asarray(v_uncond)
    vc = v_cond.data if isinstance(v_cond, Volume) else np.asarray(v_cond)
    if vu.shape != vc.shape:
        raise ShapeError(f"shape mismatch {vu.shape} vs {vc.shape}")
    out = ((1.0 - w) * vu.astype(np.float64) + w * vc.astype(np.float64)).astype(np.float32)
    if isinstance(v_uncond, Volume):
        return Volume(out, v_uncond.spacing)
    return out
