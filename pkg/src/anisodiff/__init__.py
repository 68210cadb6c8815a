"""Slice-count upsampling of anisotropic volumes with an en-face-conditioned diffusion model."""

from .volume import EnFaceImage, PatchRegion, SliceMask, Volume, read_avol, write_avol

__all__ = ["EnFaceImage", "PatchRegion", "SliceMask", "Volume", "read_avol", "write_avol"]
__version__ = "0.1.0"
