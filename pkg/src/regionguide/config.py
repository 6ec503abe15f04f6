"""Centralized numeric tolerances and package-wide defaults."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    row_sum: float = 1e-6
    global_sum: float = 1e-6
    identity: float = 1e-12
    forward_identity: float = 1e-9


TOLERANCES = Tolerances()

# ITU-R BT.601 luma, used for SSIM on multichannel images and for Y-channel PSNR.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

DEFAULT_THRESHOLD = 0.25
DEFAULT_GUIDANCE_SCALE = 7.5
DEFAULT_STEPS = 8
THRESHOLD_GRID = (0.15, 0.25, 0.35, 0.45, 0.55)
