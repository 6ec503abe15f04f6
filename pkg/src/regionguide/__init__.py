"""Region-grounded text conditioning for a toy latent-diffusion restorer.

Tag tokens are confined to their segmentation masks inside cross-attention,
and classifier-free guidance is applied only where some tag is grounded.
"""

__version__ = "0.1.0"

from .attention import (
    AttentionInputs,
    AttentionWeights,
    Normalization,
    RenormMode,
    TokenPixelMask,
    apply_token_pixel_mask,
    renormalize,
    scaled_dot_attention,
    srca_attention,
)
from .guidance import GuidanceConfig, NoiseField, cfg, stcfg
from .masks import (
    ResamplePolicy,
    TagMaskPair,
    TokenLayout,
    UngroundedMask,
    build_token_pixel_mask,
    build_ungrounded_mask,
    filter_by_confidence,
    resample_mask,
    union_grounded,
)
from .metrics import psnr, region_metric, ssim
