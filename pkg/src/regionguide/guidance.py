"""Classifier-free guidance and its per-pixel targeted variant."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_GUIDANCE_SCALE
from .errors import ConfigError, DimensionError, NumericError


class NoiseKind(str, enum.Enum):
    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"
    BLENDED = "blended"


@dataclass(frozen=True)
class NoiseField:
    """Noise prediction ``[channels, H, W]``."""

    values: np.ndarray
    kind: NoiseKind = NoiseKind.BLENDED

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise DimensionError(f"noise field must be [C, H, W], got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("noise field contains non-finite entries")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", NoiseKind(self.kind))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = DEFAULT_GUIDANCE_SCALE
    stcfg_enabled: bool = True

    def __post_init__(self):
        _check_scale(self.scale)


def _check_scale(s):
    if not s >= 1:
        raise ConfigError(f"guidance scale must be >= 1, got {s}")


def _check_pair(uncond, cond):
    if uncond.shape != cond.shape:
        raise DimensionError(f"unconditional {uncond.shape} vs conditional {cond.shape}")


def cfg(uncond: NoiseField, cond: NoiseField, s: float) -> NoiseField:
    """``uncond + s * (cond - uncond)``; exactly ``cond`` when ``s == 1``."""
    _check_pair(uncond, cond)
    _check_scale(s)
    if s == 1:
        return NoiseField(cond.values.copy(), NoiseKind.BLENDED)
    u = uncond.values
    return NoiseField(u + s * (cond.values - u), NoiseKind.BLENDED)


def stcfg(uncond: NoiseField, cond: NoiseField, s: float, ungrounded) -> NoiseField:
    """Guidance on grounded pixels only; ungrounded pixels keep ``uncond``.

    ``ungrounded`` is an ``[H, W]`` binary grid (or an object with a ``mask``
    attribute) at the noise field's spatial resolution. The choice is a hard
    select, so grounded pixels are bit-identical to :func:`cfg` and ungrounded
    pixels bit-identical to ``uncond``.
    """
    m = np.asarray(getattr(ungrounded, "mask", ungrounded)).astype(bool)
    _check_pair(uncond, cond)
    if m.shape != uncond.shape[1:]:
        raise DimensionError(f"ungrounded mask {m.shape} vs noise grid {uncond.shape[1:]}")
    guided = cfg(uncond, cond, s).values
    return NoiseField(np.where(m[None, :, :], uncond.values, guided), NoiseKind.BLENDED)


def blend(uncond: NoiseField, cond: NoiseField, config: GuidanceConfig, ungrounded=None) -> NoiseField:
    """Dispatch to :func:`stcfg` or :func:`cfg` according to ``config``."""
    if config.stcfg_enabled:
        if ungrounded is None:
            raise ConfigError("targeted guidance needs an ungrounded mask")
        return stcfg(uncond, cond, config.scale, ungrounded)
    return cfg(uncond, cond, config.scale)
