"""Cross-attention with spatial token masking.

Scaled dot-product attention over (pixel, token) pairs, plus the re-focusing
transform that zeroes tag tokens outside their grounded region and
renormalizes what survives::

    alpha[i, j]  = softmax_j(scale * q_i . k_j)
    masked[i, j] = mask[i, j] * alpha[i, j]
    refocused    = masked / row_sum      (per_pixel)
                 = masked / grand_sum    (global)
    out[i]       = sum_j refocused[i, j] * v_j

All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .config import TOLERANCES
from .errors import DegenerateMaskError, DimensionError, NumericError, PreconditionError


class Normalization(str, enum.Enum):
    ROW_STOCHASTIC = "row_stochastic"
    GLOBAL_SUM_ONE = "global_sum_one"
    UNNORMALIZED = "unnormalized"


class RenormMode(str, enum.Enum):
    PER_PIXEL = "per_pixel"
    GLOBAL = "global"


def _as_matrix(name, x):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class AttentionInputs:
    """Queries ``[num_pixels, d]``, keys ``[num_tokens, d]``, values ``[num_tokens, d_v]``."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        q = _as_matrix("queries", self.queries)
        k = _as_matrix("keys", self.keys)
        v = _as_matrix("values", self.values)
        if q.shape[0] < 1 or q.shape[1] < 1 or k.shape[0] < 1:
            raise DimensionError("need at least one pixel, one token and d >= 1")
        if q.shape[1] != k.shape[1]:
            raise DimensionError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
        if v.shape[0] != k.shape[0]:
            raise DimensionError(f"{v.shape[0]} values for {k.shape[0]} keys")
        scale = 1.0 / math.sqrt(q.shape[1]) if self.scale is None else float(self.scale)
        if not (math.isfinite(scale) and scale > 0):
            raise NumericError(f"scale must be positive and finite, got {scale}")
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "keys", k)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scale", scale)

    @property
    def num_pixels(self):
        return self.queries.shape[0]

    @property
    def num_tokens(self):
        return self.keys.shape[0]


@dataclass(frozen=True)
class AttentionWeights:
    weights: np.ndarray
    normalization: Normalization = Normalization.UNNORMALIZED

    def __post_init__(self):
        w = _as_matrix("weights", self.weights)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "normalization", Normalization(self.normalization))

    @property
    def shape(self):
        return self.weights.shape

    def check(self):
        """Assert the invariant implied by the normalization tag."""
        w = self.weights
        if self.normalization is Normalization.UNNORMALIZED:
            return
        if np.any(w < 0) or np.any(w > 1 + TOLERANCES.row_sum):
            raise PreconditionError("normalized weights must lie in [0, 1]")
        if self.normalization is Normalization.ROW_STOCHASTIC:
            err = np.max(np.abs(w.sum(axis=1) - 1.0))
            if err > TOLERANCES.row_sum:
                raise PreconditionError(f"rows deviate from 1 by {err:.3g}")
        else:
            err = abs(w.sum() - 1.0)
            if err > TOLERANCES.global_sum:
                raise PreconditionError(f"grand sum deviates from 1 by {err:.3g}")


@dataclass(frozen=True)
class TokenPixelMask:
    """Binary ``[num_pixels, num_tokens]`` matrix; pixels are row-major over ``resolution``."""

    mask: np.ndarray
    resolution: tuple[int, int]

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise DimensionError(f"token-pixel mask must be 2-D, got shape {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise PreconditionError("token-pixel mask entries must be 0 or 1")
        h, w = (int(r) for r in self.resolution)
        if h < 1 or w < 1 or h * w != m.shape[0]:
            raise DimensionError(f"resolution {h}x{w} does not match {m.shape[0]} pixel rows")
        m = m.astype(bool)
        if m.shape[1] < 1 or not np.all(m.any(axis=1)):
            raise PreconditionError("every pixel row must keep at least one token")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "resolution", (h, w))

    @classmethod
    def ones(cls, resolution, num_tokens):
        h, w = resolution
        return cls(np.ones((h * w, num_tokens), dtype=bool), (h, w))

    @property
    def num_pixels(self):
        return self.mask.shape[0]

    @property
    def num_tokens(self):
        return self.mask.shape[1]


def softmax_rows(scores):
    """Numerically stable softmax along the last axis."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True, dtype=np.float64)


def scaled_dot_attention(inputs: AttentionInputs):
    """Plain softmax attention.

    Returns:
        ``(output, weights)`` where ``output`` is ``[num_pixels, d_v]`` and
        ``weights`` is row-stochastic.
    """
    scores = (inputs.queries @ inputs.keys.T) * inputs.scale
    alpha = softmax_rows(scores)
    return alpha @ inputs.values, AttentionWeights(alpha, Normalization.ROW_STOCHASTIC)


def apply_token_pixel_mask(weights: AttentionWeights, mask: TokenPixelMask) -> AttentionWeights:
    if weights.shape != mask.mask.shape:
        raise DimensionError(f"weights {weights.shape} vs mask {mask.mask.shape}")
    return AttentionWeights(weights.weights * mask.mask, Normalization.UNNORMALIZED)


def renormalize_array(masked, mode=RenormMode.PER_PIXEL):
    """Renormalize masked weights over the last two axes.

    Leading axes are treated as a batch, which lets callers push many small
    fixtures through in one call.
    """
    mode = RenormMode(mode)
    masked = np.asarray(masked, dtype=np.float64)
    if mode is RenormMode.PER_PIXEL:
        denom = masked.sum(axis=-1, keepdims=True, dtype=np.float64)
    else:
        denom = masked.sum(axis=(-2, -1), keepdims=True, dtype=np.float64)
    if np.any(denom == 0):
        raise DegenerateMaskError(f"zero denominator in {mode.value} renormalization")
    return masked / denom


def renormalize(masked: AttentionWeights, mode=RenormMode.PER_PIXEL) -> AttentionWeights:
    mode = RenormMode(mode)
    out = renormalize_array(masked.weights, mode)
    tag = Normalization.ROW_STOCHASTIC if mode is RenormMode.PER_PIXEL else Normalization.GLOBAL_SUM_ONE
    return AttentionWeights(out, tag)


def srca_attention(inputs: AttentionInputs, mask: TokenPixelMask, mode=RenormMode.PER_PIXEL):
    """Attention with tag tokens confined to their grounded pixels.

    In ``global`` mode the grand-sum-normalized map is scaled back by the
    total mass of the unmasked map (``num_pixels`` for a softmax), so the
    output keeps the magnitude of ordinary attention and an all-ones mask is
    the identity. Returned weights in that mode are tagged ``unnormalized``.
    """
    mode = RenormMode(mode)
    _, alpha = scaled_dot_attention(inputs)
    masked = apply_token_pixel_mask(alpha, mask)
    refocused = renormalize(masked, mode)
    if mode is RenormMode.GLOBAL:
        total = alpha.weights.sum(dtype=np.float64)
        refocused = AttentionWeights(refocused.weights * total, Normalization.UNNORMALIZED)
    return refocused.weights @ inputs.values, refocused


def multi_head_attention(queries, keys, values, heads, mask=None, mode=RenormMode.PER_PIXEL):
    """Split the feature axis into ``heads`` and attend per head.

    The same token-pixel mask is applied to every head. Returns the
    concatenated head outputs and the head-averaged weights.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if q.shape[1] % heads or k.shape[1] % heads or v.shape[1] % heads:
        raise DimensionError(f"feature dims not divisible by {heads} heads")
    dq, dv = q.shape[1] // heads, v.shape[1] // heads
    outs, maps = [], []
    for h in range(heads):
        inp = AttentionInputs(q[:, h * dq:(h + 1) * dq], k[:, h * dq:(h + 1) * dq], v[:, h * dv:(h + 1) * dv])
        if mask is None:
            o, w = scaled_dot_attention(inp)
        else:
            o, w = srca_attention(inp, mask, mode)
        outs.append(o)
        maps.append(w.weights)
    return np.concatenate(outs, axis=1), np.mean(maps, axis=0)
