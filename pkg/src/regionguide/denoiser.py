"""Toy cross-attention denoiser and deterministic DDIM-style sampler.

The network is deliberately small: a per-pixel input projection plus a
timestep embedding, then a stack of residual cross-attention layers, each
running at its own resolution (features are block-averaged down, attended,
and nearest-upsampled back), and a per-pixel output projection to noise.

Random numbers come from numpy's PCG64 bit generator, consumed only through
``random_raw`` and converted with fixed formulas, so weights and initial
noise do not depend on numpy's distribution algorithms. Weight stream layout
for a given seed, in order:

1. token embedding table ``[VOCAB_SIZE, token_dim]``
2. input projection ``[latent_channels, hidden_dim]``
3. per layer: query ``[hidden_dim, heads*head_dim]``, key and value
   ``[token_dim, heads*head_dim]``, output ``[heads*head_dim, hidden_dim]``
4. noise head ``[hidden_dim, latent_channels]``
5. encoder ``[3, latent_channels]``
6. decoder bias ``[3]``, uniform on ``[0.45, 0.55]``

Each matrix is filled row-major from uniforms on ``[-a, a]`` with
``a = sqrt(6 / (fan_in + fan_out))``. The decoder matrix is not drawn: it is
half the pseudo-inverse of the encoder, so decoding an encoded image at
latent resolution gives the image back.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .attention import RenormMode, TokenPixelMask, multi_head_attention
from .errors import ConfigError, DimensionError, NumericDivergenceError, NumericError, SelectorError
from .guidance import GuidanceConfig, NoiseField, NoiseKind, blend
from .masks import VOCAB_SIZE, GroundingResult, TokenLayout


# -- deterministic random stream ------------------------------------------------


class SeededStream:
    """Platform-stable uniforms and normals from PCG64 raw output."""

    def __init__(self, seed):
        self._bits = np.random.PCG64(int(seed))

    def uniform(self, n):
        """``n`` doubles in ``[0, 1)`` from the top 53 bits of each raw draw."""
        raw = self._bits.random_raw(int(n))
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n):
        """Box-Muller normals; consumes two uniforms per pair."""
        m = (int(n) + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def xavier(self, fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return (self.uniform(fan_in * fan_out) * 2.0 - 1.0).reshape(fan_in, fan_out) * a


def array_digest(*arrays, decimals=None):
    """SHA-256 over float64 bytes, optionally rounded first to absorb last-ulp noise."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        if decimals is not None:
            a = np.round(a, decimals) + 0.0  # +0.0 folds -0.0 into 0.0
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# -- specification and weights --------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    resolution: tuple[int, int]
    heads: int = 2
    head_dim: int = 8


@dataclass(frozen=True)
class DenoiserSpec:
    latent_channels: int = 4
    base_resolution: tuple[int, int] = (8, 8)
    layer_specs: tuple[LayerSpec, ...] = (LayerSpec((8, 8)), LayerSpec((4, 4)))
    token_dim: int = 16
    seed: int = 0
    hidden_dim: int = 16

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layer_specs)
        layers = tuple(LayerSpec(tuple(int(x) for x in l.resolution), int(l.heads), int(l.head_dim)) for l in layers)
        object.__setattr__(self, "layer_specs", layers)
        object.__setattr__(self, "base_resolution", tuple(int(x) for x in self.base_resolution))
        H, W = self.base_resolution
        if min(self.latent_channels, self.token_dim, self.hidden_dim, H, W) < 1 or self.seed < 0:
            raise ConfigError("denoiser dims must be >= 1 and seed non-negative")
        if not layers:
            raise ConfigError("denoiser needs at least one cross-attention layer")
        for l in layers:
            h, w = l.resolution
            if min(h, w, l.heads, l.head_dim) < 1 or H % h or W % w:
                raise ConfigError(f"layer resolution {l.resolution} must divide {self.base_resolution}")
        if len(self.resolutions) < 2:
            raise ConfigError("layers must span at least two distinct resolutions")

    @property
    def resolutions(self):
        return sorted({l.resolution for l in self.layer_specs}, reverse=True)


@dataclass(frozen=True)
class LayerWeights:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray
    out: np.ndarray


@dataclass(frozen=True)
class DenoiserWeights:
    spec: DenoiserSpec
    token_embedding: np.ndarray
    input_proj: np.ndarray
    layers: tuple[LayerWeights, ...]
    noise_head: np.ndarray
    decoder: np.ndarray
    decoder_bias: np.ndarray
    encoder: np.ndarray

    def arrays(self):
        out = [self.token_embedding, self.input_proj]
        for l in self.layers:
            out += [l.query, l.key, l.value, l.out]
        return out + [self.noise_head, self.decoder, self.decoder_bias, self.encoder]

    def checksum(self):
        return array_digest(*self.arrays(), decimals=12)


def init_weights(spec: DenoiserSpec) -> DenoiserWeights:
    rng = SeededStream(spec.seed)
    emb = rng.xavier(VOCAB_SIZE, spec.token_dim)
    w_in = rng.xavier(spec.latent_channels, spec.hidden_dim)
    layers = []
    for l in spec.layer_specs:
        inner = l.heads * l.head_dim
        layers.append(LayerWeights(
            query=rng.xavier(spec.hidden_dim, inner),
            key=rng.xavier(spec.token_dim, inner),
            value=rng.xavier(spec.token_dim, inner),
            out=rng.xavier(inner, spec.hidden_dim),
        ))
    head = rng.xavier(spec.hidden_dim, spec.latent_channels)
    enc = rng.xavier(3, spec.latent_channels)
    bias = 0.45 + 0.1 * rng.uniform(3)
    dec = np.linalg.pinv(enc) * 0.5
    return DenoiserWeights(spec, emb, w_in, tuple(layers), head, dec, bias, enc)


def embed_tokens(token_ids, weights: DenoiserWeights):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or np.any(ids < 0) or np.any(ids >= VOCAB_SIZE):
        raise ConfigError("token ids must be a 1-D array inside the vocabulary")
    return weights.token_embedding[ids]


# -- forward pass ---------------------------------------------------------------


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    emb = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])
    return np.pad(emb, (0, dim - emb.size))


def pool(grid, target):
    """Block-mean ``[H, W, F]`` down to ``target``."""
    H, W, F = grid.shape
    h, w = target
    return grid.reshape(h, H // h, w, W // w, F).mean(axis=(1, 3))


def upsample(grid, target):
    """Nearest-neighbour ``[h, w, F]`` up to ``target``."""
    h, w, _ = grid.shape
    H, W = target
    return np.repeat(np.repeat(grid, H // h, axis=0), W // w, axis=1)


def forward(latent, timestep, token_embeddings, weights: DenoiserWeights, masks=None,
            mode=RenormMode.PER_PIXEL, trace=None):
    """Predict noise for ``latent`` of shape ``[C, H, W]``.

    Args:
        masks: ``None`` for plain cross-attention, otherwise a mapping from
            layer resolution to :class:`TokenPixelMask`; every layer
            resolution must be present.
        trace: optional list; the head-averaged attention weights of each
            layer (``[h*w, num_tokens]``) are appended to it in layer order.

    Returns:
        A conditional-kind :class:`NoiseField`.
    """
    spec = weights.spec
    x = np.asarray(latent, dtype=np.float64)
    C, (H, W) = spec.latent_channels, spec.base_resolution
    if x.shape != (C, H, W):
        raise DimensionError(f"latent {x.shape}, expected {(C, H, W)}")
    tok = np.asarray(token_embeddings, dtype=np.float64)
    if tok.ndim != 2 or tok.shape[1] != spec.token_dim:
        raise DimensionError(f"token embeddings {tok.shape}, expected [N, {spec.token_dim}]")
    if masks is not None:
        check_masks(masks, spec, tok.shape[0])
    mode = RenormMode(mode)

    h = x.reshape(C, H * W).T @ weights.input_proj + timestep_embedding(float(timestep), spec.hidden_dim)
    h = h.reshape(H, W, spec.hidden_dim)
    for ls, lw in zip(spec.layer_specs, weights.layers):
        pooled = pool(h, ls.resolution).reshape(-1, spec.hidden_dim)
        mask = None if masks is None else masks[ls.resolution]
        attn, alpha = multi_head_attention(pooled @ lw.query, tok @ lw.key, tok @ lw.value,
                                           ls.heads, mask, mode)
        delta = (attn @ lw.out).reshape(*ls.resolution, spec.hidden_dim)
        h = h + upsample(delta, (H, W))
        if trace is not None:
            trace.append(alpha)
    eps = h.reshape(H * W, spec.hidden_dim) @ weights.noise_head
    return NoiseField(eps.T.reshape(C, H, W), NoiseKind.CONDITIONAL)


def check_masks(masks, spec: DenoiserSpec, num_tokens):
    for res in spec.resolutions:
        m = masks.get(res)
        if m is None:
            raise ConfigError(f"no token-pixel mask for layer resolution {res}")
        if not isinstance(m, TokenPixelMask) or m.resolution != res:
            raise ConfigError(f"mask registered for {res} has resolution {getattr(m, 'resolution', None)}")
        if m.num_tokens != num_tokens:
            raise ConfigError(f"mask at {res} covers {m.num_tokens} tokens, prompt has {num_tokens}")


# -- sampler ---------------------------------------------------------------------


def scaled_linear_alphas_cumprod(num_train_timesteps=1000, beta_start=0.00085, beta_end=0.012):
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), num_train_timesteps) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class SamplerSchedule:
    """Descending timesteps with the cumulative signal level at each step and after it."""

    num_steps: int
    timesteps: tuple[int, ...]
    alphas: tuple[float, ...]
    alphas_prev: tuple[float, ...]

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("need at least one sampler step")
        if not (len(self.timesteps) == len(self.alphas) == len(self.alphas_prev) == self.num_steps):
            raise ConfigError("schedule arrays must have num_steps entries")
        if any(b >= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ConfigError("timesteps must be strictly descending")
        if not all(0 < a <= ap <= 1 for a, ap in zip(self.alphas, self.alphas_prev)):
            raise ConfigError("signal levels must increase towards 1 along the schedule")

    @classmethod
    def ddim(cls, num_steps, strength=1.0, num_train_timesteps=1000):
        """Evenly spaced DDIM schedule over the first ``strength`` of the training range.

        The last step lands on a clean signal (level 1).
        """
        if num_steps < 1:
            raise ConfigError("need at least one sampler step")
        if not 0 < strength <= 1:
            raise ConfigError(f"strength must lie in (0, 1], got {strength}")
        span = int(round(num_train_timesteps * strength))
        if span < num_steps:
            raise ConfigError(f"{num_steps} steps do not fit into {span} timesteps")
        abar = scaled_linear_alphas_cumprod(num_train_timesteps)
        ts = [((k + 1) * span) // num_steps - 1 for k in range(num_steps)][::-1]
        alphas = [float(abar[t]) for t in ts]
        prev = [float(abar[t]) for t in ts[1:]] + [1.0]
        return cls(num_steps, tuple(ts), tuple(alphas), tuple(prev))

    def step(self, k, latent, eps):
        """Deterministic update from step ``k``'s timestep to the next one."""
        a, ap = self.alphas[k], self.alphas_prev[k]
        x0 = (latent - math.sqrt(1.0 - a) * eps) / math.sqrt(a)
        return math.sqrt(ap) * x0 + math.sqrt(1.0 - ap) * eps


@dataclass
class StepRecord:
    step: int
    timestep: int
    latent: np.ndarray
    eps_cond: np.ndarray | None
    eps_uncond: np.ndarray
    eps_blended: np.ndarray
    attention: list | None = None


@dataclass
class Diagnostics:
    steps: list = field(default_factory=list)
    resolutions: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    """One sampler run. ``srca_enabled`` and ``guidance.stcfg_enabled`` toggle independently."""

    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    schedule: SamplerSchedule = field(default_factory=lambda: SamplerSchedule.ddim(8))
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    srca_enabled: bool = True
    renorm: RenormMode = RenormMode.PER_PIXEL
    grounding: GroundingResult | None = None
    seed: int = 0
    unconditional_only: bool = False

    def validate(self, num_tokens):
        spec = self.denoiser
        if self.unconditional_only:
            return
        if self.srca_enabled:
            if self.grounding is None:
                raise ConfigError("SRCA enabled but no grounding masks supplied")
            check_masks(self.grounding.token_pixel_masks, spec, num_tokens)
        if self.guidance.stcfg_enabled:
            if self.grounding is None or spec.base_resolution not in self.grounding.ungrounded:
                raise ConfigError(f"targeted guidance needs an ungrounded mask at {spec.base_resolution}")


def initial_latent(config: RunConfig, source=None):
    """Seeded starting latent, optionally noised from ``source`` to the first timestep."""
    C, (H, W) = config.denoiser.latent_channels, config.denoiser.base_resolution
    noise = SeededStream(config.seed).normal(C * H * W).reshape(C, H, W)
    if source is None:
        return noise
    a = config.schedule.alphas[0]
    return math.sqrt(a) * np.asarray(source, dtype=np.float64) + math.sqrt(1.0 - a) * noise


def reverse_sample(config: RunConfig, cond_embeddings, uncond_embeddings, weights=None,
                   source=None, record_attention=False):
    """Run the full reverse loop.

    Each step evaluates the unconditional pass without masks and, unless the
    run is unconditional-only, the conditional pass with token-pixel masks
    when SRCA is on. The two are blended by targeted or plain guidance.

    Returns:
        ``(final_latent, Diagnostics)``.

    Raises:
        NumericDivergenceError: a step produced a non-finite latent.
    """
    weights = weights if weights is not None else init_weights(config.denoiser)
    cond = np.asarray(cond_embeddings, dtype=np.float64)
    config.validate(cond.shape[0])
    grounding = config.grounding
    masks = grounding.token_pixel_masks if (config.srca_enabled and not config.unconditional_only) else None
    ungrounded = None
    if grounding is not None and config.guidance.stcfg_enabled:
        ungrounded = grounding.ungrounded[config.denoiser.base_resolution]

    sched = config.schedule
    x = initial_latent(config, source)
    diag = Diagnostics(resolutions=tuple(l.resolution for l in config.denoiser.layer_specs))
    for k, t in enumerate(sched.timesteps):
        trace = [] if record_attention else None
        try:
            eps_u = forward(x, t, uncond_embeddings, weights)
            eps_u = NoiseField(eps_u.values, NoiseKind.UNCONDITIONAL)
            if config.unconditional_only:
                eps_c, eps = None, eps_u
            else:
                eps_c = forward(x, t, cond, weights, masks, config.renorm, trace)
                eps = blend(eps_u, eps_c, config.guidance, ungrounded)
        except NumericError as exc:
            raise NumericDivergenceError(k, f"non-finite noise prediction at sampler step {k}") from exc
        diag.steps.append(StepRecord(k, t, x, None if eps_c is None else eps_c.values,
                                     eps_u.values, eps.values, trace))
        x = sched.step(k, x, eps.values)
        if not np.all(np.isfinite(x)):
            raise NumericDivergenceError(k)
    return x, diag


# -- decoding and diagnostics -------------------------------------------------------


def decode(latent, weights: DenoiserWeights, upscale=4, clamp=True):
    """Per-pixel linear map to RGB, nearest upsampling by ``upscale``, clamp to ``[0, 1]``."""
    z = np.asarray(latent, dtype=np.float64)
    C, H, W = z.shape
    rgb = (z.reshape(C, H * W).T @ weights.decoder + weights.decoder_bias).T.reshape(3, H, W)
    rgb = np.repeat(np.repeat(rgb, upscale, axis=1), upscale, axis=2)
    return np.clip(rgb, 0.0, 1.0) if clamp else rgb


def encode(image, weights: DenoiserWeights):
    """Map a unit-range ``[3, H, W]`` image at latent resolution into latent space."""
    img = np.asarray(image, dtype=np.float64)
    centred = (img - 0.5) * 2.0
    return (centred.reshape(3, -1).T @ weights.encoder).T.reshape(-1, *img.shape[1:])


def _span_columns(layout: TokenLayout, selector):
    if isinstance(selector, str):
        if selector not in layout.tag_spans:
            raise SelectorError(f"unknown tag {selector!r}")
        a, b = layout.tag_spans[selector]
        return list(range(a, b + 1))
    cols = [int(j) for j in (range(selector[0], selector[1] + 1) if isinstance(selector, tuple) else selector)]
    if not cols or any(not 0 <= j < layout.num_tokens for j in cols):
        raise SelectorError(f"token selector {selector!r} outside the prompt")
    return cols


def export_attention_maps(diagnostics: Diagnostics, layout: TokenLayout, selector, step=0, normalize=True):
    """Per-layer attention mass of the selected tokens.

    Args:
        selector: tag name, inclusive ``(first, last)`` token tuple, or a
            list of token indices.
        step: sampler step index, or ``"mean"`` to average over all steps.
        normalize: divide each map by its maximum for display.

    Returns:
        List of ``[h, w]`` grids, one per cross-attention layer.
    """
    cols = _span_columns(layout, selector)
    if not diagnostics.steps or diagnostics.steps[0].attention is None:
        raise SelectorError("run was not recorded with attention maps")
    if step == "mean":
        records = diagnostics.steps
    elif isinstance(step, int) and -len(diagnostics.steps) <= step < len(diagnostics.steps):
        records = [diagnostics.steps[step]]
    else:
        raise SelectorError(f"unknown step selector {step!r}")
    maps = []
    for li, res in enumerate(diagnostics.resolutions):
        mass = np.mean([r.attention[li][:, cols].sum(axis=1) for r in records], axis=0)
        grid = mass.reshape(res)
        if normalize:
            peak = grid.max()
            grid = grid / peak if peak > 0 else np.zeros_like(grid)
        maps.append(grid)
    return maps
