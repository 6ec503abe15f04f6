"""Grounding masks: from tag/mask/confidence records to attention masks.

Pixel grids are boolean ``[H, W]`` arrays. Token-pixel matrices flatten
pixels in row-major order, matching :class:`regionguide.attention.TokenPixelMask`.
"""

from __future__ import annotations

import enum
import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import TokenPixelMask
from .errors import ConfigError, DimensionError, PreconditionError, ResampleError

SOS, EOS, PAD = "<sos>", "<eos>", "<pad>"
SPECIAL_IDS = {SOS: 0, EOS: 1, PAD: 2}
VOCAB_SIZE = 512

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class ResamplePolicy(str, enum.Enum):
    ANY_COVERAGE = "any_coverage"
    MAJORITY = "majority"
    NEAREST = "nearest"


def _as_grid(mask, name="mask"):
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D grid, got shape {m.shape}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise PreconditionError(f"{name} must be binary")
        m = m.astype(bool)
    return m


# -- tokens -------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    id: int
    text: str
    start: int  # offset into the prompt text; -1 for special tokens
    end: int


def token_id(text):
    """Toy vocabulary lookup: special tokens are fixed, words hash into the rest."""
    if text in SPECIAL_IDS:
        return SPECIAL_IDS[text]
    return 3 + zlib.crc32(text.lower().encode("utf-8")) % (VOCAB_SIZE - 3)


def is_global_text(text):
    return text in SPECIAL_IDS or not any(ch.isalnum() for ch in text)


@dataclass(frozen=True)
class TokenLayout:
    """Prompt tokens, which of them are global, and which tag owns which span.

    Spans are inclusive ``(first, last)`` index pairs.
    """

    tokens: tuple[Token, ...]
    global_token_indices: frozenset[int]
    tag_spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.tokens)
        object.__setattr__(self, "global_token_indices", frozenset(self.global_token_indices))
        spans = {str(t): (int(a), int(b)) for t, (a, b) in dict(self.tag_spans).items()}
        object.__setattr__(self, "tag_spans", spans)
        if any(not 0 <= i < n for i in self.global_token_indices):
            raise ConfigError("global token index out of range")
        claimed = {}
        for tag, (a, b) in spans.items():
            if not 0 <= a <= b < n:
                raise ConfigError(f"span {a}..{b} of tag {tag!r} outside prompt of {n} tokens")
            for j in range(a, b + 1):
                if j in self.global_token_indices:
                    raise ConfigError(f"tag {tag!r} span covers global token {j}")
                if j in claimed:
                    raise ConfigError(f"token {j} claimed by both {claimed[j]!r} and {tag!r}")
                claimed[j] = tag

    @property
    def num_tokens(self):
        return len(self.tokens)

    @property
    def token_ids(self):
        return np.array([t.id for t in self.tokens], dtype=np.int64)

    @property
    def unassigned(self):
        covered = set(self.global_token_indices)
        for a, b in self.tag_spans.values():
            covered.update(range(a, b + 1))
        return tuple(j for j in range(self.num_tokens) if j not in covered)

    def with_spans(self, tag_spans):
        return TokenLayout(self.tokens, self.global_token_indices, dict(tag_spans))


def tokenize(prompt, max_length=None, extra_global=()):
    """Whitespace/punctuation tokenizer with SOS/EOS framing and padding.

    Tokens made only of non-alphanumeric characters count as global, as do
    the special tokens and any index listed in ``extra_global``.
    """
    words = [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(prompt)]
    tokens = [Token(SPECIAL_IDS[SOS], SOS, -1, -1)]
    tokens += [Token(token_id(w), w, a, b) for w, a, b in words]
    tokens.append(Token(SPECIAL_IDS[EOS], EOS, -1, -1))
    if max_length is not None:
        if len(tokens) > max_length:
            raise ConfigError(f"prompt needs {len(tokens)} tokens, max_length is {max_length}")
        tokens += [Token(SPECIAL_IDS[PAD], PAD, -1, -1)] * (max_length - len(tokens))
    glob = {j for j, t in enumerate(tokens) if is_global_text(t.text)} | set(extra_global)
    return TokenLayout(tuple(tokens), frozenset(glob))


def layout_for_tags(tags, max_length=None, suffix=""):
    """Build the comma-separated prompt ``"tag1, tag2, ..."`` and locate each tag's span."""
    prompt = ", ".join(tags) + suffix
    layout = tokenize(prompt, max_length)
    spans, cursor = {}, 0
    for tag in tags:
        start = prompt.index(tag, cursor)
        end = start + len(tag)
        cursor = end
        idx = [j for j, t in enumerate(layout.tokens) if t.start >= start and t.end <= end and t.start >= 0]
        spans[tag] = (idx[0], idx[-1])
    return prompt, layout.with_spans(spans)


# -- tag/mask pairs -----------------------------------------------------------


@dataclass(frozen=True)
class TagMaskPair:
    tag: str
    token_span: tuple[int, int]
    mask: np.ndarray
    confidence: float

    def __post_init__(self):
        a, b = (int(x) for x in self.token_span)
        if a < 0 or b < a:
            raise PreconditionError(f"token span {a}..{b} of {self.tag!r} is empty or negative")
        conf = float(self.confidence)
        if not 0.0 <= conf <= 1.0:
            raise PreconditionError(f"confidence {conf} of {self.tag!r} outside [0, 1]")
        m = _as_grid(self.mask, f"mask of {self.tag!r}").copy()
        m.setflags(write=False)
        object.__setattr__(self, "token_span", (a, b))
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "mask", m)

    @property
    def resolution(self):
        return self.mask.shape

    def resampled(self, target, policy=ResamplePolicy.ANY_COVERAGE):
        return TagMaskPair(self.tag, self.token_span, resample_mask(self.mask, target, policy), self.confidence)


def filter_by_confidence(pairs, threshold):
    """Keep pairs with ``confidence >= threshold`` in their original order."""
    if not 0.0 <= threshold <= 1.0:
        raise PreconditionError(f"threshold {threshold} outside [0, 1]")
    return [p for p in pairs if p.confidence >= threshold]


def union_grounded(pairs, resolution):
    h, w = resolution
    out = np.zeros((h, w), dtype=bool)
    for p in pairs:
        if p.mask.shape != (h, w):
            raise DimensionError(f"mask of {p.tag!r} is {p.mask.shape}, expected {(h, w)}")
        out |= p.mask
    return out


@dataclass(frozen=True)
class UngroundedMask:
    """1 marks pixels covered by no retained grounded mask."""

    mask: np.ndarray

    def __post_init__(self):
        m = _as_grid(self.mask, "ungrounded mask").copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def resolution(self):
        return self.mask.shape

    @property
    def grounded(self):
        return ~self.mask


def build_ungrounded_mask(union) -> UngroundedMask:
    return UngroundedMask(~_as_grid(union, "union"))


def ungrounded_at(pairs, resolution, policy=ResamplePolicy.ANY_COVERAGE) -> UngroundedMask:
    """Complement of the union of grounded masks, each resampled to ``resolution`` first."""
    resampled = [p.resampled(resolution, policy) for p in pairs]
    return build_ungrounded_mask(union_grounded(resampled, resolution))


def resample_mask(mask, target, policy=ResamplePolicy.ANY_COVERAGE):
    """Resample a binary grid to ``target = (h, w)``.

    ``any_coverage`` and ``majority`` pool integer blocks and need the source
    dims to be multiples of the target dims. ``majority`` rounds ties up.
    ``nearest`` samples the source cell under each target cell's centre and
    works for any size, including upsampling.
    """
    policy = ResamplePolicy(policy)
    m = _as_grid(mask)
    h, w = (int(t) for t in target)
    if h < 1 or w < 1:
        raise ResampleError(f"target {target} must be at least 1x1")
    H, W = m.shape
    if (H, W) == (h, w):
        return m.copy()
    if policy is ResamplePolicy.NEAREST:
        rows = ((np.arange(h) * 2 + 1) * H) // (2 * h)
        cols = ((np.arange(w) * 2 + 1) * W) // (2 * w)
        return m[np.ix_(rows, cols)]
    if H % h or W % w:
        raise ResampleError(f"{H}x{W} is not divisible into {h}x{w} blocks")
    blocks = m.reshape(h, H // h, w, W // w)
    if policy is ResamplePolicy.ANY_COVERAGE:
        return blocks.any(axis=(1, 3))
    count = blocks.sum(axis=(1, 3))
    return 2 * count >= (H // h) * (W // w)


def build_token_pixel_mask(pairs, layout: TokenLayout, resolution, policy=ResamplePolicy.ANY_COVERAGE):
    """Token-pixel mask for one attention resolution.

    Global tokens stay visible everywhere. A token inside a retained tag's
    span is visible only inside that tag's (resampled) mask. All other
    tokens, including those of tags dropped by the confidence filter, are
    masked at every pixel.
    """
    h, w = resolution
    n = layout.num_tokens
    cols = np.zeros((h * w, n), dtype=bool)
    for j in layout.global_token_indices:
        cols[:, j] = True
    for p in pairs:
        a, b = p.token_span
        if b >= n:
            raise ConfigError(f"span of {p.tag!r} ends at {b}, prompt has {n} tokens")
        if p.tag in layout.tag_spans and layout.tag_spans[p.tag] != (a, b):
            raise ConfigError(f"span of {p.tag!r} disagrees with layout {layout.tag_spans[p.tag]}")
        if any(j in layout.global_token_indices for j in range(a, b + 1)):
            raise ConfigError(f"span of {p.tag!r} overlaps global tokens")
        region = resample_mask(p.mask, (h, w), policy).reshape(-1)
        cols[:, a:b + 1] |= region[:, None]
    return TokenPixelMask(cols, (h, w))


@dataclass(frozen=True)
class GroundingResult:
    """Everything the sampler needs from grounding, for a set of resolutions."""

    retained: tuple[TagMaskPair, ...]
    layout: TokenLayout
    token_pixel_masks: dict
    ungrounded: dict
    threshold: float
    policy: ResamplePolicy

    def coverage(self, resolution):
        """Fraction of grounded pixels at ``resolution``."""
        return float(self.ungrounded[tuple(resolution)].grounded.mean())


def ground(pairs, layout, resolutions, threshold, policy=ResamplePolicy.ANY_COVERAGE):
    """Filter pairs and build token-pixel and ungrounded masks at every resolution.

    The ungrounded mask is recomputed from the resampled grounded masks at
    each resolution rather than resampled from the base grid, so it is always
    the exact complement of the union there.
    """
    policy = ResamplePolicy(policy)
    kept = filter_by_confidence(pairs, threshold)
    res = sorted({tuple(int(x) for x in r) for r in resolutions}, reverse=True)
    return GroundingResult(
        retained=tuple(kept),
        layout=layout,
        token_pixel_masks={r: build_token_pixel_mask(kept, layout, r, policy) for r in res},
        ungrounded={r: ungrounded_at(kept, r, policy) for r in res},
        threshold=float(threshold),
        policy=policy,
    )


# -- tag file -----------------------------------------------------------------


@dataclass(frozen=True)
class TagFile:
    prompt: str
    max_length: int | None
    pairs: tuple[TagMaskPair, ...]

    def layout(self):
        base = tokenize(self.prompt, self.max_length)
        return base.with_spans({p.tag: p.token_span for p in self.pairs})


def load_mask_image(path):
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr != 0


def save_mask_image(path, mask):
    from PIL import Image

    Image.fromarray(np.where(_as_grid(mask), 255, 0).astype(np.uint8), mode="L").save(path)


def load_tag_file(path) -> TagFile:
    """Read a tag file; mask paths resolve relative to the file's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or "prompt" not in doc or "tags" not in doc:
        raise ConfigError(f"{path}: expected an object with 'prompt' and 'tags'")
    pairs = []
    for i, rec in enumerate(doc["tags"]):
        missing = {"tag", "token_span", "confidence", "mask_path"} - set(rec)
        if missing:
            raise ConfigError(f"{path}: record {i} lacks {sorted(missing)}")
        span = rec["token_span"]
        if not (isinstance(span, list) and len(span) == 2):
            raise ConfigError(f"{path}: record {i} token_span must be [first, last]")
        mask = load_mask_image(path.parent / rec["mask_path"])
        try:
            pairs.append(TagMaskPair(rec["tag"], tuple(span), mask, rec["confidence"]))
        except PreconditionError as exc:
            raise ConfigError(f"{path}: record {i}: {exc}") from exc
    return TagFile(doc["prompt"], doc.get("max_length"), tuple(pairs))


def save_tag_file(path, prompt, pairs, max_length=None, mask_dir="masks"):
    path = Path(path)
    (path.parent / mask_dir).mkdir(parents=True, exist_ok=True)
    records = []
    for k, p in enumerate(pairs):
        rel = f"{mask_dir}/{k:02d}_{re.sub(r'[^A-Za-z0-9]+', '_', p.tag)}.png"
        save_mask_image(path.parent / rel, p.mask)
        records.append({"tag": p.tag, "token_span": list(p.token_span),
                        "confidence": p.confidence, "mask_path": rel})
    doc = {"prompt": prompt, "max_length": max_length, "tags": records}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
