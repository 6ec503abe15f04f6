"""8-bit image files <-> unit-range float arrays.

Conversion: ``unit = u8 / 255`` on read and ``u8 = round(clip(unit, 0, 1) * 255)``
on write, so 8-bit data survives a read/write round trip unchanged.
"""

import numpy as np
from PIL import Image

from .errors import DimensionError


def to_unit(u8):
    return np.asarray(u8, dtype=np.float64) / 255.0


def to_u8(unit):
    return np.round(np.clip(np.asarray(unit, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path):
    """Read a grayscale or RGB file as a ``[C, H, W]`` unit-range array (C is 1 or 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    arr = arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    return to_unit(arr)


def write_image(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DimensionError(f"expected [1|3, H, W] image, got shape {img.shape}")
    u8 = to_u8(img)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(u8, 0, -1), mode="RGB").save(path)


def resize_box(img, size):
    """Area-average resize of a ``[C, H, W]`` unit image to ``size = (h, w)``."""
    h, w = size
    chans = []
    for c in np.asarray(img, dtype=np.float64):
        im = Image.fromarray(c.astype(np.float32), mode="F")
        chans.append(np.asarray(im.resize((w, h), Image.Resampling.BOX), dtype=np.float64))
    return np.stack(chans)
