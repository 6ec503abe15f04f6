"""Synthetic demo scene: HR/LR images, grounded tags and a manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import DEFAULT_THRESHOLD
from .imageio import resize_box, write_image
from .masks import TagMaskPair, layout_for_tags, save_tag_file

TAGS = (
    # tag, confidence
    ("sky", 0.62),
    ("building", 0.41),
    ("water", 0.30),
    ("boat", 0.18),
)


def scene_masks(size=8):
    """Boolean region masks at ``size x size`` for each demo tag."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    sky = yy < 0.25
    building = (yy >= 0.25) & (yy < 0.625) & (xx < 0.5)
    water = yy >= 0.75
    boat = (yy >= 0.75) & (xx >= 0.5) & (xx < 0.75)
    return {"sky": sky, "building": building, "water": water, "boat": boat}


def scene_image(size=32):
    """Smooth RGB test card loosely following the tag regions."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    r = 0.3 + 0.4 * xx + 0.1 * np.sin(6 * yy)
    g = 0.4 + 0.3 * np.cos(4 * xx) * (yy > 0.25)
    b = 0.8 - 0.5 * yy + 0.1 * np.sin(9 * xx) * (yy > 0.75)
    return np.clip(np.stack([r, g, b]), 0.0, 1.0)


def write_demo(directory, latent_size=8, hr_size=32, lr_size=16, seed=0):
    """Write ``hr.png``, ``lr.png``, ``tags.json`` (+ masks) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    hr = scene_image(hr_size)
    rng = np.random.Generator(np.random.PCG64(seed))
    lr = np.clip(resize_box(hr, (lr_size, lr_size)) + rng.normal(0, 0.03, (3, lr_size, lr_size)), 0, 1)
    write_image(d / "hr.png", hr)
    write_image(d / "lr.png", lr)

    names = [t for t, _ in TAGS]
    prompt, layout = layout_for_tags(names, max_length=12)
    masks = scene_masks(latent_size)
    pairs = [TagMaskPair(t, layout.tag_spans[t], masks[t], c) for t, c in TAGS]
    save_tag_file(d / "tags.json", prompt, pairs, max_length=12)

    manifest = {
        "input_image": "lr.png",
        "tag_file": "tags.json",
        "reference_image": "hr.png",
        "output_dir": "out",
        "config": {"threshold": DEFAULT_THRESHOLD},
        "metrics": ["psnr", "ssim"],
        "sweep": {"thresholds": [0.15, 0.25, 0.35, 0.45, 0.55]},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d / "manifest.json"
