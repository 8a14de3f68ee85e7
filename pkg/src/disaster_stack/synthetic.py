"""Seeded procedural corpora for desk-scale runs and tests.

Each class has its own pattern family: horizontal waves (earthquake), vertical
waves (flood), concentric rings (volcano) and a checkerboard (wildfire). The
frequency, phase, centre, colours and noise level vary from image to image, so
colour alone does not give the class away.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .images import encode_png
from .labels import ClassLabel


def pattern_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) uint8 image of the given class."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cycles = rng.uniform(2.5, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    if label == ClassLabel.EARTHQUAKE:
        field = np.sin(2 * np.pi * cycles * yy + phase)
    elif label == ClassLabel.FLOOD:
        field = np.sin(2 * np.pi * cycles * xx + phase)
    elif label == ClassLabel.VOLCANO:
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = np.hypot(yy - cy, xx - cx)
        field = np.sin(2 * np.pi * cycles * 1.5 * r + phase)
    elif label == ClassLabel.WILDFIRE:
        cells = rng.uniform(3.0, 7.0)
        oy, ox = rng.uniform(0, 1, size=2)
        field = np.sign(np.sin(np.pi * cells * (yy + oy)) * np.sin(np.pi * cells * (xx + ox)))
    else:
        raise ValueError(f"unknown class code {label}")
    t = (field + 1.0) / 2.0
    low, high = rng.uniform(0, 255, size=(2, 3))
    rgb = low + t[..., None] * (high - low)
    rgb += rng.normal(0, 12.0, size=rgb.shape)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def pattern_corpus(per_class: int, size: int = 64, seed: int = 0):
    """``(images uint8 (N, size, size, 3), labels int64 (N,))``, class-major order."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in ClassLabel:
        for _ in range(per_class):
            images.append(pattern_image(int(label), size, rng))
            labels.append(int(label))
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def write_corpus(root, per_class: int, size: int = 64, seed: int = 0) -> Path:
    """Write a pattern corpus as PNG files under ``root/<class>/``."""
    root = Path(root)
    images, labels = pattern_corpus(per_class, size, seed)
    counters = {label: 0 for label in ClassLabel}
    for image, code in zip(images, labels):
        label = ClassLabel(int(code))
        folder = root / label.folder
        folder.mkdir(parents=True, exist_ok=True)
        (folder / f"{label.folder}_{counters[label]:05d}.png").write_bytes(encode_png(image))
        counters[label] += 1
    return root
