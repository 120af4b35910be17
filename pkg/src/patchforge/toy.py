"""Synthetic faces for desk-scale runs.

Each identity is a seeded smooth texture inside an ellipse on a flat
background, with darker eye and mouth blobs. Variants of one identity add
small pixel noise, which is enough for a linear oracle to verify them as
the same person.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch

from .imaging import FaceImage, save_image
from .oracle import LinearOracle
from .render import PatchRegion

BACKGROUND = 0.15
REGION_WEIGHT = 3.0


def make_face(identity: int, size: int = 16, variant: int = 0, noise: float = 0.02) -> FaceImage:
    rng = np.random.default_rng([identity, 7919])
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    inside = (xx / 0.8) ** 2 + (yy / 0.95) ** 2 <= 1.0

    skin = rng.uniform(0.3, 0.7, size=3)
    tex = np.zeros((3, size, size))
    for _ in range(6):
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.uniform(0.08, 0.22, size=3)
        tex += amp[:, None, None] * np.cos(np.pi * (fx * xx + fy * yy)[None] + phase[:, None, None])
    face = skin[:, None, None] + tex

    eye_y = rng.uniform(-0.45, -0.25)
    for ex in (-0.38, 0.38):
        blob = np.exp(-(((xx - ex) / 0.15) ** 2 + ((yy - eye_y) / 0.1) ** 2))
        face -= 0.3 * blob[None]
    mouth = np.exp(-((xx / 0.35) ** 2 + ((yy - rng.uniform(0.4, 0.6)) / 0.08) ** 2))
    face -= 0.25 * mouth[None]

    if variant:
        vrng = np.random.default_rng([identity, variant, 104729])
        face += vrng.normal(0.0, noise, size=face.shape)
    img = np.where(inside[None], np.clip(face, 0.02, 0.98), BACKGROUND)
    return FaceImage(torch.from_numpy(img), identity=f"id{identity:03d}")


def toy_pairs(n: int = 20, seed: int = 0, size: int = 16) -> list:
    """``n`` (source, target) pairs of distinct synthetic identities."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        a, b = rng.choice(10_000, size=2, replace=False)
        pairs.append((make_face(int(a), size), make_face(int(b), size)))
    return pairs


def write_dataset(root: Union[str, Path], identities: int = 6, images: int = 2, size: int = 16,
                  first: int = 0) -> Path:
    """Write ``<root>/<identity>/<k>.png`` for a synthetic dataset."""
    root = Path(root)
    for i in range(first, first + identities):
        for k in range(images):
            face = make_face(i, size, variant=k)
            save_image(face, root / face.identity / f"{k}.png")
    return root


def toy_oracle(seed: int = 0, size: int = 16, dim: int = 32, region_weight: float = REGION_WEIGHT,
               region: PatchRegion = None) -> LinearOracle:
    """Linear oracle that weights the patch region ``region_weight`` times the rest of the face.

    A uniformly weighted oracle barely looks at a lower-face mask; real
    recognisers attacked with masks evidently do.
    """
    region = region or PatchRegion.lower_face(size, size)
    weights = 1.0 + (region_weight - 1.0) * region.mask.to(torch.float64)
    return LinearOracle.from_seed((3, size, size), dim, seed, pixel_weights=weights,
                                  model_id=f"toy-linear-{seed}")
