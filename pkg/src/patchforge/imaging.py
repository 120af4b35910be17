"""Face image container and PNG helpers."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

from .errors import InputError

DTYPE = torch.float64


@dataclass
class FaceImage:
    """An RGB image stored channel-first as float64 in [0, 1]."""

    pixels: torch.Tensor
    identity: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        px = torch.as_tensor(self.pixels, dtype=DTYPE)
        if px.ndim != 3 or px.shape[0] != 3:
            raise InputError(f"face image must be [3, H, W], got {tuple(px.shape)}")
        if not torch.isfinite(px).all():
            raise InputError("face image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InputError("face image values must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)

    def detached(self) -> "FaceImage":
        return FaceImage(self.pixels.detach().clone(), self.identity)


def to_uint8(pixels: torch.Tensor) -> np.ndarray:
    arr = pixels.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def encode_png(image: FaceImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image.pixels), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes, identity: Optional[str] = None) -> FaceImage:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return FaceImage(torch.from_numpy(arr.transpose(2, 0, 1).copy()), identity)


def load_image(path: Union[str, Path], identity: Optional[str] = None) -> FaceImage:
    return decode_png(Path(path).read_bytes(), identity)


def save_image(image: FaceImage, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(image))
    return path


def quantize(image: FaceImage) -> FaceImage:
    """Round-trip through 8 bits, i.e. what a PNG reader would see."""
    return FaceImage(torch.from_numpy(to_uint8(image.pixels).transpose(2, 0, 1) / 255.0), image.identity)
