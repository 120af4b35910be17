"""Placing a decoded patch onto a face.

Two modes share one compositing rule (hard replacement inside the region):

* ``planar`` pastes the patch into an image-space rectangle or mask;
* ``uv`` lifts the face into a canonical UV layout through a
  reconstruction provider, applies the patch there and projects back.

All tensor paths are differentiable with respect to the patch pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np
import png
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import CapabilityError, ConfigurationError, DetectionError, InputError, MapIntegrityError
from .imaging import DTYPE, FaceImage

log = logging.getLogger(__name__)

# (x, y) fiducials relative to the face bounding box: eyes, nose tip, mouth corners.
FIDUCIAL_TEMPLATE = np.array(
    [[0.30, 0.35], [0.70, 0.35], [0.50, 0.55], [0.35, 0.75], [0.65, 0.75]]
)


@dataclass
class UVMap:
    """Per-texel (u, v) sampling coordinates in [0, 1]^2 plus a validity mask.

    ``coords[0]`` is the horizontal coordinate, ``coords[1]`` the vertical
    one, both normalised so that 0 and 1 hit the first and last pixel
    centres of the sampled image.
    """

    coords: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self):
        self.coords = torch.as_tensor(self.coords, dtype=DTYPE)
        self.valid = torch.as_tensor(self.valid, dtype=torch.bool)
        if self.coords.ndim != 3 or self.coords.shape[0] != 2:
            raise ConfigurationError("UV coords must be [2, H, W]")
        if self.valid.shape != self.coords.shape[1:]:
            raise ConfigurationError("UV validity mask must match the coordinate grid")

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.valid.shape)

    @classmethod
    def identity(cls, height: int, width: int) -> "UVMap":
        v, u = torch.meshgrid(
            torch.linspace(0.0, 1.0, height, dtype=DTYPE),
            torch.linspace(0.0, 1.0, width, dtype=DTYPE),
            indexing="ij",
        )
        return cls(torch.stack([u, v]), torch.ones(height, width, dtype=torch.bool))

    def check(self) -> None:
        c = self.coords[:, self.valid]
        if c.numel() and (not torch.isfinite(c).all() or c.min() < 0.0 or c.max() > 1.0):
            raise MapIntegrityError("UV coordinate outside [0, 1]^2 at a valid texel")


@dataclass
class PatchRegion:
    mask: torch.Tensor
    space: str = "image"

    def __post_init__(self):
        m = torch.as_tensor(self.mask)
        if m.ndim != 2:
            raise ConfigurationError("region mask must be 2-D")
        if m.dtype != torch.bool:
            if not torch.all((m == 0) | (m == 1)):
                raise ConfigurationError("region mask values must be 0 or 1")
            m = m.to(torch.bool)
        if self.space not in ("image", "uv"):
            raise ConfigurationError(f"region space must be 'image' or 'uv', got {self.space!r}")
        self.mask = m

    @property
    def empty(self) -> bool:
        return not bool(self.mask.any())

    def bbox(self) -> tuple[int, int, int, int]:
        """(top, bottom, left, right), bottom/right exclusive."""
        rows = torch.nonzero(self.mask.any(dim=1)).flatten()
        cols = torch.nonzero(self.mask.any(dim=0)).flatten()
        return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1

    @classmethod
    def rectangle(cls, height: int, width: int, top: int, bottom: int, left: int, right: int,
                  space: str = "image") -> "PatchRegion":
        m = torch.zeros(height, width, dtype=torch.bool)
        m[top:bottom, left:right] = True
        return cls(m, space)

    @classmethod
    def lower_face(cls, height: int, width: int, space: str = "image") -> "PatchRegion":
        """Mask-shaped rectangle over the lower 40% of the face."""
        top = int(round(0.55 * height))
        bottom = min(height, top + int(round(0.40 * height)))
        return cls.rectangle(height, width, top, bottom, int(round(0.15 * width)),
                             int(round(0.85 * width)), space)

    @classmethod
    def nothing(cls, height: int, width: int, space: str = "image") -> "PatchRegion":
        return cls(torch.zeros(height, width, dtype=torch.bool), space)


# -- landmarks -----------------------------------------------------------------


class LandmarkDetector(Protocol):
    def __call__(self, image: FaceImage) -> np.ndarray: ...


class ForegroundLandmarkDetector:
    """Fiducials from the bounding box of pixels that differ from the background.

    The background colour is the top-left pixel unless given. Good enough
    for synthetic faces on a flat canvas, which is what the fixtures use.
    """

    def __init__(self, background=None, tol: float = 0.02, template: np.ndarray = FIDUCIAL_TEMPLATE):
        self.background = None if background is None else torch.as_tensor(background, dtype=DTYPE)
        self.tol = tol
        self.template = np.asarray(template, dtype=np.float64)

    def __call__(self, image: FaceImage) -> np.ndarray:
        px = image.pixels
        bg = px[:, 0, 0] if self.background is None else self.background
        fg = (px - bg[:, None, None]).abs().amax(dim=0) > self.tol
        if not fg.any():
            raise DetectionError("no face found")
        rows = torch.nonzero(fg.any(dim=1)).flatten()
        cols = torch.nonzero(fg.any(dim=0)).flatten()
        top, bottom = float(rows[0]), float(rows[-1])
        left, right = float(cols[0]), float(cols[-1])
        xy = self.template * np.array([right - left, bottom - top]) + np.array([left, top])
        return xy


def detect_landmarks(image: FaceImage, detector: Optional[LandmarkDetector] = None) -> np.ndarray:
    """Ordered (x, y) fiducials in pixel coordinates."""
    pts = np.asarray((detector or ForegroundLandmarkDetector())(image), dtype=np.float64)
    _, h, w = image.shape
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DetectionError("detector returned malformed landmarks")
    if (pts < 0).any() or (pts[:, 0] > w - 1).any() or (pts[:, 1] > h - 1).any():
        raise DetectionError("landmarks fall outside the image")
    return pts


# -- UV space ------------------------------------------------------------------


def _sample(pixels: torch.Tensor, coords: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    grid = (coords * 2.0 - 1.0).permute(1, 2, 0)[None].to(pixels.dtype)
    return F.grid_sample(pixels[None], grid, mode=mode, padding_mode="border", align_corners=True)[0]


def face_to_uv(image, uv: UVMap) -> torch.Tensor:
    """Resample face pixels into UV space; invalid texels are zero."""
    uv.check()
    pixels = image.pixels if isinstance(image, FaceImage) else image
    out = _sample(pixels, uv.coords)
    return torch.where(uv.valid[None], out, torch.zeros((), dtype=out.dtype))


def _fit_patch(patch: torch.Tensor, region: PatchRegion) -> torch.Tensor:
    """Patch expressed on the region's full grid."""
    h, w = region.mask.shape
    if tuple(patch.shape[1:]) == (h, w):
        return patch
    top, bottom, left, right = region.bbox()
    resized = F.interpolate(patch[None], size=(bottom - top, right - left), mode="bilinear",
                            align_corners=False)[0]
    return F.pad(resized, (left, w - right, top, h - bottom))


def apply_patch_in_uv(uv_face: torch.Tensor, patch_image, region: PatchRegion) -> torch.Tensor:
    """Hard-replace the region texels with the patch.

    ``patch_image`` is either full-size (cropped to the region) or any
    size, in which case it is resized onto the region's bounding box.
    """
    if tuple(region.mask.shape) != tuple(uv_face.shape[1:]):
        raise ConfigurationError("region and UV image sizes differ")
    if region.empty:
        log.info("empty patch region; image left unchanged")
        return uv_face
    patch = patch_image.pixels if isinstance(patch_image, FaceImage) else patch_image
    return torch.where(region.mask[None], _fit_patch(patch.to(uv_face.dtype), region), uv_face)


# -- reconstruction --------------------------------------------------------------


@dataclass
class FaceGeometry:
    texel_to_image: UVMap
    pixel_to_texel: UVMap


class ReconstructionProvider(Protocol):
    def __call__(self, image: FaceImage, landmarks: np.ndarray) -> FaceGeometry: ...


class AffineReconstruction:
    """Planar stand-in for a 3D face reconstruction model.

    Fits an affine map from the canonical fiducials in UV space to the
    detected landmarks. Reentrant: it keeps no per-call state.
    """

    def __init__(self, uv_size: tuple[int, int], canonical: np.ndarray = FIDUCIAL_TEMPLATE):
        self.uv_size = uv_size
        self.canonical = np.asarray(canonical, dtype=np.float64)

    def __call__(self, image: FaceImage, landmarks: np.ndarray) -> FaceGeometry:
        _, h, w = image.shape
        target = np.asarray(landmarks, dtype=np.float64) / np.array([w - 1, h - 1])
        design = np.hstack([self.canonical, np.ones((len(self.canonical), 1))])
        fwd, *_ = np.linalg.lstsq(design, target, rcond=None)  # uv -> image, shape (3, 2)
        lin, off = fwd[:2].T, fwd[2]
        if abs(np.linalg.det(lin)) < 1e-12:
            raise DetectionError("landmarks are degenerate")
        inv = np.linalg.inv(lin)

        uh, uw = self.uv_size
        uvgrid = UVMap.identity(uh, uw).coords.numpy().reshape(2, -1)
        to_img = (lin @ uvgrid + off[:, None]).reshape(2, uh, uw)
        imgrid = UVMap.identity(h, w).coords.numpy().reshape(2, -1)
        to_uv = (inv @ (imgrid - off[:, None])).reshape(2, h, w)

        def wrap(c):
            c = torch.as_tensor(c, dtype=DTYPE)
            ok = ((c >= -1e-9) & (c <= 1.0 + 1e-9)).all(dim=0)
            return UVMap(c.clamp(0.0, 1.0), ok)

        return FaceGeometry(wrap(to_img), wrap(to_uv))


class IdentityReconstruction:
    """Geometry where UV space coincides with the image grid."""

    def __call__(self, image: FaceImage, landmarks: np.ndarray) -> FaceGeometry:
        _, h, w = image.shape
        ident = UVMap.identity(h, w)
        return FaceGeometry(ident, ident)


# -- rendering -------------------------------------------------------------------


def _render_planar(face: torch.Tensor, patch: torch.Tensor, region: PatchRegion) -> torch.Tensor:
    if tuple(region.mask.shape) != tuple(face.shape[1:]):
        raise ConfigurationError("planar region must match the face resolution")
    if region.empty:
        return face
    return torch.where(region.mask[None], _fit_patch(patch.to(face.dtype), region), face)


def _render_uv(face: torch.Tensor, patch: torch.Tensor, region: PatchRegion, geometry: FaceGeometry):
    uv_face = face_to_uv(face, geometry.texel_to_image)
    uv_adv = apply_patch_in_uv(uv_face, patch, region)
    geometry.pixel_to_texel.check()
    back = _sample(uv_adv, geometry.pixel_to_texel.coords)
    projected = _sample(region.mask[None].to(face.dtype), geometry.pixel_to_texel.coords, mode="nearest")[0]
    inside = (projected > 0.5) & geometry.pixel_to_texel.valid
    return torch.where(inside[None], back, face)


class Renderer:
    """The rendering function: (face, patch) -> patched face.

    Face geometry in ``uv`` mode is cached per face tensor identity, so
    repeated renders of the same face during an attack reuse it.
    """

    def __init__(self, region: PatchRegion, mode: str = "planar",
                 detector: Optional[LandmarkDetector] = None,
                 provider: Optional[ReconstructionProvider] = None):
        if mode not in ("planar", "uv"):
            raise ConfigurationError(f"render mode must be 'planar' or 'uv', got {mode!r}")
        if mode == "uv" and provider is None:
            raise CapabilityError("uv rendering needs a 3D reconstruction provider")
        if mode == "uv" and region.space != "uv":
            raise ConfigurationError("uv rendering needs a region defined in UV space")
        self.region = region
        self.mode = mode
        self.detector = detector
        self.provider = provider
        self._geometry: dict = {}

    def geometry(self, face: FaceImage) -> FaceGeometry:
        key = id(face.pixels)
        cached = self._geometry.get(key)
        if cached is not None and cached[0] is face.pixels:
            return cached[1]
        geo = self.provider(face, detect_landmarks(face, self.detector))
        self._geometry = {key: (face.pixels, geo)}
        return geo

    def render_tensor(self, face: FaceImage, patch: torch.Tensor) -> torch.Tensor:
        if self.mode == "planar":
            return _render_planar(face.pixels, patch, self.region)
        return _render_uv(face.pixels, patch, self.region, self.geometry(face))

    def __call__(self, face: FaceImage, patch) -> FaceImage:
        patch = patch.pixels if isinstance(patch, FaceImage) else patch
        out = self.render_tensor(face, patch).detach().clamp(0.0, 1.0)
        return FaceImage(out, face.identity)


def render(face: FaceImage, patch_image, region: PatchRegion, mode: str = "planar",
           provider: Optional[ReconstructionProvider] = None,
           detector: Optional[LandmarkDetector] = None) -> FaceImage:
    return Renderer(region, mode, detector, provider)(face, patch_image)


# -- file formats ------------------------------------------------------------------


def save_uv_map(uv: UVMap, coords_path: Union[str, Path], mask_path: Union[str, Path]) -> None:
    """Coordinates as 2-channel 16-bit PNG, validity as 1-bit PNG."""
    h, w = uv.size
    q = np.rint(uv.coords.clamp(0, 1).numpy() * 65535).astype(np.uint16)
    rows = q.transpose(1, 2, 0).reshape(h, w * 2)
    with open(coords_path, "wb") as fh:
        png.Writer(w, h, greyscale=True, alpha=True, bitdepth=16).write(fh, rows.tolist())
    save_mask(uv.valid, mask_path)


def load_uv_map(coords_path: Union[str, Path], mask_path: Union[str, Path]) -> UVMap:
    w, h, rows, info = png.Reader(filename=str(coords_path)).read()
    if info.get("planes") != 2 or info.get("bitdepth") != 16:
        raise MapIntegrityError("UV map must be a 2-channel 16-bit PNG")
    arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows]).reshape(h, w, 2)
    coords = torch.from_numpy(arr.transpose(2, 0, 1) / 65535.0)
    return UVMap(coords, load_mask(mask_path))


def save_mask(mask: torch.Tensor, path: Union[str, Path]) -> None:
    Image.fromarray(mask.numpy().astype(bool)).convert("1").save(path, format="PNG")


def load_mask(path: Union[str, Path]) -> torch.Tensor:
    with Image.open(path) as im:
        return torch.from_numpy(np.asarray(im.convert("1"), dtype=bool).copy())
