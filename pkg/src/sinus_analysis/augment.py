"""Offline augmentation of image / label pairs: mirrored flips and elastic warps.

A horizontal flip mirrors axis 0 (Right) of canonical volumes and swaps
every left label for its right counterpart, so "right maxillary" stays
on the subject's right after mirroring.

Elastic deformation draws a coarse displacement field on control points
spaced ``control_spacing_mm`` apart (uniform in +-``max_displacement_mm`` per
axis), smooths it with a Gaussian, upsamples it trilinearly to the voxel
grid and resamples the image trilinearly (clamped at the edge) and the
labels by nearest neighbour (background outside the volume).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from scipy import ndimage

from .nifti_io import LabelMap, VolumeImage
from .schema import flip_lookup

__all__ = [
    "ElasticParams",
    "AugmentedPair",
    "horizontal_flip",
    "elastic_deform",
    "displacement_field",
    "multiply_dataset",
    "derive_seed",
]

_FLIP = flip_lookup()


@dataclass(frozen=True)
class ElasticParams:
    control_spacing_mm: float = 32.0
    max_displacement_mm: float = 3.0
    smoothing_sigma_mm: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not self.control_spacing_mm > 0:
            raise ValueError("control_spacing_mm must be positive")
        if not self.max_displacement_mm >= 0:
            raise ValueError("max_displacement_mm must be non-negative")
        if not self.smoothing_sigma_mm > 0:
            raise ValueError("smoothing_sigma_mm must be positive")
        # larger displacements can fold the grid between control points
        if not self.max_displacement_mm < self.control_spacing_mm / 2:
            raise ValueError(
                f"max_displacement_mm ({self.max_displacement_mm}) must stay below half the "
                f"control spacing ({self.control_spacing_mm / 2})"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def _require_canonical(*volumes) -> None:
    for v in volumes:
        if not v.is_canonical:
            raise ValueError("augmentation needs canonical (+R, +A, +S) orientation")


def _require_pair(img: VolumeImage, lm: LabelMap) -> None:
    if img.dims != lm.dims:
        raise ValueError(f"image/label grid mismatch: {img.dims} vs {lm.dims}")


def horizontal_flip(img: VolumeImage, lm: LabelMap) -> tuple[VolumeImage, LabelMap]:
    """Mirror along the Right axis and swap left/right label codes."""
    _require_canonical(img, lm)
    _require_pair(img, lm)
    voxels = np.ascontiguousarray(np.asarray(img.voxels)[::-1])
    labels = _FLIP[np.asarray(lm.labels)[::-1]].astype(lm.labels.dtype)
    return replace(img, voxels=voxels), replace(lm, labels=labels)


def displacement_field(dims, spacing, params: ElasticParams) -> np.ndarray:
    """Dense displacement in mm, shape ``(3, *dims)``."""
    dims = np.asarray(dims)
    spacing = np.asarray(spacing, dtype=float)
    extent = (dims - 1) * spacing
    n_ctrl = np.maximum(np.ceil(extent / params.control_spacing_mm).astype(int) + 1, 2)
    rng = np.random.default_rng(int(params.seed))
    m = params.max_displacement_mm
    coarse = rng.uniform(-m, m, size=(3, *n_ctrl))
    sigma = params.smoothing_sigma_mm / params.control_spacing_mm
    coarse = np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in coarse])
    # voxel centres in control-grid units
    axes = [np.arange(d) * s / params.control_spacing_mm for d, s in zip(dims, spacing)]
    ctrl = np.meshgrid(*axes, indexing="ij")
    return np.stack(
        [ndimage.map_coordinates(c, ctrl, order=1, mode="nearest") for c in coarse]
    )


def elastic_deform(
    img: VolumeImage, lm: LabelMap, p: ElasticParams | None = None
) -> tuple[VolumeImage, LabelMap]:
    """Warp an image / label pair with a seeded smooth random field."""
    p = ElasticParams() if p is None else p
    _require_canonical(img, lm)
    _require_pair(img, lm)
    disp = displacement_field(img.dims, img.spacing, p)
    grid = np.meshgrid(*[np.arange(d, dtype=float) for d in img.dims], indexing="ij")
    coords = np.stack([g + d / s for g, d, s in zip(grid, disp, img.spacing)])

    src = np.asarray(img.voxels)
    warped = ndimage.map_coordinates(src.astype(np.float64), coords, order=1, mode="nearest")
    if src.dtype.kind in "iu":
        info = np.iinfo(src.dtype)
        warped = np.clip(np.round(warped), info.min, info.max)
    warped = warped.astype(src.dtype)

    labels = np.asarray(lm.labels)
    warped_labels = ndimage.map_coordinates(
        labels, coords, order=0, mode="constant", cval=0, output=labels.dtype
    )
    return replace(img, voxels=warped), replace(lm, labels=warped_labels)


@dataclass(frozen=True, eq=False)
class AugmentedPair:
    subject_id: str
    transform: str
    seed: int
    image: VolumeImage
    labels: LabelMap

    @property
    def name(self) -> str:
        return f"{self.subject_id}__{self.transform}__seed{self.seed}"


def derive_seed(base_seed: int, subject_id: str, index: int) -> int:
    """Per-variant seed that depends only on (base seed, subject, variant)."""
    ss = np.random.SeedSequence([int(base_seed), zlib.crc32(subject_id.encode()), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def augment_pair(
    subject_id: str,
    img: VolumeImage,
    lm: LabelMap,
    factor: int = 10,
    params: ElasticParams | None = None,
    seed: int = 0,
) -> list[AugmentedPair]:
    """Original, flip, then ``factor - 2`` elastic variants alternating bases."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    params = ElasticParams() if params is None else params
    out = [AugmentedPair(subject_id, "original", 0, img, lm)]
    if factor == 1:
        return out
    f_img, f_lm = horizontal_flip(img, lm)
    out.append(AugmentedPair(subject_id, "flip", 0, f_img, f_lm))
    for k in range(factor - 2):
        s = derive_seed(seed, subject_id, k)
        flipped = k % 2 == 1
        base_img, base_lm = (f_img, f_lm) if flipped else (img, lm)
        w_img, w_lm = elastic_deform(base_img, base_lm, replace(params, seed=s))
        out.append(AugmentedPair(subject_id, "flip_elastic" if flipped else "elastic", s, w_img, w_lm))
    return out


def multiply_dataset(
    pairs: Iterable[tuple[str, VolumeImage, LabelMap]],
    factor: int = 10,
    params: ElasticParams | None = None,
    seed: int = 0,
) -> list[AugmentedPair]:
    """Expand every ``(subject_id, image, labels)`` into ``factor`` pairs."""
    out: list[AugmentedPair] = []
    for subject_id, img, lm in pairs:
        out.extend(augment_pair(subject_id, img, lm, factor, params, seed))
    return out
