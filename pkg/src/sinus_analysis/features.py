"""Per-structure features from an image / label-map pair.

Axis names follow the canonical (+R, +A, +S) grid: width runs along axis 0
(Right), depth along axis 1 (Anterior), height along axis 2 (Superior).
Intensity SD is the population SD.  Undefined values are ``None``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .nifti_io import LabelMap, VolumeImage
from .schema import AIR_CODES, ALL_CODES, SOFT_CODES, parse_code

__all__ = [
    "StructureFeatures",
    "SubjectFeatures",
    "structure_volume",
    "intensity_stats",
    "bounding_box",
    "component_count",
    "extract_subject",
    "UNIONS",
    "CONNECTIVITY",
]

# connectivity -> scipy rank for generate_binary_structure
CONNECTIVITY = {6: 1, 18: 2, 26: 3}
DEFAULT_CONNECTIVITY = 26

UNIONS = {
    "union_air": AIR_CODES,
    "union_soft": SOFT_CODES,
    "union_all": ALL_CODES,
}


@dataclass(frozen=True)
class StructureFeatures:
    name: str
    code: int | None
    voxel_count: int
    volume_mm3: float
    intensity_mean: float | None
    intensity_sd: float | None
    depth_mm: float | None
    width_mm: float | None
    height_mm: float | None
    component_count: int
    # half-open index box (lo, hi) per axis, or None
    bbox: tuple[tuple[int, int], ...] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = None if self.bbox is None else [list(b) for b in self.bbox]
        return d


@dataclass
class SubjectFeatures:
    subject_id: str
    per_code: dict[int, StructureFeatures]
    union_air: StructureFeatures
    union_soft: StructureFeatures
    union_all: StructureFeatures
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def volume(self, code: int) -> float:
        return self.per_code[code].volume_mm3

    @property
    def unions(self) -> dict[str, StructureFeatures]:
        return {"union_air": self.union_air, "union_soft": self.union_soft, "union_all": self.union_all}

    def rows(self) -> list[dict]:
        rows = []
        for c in ALL_CODES:
            sid = parse_code(c)
            f = self.per_code[c]
            rows.append(_csv_row(self.subject_id, f, sid.sinus.value, sid.side.value, sid.tissue.value))
        for f in self.unions.values():
            rows.append(_csv_row(self.subject_id, f, "", "", ""))
        return rows

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "spacing": list(self.spacing),
            "provenance": self.provenance,
            "structures": [self.per_code[c].to_dict() for c in ALL_CODES],
            "unions": {k: v.to_dict() for k, v in self.unions.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


FEATURE_COLUMNS = [
    "subject_id",
    "structure",
    "code",
    "sinus",
    "side",
    "tissue",
    "voxel_count",
    "volume_mm3",
    "intensity_mean",
    "intensity_sd",
    "depth_mm",
    "width_mm",
    "height_mm",
    "component_count",
]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _csv_row(subject_id, f: StructureFeatures, sinus, side, tissue) -> dict:
    return {
        "subject_id": subject_id,
        "structure": f.name,
        "code": _cell(f.code),
        "sinus": sinus,
        "side": side,
        "tissue": tissue,
        "voxel_count": f.voxel_count,
        "volume_mm3": _cell(f.volume_mm3),
        "intensity_mean": _cell(f.intensity_mean),
        "intensity_sd": _cell(f.intensity_sd),
        "depth_mm": _cell(f.depth_mm),
        "width_mm": _cell(f.width_mm),
        "height_mm": _cell(f.height_mm),
        "component_count": f.component_count,
    }


def rows_to_csv(rows: Iterable[dict], columns=FEATURE_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------- operations


def _check_pair(img: VolumeImage, lm: LabelMap) -> None:
    if img.dims != lm.dims:
        raise ValueError(f"grid mismatch: image {img.dims} vs labels {lm.dims}")
    if not np.allclose(img.spacing, lm.spacing, rtol=0, atol=1e-6):
        raise ValueError(f"spacing mismatch: image {img.spacing} vs labels {lm.spacing}")
    if img.orientation != lm.orientation:
        raise ValueError(f"orientation mismatch: {img.orientation} vs {lm.orientation}")


def structure_volume(lm: LabelMap, code: int) -> float:
    """Volume in mm^3 of the voxels labelled ``code``."""
    return int(np.count_nonzero(np.asarray(lm.labels) == code)) * lm.voxel_volume


def _mean_sd(values: np.ndarray) -> tuple[float | None, float | None]:
    if values.size == 0:
        return None, None
    values = values.astype(np.float64, copy=False)
    mean = float(values.sum() / values.size)
    sd = float(np.sqrt(np.sum((values - mean) ** 2) / values.size))
    return mean, sd


def intensity_stats(img: VolumeImage, lm: LabelMap, code: int) -> tuple[float | None, float | None]:
    """Mean and population SD of image values where ``lm == code``."""
    _check_pair(img, lm)
    return _mean_sd(np.asarray(img.voxels)[np.asarray(lm.labels) == code])


def _box_of(mask: np.ndarray):
    objs = ndimage.find_objects(mask.astype(np.uint8))
    if not objs or objs[0] is None:
        return None
    return tuple((s.start, s.stop) for s in objs[0])


def _extents(box, spacing) -> tuple[float | None, float | None, float | None]:
    """(depth, width, height) in mm for an index box."""
    if box is None:
        return None, None, None
    width, depth, height = ((hi - lo) * s for (lo, hi), s in zip(box, spacing))
    return depth, width, height


def bounding_box(lm: LabelMap, code: int) -> tuple[float | None, float | None, float | None]:
    """Tight box extents ``(depth_mm, width_mm, height_mm)`` of one label."""
    if not lm.is_canonical:
        raise ValueError("bounding boxes need canonical orientation; call orient_to_canonical first")
    return _extents(_box_of(np.asarray(lm.labels) == code), lm.spacing)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY[connectivity])


def _count_components(mask: np.ndarray, connectivity: int, box=None) -> int:
    structure = _structure(connectivity)
    if box is None:
        box = _box_of(mask)
    if box is None:
        return 0
    crop = mask[tuple(slice(lo, hi) for lo, hi in box)]
    _, n = ndimage.label(crop, structure=structure)
    return int(n)


def component_count(lm: LabelMap, code: int, connectivity: int = DEFAULT_CONNECTIVITY) -> int:
    """Number of connected components of one label."""
    _structure(connectivity)
    return _count_components(np.asarray(lm.labels) == code, connectivity)


def _features(name, code, mask, values, spacing, voxel_volume, connectivity) -> StructureFeatures:
    n = int(np.count_nonzero(mask))
    box = _box_of(mask) if n else None
    mean, sd = _mean_sd(values[mask]) if values is not None else (None, None)
    depth, width, height = _extents(box, spacing)
    return StructureFeatures(
        name=name,
        code=code,
        voxel_count=n,
        volume_mm3=n * voxel_volume,
        intensity_mean=mean,
        intensity_sd=sd,
        depth_mm=depth,
        width_mm=width,
        height_mm=height,
        component_count=_count_components(mask, connectivity, box) if n else 0,
        bbox=box,
    )


def extract_subject(
    img: VolumeImage | None,
    lm: LabelMap,
    subject_id: str = "",
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> SubjectFeatures:
    """All 16 per-structure feature records plus the air/soft/all unions.

    ``img`` may be ``None`` when only geometry is needed; intensities are
    then undefined.
    """
    _structure(connectivity)
    if not lm.is_canonical:
        raise ValueError("feature extraction needs canonical orientation")
    if img is not None:
        _check_pair(img, lm)
        if not img.is_canonical:
            raise ValueError("feature extraction needs canonical orientation")
    labels = np.asarray(lm.labels)
    values = None if img is None else np.asarray(img.voxels)
    vv = lm.voxel_volume

    # Work inside the foreground box; all statistics are box-invariant.
    fg_box = _box_of(labels > 0)
    if fg_box is not None:
        sl = tuple(slice(lo, hi) for lo, hi in fg_box)
        offset = np.array([lo for lo, _ in fg_box])
        labels_c = labels[sl]
        values_c = None if values is None else values[sl]
    else:
        offset = np.zeros(3, dtype=int)
        labels_c, values_c = labels, values

    def shift(f: StructureFeatures) -> StructureFeatures:
        if f.bbox is None:
            return f
        box = tuple((int(lo + o), int(hi + o)) for (lo, hi), o in zip(f.bbox, offset))
        return StructureFeatures(**{**f.__dict__, "bbox": box})

    per_code = {}
    sid_names = {c: parse_code(c).display_name for c in ALL_CODES}
    for c in ALL_CODES:
        mask = labels_c == c
        per_code[c] = shift(_features(sid_names[c], c, mask, values_c, lm.spacing, vv, connectivity))
    unions = {}
    for name, codes in UNIONS.items():
        mask = (labels_c >= codes[0]) & (labels_c <= codes[-1])
        unions[name] = shift(_features(name, None, mask, values_c, lm.spacing, vv, connectivity))
    return SubjectFeatures(
        subject_id=subject_id,
        per_code=per_code,
        spacing=lm.spacing,
        **unions,
    )
