"""Segmentation quality: Dice and average symmetric surface distance.

Conventions
-----------
* A surface voxel is a foreground voxel with at least one face neighbour
  (6-neighbourhood) that is background or outside the volume.
* Distances are Euclidean between voxel centres, in mm, honouring per-axis
  spacing.
* ASSD pools both directions: the summed surface-to-surface distances are
  divided by the combined number of surface voxels.
* Dice is undefined (``None``) when both masks are empty, 0 when exactly one
  is.  ASSD is undefined when either mask is empty.
* Structures with undefined values are left out of every average, and the
  number left out is reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .nifti_io import LabelMap
from .schema import AIR_CODES, ALL_CODES, SOFT_CODES, Sinus, Side, Tissue, code_of, parse_code

__all__ = [
    "BinaryMask",
    "binary_mask",
    "dice",
    "surface_voxels",
    "assd",
    "Summary",
    "summarize",
    "CodeMetrics",
    "SegmentationReport",
    "evaluate",
    "STRUCTURE_ROWS",
]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.bits.shape


def binary_mask(lm: LabelMap, code: int) -> BinaryMask:
    return BinaryMask(np.asarray(lm.labels) == code, lm.spacing)


def _bits(m) -> np.ndarray:
    arr = m.bits if isinstance(m, BinaryMask) else m
    return np.asarray(arr, dtype=bool)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch: {a.shape} vs {b.shape}")


def dice(a, b) -> float | None:
    """Dice similarity coefficient ``2|A&B| / (|A| + |B|)``."""
    a, b = _bits(a), _bits(b)
    _check_shapes(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return None
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def _surface_mask(m: np.ndarray) -> np.ndarray:
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def surface_voxels(m) -> np.ndarray:
    """Coordinates ``(k, 3)`` of the surface voxels of a mask (empty -> ``(0, 3)``)."""
    return np.argwhere(_surface_mask(_bits(m)))


def _spacing_of(a, b, spacing) -> tuple[float, float, float]:
    if spacing is None:
        sa = a.spacing if isinstance(a, BinaryMask) else None
        sb = b.spacing if isinstance(b, BinaryMask) else None
        if sa is not None and sb is not None and tuple(sa) != tuple(sb):
            raise ValueError(f"spacing mismatch: {sa} vs {sb}")
        spacing = sa or sb or (1.0, 1.0, 1.0)
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ValueError(f"invalid spacing {spacing}")
    return spacing


def assd(a, b, spacing=None) -> float | None:
    """Average symmetric surface distance in mm.

    Uses an exact Euclidean distance transform of each surface, computed on
    the joint bounding box of the two masks (every surface voxel lies inside
    it, so cropping does not change any distance).
    """
    spacing = _spacing_of(a, b, spacing)
    a, b = _bits(a), _bits(b)
    _check_shapes(a, b)
    if not a.any() or not b.any():
        return None
    union = a | b
    box = ndimage.find_objects(union.astype(np.uint8))[0]
    a, b = a[box], b[box]
    sa, sb = _surface_mask(a), _surface_mask(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    total = float(dist_to_b[sa].sum()) + float(dist_to_a[sb].sum())
    return total / (int(sa.sum()) + int(sb.sum()))


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class Summary:
    mean: float | None
    sd: float | None
    n: int
    excluded: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "n": self.n, "excluded": self.excluded}

    def format(self, digits: int = 2) -> str:
        if self.mean is None:
            return ""
        return f"{self.mean:.{digits}f} ± {self.sd:.{digits}f}"


def summarize(values: Iterable[float | None]) -> Summary:
    """Mean and population SD of the defined values."""
    values = list(values)
    kept = np.array([v for v in values if v is not None], dtype=float)
    excluded = len(values) - kept.size
    if kept.size == 0:
        return Summary(None, None, 0, excluded)
    mean = float(kept.mean())
    sd = float(np.sqrt(np.mean((kept - mean) ** 2)))
    return Summary(mean, sd, int(kept.size), excluded)


def _side_mean(right: float | None, left: float | None) -> float | None:
    defined = [v for v in (right, left) if v is not None]
    if not defined:
        return None
    return sum(defined) / len(defined)


@dataclass(frozen=True)
class CodeMetrics:
    code: int
    dsc: float | None
    assd_mm: float | None
    pred_voxels: int
    ref_voxels: int

    @property
    def flags(self) -> list[str]:
        out = []
        if self.pred_voxels == 0 and self.ref_voxels == 0:
            out.append("absent_in_both")
        elif self.pred_voxels == 0:
            out.append("missing_in_pred")
        elif self.ref_voxels == 0:
            out.append("missing_in_ref")
        return out

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "structure": parse_code(self.code).display_name,
            "dsc": self.dsc,
            "assd_mm": self.assd_mm,
            "pred_voxels": self.pred_voxels,
            "ref_voxels": self.ref_voxels,
            "flags": self.flags,
        }


# summary row order: air block then soft-tissue block
STRUCTURE_ROWS = [
    (tissue, sinus)
    for tissue in (Tissue.AIR, Tissue.SOFT_TISSUE)
    for sinus in (Sinus.MAXILLARY, Sinus.FRONTAL, Sinus.SPHENOID, Sinus.ETHMOID)
]


def structure_label(sinus: Sinus, tissue: Tissue) -> str:
    from .schema import _LATIN

    return f"{'A.' if tissue is Tissue.AIR else 'ST.'} {_LATIN[sinus]}"


@dataclass
class SegmentationReport:
    per_code: dict[int, CodeMetrics]
    subject_id: str = ""
    per_structure: dict = field(init=False)
    averages: dict = field(init=False)

    def __post_init__(self):
        self.per_structure = {}
        for tissue, sinus in STRUCTURE_ROWS:
            r = self.per_code[code_of(sinus, Side.RIGHT, tissue)]
            l = self.per_code[code_of(sinus, Side.LEFT, tissue)]
            self.per_structure[(sinus, tissue)] = {
                "dsc": _side_mean(r.dsc, l.dsc),
                "assd_mm": _side_mean(r.assd_mm, l.assd_mm),
            }
        groups = {"air": AIR_CODES, "soft_tissue": SOFT_CODES, "overall": ALL_CODES}
        self.averages = {
            name: {
                "dsc": summarize(self.per_code[c].dsc for c in codes),
                "assd_mm": summarize(self.per_code[c].assd_mm for c in codes),
            }
            for name, codes in groups.items()
        }

    @property
    def air_average(self):
        return self.averages["air"]

    @property
    def soft_tissue_average(self):
        return self.averages["soft_tissue"]

    @property
    def overall_average(self):
        return self.averages["overall"]

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "per_code": [self.per_code[c].to_dict() for c in ALL_CODES],
            "per_structure": [
                {
                    "structure": structure_label(sinus, tissue),
                    "sinus": sinus.value,
                    "tissue": tissue.value,
                    **self.per_structure[(sinus, tissue)],
                }
                for tissue, sinus in STRUCTURE_ROWS
            ],
            "averages": {
                name: {k: s.to_dict() for k, s in metrics.items()}
                for name, metrics in self.averages.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(pred: LabelMap, ref: LabelMap, subject_id: str = "") -> SegmentationReport:
    """Per-code DSC/ASSD of ``pred`` against ``ref`` plus side/group averages."""
    if pred.dims != ref.dims:
        raise ValueError(f"grid mismatch: pred {pred.dims} vs ref {ref.dims}")
    if not np.allclose(pred.spacing, ref.spacing, rtol=0, atol=1e-6):
        raise ValueError(f"spacing mismatch: pred {pred.spacing} vs ref {ref.spacing}")
    if pred.orientation != ref.orientation:
        raise ValueError(f"orientation mismatch: {pred.orientation} vs {ref.orientation}")
    p, r = np.asarray(pred.labels), np.asarray(ref.labels)
    per_code = {}
    for c in ALL_CODES:
        a, b = p == c, r == c
        per_code[c] = CodeMetrics(
            code=c,
            dsc=dice(a, b),
            assd_mm=assd(a, b, ref.spacing),
            pred_voxels=int(a.sum()),
            ref_voxels=int(b.sum()),
        )
    return SegmentationReport(per_code, subject_id=subject_id)


def cohort_table(reports: Sequence[SegmentationReport]) -> list[dict]:
    """Cohort summary rows (structure, DSC mean ± SD, ASSD mean ± SD).

    Structure rows pool the per-subject side-averaged values; the group rows
    pool every defined per-code value (each side counts as one data point).
    """
    rows = []
    for tissue, sinus in STRUCTURE_ROWS:
        dsc = summarize(rep.per_structure[(sinus, tissue)]["dsc"] for rep in reports)
        dist = summarize(rep.per_structure[(sinus, tissue)]["assd_mm"] for rep in reports)
        rows.append(_row(structure_label(sinus, tissue), dsc, dist))
    for name, label, codes in (
        ("air", "Average (Air)", AIR_CODES),
        ("soft_tissue", "Average (Soft Tissue)", SOFT_CODES),
        ("overall", "Average (overall)", ALL_CODES),
    ):
        dsc = summarize(rep.per_code[c].dsc for rep in reports for c in codes)
        dist = summarize(rep.per_code[c].assd_mm for rep in reports for c in codes)
        rows.append(_row(label, dsc, dist))
    return rows


def _row(label: str, dsc: Summary, dist: Summary) -> dict:
    def num(v):
        return "" if v is None else repr(float(v))

    return {
        "structure": label,
        "dsc": dsc.format(),
        "assd_mm": dist.format(),
        "dsc_mean": num(dsc.mean),
        "dsc_sd": num(dsc.sd),
        "dsc_n": dsc.n,
        "dsc_excluded": dsc.excluded,
        "assd_mean": num(dist.mean),
        "assd_sd": num(dist.sd),
        "assd_n": dist.n,
        "assd_excluded": dist.excluded,
    }

