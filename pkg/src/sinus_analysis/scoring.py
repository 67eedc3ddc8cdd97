"""Opacification, modified Lund-Mackay grades, aplasia and hypoplasia.

Grades per sinus side: 0 below 5% opacification, 1 from 5% to 95%
inclusive, 2 above 95%.  The ethmoid grade is weighted by 3 so that the
total (both sides, four sinuses) spans 0..24 like the classic score.
An aplastic sinus side (no air and no soft tissue) contributes 0 and is
flagged; it is never also flagged as hypoplastic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .features import SubjectFeatures
from .schema import SINUS_WEIGHTS, Side, Sinus, Tissue, code_of, sinus_sides

__all__ = [
    "LOW_THRESHOLD",
    "HIGH_THRESHOLD",
    "HYPOPLASIA_FRACTION",
    "NORMAL_LMS_MEAN",
    "DEFAULT_REFERENCE_VOLUMES",
    "ReferenceVolumes",
    "SinusAssessment",
    "LmsReport",
    "opacification",
    "lms_grade",
    "weighted_total",
    "side_volumes",
    "assess_volumes",
    "modified_lms",
    "detect_aplasia",
    "detect_hypoplasia",
]

LOW_THRESHOLD = 0.05
HIGH_THRESHOLD = 0.95
HYPOPLASIA_FRACTION = 0.05
MAX_TOTAL = 2 * 2 * sum(SINUS_WEIGHTS.values())

# Reference mean score of a normal population; annotation in score summaries.
NORMAL_LMS_MEAN = 4.3

# Normal air + soft tissue volume per sinus side (mm^3).
DEFAULT_REFERENCE_VOLUMES = {
    Sinus.MAXILLARY: 14845.0 + 3474.0,
    Sinus.FRONTAL: 4707.0 + 530.0,
    Sinus.SPHENOID: 5439.0 + 482.0,
    Sinus.ETHMOID: 3735.0 + 2760.0,
}


class ReferenceVolumes(dict):
    """Normal total volume per sinus in mm^3 (mapping ``Sinus -> float``)."""

    def __init__(self, volumes: Mapping | None = None):
        super().__init__()
        source = DEFAULT_REFERENCE_VOLUMES if volumes is None else volumes
        for key, value in source.items():
            value = float(value)
            if not value > 0:
                raise ValueError(f"reference volume for {key} must be positive, got {value}")
            self[Sinus(key)] = value

    @classmethod
    def from_json(cls, path: str | Path) -> "ReferenceVolumes":
        """Load ``{"maxillary": 18319, ...}``; sinuses not listed keep defaults."""
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a JSON object of sinus -> volume")
        merged = {**DEFAULT_REFERENCE_VOLUMES}
        for key, value in data.items():
            try:
                merged[Sinus(key)] = value
            except ValueError:
                raise ValueError(f"{path}: unknown sinus {key!r}") from None
        return cls(merged)

    def to_dict(self) -> dict:
        return {k.value: v for k, v in self.items()}


def opacification(air_vol: float, st_vol: float) -> float | None:
    """Soft-tissue share of the sinus, ``st / (air + st)``; ``None`` if both are 0."""
    if air_vol < 0 or st_vol < 0:
        raise ValueError(f"volumes must be non-negative, got air={air_vol}, soft={st_vol}")
    total = air_vol + st_vol
    if total == 0:
        return None
    return st_vol / total


def lms_grade(f: float) -> int:
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"opacification must lie in [0, 1], got {f}")
    if f < LOW_THRESHOLD:
        return 0
    if f > HIGH_THRESHOLD:
        return 2
    return 1


def weighted_total(grades: Mapping[tuple[Sinus, Side], int | None]) -> int:
    """Sum of grades with the ethmoid counted three times; missing grades add 0."""
    total = 0
    for (sinus, _side), grade in grades.items():
        if grade is None:
            continue
        if grade not in (0, 1, 2):
            raise ValueError(f"grade must be 0, 1 or 2, got {grade}")
        total += SINUS_WEIGHTS[Sinus(sinus)] * grade
    return total


@dataclass(frozen=True)
class SinusAssessment:
    sinus: Sinus
    side: Side
    air_mm3: float
    soft_mm3: float
    opacification: float | None
    grade: int | None
    aplasia: bool
    hypoplasia: bool

    @property
    def total_mm3(self) -> float:
        return self.air_mm3 + self.soft_mm3

    @property
    def weighted_grade(self) -> int:
        return 0 if self.grade is None else self.grade * SINUS_WEIGHTS[self.sinus]

    def to_dict(self) -> dict:
        return {
            "sinus": self.sinus.value,
            "side": self.side.value,
            "air_mm3": self.air_mm3,
            "soft_mm3": self.soft_mm3,
            "opacification": self.opacification,
            "grade": self.grade,
            "weighted_grade": self.weighted_grade,
            "aplasia": self.aplasia,
            "hypoplasia": self.hypoplasia,
        }


@dataclass(frozen=True)
class LmsReport:
    per_side_sinus: dict[tuple[Sinus, Side], SinusAssessment]
    subject_id: str = ""

    @property
    def per_side_totals(self) -> dict[Side, int]:
        totals = {Side.RIGHT: 0, Side.LEFT: 0}
        for (_, side), a in self.per_side_sinus.items():
            totals[side] += a.weighted_grade
        return totals

    @property
    def total(self) -> int:
        return weighted_total({k: a.grade for k, a in self.per_side_sinus.items()})

    @property
    def aplasia_flags(self) -> dict[tuple[Sinus, Side], bool]:
        return {k: a.aplasia for k, a in self.per_side_sinus.items()}

    @property
    def hypoplasia_flags(self) -> dict[tuple[Sinus, Side], bool]:
        return {k: a.hypoplasia for k, a in self.per_side_sinus.items()}

    def rows(self) -> list[dict]:
        return [
            {
                "subject_id": self.subject_id,
                "sinus": a.sinus.value,
                "side": a.side.value,
                "opacification": "" if a.opacification is None else repr(a.opacification),
                "grade": "" if a.grade is None else a.grade,
                "aplasia": a.aplasia,
                "hypoplasia": a.hypoplasia,
                "total": self.total,
            }
            for a in self.per_side_sinus.values()
        ]

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "total": self.total,
            "per_side_totals": {s.value: t for s, t in self.per_side_totals.items()},
            "sinuses": [a.to_dict() for a in self.per_side_sinus.values()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def side_volumes(sf: SubjectFeatures) -> dict[tuple[Sinus, Side], tuple[float, float]]:
    """``(air_mm3, soft_mm3)`` per sinus side."""
    return {
        (sinus, side): (
            sf.volume(code_of(sinus, side, Tissue.AIR)),
            sf.volume(code_of(sinus, side, Tissue.SOFT_TISSUE)),
        )
        for sinus, side in sinus_sides()
    }


def assess_volumes(
    volumes: Mapping[tuple[Sinus, Side], tuple[float, float]],
    reference: ReferenceVolumes | None = None,
    subject_id: str = "",
) -> LmsReport:
    """Grade and flag every sinus side from its air / soft-tissue volumes."""
    reference = ReferenceVolumes() if reference is None else reference
    out = {}
    for sinus, side in sinus_sides():
        air, soft = volumes[(sinus, side)]
        f = opacification(air, soft)
        aplastic = f is None
        if sinus not in reference:
            raise KeyError(f"no reference volume for {sinus.value}")
        hypo = (not aplastic) and (air + soft) < HYPOPLASIA_FRACTION * reference[sinus]
        out[(sinus, side)] = SinusAssessment(
            sinus=sinus,
            side=side,
            air_mm3=air,
            soft_mm3=soft,
            opacification=f,
            grade=None if aplastic else lms_grade(f),
            aplasia=aplastic,
            hypoplasia=hypo,
        )
    return LmsReport(out, subject_id=subject_id)


def modified_lms(sf: SubjectFeatures, reference: ReferenceVolumes | None = None) -> LmsReport:
    return assess_volumes(side_volumes(sf), reference, subject_id=sf.subject_id)


def detect_aplasia(sf: SubjectFeatures) -> dict[tuple[Sinus, Side], bool]:
    """A sinus side is aplastic iff it has neither air nor soft tissue."""
    return {k: air + soft == 0 for k, (air, soft) in side_volumes(sf).items()}


def detect_hypoplasia(sf: SubjectFeatures, ref: ReferenceVolumes | None = None) -> dict[tuple[Sinus, Side], bool]:
    """Present but smaller than 5% of the reference volume for that sinus."""
    ref = ReferenceVolumes() if ref is None else ref
    out = {}
    for (sinus, side), (air, soft) in side_volumes(sf).items():
        if sinus not in ref:
            raise KeyError(f"no reference volume for {sinus.value}")
        total = air + soft
        out[(sinus, side)] = 0 < total < HYPOPLASIA_FRACTION * ref[sinus]
    return out
