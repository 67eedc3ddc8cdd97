"""Label taxonomy for the 16 paranasal sinus structures.

Codes are frozen:

====  ===========  =====  ===========
code  sinus        side   tissue
====  ===========  =====  ===========
1     maxillary    right  air
2     maxillary    left   air
3     frontal      right  air
4     frontal      left   air
5     ethmoid      right  air
6     ethmoid      left   air
7     sphenoid     right  air
8     sphenoid     left   air
9-16  as 1-8              soft_tissue
====  ===========  =====  ===========

Air occupies 1-8, soft tissue 9-16, and ``code + 8`` is always the soft
tissue counterpart of an air code.  Odd codes are right, even codes left.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "Sinus",
    "Side",
    "Tissue",
    "StructureId",
    "ALL_CODES",
    "AIR_CODES",
    "SOFT_CODES",
    "SINUS_WEIGHTS",
    "code_of",
    "parse_code",
    "flip_code",
    "flip_lookup",
    "schema_table",
    "load_remap",
    "apply_remap",
]


class Sinus(str, Enum):
    MAXILLARY = "maxillary"
    FRONTAL = "frontal"
    ETHMOID = "ethmoid"
    SPHENOID = "sphenoid"


class Side(str, Enum):
    RIGHT = "right"
    LEFT = "left"

    @property
    def opposite(self) -> "Side":
        return Side.LEFT if self is Side.RIGHT else Side.RIGHT


class Tissue(str, Enum):
    AIR = "air"
    SOFT_TISSUE = "soft_tissue"


_SINUS_ORDER = (Sinus.MAXILLARY, Sinus.FRONTAL, Sinus.ETHMOID, Sinus.SPHENOID)
_SIDE_ORDER = (Side.RIGHT, Side.LEFT)
_TISSUE_ORDER = (Tissue.AIR, Tissue.SOFT_TISSUE)

_LATIN = {
    Sinus.MAXILLARY: "maxillaris",
    Sinus.FRONTAL: "frontalis",
    Sinus.ETHMOID: "ethmoidalis",
    Sinus.SPHENOID: "sphenoidalis",
}

ALL_CODES = tuple(range(1, 17))
AIR_CODES = tuple(range(1, 9))
SOFT_CODES = tuple(range(9, 17))

# The merged ethmoid stands in for anterior ethmoid, posterior ethmoid and
# the osteomeatal complex of the classic staging.
SINUS_WEIGHTS = {
    Sinus.MAXILLARY: 1,
    Sinus.FRONTAL: 1,
    Sinus.ETHMOID: 3,
    Sinus.SPHENOID: 1,
}


@dataclass(frozen=True)
class StructureId:
    sinus: Sinus
    side: Side
    tissue: Tissue

    @property
    def code(self) -> int:
        return code_of(self.sinus, self.side, self.tissue)

    @property
    def display_name(self) -> str:
        prefix = "A." if self.tissue is Tissue.AIR else "ST."
        return f"{prefix} {_LATIN[self.sinus]} ({self.side.value})"


def code_of(sinus: Sinus | str, side: Side | str, tissue: Tissue | str) -> int:
    """Integer code of a (sinus, side, tissue) triple."""
    sinus, side, tissue = Sinus(sinus), Side(side), Tissue(tissue)
    return (
        1
        + 2 * _SINUS_ORDER.index(sinus)
        + _SIDE_ORDER.index(side)
        + 8 * _TISSUE_ORDER.index(tissue)
    )


def _check_code(code: int) -> int:
    if isinstance(code, bool) or int(code) != code:
        raise ValueError(f"structure code must be an integer, got {code!r}")
    code = int(code)
    if code == 0:
        raise ValueError("background is not a structure (code 0)")
    if not 1 <= code <= 16:
        raise ValueError(f"structure code {code} outside 1..16")
    return code


def parse_code(code: int) -> StructureId:
    """Inverse of :func:`code_of`."""
    c = _check_code(code) - 1
    tissue = _TISSUE_ORDER[c // 8]
    sinus = _SINUS_ORDER[(c % 8) // 2]
    side = _SIDE_ORDER[c % 2]
    return StructureId(sinus, side, tissue)


def flip_code(code: int) -> int:
    """Same sinus and tissue, opposite side."""
    c = _check_code(code)
    return c + 1 if c % 2 == 1 else c - 1


def flip_lookup() -> np.ndarray:
    """Lookup table ``t`` with ``t[c] == flip_code(c)`` and ``t[0] == 0``."""
    table = np.zeros(17, dtype=np.int64)
    for c in ALL_CODES:
        table[c] = flip_code(c)
    return table


def schema_table() -> list[dict]:
    """Machine-readable label table (the JSON sidecar content)."""
    rows = []
    for c in ALL_CODES:
        sid = parse_code(c)
        rows.append(
            {
                "code": c,
                "sinus": sid.sinus.value,
                "side": sid.side.value,
                "tissue": sid.tissue.value,
                "display_name": sid.display_name,
                "flip_code": flip_code(c),
            }
        )
    return rows


def packaged_schema() -> list[dict]:
    """The sidecar shipped inside the package."""
    text = resources.files("sinus_analysis").joinpath("data/schema.json").read_text()
    return json.loads(text)


def sinus_sides() -> Iterable[tuple[Sinus, Side]]:
    for sinus in _SINUS_ORDER:
        for side in _SIDE_ORDER:
            yield sinus, side


# ---------------------------------------------------------------- remapping


def load_remap(path: str | Path) -> dict[int, int]:
    """Read an ``external_code,schema_code`` CSV.

    A header row is optional.  Target codes must be 0..16; source codes are
    free so that third-party label numbering can be absorbed.
    """
    mapping: dict[int, int] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected two columns, got {row!r}")
            try:
                src, dst = int(row[0]), int(row[1])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-integer code in {row!r}") from None
            if not 0 <= dst <= 16:
                raise ValueError(f"{path}:{lineno}: target code {dst} outside 0..16")
            if src in mapping and mapping[src] != dst:
                raise ValueError(f"{path}:{lineno}: source code {src} mapped twice")
            mapping[src] = dst
    return mapping


def apply_remap(labels: np.ndarray, mapping: dict[int, int]) -> np.ndarray:
    """Relabel an integer array; values absent from ``mapping`` pass through."""
    if not mapping:
        return labels
    out = labels.copy()
    for src, dst in mapping.items():
        out[labels == src] = dst
    return out
