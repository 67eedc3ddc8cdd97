"""Synthetic sinus phantoms with exactly known ground truth.

Each sinus side is an axis-aligned ellipsoid.  Its lowest voxels along the
Superior axis take the soft-tissue code, like a fluid level, and the rest
keep the air code.  The number of soft voxels is the closest achievable
count to the requested opacification.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .nifti_io import LabelMap, VolumeImage
from .schema import Side, Sinus, Tissue, code_of

__all__ = [
    "EllipsoidSpec",
    "PhantomSpec",
    "GroundTruth",
    "PhantomError",
    "generate",
    "standard_spec",
    "standard_phantom",
    "cohort_specs",
    "STANDARD_LMS_TOTAL",
]


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class EllipsoidSpec:
    sinus: Sinus
    side: Side
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    opacification: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sinus", Sinus(self.sinus))
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "center_mm", tuple(float(c) for c in self.center_mm))
        object.__setattr__(self, "radii_mm", tuple(float(r) for r in self.radii_mm))
        if len(self.center_mm) != 3 or len(self.radii_mm) != 3:
            raise PhantomError("center_mm and radii_mm need three components")
        if min(self.radii_mm) <= 0:
            raise PhantomError(f"radii must be positive, got {self.radii_mm}")
        if not 0.0 <= self.opacification <= 1.0:
            raise PhantomError(f"opacification target must lie in [0, 1], got {self.opacification}")

    def to_dict(self) -> dict:
        return {
            "sinus": self.sinus.value,
            "side": self.side.value,
            "center_mm": list(self.center_mm),
            "radii_mm": list(self.radii_mm),
            "opacification": self.opacification,
        }


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    structures: tuple[EllipsoidSpec, ...] = ()
    air_mean: float = 40.0
    soft_mean: float = 190.0
    background_mean: float = 100.0
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "structures", tuple(self.structures))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomError(f"invalid dims {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise PhantomError(f"invalid spacing {self.spacing}")
        if not self.air_mean < self.soft_mean:
            raise PhantomError("air_mean must be below soft_mean")
        if self.noise_sd < 0:
            raise PhantomError("noise_sd must be non-negative")
        keys = [(s.sinus, s.side) for s in self.structures]
        if len(set(keys)) != len(keys):
            raise PhantomError("each sinus side may appear at most once")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "structures": [s.to_dict() for s in self.structures],
            "air_mean": self.air_mean,
            "soft_mean": self.soft_mean,
            "background_mean": self.background_mean,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["structures"] = tuple(EllipsoidSpec(**s) for s in d.get("structures", ()))
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, path: str | Path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class GroundTruth:
    voxel_counts: dict[int, int]
    bboxes: dict[int, tuple[tuple[int, int], ...] | None]
    component_counts: dict[int, int]
    realized_opacification: dict[tuple[Sinus, Side], float | None]
    spacing: tuple[float, float, float]
    band_means: dict[str, float] = field(default_factory=dict)

    def volume_mm3(self, code: int) -> float:
        sx, sy, sz = self.spacing
        return self.voxel_counts[code] * (sx * sy * sz)

    def to_dict(self) -> dict:
        return {
            "spacing": list(self.spacing),
            "voxel_counts": {str(c): n for c, n in self.voxel_counts.items()},
            "bboxes": {
                str(c): None if b is None else [list(x) for x in b] for c, b in self.bboxes.items()
            },
            "component_counts": {str(c): n for c, n in self.component_counts.items()},
            "realized_opacification": {
                f"{sinus.value}_{side.value}": f
                for (sinus, side), f in self.realized_opacification.items()
            },
            "band_means": self.band_means,
        }


def _neighbour_offsets(connectivity: int):
    offsets = []
    for d in product((-1, 0, 1), repeat=3):
        n = sum(abs(x) for x in d)
        if n == 0:
            continue
        if connectivity == 6 and n > 1 or connectivity == 18 and n > 2:
            continue
        offsets.append(d)
    return offsets


def count_components(coords, connectivity: int = 26) -> int:
    """Flood-fill component count of a set of integer voxel coordinates."""
    remaining = {tuple(int(v) for v in c) for c in coords}
    offsets = _neighbour_offsets(connectivity)
    count = 0
    while remaining:
        count += 1
        queue = deque([remaining.pop()])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in offsets:
                nb = (x + dx, y + dy, z + dz)
                if nb in remaining:
                    remaining.remove(nb)
                    queue.append(nb)
    return count


def _box(coords: np.ndarray):
    if len(coords) == 0:
        return None
    lo, hi = coords.min(axis=0), coords.max(axis=0) + 1
    return tuple((int(a), int(b)) for a, b in zip(lo, hi))


def _rasterize(spec: PhantomSpec, e: EllipsoidSpec) -> np.ndarray:
    """Voxel coordinates inside the ellipsoid, shape (n, 3)."""
    sp = np.array(spec.spacing)
    c, r = np.array(e.center_mm), np.array(e.radii_mm)
    hi_mm = (np.array(spec.dims) - 1) * sp
    if np.any(c - r < 0) or np.any(c + r > hi_mm):
        raise PhantomError(f"{e.sinus.value} {e.side.value} ellipsoid extends outside the grid")
    lo = np.floor((c - r) / sp).astype(int)
    hi = np.ceil((c + r) / sp).astype(int) + 1
    axes = [np.arange(lo[i], hi[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    q = (grid * sp - c) / r
    inside = grid[np.sum(q * q, axis=1) <= 1.0]
    if len(inside) == 0:
        raise PhantomError(f"{e.sinus.value} {e.side.value} ellipsoid contains no voxel centre")
    return inside


def generate(spec: PhantomSpec) -> tuple[VolumeImage, LabelMap, GroundTruth]:
    labels = np.zeros(spec.dims, dtype=np.uint8)
    sp = np.array(spec.spacing)
    fractions = {}
    for e in spec.structures:
        coords = _rasterize(spec, e)
        idx = tuple(coords.T)
        if np.any(labels[idx] != 0):
            raise PhantomError(f"overlapping ellipsoids at {e.sinus.value} {e.side.value}")
        n = len(coords)
        k = min(n, int(np.floor(e.opacification * n + 0.5)))
        c = np.array(e.center_mm)
        r = np.array(e.radii_mm)
        q = (coords * sp - c) / r
        radial = q[:, 0] ** 2 + q[:, 1] ** 2
        # Below the centre slice the soft part of the boundary slice is the
        # inner disc, above it the outer ring, on it whole rows.  Either way
        # both parts stay attached to their own stack of slices.
        cz = c[2] / sp[2]
        z = coords[:, 2]
        within = np.where(z < cz, radial, np.where(z > cz, -radial, 0.0))
        order = np.lexsort((coords[:, 0], coords[:, 1], within, z))
        soft = coords[order[:k]]
        air = coords[order[k:]]
        labels[tuple(air.T)] = code_of(e.sinus, e.side, Tissue.AIR)
        labels[tuple(soft.T)] = code_of(e.sinus, e.side, Tissue.SOFT_TISSUE)
        fractions[(e.sinus, e.side)] = k / n

    rng = np.random.default_rng(spec.seed)
    image = np.full(spec.dims, spec.background_mean, dtype=np.float64)
    image[(labels >= 1) & (labels <= 8)] = spec.air_mean
    image[labels >= 9] = spec.soft_mean
    if spec.noise_sd > 0:
        image += rng.normal(0.0, spec.noise_sd, size=spec.dims)

    counts, boxes, comps = {}, {}, {}
    for code in range(1, 17):
        coords = np.argwhere(labels == code)
        counts[code] = int(len(coords))
        boxes[code] = _box(coords)
        comps[code] = count_components(coords, 26) if len(coords) else 0

    for sinus, side in product(Sinus, Side):
        fractions.setdefault((sinus, side), None)

    truth = GroundTruth(
        voxel_counts=counts,
        bboxes=boxes,
        component_counts=comps,
        realized_opacification=fractions,
        spacing=spec.spacing,
        band_means={
            "air": spec.air_mean,
            "soft_tissue": spec.soft_mean,
            "background": spec.background_mean,
        },
    )
    img = VolumeImage(voxels=image, spacing=spec.spacing)
    lm = LabelMap(labels=labels, spacing=spec.spacing)
    return img, lm, truth


# --------------------------------------------------------------- fixtures

# (sinus, side) -> centre, radii (mm) on a 64^3 grid at 1 mm.  Left and right
# are deliberately not mirror images, so mirroring moves every structure
# away from its contralateral partner.
_LAYOUT = {
    (Sinus.MAXILLARY, Side.RIGHT): ((47, 22, 16), (8, 9, 8)),
    (Sinus.MAXILLARY, Side.LEFT): ((18, 42, 18), (8, 9, 8)),
    (Sinus.FRONTAL, Side.RIGHT): ((42, 46, 50), (6, 5, 6)),
    (Sinus.FRONTAL, Side.LEFT): ((21, 54, 51), (6, 5, 6)),
    (Sinus.ETHMOID, Side.RIGHT): ((37, 36, 32), (4, 8, 6)),
    (Sinus.ETHMOID, Side.LEFT): ((27, 28, 34), (4, 8, 6)),
    (Sinus.SPHENOID, Side.RIGHT): ((40, 10, 40), (5, 5, 5)),
    (Sinus.SPHENOID, Side.LEFT): ((24, 12, 46), (5, 5, 5)),
}

# Opacification targets of the standard fixture, chosen so that both grade
# boundaries are exercised and every code keeps at least one voxel.
_STANDARD_TARGETS = {
    (Sinus.MAXILLARY, Side.RIGHT): 0.03,
    (Sinus.MAXILLARY, Side.LEFT): 0.40,
    (Sinus.FRONTAL, Side.RIGHT): 0.20,
    (Sinus.FRONTAL, Side.LEFT): 0.97,
    (Sinus.ETHMOID, Side.RIGHT): 0.60,
    (Sinus.ETHMOID, Side.LEFT): 0.02,
    (Sinus.SPHENOID, Side.RIGHT): 0.98,
    (Sinus.SPHENOID, Side.LEFT): 0.10,
}

# right: 0 + 1 + 3*1 + 2 = 6; left: 1 + 2 + 3*0 + 1 = 4
STANDARD_LMS_TOTAL = 10


def standard_spec(noise_sd: float = 8.0, seed: int = 1234, targets=None) -> PhantomSpec:
    targets = _STANDARD_TARGETS if targets is None else targets
    structures = tuple(
        EllipsoidSpec(sinus, side, center, radii, targets[(sinus, side)])
        for (sinus, side), (center, radii) in _LAYOUT.items()
        if (sinus, side) in targets
    )
    return PhantomSpec(structures=structures, noise_sd=noise_sd, seed=seed)


def standard_phantom() -> tuple[VolumeImage, LabelMap, GroundTruth]:
    """The fixed 64^3 fixture: all 16 codes present, grades 0, 1 and 2 mixed."""
    return generate(standard_spec())


def cohort_specs(n: int, seed: int = 0, noise_sd: float = 8.0, aplasia_rate: float = 0.05) -> list[PhantomSpec]:
    """``n`` phantom variants on the standard layout with random opacification."""
    specs = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        targets = {}
        for key in _LAYOUT:
            if rng.random() < aplasia_rate:
                continue
            grade = rng.choice(3, p=[0.3, 0.5, 0.2])
            if grade == 0:
                targets[key] = float(rng.uniform(0.0, 0.04))
            elif grade == 1:
                targets[key] = float(rng.uniform(0.06, 0.94))
            else:
                targets[key] = float(rng.uniform(0.96, 1.0))
        specs.append(
            standard_spec(noise_sd=noise_sd, seed=int(rng.integers(0, 2**31)), targets=targets)
        )
    return specs
