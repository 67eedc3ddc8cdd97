"""Directory-level batch runs: analyze, evaluate, score, augment, phantom.

Subjects are paired across directories by file stem (the name without
``.nii`` / ``.nii.gz``).  Every run processes subjects independently, sorts
results by subject id and writes each output file atomically, so reruns
with the same inputs produce byte-identical outputs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import metrics, nifti_io
from .augment import ElasticParams, augment_pair
from .features import DEFAULT_CONNECTIVITY, StructureFeatures, extract_subject
from .phantom import PhantomSpec, cohort_specs, generate, standard_spec
from .schema import Side, Sinus, Tissue, code_of, load_remap, sinus_sides
from .scoring import (
    MAX_TOTAL,
    NORMAL_LMS_MEAN,
    ReferenceVolumes,
    assess_volumes,
    modified_lms,
)

logger = logging.getLogger(__name__)

NIFTI_SUFFIXES = (".nii.gz", ".nii")
HEALTH_LABELS = ("healthy", "not_healthy", "technical")


class CohortError(Exception):
    """Configuration or usage problem; maps to exit code 2."""


@dataclass
class RunResult:
    ok: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, Path] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0

    def to_dict(self) -> dict:
        return {
            "succeeded": sorted(self.ok),
            "failed": {k: self.failures[k] for k in sorted(self.failures)},
            "n_succeeded": len(self.ok),
            "n_failed": len(self.failures),
        }


# ------------------------------------------------------------------ files


def subject_stem(path: str | os.PathLike) -> str | None:
    name = Path(path).name
    for suffix in NIFTI_SUFFIXES:
        if name.endswith(suffix) and len(name) > len(suffix):
            return name[: -len(suffix)]
    return None


def scan_dir(directory: str | os.PathLike) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CohortError(f"not a directory: {directory}")
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        stem = subject_stem(p)
        if stem is None or not p.is_file():
            continue
        if stem in found:
            raise CohortError(f"ambiguous subject {stem!r}: {found[stem].name} and {p.name}")
        found[stem] = p
    return found


def pair_dirs(a: str | os.PathLike, b: str | os.PathLike):
    """Return ``(pairs, only_a, only_b)`` with pairs sorted by stem."""
    fa, fb = scan_dir(a), scan_dir(b)
    pairs = [(s, fa[s], fb[s]) for s in sorted(fa.keys() & fb.keys())]
    return pairs, sorted(fa.keys() - fb.keys()), sorted(fb.keys() - fa.keys())


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_csv(path: Path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in columns})
    atomic_write_text(path, buf.getvalue())


def write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _run(fn: Callable, jobs: list[tuple], n_workers: int) -> list:
    """Apply ``fn(*args)`` to every job; results keep the job order."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [_guard(fn, args) for args in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(_guard, fn, args) for args in jobs]
        return [f.result() for f in futures]


def _guard(fn, args):
    try:
        return True, fn(*args)
    except Exception as exc:  # recorded per subject, never fatal for the run
        return False, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------- analyze

_PARTS = ("volume_mm3", "intensity_mean", "intensity_sd", "depth_mm", "width_mm", "height_mm", "component_count")

COHORT_COLUMNS = (
    ["row_type", "subject_id", "sinus", "side"]
    + [f"{t}_{p}" for t in ("air", "soft") for p in _PARTS]
    + ["total_volume_mm3", "opacification", "grade", "weighted_grade", "aplasia", "hypoplasia"]
    + ["side_total", "subject_total"]
    + [f"union_{p}" for p in _PARTS]
    + ["mask_path", "image_path", "remap"]
)


def _part(f: StructureFeatures, p: str):
    return getattr(f, p)


def analyze_subject(
    subject_id: str,
    image_path: str | None,
    mask_path: str,
    remap: dict[int, int] | None,
    reference: dict,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> dict:
    """Features + scores for one subject, as plain data (picklable)."""
    lm = nifti_io.load_labelmap(mask_path, remap=remap)
    img = nifti_io.load(image_path) if image_path else None
    sf = extract_subject(img, lm, subject_id, connectivity=connectivity)
    sf.provenance = {
        "mask_path": str(mask_path),
        "image_path": "" if image_path is None else str(image_path),
        "remap": "yes" if remap else "no",
    }
    lms = modified_lms(sf, ReferenceVolumes(reference))
    rows = []
    totals = lms.per_side_totals
    for sinus, side in sinus_sides():
        a = lms.per_side_sinus[(sinus, side)]
        air = sf.per_code[code_of(sinus, side, Tissue.AIR)]
        soft = sf.per_code[code_of(sinus, side, Tissue.SOFT_TISSUE)]
        row = {"row_type": "sinus", "subject_id": subject_id, "sinus": sinus.value, "side": side.value}
        for prefix, f in (("air", air), ("soft", soft)):
            for p in _PARTS:
                row[f"{prefix}_{p}"] = _part(f, p)
        row.update(
            total_volume_mm3=a.total_mm3,
            opacification=a.opacification,
            grade=a.grade,
            weighted_grade=a.weighted_grade,
            aplasia=a.aplasia,
            hypoplasia=a.hypoplasia,
            side_total=totals[side],
            subject_total=lms.total,
            **sf.provenance,
        )
        rows.append(row)
    for name, f in sf.unions.items():
        row = {"row_type": "union", "subject_id": subject_id, "sinus": name, "side": ""}
        for p in _PARTS:
            row[f"union_{p}"] = _part(f, p)
        row["subject_total"] = lms.total
        row.update(sf.provenance)
        rows.append(row)
    return {
        "subject_id": subject_id,
        "features": sf.to_dict(),
        "feature_rows": sf.rows(),
        "lms": lms.to_dict(),
        "cohort_rows": rows,
    }


def analyze(
    image_dir: str | os.PathLike,
    mask_dir: str | os.PathLike,
    out: str | os.PathLike,
    remap: str | os.PathLike | None = None,
    reference_volumes: str | os.PathLike | None = None,
    jobs: int = 1,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> RunResult:
    from .features import FEATURE_COLUMNS

    out = Path(out)
    mapping = load_remap(remap) if remap else None
    reference = ReferenceVolumes.from_json(reference_volumes) if reference_volumes else ReferenceVolumes()
    pairs, only_img, only_mask = pair_dirs(image_dir, mask_dir)
    if not pairs and not only_img and not only_mask:
        raise CohortError(f"no NIfTI files found in {image_dir} / {mask_dir}")

    result = RunResult()
    for s in only_img:
        result.failures[s] = "image without matching mask"
    for s in only_mask:
        result.failures[s] = "mask without matching image"

    ref_plain = reference.to_dict()
    job_args = [(s, str(i), str(m), mapping, ref_plain, connectivity) for s, i, m in pairs]
    cohort_rows, feature_rows = [], []
    for (s, _, _), (ok, value) in zip(pairs, _run(analyze_subject, job_args, jobs)):
        if not ok:
            logger.error("subject %s failed: %s", s, value)
            result.failures[s] = value
            continue
        result.ok.append(s)
        write_json(out / "subjects" / f"{s}.json", {k: value[k] for k in ("subject_id", "features", "lms")})
        cohort_rows.extend(value["cohort_rows"])
        feature_rows.extend(value["feature_rows"])

    write_csv(out / "cohort.csv", cohort_rows, COHORT_COLUMNS)
    write_csv(out / "features.csv", feature_rows, FEATURE_COLUMNS)
    write_json(out / "run_summary.json", {"command": "analyze", "reference_volumes": ref_plain, **result.to_dict()})
    result.outputs = {"cohort": out / "cohort.csv", "features": out / "features.csv"}
    return result


# --------------------------------------------------------------- evaluate


def evaluate_subject(subject_id: str, pred_path: str, ref_path: str, remap) -> dict:
    pred = nifti_io.load_labelmap(pred_path, remap=remap)
    ref = nifti_io.load_labelmap(ref_path)
    return metrics.evaluate(pred, ref, subject_id=subject_id).to_dict()


def _report_from_dict(d: dict) -> metrics.SegmentationReport:
    per_code = {
        e["code"]: metrics.CodeMetrics(e["code"], e["dsc"], e["assd_mm"], e["pred_voxels"], e["ref_voxels"])
        for e in d["per_code"]
    }
    return metrics.SegmentationReport(per_code, subject_id=d["subject_id"])


TABLE_COLUMNS = [
    "structure",
    "dsc",
    "assd_mm",
    "dsc_mean",
    "dsc_sd",
    "dsc_n",
    "dsc_excluded",
    "assd_mean",
    "assd_sd",
    "assd_n",
    "assd_excluded",
]
PER_SUBJECT_COLUMNS = ["subject_id", "code", "structure", "dsc", "assd_mm", "pred_voxels", "ref_voxels", "flags"]


def evaluate(
    pred_dir: str | os.PathLike,
    ref_dir: str | os.PathLike,
    out: str | os.PathLike,
    remap: str | os.PathLike | None = None,
    jobs: int = 1,
) -> RunResult:
    out = Path(out)
    mapping = load_remap(remap) if remap else None
    pairs, only_pred, only_ref = pair_dirs(pred_dir, ref_dir)
    if not pairs and not only_pred and not only_ref:
        raise CohortError(f"no NIfTI files found in {pred_dir} / {ref_dir}")
    result = RunResult()
    for s in only_pred:
        result.failures[s] = "prediction without matching reference"
    for s in only_ref:
        result.failures[s] = "reference without matching prediction"

    reports, rows = [], []
    job_args = [(s, str(p), str(r), mapping) for s, p, r in pairs]
    for (s, _, _), (ok, value) in zip(pairs, _run(evaluate_subject, job_args, jobs)):
        if not ok:
            logger.error("subject %s failed: %s", s, value)
            result.failures[s] = value
            continue
        result.ok.append(s)
        write_json(out / "subjects" / f"{s}.json", value)
        reports.append(_report_from_dict(value))
        for e in value["per_code"]:
            rows.append({"subject_id": s, **e, "flags": ";".join(e["flags"])})

    write_csv(out / "per_subject.csv", rows, PER_SUBJECT_COLUMNS)
    write_csv(out / "table.csv", metrics.cohort_table(reports), TABLE_COLUMNS)
    write_json(
        out / "run_summary.json",
        {"command": "evaluate", "unpaired": {"pred": only_pred, "ref": only_ref}, **result.to_dict()},
    )
    result.outputs = {"table": out / "table.csv", "per_subject": out / "per_subject.csv"}
    return result


# ------------------------------------------------------------------ score


def _float(v: str) -> float | None:
    return None if v in ("", None) else float(v)


def read_cohort(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "cohort.csv"
    if not path.is_file():
        raise CohortError(f"cohort table not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"row_type", "subject_id", "sinus", "side", "air_volume_mm3", "soft_volume_mm3"} - set(
        rows[0].keys() if rows else COHORT_COLUMNS
    )
    if missing:
        raise CohortError(f"{path}: missing columns {sorted(missing)}")
    return rows


def read_reports(path: str | os.PathLike) -> list[dict]:
    """Parse a report CSV (subject_id, sinus, side, health_label).

    ``side`` may be empty, meaning the label applies to both sides.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"subject_id", "sinus", "side", "health_label"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise ValueError(f"{path}: report CSV needs columns {sorted(needed)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            label = (row["health_label"] or "").strip()
            sinus = (row["sinus"] or "").strip()
            side = (row["side"] or "").strip()
            if label not in HEALTH_LABELS:
                raise ValueError(f"{path}:{lineno}: health_label {label!r} not in {HEALTH_LABELS}")
            try:
                Sinus(sinus)
                if side:
                    Side(side)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad sinus/side {sinus!r}/{side!r}") from None
            if not row["subject_id"]:
                raise ValueError(f"{path}:{lineno}: empty subject_id")
            rows.append({"subject_id": row["subject_id"].strip(), "sinus": sinus, "side": side, "health_label": label})
    return rows


def join_reports(cohort_rows: list[dict], reports: list[dict]):
    """Return ``(join_rows, scatter_rows)``.

    Subjects marked "technical" anywhere are excluded entirely; unmatched
    entries on either side are kept and flagged.
    """
    features = {(r["subject_id"], r["sinus"], r["side"]): r for r in cohort_rows if r["row_type"] == "sinus"}
    subjects = {k[0] for k in features}
    technical = {r["subject_id"] for r in reports if r["health_label"] == "technical"}
    labels: dict[tuple, str] = {}
    report_subjects = set()
    for r in reports:
        report_subjects.add(r["subject_id"])
        sides = [r["side"]] if r["side"] else [s.value for s in Side]
        for side in sides:
            labels[(r["subject_id"], r["sinus"], side)] = r["health_label"]

    join, scatter = [], []
    keys = sorted(set(features) | set(labels))
    for key in keys:
        subject, sinus, side = key
        f = features.get(key)
        label = labels.get(key, "")
        if subject in technical:
            status = "excluded_technical"
        elif f is None:
            status = "no_features"
        elif not label:
            status = "no_report"
        else:
            status = "ok"
        row = {
            "subject_id": subject,
            "sinus": sinus,
            "side": side,
            "health_label": label,
            "status": status,
            "air_volume_mm3": None if f is None else _float(f["air_volume_mm3"]),
            "soft_volume_mm3": None if f is None else _float(f["soft_volume_mm3"]),
            "air_intensity_mean": None if f is None else _float(f["air_intensity_mean"]),
            "soft_intensity_mean": None if f is None else _float(f["soft_intensity_mean"]),
        }
        join.append(row)
        if status == "ok":
            scatter.append(row)
    for s in sorted(technical):
        logger.info("subject %s excluded: report marked technical", s)
    for s in sorted(subjects - report_subjects):
        logger.info("subject %s has no report rows", s)
    return join, scatter


JOIN_COLUMNS = [
    "subject_id",
    "sinus",
    "side",
    "health_label",
    "status",
    "air_volume_mm3",
    "soft_volume_mm3",
    "air_intensity_mean",
    "soft_intensity_mean",
]


def lms_histogram(totals: Sequence[int]) -> list[dict]:
    counts = np.bincount(np.asarray(totals, dtype=int), minlength=MAX_TOTAL + 1)[: MAX_TOTAL + 1]
    n = len(totals)
    return [
        {"score": s, "count": int(c), "percent": (100.0 * int(c) / n) if n else 0.0}
        for s, c in enumerate(counts)
    ]


def score(
    cohort: str | os.PathLike,
    out: str | os.PathLike,
    reference_volumes: str | os.PathLike | None = None,
    reports: str | os.PathLike | None = None,
) -> RunResult:
    """Per-subject totals, the 0..24 distribution and an optional report join."""
    out = Path(out)
    rows = read_cohort(cohort)
    reference = ReferenceVolumes.from_json(reference_volumes) if reference_volumes else ReferenceVolumes()
    by_subject: dict[str, dict] = defaultdict(dict)
    for r in rows:
        if r["row_type"] != "sinus":
            continue
        key = (Sinus(r["sinus"]), Side(r["side"]))
        by_subject[r["subject_id"]][key] = (float(r["air_volume_mm3"]), float(r["soft_volume_mm3"]))
    if not by_subject:
        raise CohortError(f"cohort table {cohort} holds no sinus rows")

    result = RunResult()
    total_rows, lms_rows, totals = [], [], []
    for subject in sorted(by_subject):
        vols = by_subject[subject]
        if len(vols) != 8:
            result.failures[subject] = f"expected 8 sinus-side rows, found {len(vols)}"
            continue
        report = assess_volumes(vols, reference, subject_id=subject)
        side_totals = report.per_side_totals
        total_rows.append(
            {
                "subject_id": subject,
                "right_total": side_totals[Side.RIGHT],
                "left_total": side_totals[Side.LEFT],
                "total": report.total,
                "n_aplasia": sum(report.aplasia_flags.values()),
                "n_hypoplasia": sum(report.hypoplasia_flags.values()),
            }
        )
        lms_rows.extend(report.rows())
        totals.append(report.total)
        result.ok.append(subject)

    hist = lms_histogram(totals)
    write_csv(out / "totals.csv", total_rows, ["subject_id", "right_total", "left_total", "total", "n_aplasia", "n_hypoplasia"])
    write_csv(out / "lms.csv", lms_rows, ["subject_id", "sinus", "side", "opacification", "grade", "aplasia", "hypoplasia", "total"])
    write_csv(out / "histogram.csv", hist, ["score", "count", "percent"])
    arr = np.asarray(totals, dtype=float)
    summary = {
        "command": "score",
        "n_subjects": len(totals),
        "mean_total": float(arr.mean()) if arr.size else None,
        "sd_total": float(arr.std()) if arr.size else None,
        "median_total": float(np.median(arr)) if arr.size else None,
        "normal_reference_mean": NORMAL_LMS_MEAN,
        "n_above_normal_reference": int(np.sum(arr > NORMAL_LMS_MEAN)),
        "reference_volumes": reference.to_dict(),
        **result.to_dict(),
    }
    if reports:
        report_rows = read_reports(reports)
        join, scatter = join_reports(rows, report_rows)
        write_csv(out / "report_join.csv", join, JOIN_COLUMNS)
        write_csv(out / "scatter.csv", scatter, JOIN_COLUMNS)
        excluded = sorted({r["subject_id"] for r in join if r["status"] == "excluded_technical"})
        summary["report_join"] = {
            "excluded_technical": excluded,
            "n_scatter_rows": len(scatter),
            "n_no_report": sum(r["status"] == "no_report" for r in join),
            "n_no_features": sum(r["status"] == "no_features" for r in join),
        }
    write_json(out / "summary.json", summary)
    result.outputs = {"histogram": out / "histogram.csv", "totals": out / "totals.csv"}
    return result


# ---------------------------------------------------------------- augment

MANIFEST_COLUMNS = ["name", "subject_id", "transform", "seed", "image_path", "mask_path", "source_image", "source_mask"]


def augment_subject(subject_id, image_path, mask_path, out, factor, params_dict, seed) -> list[dict]:
    img = nifti_io.load(image_path)
    lm = nifti_io.load_labelmap(mask_path)
    out = Path(out)
    rows = []
    for pair in augment_pair(subject_id, img, lm, factor, ElasticParams(**params_dict), seed):
        ip = out / "images" / f"{pair.name}.nii.gz"
        mp = out / "masks" / f"{pair.name}.nii.gz"
        nifti_io.write_nifti(pair.image, ip)
        nifti_io.write_nifti(pair.labels, mp)
        rows.append(
            {
                "name": pair.name,
                "subject_id": subject_id,
                "transform": pair.transform,
                "seed": pair.seed,
                "image_path": f"images/{ip.name}",
                "mask_path": f"masks/{mp.name}",
                "source_image": str(image_path),
                "source_mask": str(mask_path),
            }
        )
    return rows


def augment(
    image_dir: str | os.PathLike,
    mask_dir: str | os.PathLike,
    out: str | os.PathLike,
    factor: int = 10,
    seed: int = 0,
    params: ElasticParams | None = None,
    jobs: int = 1,
) -> RunResult:
    if factor < 1:
        raise CohortError("--factor must be >= 1")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    params = ElasticParams() if params is None else params
    pd = {
        "control_spacing_mm": params.control_spacing_mm,
        "max_displacement_mm": params.max_displacement_mm,
        "smoothing_sigma_mm": params.smoothing_sigma_mm,
    }
    pairs, only_img, only_mask = pair_dirs(image_dir, mask_dir)
    if not pairs and not only_img and not only_mask:
        raise CohortError(f"no NIfTI files found in {image_dir} / {mask_dir}")
    result = RunResult()
    for s in only_img + only_mask:
        result.failures[s] = "unpaired file"
    manifest = []
    job_args = [(s, str(i), str(m), str(out), factor, pd, seed) for s, i, m in pairs]
    for (s, _, _), (ok, value) in zip(pairs, _run(augment_subject, job_args, jobs)):
        if not ok:
            logger.error("subject %s failed: %s", s, value)
            result.failures[s] = value
            continue
        result.ok.append(s)
        manifest.extend(value)
    write_csv(out / "manifest.csv", manifest, MANIFEST_COLUMNS)
    write_json(
        out / "run_summary.json",
        {"command": "augment", "factor": factor, "seed": seed, "elastic": pd, **result.to_dict()},
    )
    result.outputs = {"manifest": out / "manifest.csv"}
    return result


# ---------------------------------------------------------------- phantom


def write_phantom(spec: PhantomSpec, subject_id: str, out: Path) -> None:
    img, lm, truth = generate(spec)
    for sub in ("images", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    nifti_io.write_nifti(img, out / "images" / f"{subject_id}.nii.gz")
    nifti_io.write_nifti(lm, out / "masks" / f"{subject_id}.nii.gz")
    write_json(out / "truth" / f"{subject_id}.json", truth.to_dict())
    write_json(out / "specs" / f"{subject_id}.json", spec.to_dict())


def phantoms(
    out: str | os.PathLike,
    spec: str | os.PathLike | None = None,
    count: int = 1,
    seed: int = 0,
    noise_sd: float | None = None,
) -> RunResult:
    """Write phantoms: one from ``spec``, the standard fixture, or a cohort."""
    out = Path(out)
    if spec is not None:
        try:
            specs = {Path(spec).stem: PhantomSpec.from_json(spec)}
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise CohortError(f"cannot read phantom spec {spec}: {exc}") from exc
    elif count == 1:
        specs = {"standard": standard_spec() if noise_sd is None else standard_spec(noise_sd=noise_sd)}
    else:
        kwargs = {} if noise_sd is None else {"noise_sd": noise_sd}
        specs = {f"phantom_{i:03d}": s for i, s in enumerate(cohort_specs(count, seed, **kwargs))}
    result = RunResult()
    for subject_id, s in specs.items():
        write_phantom(s, subject_id, out)
        result.ok.append(subject_id)
    write_json(out / "run_summary.json", {"command": "phantom", **result.to_dict()})
    return result
