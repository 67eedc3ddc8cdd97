"""Acceptance criteria 1-9; run with ``pytest tests/test_acceptance.py``."""

import csv
import itertools
import json
import time
from pathlib import Path

import nibabel as nib
import numpy as np
import pytest

from sinus_analysis import cohort, nifti_io
from sinus_analysis.augment import ElasticParams, elastic_deform, horizontal_flip
from sinus_analysis.features import extract_subject
from sinus_analysis.metrics import assd, dice
from sinus_analysis.nifti_io import DATATYPES, VolumeImage, data_section, encode_nifti, read_nifti
from sinus_analysis.phantom import STANDARD_LMS_TOTAL, generate, standard_spec
from sinus_analysis.schema import AIR_CODES, SOFT_CODES, Side, Sinus, flip_code, sinus_sides
from sinus_analysis.scoring import assess_volumes, lms_grade, modified_lms, weighted_total

import oracles
from conftest import random_spec


def _random_phantoms(n, seed, noise_sd=0.0):
    rng = np.random.default_rng(seed)
    return [generate(random_spec(rng, noise_sd=noise_sd)) for _ in range(n)]


@pytest.mark.criterion(1, "metric oracle equivalence (200 volumes <= 8^3, dice exact, assd 1e-9, < 10 s)")
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=3))
        density = rng.uniform(0.05, 0.6)
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5, 2.0], size=3))
        pred = np.where(rng.random(shape) < density, rng.integers(1, 4, size=shape), 0)
        ref = np.where(rng.random(shape) < density, rng.integers(1, 4, size=shape), 0)
        cases.append((pred, ref, spacing))

    t0 = time.perf_counter()
    ours = [
        [(dice(p == c, r == c), assd(p == c, r == c, sp)) for c in (1, 2, 3)] for p, r, sp in cases
    ]
    elapsed = time.perf_counter() - t0

    compared = 0
    for (p, r, sp), got in zip(cases, ours):
        for c, (d, s) in zip((1, 2, 3), got):
            assert d == oracles.dice(p == c, r == c)
            ref_s = oracles.assd(p == c, r == c, sp)
            if ref_s is None:
                assert s is None
            else:
                assert abs(s - ref_s) <= 1e-9
                compared += 1
    assert compared > 300
    assert elapsed < 10.0, f"metrics took {elapsed:.2f} s"


@pytest.mark.criterion(2, "LMS closure on the standard phantom and the threshold sweep")
def test_lms_formula_closure(standard):
    img, lm, _ = standard
    report = modified_lms(extract_subject(img, lm, "standard"))
    assert report.total == STANDARD_LMS_TOTAL == 10
    assert report.per_side_totals == {Side.RIGHT: 6, Side.LEFT: 4}

    sweep = [0.00, 0.049, 0.05, 0.50, 0.95, 0.951, 1.00]
    expected = [0, 0, 1, 1, 1, 2, 2]
    assert [lms_grade(f) for f in sweep] == expected
    key = (Sinus.FRONTAL, Side.LEFT)
    grades = []
    for f in sweep:
        soft = round(f * 1000)
        vols = {k: (1000.0, 0.0) for k in sinus_sides()}
        vols[key] = (1000.0 - soft, float(soft))
        grades.append(assess_volumes(vols).per_side_sinus[key].grade)
    assert grades == expected


@pytest.mark.criterion(3, "exhaustive 3^8 grade enumeration: total in [0, 24], flip symmetric")
def test_maximum_score_bound():
    keys = list(sinus_sides())
    seen = set()
    for grades in itertools.product((0, 1, 2), repeat=8):
        g = dict(zip(keys, grades))
        total = weighted_total(g)
        manual = sum(v * (3 if s is Sinus.ETHMOID else 1) for (s, _), v in g.items())
        assert total == manual and 0 <= total <= 24
        assert weighted_total({(s, side.opposite): v for (s, side), v in g.items()}) == total
        seen.add(total)
    assert min(seen) == 0 and max(seen) == 24


@pytest.mark.criterion(4, "feature exactness on noise-free phantoms, noisy means within 3 SD / sqrt(n)")
def test_feature_exactness(standard_clean):
    clean = [standard_clean] + _random_phantoms(8, seed=77)
    for img, lm, truth in clean:
        sf = extract_subject(img, lm)
        for code in range(1, 17):
            f = sf.per_code[code]
            assert f.voxel_count == truth.voxel_counts[code]
            assert f.volume_mm3 == truth.volume_mm3(code)
            assert f.bbox == truth.bboxes[code]
            assert f.component_count == truth.component_counts[code]
            if f.voxel_count:
                band = truth.band_means["air" if code in AIR_CODES else "soft_tissue"]
                assert f.intensity_mean == band
                assert f.intensity_sd == 0.0

    noisy = [(generate(standard_spec(noise_sd=8.0)), 8.0)]
    noisy += [(p, 6.0) for p in _random_phantoms(8, seed=78, noise_sd=6.0)]
    for (img, lm, truth), spec_sd in noisy:
        sf = extract_subject(img, lm)
        for code in range(1, 17):
            f = sf.per_code[code]
            if not f.voxel_count:
                continue
            band = truth.band_means["air" if code in AIR_CODES else "soft_tissue"]
            assert abs(f.intensity_mean - band) <= 3 * spec_sd / np.sqrt(f.voxel_count)


@pytest.mark.criterion(5, "flip involution on 50 random phantoms, histograms permuted by flip_code")
def test_flip_involution():
    for img, lm, _ in _random_phantoms(50, seed=5, noise_sd=4.0):
        f_img, f_lm = horizontal_flip(img, lm)
        b_img, b_lm = horizontal_flip(f_img, f_lm)
        assert b_img.voxels.tobytes() == img.voxels.tobytes() and b_img.voxels.dtype == img.voxels.dtype
        assert b_lm.labels.tobytes() == lm.labels.tobytes() and b_lm.labels.dtype == lm.labels.dtype
        assert (b_img.spacing, b_img.origin, b_lm.orientation) == (img.spacing, img.origin, lm.orientation)
        h0 = np.bincount(lm.labels.ravel(), minlength=17)
        h1 = np.bincount(f_lm.labels.ravel(), minlength=17)
        assert h1[0] == h0[0]
        assert all(h1[flip_code(c)] == h0[c] for c in range(1, 17))


@pytest.mark.criterion(6, "elastic determinism, zero-magnitude identity, label subset")
def test_elastic_determinism_and_safety(standard):
    phantoms = [standard[:2]] + [p[:2] for p in _random_phantoms(6, seed=6, noise_sd=3.0)]
    for i, (img, lm) in enumerate(phantoms):
        spacing = 32.0 if i == 0 else 10.0
        for seed in (0, 1):
            p = ElasticParams(control_spacing_mm=spacing, max_displacement_mm=3.0, seed=seed)
            a_img, a_lm = elastic_deform(img, lm, p)
            b_img, b_lm = elastic_deform(img, lm, p)
            assert a_img.voxels.tobytes() == b_img.voxels.tobytes()
            assert a_lm.labels.tobytes() == b_lm.labels.tobytes()
            assert set(np.unique(a_lm.labels)) <= set(np.unique(lm.labels))
        z_img, z_lm = elastic_deform(img, lm, ElasticParams(max_displacement_mm=0.0, seed=3))
        assert z_img.voxels.tobytes() == img.voxels.tobytes()
        assert z_lm.labels.tobytes() == lm.labels.tobytes()


@pytest.mark.criterion(7, "I/O round trip for every datatype and endianness; third-party file loads")
def test_io_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    for dtype in map(np.dtype, DATATYPES.values()):
        if dtype.kind == "f":
            arr = rng.normal(size=(5, 4, 3)).astype(dtype)
        else:
            info = np.iinfo(dtype)
            arr = rng.integers(info.min, info.max, size=(5, 4, 3), endpoint=True, dtype=dtype)
        img = VolumeImage(voxels=arr, spacing=(0.7, 0.8, 0.9))
        for endian in ("<", ">"):
            blob = encode_nifti(img, endian=endian)
            back = read_nifti(blob)
            assert back.voxels.dtype == dtype
            assert back.voxels.tobytes() == arr.tobytes()
            assert data_section(encode_nifti(back, endian=endian)) == data_section(blob)
            assert data_section(blob) == arr.astype(dtype.newbyteorder(endian)).tobytes(order="F")

    arr = np.arange(7 * 6 * 5, dtype=np.int16).reshape(7, 6, 5)
    path = tmp_path / "third_party.nii.gz"
    nib.save(nib.Nifti1Image(arr, np.diag([0.6, 0.75, 1.2, 1.0])), str(path))
    loaded = nifti_io.load(path)
    assert loaded.dims == (7, 6, 5)
    assert loaded.spacing == pytest.approx((0.6, 0.75, 1.2), abs=1e-6)
    assert loaded.voxels.tobytes() == arr.tobytes()


@pytest.mark.criterion(8, "intensity separability: every air mean below every soft-tissue mean")
def test_intensity_separability(standard):
    phantoms = [standard] + _random_phantoms(10, seed=8, noise_sd=10.0)
    for img, lm, _ in phantoms:
        sf = extract_subject(img, lm)
        air = [sf.per_code[c].intensity_mean for c in AIR_CODES if sf.per_code[c].voxel_count]
        soft = [sf.per_code[c].intensity_mean for c in SOFT_CODES if sf.per_code[c].voxel_count]
        assert air and soft
        assert max(air) < min(soft)


def _pipeline(root):
    ph, an, sc = root / "phantoms", root / "analysis", root / "scores"
    cohort.phantoms(ph, count=20, seed=9)
    res = cohort.analyze(ph / "images", ph / "masks", an)
    assert res.exit_code == 0 and len(res.ok) == 20
    res = cohort.score(an / "cohort.csv", sc)
    assert res.exit_code == 0 and len(res.ok) == 20
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix in (".csv", ".json")
    }


@pytest.mark.criterion(9, "20-subject cohort phantom -> analyze -> score -> histogram, < 60 s, deterministic")
def test_cohort_pipeline_end_to_end(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    t0 = time.perf_counter()
    first = _pipeline(Path("run"))
    elapsed = time.perf_counter() - t0
    # relative paths keep provenance columns identical between the two runs
    second_root = tmp_path / "again"
    second_root.mkdir()
    monkeypatch.chdir(second_root)
    second = _pipeline(Path("run"))
    assert elapsed < 60.0, f"pipeline took {elapsed:.1f} s"
    assert first == second
    with open(tmp_path / "run" / "scores" / "histogram.csv", newline="") as fh:
        hist = list(csv.DictReader(fh))
    assert [int(h["score"]) for h in hist] == list(range(25))
    assert sum(int(h["count"]) for h in hist) == 20
    assert sum(float(h["percent"]) for h in hist) == pytest.approx(100.0)
    summary = json.loads((tmp_path / "run" / "scores" / "summary.json").read_text())
    assert summary["normal_reference_mean"] == 4.3 and summary["n_subjects"] == 20
