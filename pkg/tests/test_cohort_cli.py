import csv
import json
import logging

import numpy as np
import pytest

from sinus_analysis import cohort, nifti_io
from sinus_analysis.augment import ElasticParams, elastic_deform, horizontal_flip
from sinus_analysis.cli import main
from sinus_analysis.phantom import EllipsoidSpec, PhantomSpec, standard_spec
from sinus_analysis.schema import sinus_sides

import oracles
from conftest import random_spec


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_specs(directory, specs):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, spec in specs.items():
        p = directory / f"{name}.json"
        p.write_text(spec.to_json())
        paths.append(p)
    return paths


@pytest.fixture
def small_cohort(tmp_path):
    """Three small noise-free phantoms written through the CLI."""
    rng = np.random.default_rng(42)
    specs = {f"sub{i}": random_spec(rng) for i in range(3)}
    out = tmp_path / "ph"
    for p in write_specs(tmp_path / "specs", specs):
        assert main(["phantom", "--spec", str(p), "--out", str(out)]) == 0
    return out, specs


def test_analyze_rows_and_determinism(small_cohort, tmp_path):
    ph, _ = small_cohort
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["analyze", "--images", str(ph / "images"), "--masks", str(ph / "masks"), "--out", str(a)]) == 0
    assert main(["analyze", "--images", str(ph / "images"), "--masks", str(ph / "masks"), "--out", str(b), "--jobs", "2"]) == 0
    rows = read_csv(a / "cohort.csv")
    assert sum(r["row_type"] == "sinus" for r in rows) == 3 * 8
    assert sum(r["row_type"] == "union" for r in rows) == 3 * 3
    assert tree_bytes(a) == tree_bytes(b)
    assert sorted(p.name for p in (a / "subjects").iterdir()) == ["sub0.json", "sub1.json", "sub2.json"]
    # subject totals consistent with row grades
    for sid in ("sub0", "sub1", "sub2"):
        srows = [r for r in rows if r["subject_id"] == sid and r["row_type"] == "sinus"]
        assert sum(int(r["weighted_grade"]) for r in srows) == int(srows[0]["subject_total"])
        assert all(r["mask_path"].endswith(f"{sid}.nii.gz") for r in srows)


def test_analyze_reproduces_ground_truth(small_cohort, tmp_path):
    ph, specs = small_cohort
    out = tmp_path / "an"
    main(["analyze", "--images", str(ph / "images"), "--masks", str(ph / "masks"), "--out", str(out)])
    for sid in specs:
        truth = json.loads((ph / "truth" / f"{sid}.json").read_text())
        feats = json.loads((out / "subjects" / f"{sid}.json").read_text())["features"]
        for f in feats["structures"]:
            c = str(f["code"])
            assert f["voxel_count"] == truth["voxel_counts"][c]
            assert f["bbox"] == truth["bboxes"][c]
            assert f["component_count"] == truth["component_counts"][c]
            if f["voxel_count"]:
                band = truth["band_means"]["air" if f["code"] <= 8 else "soft_tissue"]
                assert f["intensity_mean"] == band


def test_partial_failure_exit_code(small_cohort, tmp_path):
    ph, _ = small_cohort
    (ph / "masks" / "sub1.nii.gz").write_bytes(b"not a nifti file")
    out = tmp_path / "an"
    assert main(["analyze", "--images", str(ph / "images"), "--masks", str(ph / "masks"), "--out", str(out)]) == 1
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["succeeded"] == ["sub0", "sub2"]
    assert "sub1" in summary["failed"]
    assert {r["subject_id"] for r in read_csv(out / "cohort.csv")} == {"sub0", "sub2"}


def test_usage_errors(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["analyze", "--images", str(empty), "--masks", str(empty), "--out", str(tmp_path / "o")]) == 2
    assert main(["analyze", "--images", str(tmp_path / "nope"), "--masks", str(empty), "--out", str(tmp_path / "o")]) == 2
    amb = tmp_path / "amb"
    amb.mkdir()
    (amb / "x.nii").write_bytes(b"")
    (amb / "x.nii.gz").write_bytes(b"")
    assert main(["analyze", "--images", str(amb), "--masks", str(amb), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["analyze"])
    assert exc.value.code == 2


def test_remap_applied_at_ingestion(tmp_path):
    lab = np.zeros((6, 6, 6), np.uint8)
    lab[1:3, 1:3, 1:3] = 30  # external code
    d = tmp_path / "m"
    d.mkdir()
    nifti_io.write_nifti(nifti_io.VolumeImage(voxels=lab), d / "s.nii")
    nifti_io.write_nifti(nifti_io.VolumeImage(voxels=lab.astype(np.float32)), tmp_path / "s.nii")
    imgs = tmp_path / "i"
    imgs.mkdir()
    (tmp_path / "s.nii").rename(imgs / "s.nii")
    remap = tmp_path / "remap.csv"
    remap.write_text("external,schema\n30,3\n")
    out = tmp_path / "o"
    assert main(["analyze", "--images", str(imgs), "--masks", str(d), "--out", str(out)]) == 1
    assert main(["analyze", "--images", str(imgs), "--masks", str(d), "--out", str(out), "--remap", str(remap)]) == 0
    row = next(r for r in read_csv(out / "cohort.csv") if r["sinus"] == "frontal" and r["side"] == "right")
    assert float(row["air_volume_mm3"]) == 8.0 and row["remap"] == "yes"


def test_evaluate_identity_flip_and_aggregate(small_cohort, tmp_path):
    ph, _ = small_cohort
    out = tmp_path / "ev"
    assert main(["evaluate", "--pred", str(ph / "masks"), "--ref", str(ph / "masks"), "--out", str(out)]) == 0
    for r in read_csv(out / "per_subject.csv"):
        if int(r["ref_voxels"]):
            assert float(r["dsc"]) == 1.0 and float(r["assd_mm"]) == 0.0
    table = {r["structure"]: r for r in read_csv(out / "table.csv")}
    assert float(table["Average (overall)"]["dsc_mean"]) == 1.0


def test_evaluate_standard_phantom_vs_flip(tmp_path, standard_clean):
    img, lm, _ = standard_clean
    ref, pred = tmp_path / "ref", tmp_path / "pred"
    ref.mkdir()
    pred.mkdir()
    nifti_io.write_nifti(lm, ref / "std.nii.gz")
    nifti_io.write_nifti(horizontal_flip(img, lm)[1], pred / "std.nii.gz")
    nifti_io.write_nifti(lm, pred / "extra.nii.gz")
    out = tmp_path / "ev"
    assert main(["evaluate", "--pred", str(pred), "--ref", str(ref), "--out", str(out)]) == 1
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["unpaired"]["pred"] == ["extra"]
    table = {r["structure"]: r for r in read_csv(out / "table.csv")}
    assert float(table["A. maxillaris"]["dsc_mean"]) < 0.05
    assert float(table["ST. maxillaris"]["dsc_mean"]) < 0.05


def test_evaluate_sd_matches_offline_recomputation(tmp_path):
    rng = np.random.default_rng(8)
    ref, pred = tmp_path / "ref", tmp_path / "pred"
    ref.mkdir()
    pred.mkdir()
    for i in range(4):
        r = rng.integers(0, 17, size=(7, 7, 7)).astype(np.uint8)
        p = np.where(rng.random(r.shape) < 0.25, 0, r).astype(np.uint8)
        nifti_io.write_nifti(nifti_io.LabelMap(labels=r), ref / f"s{i}.nii")
        nifti_io.write_nifti(nifti_io.LabelMap(labels=p), pred / f"s{i}.nii")
    out = tmp_path / "ev"
    assert main(["evaluate", "--pred", str(pred), "--ref", str(ref), "--out", str(out)]) == 0
    rows = read_csv(out / "per_subject.csv")
    table = {r["structure"]: r for r in read_csv(out / "table.csv")}
    soft = [float(r["assd_mm"]) if r["assd_mm"] else None for r in rows if int(r["code"]) >= 9]
    mean, sd, n = oracles.population_summary(soft)
    assert float(table["Average (Soft Tissue)"]["assd_mean"]) == pytest.approx(mean, abs=1e-12)
    assert float(table["Average (Soft Tissue)"]["assd_sd"]) == pytest.approx(sd, abs=1e-12)


def _cohort_csv(tmp_path, volumes_by_subject):
    rows = []
    for sid, vols in volumes_by_subject.items():
        for (sinus, side) in sinus_sides():
            air, soft = vols.get((sinus.value, side.value), (1000.0, 0.0))
            rows.append(
                {"row_type": "sinus", "subject_id": sid, "sinus": sinus.value, "side": side.value,
                 "air_volume_mm3": air, "soft_volume_mm3": soft, "air_intensity_mean": 40.0,
                 "soft_intensity_mean": 190.0 if soft else None}
            )
    p = tmp_path / "cohort.csv"
    cohort.write_csv(p, rows, cohort.COHORT_COLUMNS)
    return p


def test_score_all_aerated(tmp_path):
    p = _cohort_csv(tmp_path, {f"s{i}": {} for i in range(5)})
    out = tmp_path / "sc"
    assert main(["score", "--cohort", str(p), "--out", str(out)]) == 0
    hist = read_csv(out / "histogram.csv")
    assert len(hist) == 25
    assert hist[0]["count"] == "5" and float(hist[0]["percent"]) == 100.0
    assert all(h["count"] == "0" for h in hist[1:])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["normal_reference_mean"] == 4.3


def test_score_standard_phantom_cohort(tmp_path):
    specs = {f"std{i}": standard_spec(seed=i) for i in range(3)}
    ph = tmp_path / "ph"
    for p in write_specs(tmp_path / "specs", specs):
        assert main(["phantom", "--spec", str(p), "--out", str(ph)]) == 0
    an, sc = tmp_path / "an", tmp_path / "sc"
    assert main(["analyze", "--images", str(ph / "images"), "--masks", str(ph / "masks"), "--out", str(an)]) == 0
    assert main(["score", "--cohort", str(an), "--out", str(sc)]) == 0
    totals = read_csv(sc / "totals.csv")
    assert [(t["right_total"], t["left_total"], t["total"]) for t in totals] == [("6", "4", "10")] * 3


def test_report_join(tmp_path, caplog):
    p = _cohort_csv(tmp_path, {"a": {("maxillary", "right"): (500.0, 500.0)}, "b": {}, "c": {}})
    reports = tmp_path / "reports.csv"
    reports.write_text(
        "subject_id,sinus,side,health_label\n"
        "a,maxillary,right,not_healthy\n"
        "a,maxillary,left,healthy\n"
        "b,frontal,,healthy\n"
        "c,maxillary,left,technical\n"
        "ghost,maxillary,left,healthy\n"
    )
    out = tmp_path / "sc"
    with caplog.at_level(logging.INFO):
        assert main(["score", "--cohort", str(p), "--out", str(out), "--reports", str(reports)]) == 0
    assert any("c excluded" in m and "technical" in m for m in caplog.messages)
    join = read_csv(out / "report_join.csv")
    status = {(r["subject_id"], r["sinus"], r["side"]): r["status"] for r in join}
    assert status[("a", "maxillary", "right")] == "ok"
    assert status[("b", "frontal", "left")] == "ok" and status[("b", "frontal", "right")] == "ok"
    assert status[("b", "sphenoid", "left")] == "no_report"
    assert all(v == "excluded_technical" for k, v in status.items() if k[0] == "c")
    assert status[("ghost", "maxillary", "left")] == "no_features"
    scatter = read_csv(out / "scatter.csv")
    assert {r["subject_id"] for r in scatter} == {"a", "b"}
    assert len(scatter) == 4
    row = next(r for r in scatter if r["side"] == "right" and r["subject_id"] == "a")
    assert (row["health_label"], float(row["soft_volume_mm3"])) == ("not_healthy", 500.0)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["report_join"]["excluded_technical"] == ["c"]


def test_malformed_reports(tmp_path):
    p = _cohort_csv(tmp_path, {"a": {}})
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,sinus,side,health_label\na,maxillary,right,sick\n")
    assert main(["score", "--cohort", str(p), "--out", str(tmp_path / "o"), "--reports", str(bad)]) == 2
    bad.write_text("subject,label\na,healthy\n")
    assert main(["score", "--cohort", str(p), "--out", str(tmp_path / "o"), "--reports", str(bad)]) == 2


def test_augment_manifest_and_reproduction(tmp_path):
    rng = np.random.default_rng(3)
    specs = {"p0": random_spec(rng, noise_sd=2.0), "p1": random_spec(rng, noise_sd=2.0)}
    ph = tmp_path / "ph"
    for p in write_specs(tmp_path / "specs", specs):
        main(["phantom", "--spec", str(p), "--out", str(ph)])
    out = tmp_path / "aug"
    args = ["augment", "--images", str(ph / "images"), "--masks", str(ph / "masks"), "--out", str(out),
            "--factor", "10", "--seed", "4", "--control-spacing", "10", "--max-displacement", "2"]
    assert main(args) == 0
    manifest = read_csv(out / "manifest.csv")
    assert len(manifest) == 20
    assert len(list((out / "images").iterdir())) == len(list((out / "masks").iterdir())) == 20
    row = next(r for r in manifest if r["subject_id"] == "p1" and r["transform"] == "flip_elastic")
    img = nifti_io.load(ph / "images" / "p1.nii.gz")
    lm = nifti_io.load_labelmap(ph / "masks" / "p1.nii.gz")
    params = ElasticParams(control_spacing_mm=10, max_displacement_mm=2, seed=int(row["seed"]))
    w_img, w_lm = elastic_deform(*horizontal_flip(img, lm), params)
    assert np.array_equal(nifti_io.load(out / row["image_path"]).voxels, w_img.voxels)
    assert np.array_equal(nifti_io.load_labelmap(out / row["mask_path"]).labels, w_lm.labels)


def test_phantom_default_and_overlap(tmp_path):
    out = tmp_path / "ph"
    assert main(["phantom", "--out", str(out)]) == 0
    assert (out / "images" / "standard.nii.gz").is_file()
    truth = json.loads((out / "truth" / "standard.json").read_text())
    assert truth["voxel_counts"]["1"] > 0
    e1 = EllipsoidSpec("maxillary", "right", (10, 10, 10), (4, 4, 4))
    e2 = EllipsoidSpec("maxillary", "left", (12, 10, 10), (4, 4, 4))
    bad = tmp_path / "bad.json"
    bad.write_text(PhantomSpec(dims=(24, 24, 24), structures=(e1, e2)).to_json())
    assert main(["phantom", "--spec", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["phantom", "--out", str(tmp_path / "c"), "--count", "3", "--seed", "1"]) == 0
    assert len(list((tmp_path / "c" / "masks").iterdir())) == 3


def test_schema_command(tmp_path, capsys):
    assert main(["schema"]) == 0
    table = json.loads(capsys.readouterr().out)
    assert len(table) == 16 and table[0]["flip_code"] == 2
    assert main(["schema", "--out", str(tmp_path / "s.json")]) == 0
    assert json.loads((tmp_path / "s.json").read_text()) == table
