#!/usr/bin/env python3
"""Smoke test for the deploystat_py extension module.

Build the module first, then run this script from the repository root:

    cargo build -p deploystat-python
    python3 python/smoke_test.py
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / "debug" / "libdeploystat_py.so",
        REPO / "target" / "release" / "libdeploystat_py.so",
        REPO / "target" / "debug" / "libdeploystat_py.dylib",
        REPO / "target" / "release" / "libdeploystat_py.dylib",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("no built extension found; run `cargo build -p deploystat-python` first")
    stage = Path(tempfile.mkdtemp(prefix="deploystat_py_"))
    shutil.copy(built, stage / "deploystat_py.so")
    sys.path.insert(0, str(stage))
    import deploystat_py

    return deploystat_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    dp = import_module()

    # Ranking metrics against the hand-checked fixture.
    scores = [0.9, 0.8, 0.4, 0.3]
    labels = [True, False, True, False]
    approx(dp.rank_auc(scores, labels), 0.75)
    approx(dp.average_precision(scores, labels), 1 / 2 * 1 + 1 / 2 * 2 / 3)

    metrics = dp.binary_metrics(scores, labels, 0.5)
    approx(metrics["precision"], 0.5)
    approx(metrics["recall"], 0.5)
    assert metrics["n"] == 4

    # The error-correction identity: predicted-positive share folded through
    # the confusion model reproduces label prevalence.
    model = dp.estimate_error_model(scores, labels, 0.5)
    raw = 2 / 4  # share predicted positive at 0.5
    corrected = dp.corrected_rate(raw, model["precision"], model["false_omission_rate"])
    approx(corrected, 2 / 4, tol=1e-12)

    r, p, n = dp.pearson([1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.0])
    approx(r, 1.0)
    assert n == 4

    # End to end: a synthetic city with an exactly calibrated classifier,
    # estimated against its own truth file.
    with tempfile.TemporaryDirectory(prefix="deploystat_world_") as tmp:
        world_dir = Path(tmp) / "world"
        summary = dp.generate_world(
            str(world_dir),
            preset="gradient_city",
            rows=6,
            cols=6,
            images_per_cbg=500,
            seed=4,
            score_model="confusion",
            precision=0.9,
            false_omission_rate=0.01,
            threshold=0.77,
        )
        assert summary["n_cbgs"] == 36
        assert summary["n_detections"] == 36 * 500

        out = json.loads(
            dp.run_disparities(
                str(world_dir / "detections.csv"),
                str(world_dir / "census.csv"),
                str(world_dir / "cbgs.geojson"),
                str(Path(tmp) / "out"),
                threshold=0.77,
                precision=0.9,
                false_omission_rate=0.01,
                schemes=["population_group"],
                replicates=100,
                seed=1,
            )
        )
        truth = json.loads((world_dir / "truth.json").read_text())
        truth_rel = {e["group"]: e["relative"] for e in truth["schemes"]["population_group"]}
        scheme = out["schemes"][0]
        assert scheme["scheme"] == "population_group"
        for est in scheme["estimates"]:
            g = est["group_value"]
            if g == "overall":
                approx(est["relative_rate"], 1.0)
                continue
            rel_err = abs(est["relative_rate"] - truth_rel[g]) / truth_rel[g]
            assert rel_err < 0.05, f"{g}: {est['relative_rate']} vs truth {truth_rel[g]}"
            assert est["ci_half_width"] > 0

        cov = json.loads(
            dp.run_coverage(
                str(world_dir / "detections.csv"),
                str(world_dir / "census.csv"),
                str(world_dir / "cbgs.geojson"),
                str(Path(tmp) / "cov"),
            )
        )
        assert cov["total_records"] == 36 * 500
        assert cov["unassigned_records"] == 0

        val = json.loads(
            dp.run_validate(
                str(world_dir / "labels.csv"),
                str(world_dir / "census.csv"),
                str(world_dir / "cbgs.geojson"),
                str(Path(tmp) / "val"),
                threshold=0.77,
            )
        )
        assert 0.85 <= val["metrics"]["precision"] <= 0.95

    # Errors surface as Python exceptions.
    try:
        dp.select_threshold([0.5, 0.4], [False, False])
    except ValueError as e:
        assert "positive label" in str(e)
    else:
        sys.exit("expected ValueError for single-class labels")

    print("smoke test passed")


if __name__ == "__main__":
    main()
