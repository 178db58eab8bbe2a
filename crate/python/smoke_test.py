"""Smoke test for the brainage_py extension.

Build and run from the repository root:

    cargo build --release -p brainage-py --features extension-module
    cp target/release/libbrainage_py.so python/brainage_py.so
    python3 python/smoke_test.py
"""

import json
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import brainage_py as ba


def main():
    assert ba.avg_path_c(1) == 0.0
    assert ba.avg_path_c(2) == 1.0
    assert ba.anomaly_score(ba.avg_path_c(256), 256) == 0.5

    ds = ba.Dataset.synthetic(57, noise=3, seed=1)
    assert len(ds) == 60
    assert sum(ds.is_noise) == 3
    feats = ds.features()
    assert len(feats) == 60 and len(feats[0]) == 1024

    forest = ba.IsolationForest.fit(feats, n_trees=50, subsample_size=32, seed=2)
    scores = forest.score(feats)
    assert all(0.0 < s <= 1.0 for s in scores)
    assert scores == ba.score_dataset(ds, n_trees=50, subsample_size=32, seed=2)
    flagged = ba.flag_outliers(scores, 0.05)
    assert len(flagged) == 3

    folds = ba.make_folds(11, 5, 0)
    assert sorted(i for _, test in folds for i in test) == list(range(11))

    m = ba.compute_metrics([30.0, 40.0], [31.0, 38.0])
    assert math.isclose(m["mae"], 1.5) and math.isclose(m["rmse"] ** 2, m["mse"])
    agg = ba.aggregate_folds([m, m])
    assert agg["mae"] == m["mae"]

    kept = [i for i in range(len(ds)) if i not in set(flagged)]
    report = ba.run_experiment(ds, kept=kept, seed=3, k_folds=2, epochs=2, batch_size=16)
    assert [c[2] for c in report.cells()] == ["complete", "complete"]
    before = report.mean("Stub", "before_filtering")
    assert before is not None and before["mae"] > 0.0

    again = ba.Report.from_json(report.to_json())
    assert again.to_json() == report.to_json()
    assert again.render_svg() == report.render_svg()
    assert json.loads(report.to_json())["k_folds"] == 2

    try:
        ba.make_folds(3, 5, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("too few records should raise ValueError")

    print("smoke test passed: hash", report.determinism_hash()[:16])


if __name__ == "__main__":
    main()
