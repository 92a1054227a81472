import csv
import json
from pathlib import Path

import numpy as np
import pytest

from capmatrix.cli import build_parser, main
from capmatrix.evaluation import evaluate
from capmatrix.experiments import (
    ExperimentConfig,
    ExperimentError,
    Workspace,
    cosine_similarity,
    pipeline_from_dict,
    run_multivariate,
    run_percentile_sweep,
    suppression_mask,
)
from capmatrix.features import FeatureSpec, percentile_range_feature
from capmatrix.linear_models import load_model

FAST = {
    "seed": 1,
    "cv": {"n_folds": 3},
    "models": {
        "alphas": [0.5, 1.0],
        "lambdas": [1e-4, 1e-3, 1e-2, 1e-1],
        "max_components": 4,
        "forest": {"n_trees": 8},
    },
    "downsample_counts": [1000, 100, 20],
    "n_elements": 20,
    "percentile_step": 25,
    "element_stride": 111,
    "full_matrix_points": 200,
    "synth": {"n_train": 12, "n_primary_test": 6, "n_secondary_test": 6, "points_per_cycle": 80, "seed": 2},
}

COMMANDS = ["ingest", "matrices", "downsample-sweep", "univariate-grid", "percentile-sweep",
            "element-sweep", "multivariate", "negative-results", "table2"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("exp")
    (base / "fast.json").write_text(json.dumps(FAST))
    assert main(["synth", "--config", str(base / "fast.json"), "--out", str(base / "data")]) == 0
    cfg = base / "data" / "config.json"
    for cmd in COMMANDS:
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    return base / "data"


@pytest.fixture(scope="module")
def results(run_dir):
    return run_dir / "results"


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ExperimentError, match="unknown"):
            ExperimentConfig.from_dict({"sed": 1})

    def test_relative_paths(self, tmp_path):
        cfg = ExperimentConfig.from_dict({"dataset": {"manifest": "m.csv"}, "output_dir": "o"}, tmp_path)
        assert cfg.manifest == tmp_path / "m.csv" and cfg.output_dir == tmp_path / "o"

    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(FAST)
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    @pytest.mark.parametrize("bad", [{"percentile_step": 0}, {"n_elements": 1}, {"cv": {"n_folds": 1}},
                                     {"downsample_counts": [2000]}])
    def test_validation(self, bad):
        with pytest.raises(ExperimentError):
            ExperimentConfig.from_dict(bad)

    def test_missing_manifest(self, tmp_path):
        ws = Workspace(ExperimentConfig(manifest=tmp_path / "none.csv"))
        with pytest.raises(ExperimentError, match="manifest"):
            ws.cells


class TestHelpers:
    def test_suppression(self):
        r = np.array([[100.0, 110.0], [np.nan, 1000.0]])
        assert suppression_mask(r).tolist() == [[False, False], [True, True]]

    def test_cosine(self):
        assert cosine_similarity(np.array([1.0, 0]), np.array([2.0, 0])) == pytest.approx(1.0)
        assert np.isnan(cosine_similarity(np.zeros(2), np.ones(2)))


class TestOutputs:
    def test_ingest(self, results):
        counts = json.loads((results / "ingest" / "split_counts.json").read_text())
        assert counts == {"primary_test": 6, "secondary_test": 6, "train": 12}
        assert len(read_rows(results / "ingest" / "cells.csv")) == 24

    def test_matrices(self, results):
        d = results / "matrices"
        assert (d / "dQ100-10.csv").exists() and (d / "energy_proxy.csv").exists()
        raws = sorted(d.glob("*_raw.csv"))
        assert raws
        cid = raws[0].name[: -len("_raw.csv")]
        for kind in ("baseline_subtracted", "baseline_divided"):
            assert (d / f"{cid}_{kind}.csv").exists()
        assert (d / "delta_q.svg").read_text().startswith("<svg")

    def test_downsample_sweep(self, results):
        rows = read_rows(results / "downsample_sweep" / "downsample_sweep.csv")
        assert {int(r["n_points"]) for r in rows} == {1000, 100, 20}
        ref = [r for r in rows if r["n_points"] == "1000"]
        assert all(float(r["delta_rmse_pct"]) == 0.0 for r in ref)

    def test_univariate_exports(self, results):
        d = results / "univariate_grid" / "log10_target_dQ100-10"
        for s in ("train", "primary_test", "secondary_test"):
            raw = read_rows(d / f"raw_{s}.csv")
            disp = read_rows(d / f"display_{s}.csv")
            assert len(raw) == len(disp) == 14
            for a, b in zip(raw, disp):
                for t in ("identity", "sqrt", "cbrt", "log10"):
                    assert b[t] == "–" or float(b[t]) == float(a[t])
        assert len(read_rows(d / "grid_long.csv")) == 56 * 3

    def test_percentile_diagonal_is_median(self, results, run_dir):
        rows = read_rows(results / "percentile_sweep" / "percentile_sweep.csv")
        diag = {float(r["lower_pct"]): r for r in rows if r["lower_pct"] == r["upper_pct"]}
        assert set(diag) == {0.0, 25.0, 50.0, 75.0, 100.0}
        cfg = ExperimentConfig.load(run_dir / "config.json")
        uni = run_univariate_median(cfg)
        assert float(diag[50.0]["rmse_train"]) == pytest.approx(uni, rel=1e-9)

    def test_element_sweep(self, results):
        rows = read_rows(results / "element_sweep" / "element_sweep.csv")
        assert len(rows) == 10  # 1000 points, stride 111
        assert "slope_over_sigma_log10" in rows[0]
        summary = json.loads((results / "element_sweep" / "summary.json").read_text())
        assert {"log10", "log10_slope_min", "log10_slope_abs_max"} <= set(summary)

    def test_negative_results(self, results):
        rep = json.loads((results / "negative_results" / "negative_results.json").read_text())
        assert set(rep) == {"horizontal_slice", "full_matrix", "multi_statistic"}
        assert rep["full_matrix"]["n_features"] == 200
        assert -1 <= rep["multi_statistic"]["median_feature_correlation"] <= 1

    def test_table2(self, results):
        rows = read_rows(results / "table2" / "table2.csv")
        names = [r["model"] for r in rows]
        assert names[:3] == ["variance", "iqr", "percentile_31_62"]
        assert names[3].startswith("single_element_")
        assert names[4:] == ["ridge", "enet", "pcr", "plsr", "forest"]


def run_univariate_median(cfg):
    from capmatrix.experiments import Labels, fit_scored

    ws = Workspace(cfg)
    spec = FeatureSpec("median", "log10")
    t = ws.table([spec], cfg.dq)
    # the sweep takes the 50th percentile, which equals the median
    x = np.array([percentile_range_feature(ws.cache.get(c, cfg.dq), 50, 50) for c in ws.cells])
    assert np.allclose(np.log10(np.abs(x)), t.values[:, 0], rtol=0, atol=1e-12)
    return fit_scored(t.values, Labels.of(t), "enet", cfg).per_split_rmse["train"]


class TestModels:
    @pytest.mark.parametrize("name", ["ridge", "enet", "pcr", "plsr", "forest"])
    def test_saved_model_rescores(self, results, run_dir, name):
        d = results / "multivariate" / "dQ100-10"
        model = load_model(d / "models" / f"{name}.json")
        pipe = pipeline_from_dict(json.loads((d / "models" / f"{name}.pipeline.json").read_text()))
        cells = Workspace(ExperimentConfig.load(run_dir / "config.json")).cells
        rep = evaluate(model, cells, pipe, name)
        row = next(r for r in read_rows(d / "rmse.csv") if r["model"] == name)
        for s in rep.per_split:
            assert rep.rmse(s) == pytest.approx(float(row[f"rmse_{s}"]), abs=1e-9)

    def test_contributions_add_up(self, results, run_dir):
        d = results / "multivariate" / "dQ100-10"
        model = load_model(d / "models" / "plsr.json")
        rows = read_rows(d / "plsr_contributions.csv")
        cid = rows[0]["cell_id"]
        total = sum(float(r["product"]) for r in rows if r["cell_id"] == cid)
        pipe = pipeline_from_dict(json.loads((d / "models" / "plsr.pipeline.json").read_text()))
        cells = [c for c in Workspace(ExperimentConfig.load(run_dir / "config.json")).cells if c.cell_id == cid]
        pred = model.predict(pipe.transform(cells))[0]
        assert total + model.intercept == pytest.approx(pred, abs=1e-10)


class TestReproducibility:
    def test_byte_identical_rerun(self, run_dir, tmp_path):
        cfg = ExperimentConfig.load(run_dir / "config.json")
        from dataclasses import replace

        cfg2 = replace(cfg, output_dir=tmp_path)
        ws = Workspace(cfg2)
        run_percentile_sweep(cfg2, ws)
        run_multivariate(cfg2, ws=ws)
        for sub in ("percentile_sweep", "multivariate"):
            for f in sorted((tmp_path / sub).rglob("*")):
                if f.is_file():
                    ref = cfg.output_dir / f.relative_to(tmp_path)
                    assert f.read_bytes() == ref.read_bytes(), f.name


class TestCli:
    def test_parser_lists_subcommands(self):
        p = build_parser()
        for cmd in COMMANDS + ["synth"]:
            assert p.parse_args([cmd, "--config", "x.json"]).command == cmd

    def test_bad_config_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"nope": 1}')
        assert main(["ingest", "--config", str(bad)]) == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["ingest", "--config", str(tmp_path / "absent.json")]) == 1

    def test_missing_dataset(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dataset": {"manifest": "gone.csv"}}))
        assert main(["table2", "--config", str(cfg)]) == 1

    def test_requires_config(self):
        with pytest.raises(SystemExit):
            main(["ingest"])
