import json

import numpy as np
import pytest

from capmatrix.dataset import compute_cycle_life, load_dataset
from capmatrix.features import DeltaQConfig, FeatureSpec, extract_table
from capmatrix.matrix import build_capacity_matrix
from capmatrix.synth import (
    SynthScenario,
    base_capacity,
    curve,
    generate,
    noise_floor_rmse,
    write_synthetic,
)

V = np.linspace(2.0, 3.6, 2001)


class TestCurves:
    @pytest.mark.parametrize("shape", ["shoulder", "polynomial"])
    def test_monotone_in_voltage(self, shape):
        for n in (1, 10, 50, 100):
            assert np.all(np.diff(curve(V, n, 1.0, shape)) < 0)

    @pytest.mark.parametrize("shape", ["shoulder", "polynomial"])
    def test_endpoints(self, shape):
        q = base_capacity(np.array([2.0, 3.6]), shape)
        assert q[0] == pytest.approx(1.075) and 0 < q[1] < 0.01

    def test_no_change_at_cycle_ten(self):
        assert np.array_equal(curve(V, 10, 3.0), base_capacity(V))


class TestGenerate:
    def test_noise_free_link_recovered(self):
        sc = SynthScenario(n_train=30, n_primary_test=0, n_secondary_test=0, link_sigma=0.0,
                           measurement_noise=0.0, points_per_cycle=150, seed=11)
        cells, truth = generate(sc)
        t = extract_table(cells, [FeatureSpec("var", "log10")], DeltaQConfig())
        x, y = t.values[:, 0], t.log10_cycle_life
        a, b = np.polyfit(x, y, 1)
        assert a == pytest.approx(-0.5, abs=1e-3)
        assert b == pytest.approx(0.8, abs=1e-3)
        # measured dispersion equals the drawn one
        for cid, v in zip(t.cell_ids, x):
            assert v == pytest.approx(truth["cells"][cid]["log10_dispersion"], abs=1e-9)

    def test_cycle_life_exact(self, small_synth):
        cells, truth = small_synth
        for c in cells:
            assert compute_cycle_life(c).cycle_life == truth["cells"][c.cell_id]["cycle_life"]

    def test_raw_matrices_monotone(self, small_synth):
        cells, _ = small_synth
        for c in cells[:5]:
            assert build_capacity_matrix(c).is_monotone()

    def test_split_sizes_and_ids(self, small_synth):
        cells, truth = small_synth
        assert [c.split.value for c in cells].count("train") == 15
        assert len({c.cell_id for c in cells}) == len(cells) == len(truth["cells"])

    def test_seeds_differ_and_repeat(self):
        kw = dict(n_train=3, n_primary_test=0, n_secondary_test=0, points_per_cycle=50)
        a, ta = generate(SynthScenario(seed=1, **kw))
        b, tb = generate(SynthScenario(seed=1, **kw))
        c, tc = generate(SynthScenario(seed=2, **kw))
        assert ta == tb and ta != tc
        assert np.array_equal(a[0].cycles[50].discharge_capacity_ah, b[0].cycles[50].discharge_capacity_ah)

    def test_lives_respect_minimum(self, default_synth):
        _, truth = default_synth
        lives = [t["cycle_life"] for t in truth["cells"].values()]
        assert min(lives) >= 150

    def test_noise_floor_positive(self, default_synth):
        _, truth = default_synth
        for split in ("train", "primary_test", "secondary_test"):
            assert noise_floor_rmse(truth, split) > 0

    def test_no_cycle_one(self):
        cells, _ = generate(SynthScenario(n_train=1, n_primary_test=0, n_secondary_test=0,
                                          points_per_cycle=40, include_cycle_1=False))
        assert cells[0].cycle_numbers[0] == 2


class TestScenario:
    @pytest.mark.parametrize("kw", [
        {"life_min": 90},
        {"life_median": 100.0},
        {"link_sigma": 0.5},
        {"link_slope": 0.0},
        {"shape": "cubic"},
        {"points_per_cycle": 3},
        {"n_train": -1},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SynthScenario(**kw)

    def test_unreachable_dispersion(self):
        sc = SynthScenario(n_train=1, n_primary_test=0, n_secondary_test=0, life_median=200,
                           life_min=150, link_intercept=5.0, points_per_cycle=40)
        with pytest.raises(ValueError, match="infeasible"):
            generate(sc)


class TestWrite:
    def test_writes_dataset_and_truth(self, tmp_path):
        sc = SynthScenario(n_train=2, n_primary_test=1, n_secondary_test=1, points_per_cycle=40, seed=5)
        manifest = write_synthetic(tmp_path, sc)
        cells = load_dataset(manifest)
        truth = json.loads((tmp_path / "ground_truth.json").read_text())
        assert len(cells) == 4
        assert truth["link"] == {"a": -0.5, "b": 0.8, "sigma": 0.05}
        for c in cells:
            assert c.label().cycle_life == truth["cells"][c.cell_id]["cycle_life"]
