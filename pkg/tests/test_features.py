import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from capmatrix.features import (
    STATISTICS,
    DeltaQCache,
    DeltaQConfig,
    FeatureError,
    FeaturePipeline,
    FeatureSpec,
    apply_transform,
    element_specs,
    extract_table,
    nearest_index,
    percentile_range_feature,
    single_element,
    statistic_grid_specs,
    summary_statistic,
)
from capmatrix.matrix import DeltaQVector, VoltageGrid

SMALL = VoltageGrid(2.0, 3.6, 101)


def dq(values, grid=None):
    values = np.asarray(values, float)
    grid = grid or VoltageGrid(2.0, 3.6, values.size)
    return DeltaQVector(grid, values, (100,), (10,))


finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(5, 60), elements=finite)


class TestStatistics:
    def test_variance_example(self):
        assert summary_statistic(np.arange(1.0, 6.0), "var") == 2.5

    def test_idr_example(self):
        assert summary_statistic(np.arange(0.0, 101.0), "idr") == pytest.approx(80.0, abs=1e-12)

    def test_iqr_of_constant(self):
        assert summary_statistic(np.full(50, 0.3), "iqr") == 0.0

    def test_mad_example(self):
        assert summary_statistic(np.array([1.0, 1, 2, 2, 4, 6, 9]), "mad") == 1.0

    def test_skew_kurt_need_enough_values(self):
        with pytest.raises(FeatureError):
            summary_statistic(np.array([1.0, 2.0]), "skewness")
        with pytest.raises(FeatureError):
            summary_statistic(np.array([1.0, 2.0, 3.0]), "kurtosis")

    def test_empty_and_unknown(self):
        with pytest.raises(FeatureError):
            summary_statistic(np.array([]), "mean")
        with pytest.raises(FeatureError):
            summary_statistic(np.arange(5.0), "mode")

    def test_value_at_v_needs_voltages(self):
        with pytest.raises(FeatureError):
            summary_statistic(np.arange(5.0), "value_at_v")

    @pytest.mark.parametrize("name", STATISTICS)
    def test_matches_oracle(self, name):
        rng = np.random.default_rng(7)
        for _ in range(20):
            v = dq(rng.normal(-0.01, 0.005, 101), SMALL)
            got = summary_statistic(v, name)
            want = oracles.statistic(v.values, v.voltages, name)
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    @given(vectors, st.floats(0.1, 10.0))
    def test_scale_equivariance(self, x, c):
        assume(np.ptp(x) > 1e-3)
        degree = {"var": 2, "skewness": 0, "kurtosis": 0}
        for name in STATISTICS:
            if name == "value_at_v":
                continue
            k = degree.get(name, 1)
            a, b = summary_statistic(x, name), summary_statistic(c * x, name)
            assert b == pytest.approx(c**k * a, rel=1e-9, abs=1e-9)

    @given(vectors, st.randoms(use_true_random=False))
    def test_permutation_invariance(self, x, rnd):
        idx = list(range(x.size))
        rnd.shuffle(idx)
        for name in STATISTICS:
            if name in ("value_at_v",) or (name in ("skewness", "kurtosis") and np.ptp(x) < 1e-6):
                continue
            assert summary_statistic(x[idx], name) == pytest.approx(
                summary_statistic(x, name), rel=1e-9, abs=1e-12
            )


class TestPercentileRange:
    def test_iqr_equivalence(self):
        x = np.random.default_rng(1).normal(size=333)
        assert percentile_range_feature(x, 25, 75) == summary_statistic(x, "iqr")

    def test_diagonal_is_median(self):
        x = np.random.default_rng(2).normal(size=100)
        assert percentile_range_feature(x, 50, 50) == pytest.approx(np.median(x), abs=1e-12)

    @given(vectors, st.integers(0, 100), st.integers(0, 100))
    def test_matches_oracle(self, x, a, b):
        lo, hi = min(a, b), max(a, b)
        want = oracles.percentile(x, hi) - oracles.percentile(x, lo) if lo < hi else oracles.percentile(x, lo)
        assert percentile_range_feature(x, lo, hi) == pytest.approx(want, abs=1e-12)

    @given(vectors, st.integers(0, 99), st.integers(1, 100))
    def test_non_negative_off_diagonal(self, x, a, b):
        assume(a < b)
        assert percentile_range_feature(x, a, b) >= 0

    def test_bad_bounds(self):
        with pytest.raises(FeatureError):
            percentile_range_feature(np.arange(5.0), 60, 40)
        with pytest.raises(FeatureError):
            percentile_range_feature(np.arange(5.0), -1, 40)


class TestSingleElement:
    def test_midpoint_tie_goes_low(self):
        v = dq(np.arange(5.0), VoltageGrid(2.0, 3.6, 5))  # 2.0 2.4 2.8 3.2 3.6
        assert single_element(v, 2.6) == (1.0, 2.4)

    def test_snaps_to_nearest(self):
        v = dq(np.arange(1000.0))
        val, volt = single_element(v, 2.959)
        i = int(np.argmin(np.abs(VoltageGrid().values - 2.959)))
        assert val == float(i) and volt == VoltageGrid().values[i]

    def test_outside_grid(self):
        with pytest.raises(FeatureError, match="outside"):
            single_element(dq(np.arange(10.0)), 3.7)

    @given(st.floats(2.0, 3.6))
    def test_oracle(self, u):
        g = VoltageGrid(2.0, 3.6, 37)
        assert nearest_index(g.values, u) == oracles.nearest(list(g.values), u)


class TestTransforms:
    def test_cbrt_negative(self):
        assert apply_transform(-8.0, "cbrt") == pytest.approx(-2.0)

    def test_log_of_abs(self):
        assert apply_transform(-0.01, "log10", abs_before_transform=True) == pytest.approx(-2.0)

    def test_sqrt_negative_raises(self):
        with pytest.raises(FeatureError):
            apply_transform(-1.0, "sqrt")

    def test_log_non_positive_raises(self):
        with pytest.raises(FeatureError):
            apply_transform(0.0, "log10")

    def test_identity(self):
        assert apply_transform(-3.25, "identity") == -3.25

    def test_signed_statistics_get_abs(self):
        s = FeatureSpec("mean", "log10")
        assert s.abs_before_transform and s.name == "log10(abs(mean))"
        assert FeatureSpec("var", "log10").abs_before_transform is False
        assert FeatureSpec("mean", "cbrt").abs_before_transform is False

    def test_refuses_unsafe_spec(self):
        with pytest.raises(FeatureError):
            FeatureSpec("min", "sqrt", abs_before_transform=False)

    def test_unknown_names(self):
        with pytest.raises(FeatureError):
            FeatureSpec("mode")
        with pytest.raises(FeatureError):
            FeatureSpec("var", "exp")

    def test_percentile_spec(self):
        with pytest.raises(FeatureError):
            FeatureSpec("percentile_range")
        s = FeatureSpec("percentile_range", "log10", lower_pct=31, upper_pct=62)
        assert not s.abs_before_transform
        assert FeatureSpec("percentile_range", "log10", lower_pct=40, upper_pct=40).abs_before_transform

    def test_grid_specs(self):
        specs = statistic_grid_specs()
        assert len(specs) == 56
        assert len({s.name for s in specs}) == 56

    def test_evaluate(self):
        v = dq(-np.linspace(0.0, 0.02, 1000))
        assert FeatureSpec("var", "log10").evaluate(v) == pytest.approx(
            math.log10(oracles.variance(list(v.values))), rel=1e-12
        )


class TestExtraction:
    def test_table_shape_and_order(self, small_synth):
        cells, _ = small_synth
        specs = [FeatureSpec("var", "log10"), FeatureSpec("min")]
        t = extract_table(list(reversed(cells)), specs, DeltaQConfig())
        assert t.values.shape == (len(cells), 2)
        assert t.cell_ids == sorted(c.cell_id for c in cells)
        assert t.feature_names == ["log10(var)", "min"]
        assert len(t.rows("train")) == 15

    def test_cache_reuse_across_downsampling(self, small_synth):
        cells, _ = small_synth
        cache = DeltaQCache()
        cfg = DeltaQConfig()
        full = extract_table(cells[:3], [FeatureSpec("var")], cfg, cache)
        coarse = extract_table(cells[:3], [FeatureSpec("var")], cfg.with_downsample(20), cache)
        assert len(cache) == 3
        assert not np.array_equal(full.values, coarse.values)

    def test_failure_names_cell(self, small_synth):
        cells, _ = small_synth
        with pytest.raises(FeatureError, match=cells[0].cell_id):
            # identical windows give ΔQ = 0, so log10(range) is undefined
            extract_table(cells[:1], [FeatureSpec("range", "log10")], DeltaQConfig(hi=10, lo=10))

    def test_no_specs(self, small_synth):
        with pytest.raises(FeatureError):
            extract_table(small_synth[0], [], DeltaQConfig())

    def test_element_specs(self):
        specs = element_specs(DeltaQConfig(n_downsample=10))
        assert len(specs) == 10
        assert specs[0].voltage == 2.0 and specs[-1].voltage == 3.6

    def test_pipeline_transform_keeps_order(self, small_synth):
        cells, _ = small_synth
        pipe = FeaturePipeline(DeltaQConfig(), [FeatureSpec("var")])
        X = pipe.transform([cells[2], cells[0]])
        t = extract_table([cells[0], cells[2]], [FeatureSpec("var")], DeltaQConfig())
        assert X[0, 0] == t.values[1, 0] and X[1, 0] == t.values[0, 0]

    def test_label(self):
        cfg = DeltaQConfig(hi=(98, 99, 100), lo=(9, 10, 11))
        assert cfg.label == "dQ98:100-9:11"
        assert DeltaQConfig().label == "dQ100-10"

    def test_csv(self, tmp_path, small_synth):
        cells, _ = small_synth
        t = extract_table(cells[:2], [FeatureSpec("var")], DeltaQConfig())
        text = t.to_csv(tmp_path / "t.csv").read_text().splitlines()
        assert text[0] == "cell_id,var,cycle_life,log10_cycle_life,split"
        assert float(text[1].split(",")[1]) == t.values[0, 0]
