import numpy as np
import pytest

from ctxalign import data as dt
from ctxalign.data import DataError, MultivariateSeries, WindowSample


def write_csv(path, text):
    path.write_text(text)
    return path


class TestLoadCsv:
    def test_basic_shape(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", "date,x,y\n1,1.0,2.0\n2,3.0,4.0\n3,5.0,6.0\n")
        series = dt.load_csv(p)
        assert series.values.shape == (3, 2)
        assert series.timestamps == ["1", "2", "3"]

    def test_ett_style_seven_features(self, tmp_path):
        rows = ["date," + ",".join(f"f{i}" for i in range(7))]
        for r in range(5):
            rows.append(f"t{r}," + ",".join(str(r + i * 0.1) for i in range(7)))
        p = write_csv(tmp_path / "ett.csv", "\n".join(rows) + "\n")
        series = dt.load_csv(p)
        assert series.channels == 7

    def test_missing_cell_strict_names_row(self, tmp_path):
        p = write_csv(tmp_path / "bad.csv", "date,x\n1,1.0\n2,\n")
        with pytest.raises(DataError, match="row 3"):
            dt.load_csv(p, strict=True)

    def test_non_numeric_names_row(self, tmp_path):
        p = write_csv(tmp_path / "bad.csv", "date,x\n1,1.0\n2,oops\n")
        with pytest.raises(DataError, match="row 3"):
            dt.load_csv(p)

    def test_ragged_row_rejected(self, tmp_path):
        p = write_csv(tmp_path / "bad.csv", "date,x,y\n1,1.0,2.0\n2,3.0\n")
        with pytest.raises(DataError, match="row 3"):
            dt.load_csv(p)

    def test_forward_fill(self, tmp_path):
        p = write_csv(tmp_path / "ff.csv", "date,x\n1,1.0\n2,\n3,3.0\n")
        series = dt.load_csv(p, strict=False, forward_fill=True)
        np.testing.assert_array_equal(series.values[:, 0], [1.0, 1.0, 3.0])

    def test_no_timestamp_column(self, tmp_path):
        p = write_csv(tmp_path / "n.csv", "x,y\n1.0,2.0\n3.0,4.0\n")
        series = dt.load_csv(p, timestamp_col=None)
        assert series.values.shape == (2, 2)
        assert series.timestamps is None

    def test_save_load_roundtrip(self, tmp_path):
        series = dt.synth_generate("sine_mix", 50, seed=3, params={"channels": 2})
        p = tmp_path / "out.csv"
        dt.save_csv(p, series)
        back = dt.load_csv(p, timestamp_col=None)
        np.testing.assert_array_equal(back.values, series.values)


class TestMakeWindows:
    def test_single_window(self):
        series = MultivariateSeries("s", np.arange(100.0).reshape(-1, 1))
        samples = dt.make_windows(series, 96, 4, 1)
        assert len(samples) == 1
        np.testing.assert_array_equal(samples[0].input, np.arange(96.0))
        np.testing.assert_array_equal(samples[0].target, np.arange(96.0, 100.0))

    def test_count_formula(self):
        series = MultivariateSeries("s", np.arange(104.0).reshape(-1, 1))
        assert len(dt.make_windows(series, 96, 4, 4)) == 2

    def test_no_overlap_between_input_and_target(self):
        series = MultivariateSeries("s", np.arange(40.0).reshape(-1, 1))
        for s in dt.make_windows(series, 16, 8, 4):
            assert s.target[0] == s.input[-1] + 1.0

    def test_too_short_series(self):
        series = MultivariateSeries("s", np.arange(10.0).reshape(-1, 1))
        with pytest.raises(DataError):
            dt.make_windows(series, 8, 4, 1)

    def test_channel_independence(self):
        values = np.stack([np.arange(30.0), np.arange(30.0) * 10], axis=1)
        series = MultivariateSeries("s", values)
        samples = dt.make_windows(series, 8, 2, 2)
        channels = {s.channel_id for s in samples}
        assert channels == {0, 1}
        # origin-major ordering: first two samples share origin 0
        assert samples[0].origin == samples[1].origin == 0

    def test_reproducible(self):
        series = dt.synth_generate("sine_mix", 200, seed=5)
        a = dt.make_windows(series, 32, 8, 4)
        b = dt.make_windows(series, 32, 8, 4)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.input, y.input)
            np.testing.assert_array_equal(x.target, y.target)


def toy_samples(n, channels=1):
    return [
        WindowSample(np.zeros(4), np.zeros(2), ch, origin)
        for origin in range(n)
        for ch in range(channels)
    ]


class TestChronoSplit:
    def test_fraction_counts(self):
        train, val, test = dt.chrono_split(toy_samples(100))
        assert (len(train), len(val), len(test)) == (70, 10, 20)

    def test_no_leakage(self):
        train, val, test = dt.chrono_split(toy_samples(50, channels=3), (0.6, 0.2, 0.2))
        assert max(s.origin for s in train) < min(s.origin for s in val)
        assert max(s.origin for s in val) < min(s.origin for s in test)

    def test_boundary_goes_later(self):
        # 0.7 * 99 = 69.3 -> 69 train origins (boundary sample to val side)
        train, val, test = dt.chrono_split(toy_samples(99))
        assert len(train) == 69

    def test_empty_split_rejected(self):
        with pytest.raises(DataError):
            dt.chrono_split(toy_samples(100), (1.0, 0.0, 0.0))

    def test_bad_fractions_rejected(self):
        with pytest.raises(DataError):
            dt.chrono_split(toy_samples(10), (0.5, 0.2, 0.2))


class TestFewShotSubset:
    def test_five_percent(self):
        subset = dt.few_shot_subset(toy_samples(1000), 0.05)
        assert len(subset) == 50
        assert max(s.origin for s in subset) == 49

    def test_ten_percent(self):
        assert len(dt.few_shot_subset(toy_samples(1000), 0.10)) == 100

    def test_full_ratio(self):
        samples = toy_samples(37)
        assert dt.few_shot_subset(samples, 1.0) == samples

    def test_bad_ratio(self):
        with pytest.raises(DataError):
            dt.few_shot_subset(toy_samples(10), 0.0)


class TestSynthGenerate:
    def test_sine_starts_at_zero(self):
        series = dt.synth_generate("sine_mix", 10, seed=0, params={"phases": (0.0, 0.0)})
        assert series.values[0, 0] == pytest.approx(0.0)

    def test_seed_determinism(self):
        a = dt.synth_generate("sine_mix", 100, seed=7, params={"noise": 0.5})
        b = dt.synth_generate("sine_mix", 100, seed=7, params={"noise": 0.5})
        np.testing.assert_array_equal(a.values, b.values)

    def test_ar2_zero_fixed_point(self):
        series = dt.synth_generate("ar2", 50, seed=0, params={"c1": 1.5, "c2": -0.9, "noise": 0.0})
        np.testing.assert_array_equal(series.values, 0.0)

    def test_trend_seasonal_shape(self):
        series = dt.synth_generate("trend_seasonal", 64, seed=1, params={"channels": 3})
        assert series.values.shape == (64, 3)

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            dt.synth_generate("brownian", 10)
