import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxalign.numerics import Tensor
from ctxalign import tsembed as te
from ctxalign.tsembed import (
    DEFAULT_FORECAST_PROMPT,
    FscaClassMode,
    FscaForecastMode,
    LayoutError,
    PatchEmbedder,
    SeriesWindow,
    VcaMode,
)


def make_embedder(p=4, m=6, seed=0):
    rng = np.random.default_rng(seed)
    return PatchEmbedder(
        weight=Tensor(rng.normal(size=(p, m)), requires_grad=True),
        bias=Tensor(np.zeros(m), requires_grad=True),
    )


class TestPatchify:
    def test_standard_window_count(self):
        w = SeriesWindow(np.arange(512.0))
        assert te.patchify(w, 16, 8).shape == (63, 16)

    def test_single_full_window(self):
        w = SeriesWindow(np.arange(16.0))
        patches = te.patchify(w, 16, 8)
        assert patches.shape == (1, 16)
        np.testing.assert_array_equal(patches[0], np.arange(16.0))

    def test_non_divisible_errors(self):
        with pytest.raises(LayoutError, match="pad or trim"):
            te.patchify(SeriesWindow(np.arange(17.0)), 16, 8)

    def test_patch_positions(self):
        w = SeriesWindow(np.arange(10.0))
        patches = te.patchify(w, 4, 2)
        assert patches.shape == (4, 4)
        np.testing.assert_array_equal(patches[2], [4, 5, 6, 7])


class TestInstanceNormalize:
    def test_constant_window_roundtrip(self):
        w = SeriesWindow(np.full(8, 3.5))
        normed = te.instance_normalize(w)
        np.testing.assert_allclose(normed.values, 0.0)
        back = te.denormalize(normed.values, normed.norm_stats)
        np.testing.assert_allclose(back, 3.5)

    def test_roundtrip_identity(self):
        w = SeriesWindow(np.random.default_rng(2).normal(size=32))
        normed = te.instance_normalize(w)
        np.testing.assert_allclose(
            te.denormalize(normed.values, normed.norm_stats), w.values, atol=1e-9
        )

    def test_population_std_convention(self):
        normed = te.instance_normalize(SeriesWindow(np.array([0.0, 2.0])))
        mean, std = normed.norm_stats
        assert mean == 1.0
        assert std == pytest.approx(1.0, abs=1e-4)
        np.testing.assert_allclose(normed.values, [-1.0, 1.0], atol=1e-4)


class TestSplitParts:
    def test_even(self):
        assert te.split_parts(8, 2) == (4, 4)

    def test_remainder_goes_last(self):
        assert te.split_parts(63, 2) == (31, 32)

    def test_single_part(self):
        assert te.split_parts(5, 1) == (5,)

    def test_too_many_parts(self):
        with pytest.raises(LayoutError):
            te.split_parts(3, 4)

    @given(st.integers(1, 50), st.integers(1, 10))
    @settings(deadline=None)
    def test_lengths_sum_and_balance(self, n, count):
        if count > n:
            return
        lengths = te.split_parts(n, count)
        assert sum(lengths) == n
        assert max(lengths) - min(lengths) <= 1
        # longer parts are at the end
        assert list(lengths) == sorted(lengths)


class TestTokenizePrompt:
    def test_byte_values(self):
        assert te.tokenize_prompt("ab") == (97, 98)

    def test_identical_strings(self):
        assert te.tokenize_prompt("xyz") == te.tokenize_prompt("xyz")

    def test_default_forecast_prompt(self):
        assert DEFAULT_FORECAST_PROMPT == "Predict future sequences using previous data:"
        ids = te.tokenize_prompt(DEFAULT_FORECAST_PROMPT)
        assert all(0 <= i < 256 for i in ids)

    def test_empty_rejected(self):
        with pytest.raises(LayoutError):
            te.tokenize_prompt("")


class TestBuildSequence:
    def test_vca_layout(self):
        emb = make_embedder()
        patches = np.random.default_rng(0).normal(size=(2, 4))
        table = Tensor(np.random.default_rng(1).normal(size=(256, 6)))
        layout, fine = te.build_sequence(patches, (97, 98), VcaMode(), emb, table)
        assert layout.total_len == 4
        assert [r.kind for r in layout.roles] == ["ts", "ts", "prompt", "prompt"]
        assert fine.shape == (4, 6)

    def test_fsca_forecast_length(self):
        emb = make_embedder()
        patches = np.random.default_rng(0).normal(size=(8, 4))
        table = Tensor(np.random.default_rng(1).normal(size=(256, 6)))
        layout, fine = te.build_sequence(
            patches, (97, 98, 99), FscaForecastMode(2), emb, table
        )
        assert layout.part_lengths == (4, 4)
        assert layout.total_len == 14
        assert fine.shape == (14, 6)
        kinds = [r.kind for r in layout.roles]
        assert kinds == ["ts"] * 4 + ["prompt"] * 3 + ["ts"] * 4 + ["prompt"] * 3

    def test_fsca_class_length(self):
        emb = make_embedder()
        rng = np.random.default_rng(0)
        query = rng.normal(size=(4, 4))
        mode = FscaClassMode(
            example_patches=(rng.normal(size=(4, 4)), rng.normal(size=(4, 4))),
            example_labels=(0, 1),
        )
        table = Tensor(rng.normal(size=(256, 6)))
        labels = Tensor(rng.normal(size=(2, 6)))
        layout, fine = te.build_sequence(query, (97, 98, 99), mode, emb, table, labels)
        assert layout.total_len == 2 * (4 + 3 + 1) + (4 + 3)
        assert fine.shape == (23, 6)
        assert layout.roles[7] == te.TokenRole("label", 0, 0)

    def test_prompt_copies_identical(self):
        emb = make_embedder()
        patches = np.random.default_rng(0).normal(size=(6, 4))
        table = Tensor(np.random.default_rng(1).normal(size=(256, 6)))
        layout, fine = te.build_sequence(patches, (104, 105), FscaForecastMode(3), emb, table)
        copies = [layout.positions("prompt", i) for i in range(3)]
        for c in copies[1:]:
            np.testing.assert_array_equal(
                fine.data[copies[0]], fine.data[c]
            )

    def test_part_lengths_sum_to_patches(self):
        emb = make_embedder()
        table = Tensor(np.zeros((256, 6)))
        for n, parts in [(5, 2), (9, 4), (7, 7)]:
            patches = np.zeros((n, 4))
            layout, _ = te.build_sequence(patches, (97,), FscaForecastMode(parts), emb, table)
            assert sum(layout.part_lengths) == n

    def test_n1_reduces_to_vca_layout(self):
        emb = make_embedder()
        patches = np.random.default_rng(3).normal(size=(5, 4))
        table = Tensor(np.random.default_rng(4).normal(size=(256, 6)))
        lay_f, fine_f = te.build_sequence(patches, (97, 98), FscaForecastMode(1), emb, table)
        lay_v, fine_v = te.build_sequence(patches, (97, 98), VcaMode(), emb, table)
        assert lay_f.roles == lay_v.roles
        assert lay_f.part_lengths == lay_v.part_lengths
        np.testing.assert_array_equal(fine_f.data, fine_v.data)

    def test_layout_deterministic(self):
        a = te.layout_fsca_forecast(10, 3, (1, 2, 3))
        b = te.layout_fsca_forecast(10, 3, (1, 2, 3))
        assert a == b

    def test_mismatched_example_shape_rejected(self):
        emb = make_embedder()
        table = Tensor(np.zeros((256, 6)))
        labels = Tensor(np.zeros((2, 6)))
        mode = FscaClassMode(
            example_patches=(np.zeros((3, 4)),), example_labels=(0,)
        )
        with pytest.raises(LayoutError):
            te.build_sequence(np.zeros((4, 4)), (97,), mode, emb, table, labels)
