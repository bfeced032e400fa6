"""Tests for categorical matching costs and guidance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exemplar_synth.errors import ConfigError, IoError, ShapeError
from exemplar_synth.segcost import (
    CostCache,
    GuidancePair,
    GuidanceSpec,
    apply_guidance,
    build_cat_cost,
    downsample_cost,
    load_guidance,
    write_guidance,
)
from tests.scene_fixtures import random_seg, seg_from_rows


def loop_cost(labels_y, labels_x):
    h, w = labels_y.shape
    hx, wx = labels_x.shape
    out = np.zeros((h, w, hx, wx))
    for i in range(h):
        for j in range(w):
            for k in range(hx):
                for m in range(wx):
                    out[i, j, k, m] = 1.0 if labels_y[i, j] == labels_x[k, m] else 0.0
    return out


def random_mask(rng, size):
    mask = rng.random((size, size)) < 0.4
    mask[rng.integers(size), rng.integers(size)] = True
    return mask.astype(np.int64)


class TestCatCost:
    """Test building the binary cost."""

    @pytest.mark.fast
    def test_matches_loop_oracle(self):
        """Test against a quadruple loop on 8x8 maps."""
        rng = np.random.default_rng(1)
        seg_y, seg_x = random_seg(rng, 8), random_seg(rng, 8)
        cost = build_cat_cost(seg_y, seg_x)
        np.testing.assert_array_equal(cost.values, loop_cost(seg_y.labels, seg_x.labels))
        assert cost.flat().shape == (64, 64)

    @pytest.mark.fast
    def test_row_sums_count_class_pixels(self):
        """Test that each row counts exemplar pixels of the same class."""
        seg_y = seg_from_rows([[0, 1], [2, 3]])
        seg_x = seg_from_rows([[1, 1], [1, 0]])
        cost = build_cat_cost(seg_y, seg_x)
        sums = cost.values.sum(axis=(2, 3))
        np.testing.assert_array_equal(sums, [[1, 3], [0, 0]])

    @pytest.mark.fast
    @settings(max_examples=40, deadline=None)
    @given(
        size_y=st.integers(1, 6),
        size_x=st.integers(1, 6),
        seed=st.integers(0, 10_000),
    )
    def test_swapping_maps_transposes_cost(self, size_y, size_x, seed):
        """Test that the unguided cost from X to Y is the transpose of Y to X."""
        rng = np.random.default_rng(seed)
        seg_y, seg_x = random_seg(rng, size_y), random_seg(rng, size_x)
        forward = build_cat_cost(seg_y, seg_x).values
        backward = build_cat_cost(seg_x, seg_y).values
        np.testing.assert_array_equal(forward, backward.transpose(2, 3, 0, 1))

    @pytest.mark.fast
    def test_class_count_mismatch(self):
        """Test maps with different class universes."""
        with pytest.raises(ConfigError):
            build_cat_cost(seg_from_rows([[0]], 3), seg_from_rows([[0]], 4))

    @pytest.mark.fast
    def test_downsample_stays_binary(self):
        """Test costs at attention resolution."""
        rng = np.random.default_rng(2)
        seg_y, seg_x = random_seg(rng, 16), random_seg(rng, 16)
        cost = downsample_cost(seg_y, seg_x, (4, 4))
        assert cost.target_hw == cost.exemplar_hw == (4, 4)
        assert set(np.unique(cost.values)) <= {0.0, 1.0}
        assert cost.factors == (4.0, 4.0)
        expected = loop_cost(seg_y.resized(4, 4).labels, seg_x.resized(4, 4).labels)
        np.testing.assert_array_equal(cost.values, expected)

    @pytest.mark.fast
    def test_downsample_refuses_upsampling(self):
        """Test a target grid larger than the maps."""
        seg = seg_from_rows([[0, 1], [1, 0]])
        with pytest.raises(ConfigError):
            downsample_cost(seg, seg, (4, 4))


class TestGuidance:
    """Test region restriction."""

    def _maps(self):
        seg_y = seg_from_rows([[1, 1], [1, 1]])
        seg_x = seg_from_rows([[1, 1], [1, 1]])
        return seg_y, seg_x

    @pytest.mark.fast
    def test_guided_rows_restricted(self):
        """Test that guided rows keep cost only inside their exemplar region."""
        seg_y, seg_x = self._maps()
        guide = GuidanceSpec(
            (GuidancePair(np.array([[1, 0], [0, 0]]), np.array([[0, 1], [0, 0]])),)
        )
        cost = apply_guidance(build_cat_cost(seg_y, seg_x), guide, seg_y, seg_x)
        np.testing.assert_array_equal(cost.values[0, 0], [[0, 1], [0, 0]])
        # unguided rows lose the reserved exemplar pixel
        np.testing.assert_array_equal(cost.values[1, 1], [[1, 0], [1, 1]])
        assert cost.diagnostics == ()

    @pytest.mark.fast
    def test_empty_guided_row_reported(self):
        """Test the diagnostic for a guided row with no same-class pixel."""
        seg_y = seg_from_rows([[2, 1], [1, 1]])
        seg_x = seg_from_rows([[1, 1], [1, 1]])
        guide = GuidanceSpec((GuidancePair(np.array([[1, 0], [0, 0]]), np.array([[1, 0], [0, 0]])),))
        cost = apply_guidance(build_cat_cost(seg_y, seg_x), guide, seg_y, seg_x)
        assert cost.diagnostics == ((0, 0),)

    @pytest.mark.fast
    @settings(max_examples=40, deadline=None)
    @given(size=st.integers(2, 6), pairs=st.integers(1, 3), seed=st.integers(0, 10_000))
    def test_guidance_is_idempotent(self, size, pairs, seed):
        """Test that guiding an already guided cost changes nothing."""
        rng = np.random.default_rng(seed)
        seg_y, seg_x = random_seg(rng, size), random_seg(rng, size)
        guide = GuidanceSpec(tuple(GuidancePair(random_mask(rng, size), random_mask(rng, size)) for _ in range(pairs)))
        once = apply_guidance(build_cat_cost(seg_y, seg_x), guide, seg_y, seg_x)
        twice = apply_guidance(once, guide, seg_y, seg_x)
        np.testing.assert_array_equal(twice.values, once.values)
        assert twice.diagnostics == once.diagnostics

    @pytest.mark.fast
    def test_empty_guide_is_noop(self):
        """Test that no pairs leave the cost untouched."""
        seg_y, seg_x = self._maps()
        cost = build_cat_cost(seg_y, seg_x)
        assert apply_guidance(cost, GuidanceSpec(), seg_y, seg_x) is cost

    @pytest.mark.fast
    def test_mask_validation(self):
        """Test invalid masks."""
        with pytest.raises(ConfigError):
            GuidancePair(np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(ShapeError):
            GuidancePair(np.ones(3), np.ones((2, 2)))
        seg_y, seg_x = self._maps()
        guide = GuidanceSpec((GuidancePair(np.ones((3, 3)), np.ones((2, 2))),))
        with pytest.raises(ShapeError):
            apply_guidance(build_cat_cost(seg_y, seg_x), guide, seg_y, seg_x)

    @pytest.mark.fast
    def test_guide_file_round_trip(self, tmp_path):
        """Test writing and reading a guidance index."""
        guide = GuidanceSpec((GuidancePair(np.array([[1, 0], [0, 1]]), np.array([[0, 1], [1, 0]])),))
        loaded = load_guidance(write_guidance(tmp_path / "g.guide", guide))
        assert loaded.digest() == guide.digest()

    @pytest.mark.fast
    def test_guide_file_without_header(self, tmp_path):
        """Test the header check."""
        path = tmp_path / "g.guide"
        path.write_text("a.pgm b.pgm\n")
        with pytest.raises(IoError):
            load_guidance(path)


class TestCostCache:
    """Test cost reuse across timesteps."""

    @pytest.mark.fast
    def test_hits_share_entries(self):
        """Test that equal keys return the cached cost."""
        rng = np.random.default_rng(3)
        seg_y, seg_x = random_seg(rng, 8), random_seg(rng, 8)
        cache = CostCache()
        first = cache.get(seg_y, seg_x, (4, 4))
        assert cache.get(seg_y, seg_x, (4, 4)) is first
        cache.get(seg_y, seg_x, (2, 2))
        assert len(cache) == 2

    @pytest.mark.fast
    def test_guidance_is_part_of_the_key(self):
        """Test that guided and unguided costs are kept apart."""
        seg = seg_from_rows([[1, 1], [1, 1]])
        guide = GuidanceSpec((GuidancePair(np.array([[1, 0], [0, 0]]), np.array([[0, 1], [0, 0]])),))
        cache = CostCache()
        plain = cache.get(seg, seg, (2, 2))
        guided = cache.get(seg, seg, (2, 2), guide)
        assert plain is not guided
        assert guided.values.sum() < plain.values.sum()
