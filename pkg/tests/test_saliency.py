import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relevanceflow.exceptions import RelevanceFlowError
from relevanceflow.saliency import (
    BLUE,
    PINK,
    RED,
    TIER_COLORS,
    export_json,
    export_ply,
    read_ply,
    salient_points,
    tier,
    tiers_from_colors,
)

# integers keep the affine checks exact
int_values = arrays(np.int64, st.integers(1, 40), elements=st.integers(-1000, 1000))


class TestTier:
    def test_three_values(self):
        np.testing.assert_array_equal(tier([0, 0.5, 1]).tiers, [BLUE, PINK, RED])

    def test_constant_is_all_red(self):
        assert np.all(tier([0.3, 0.3, 0.3]).tiers == RED)

    def test_single_point(self):
        assert tier([7.0]).tier_names() == ["red"]

    def test_boundaries_recorded(self):
        smap = tier([0.0, 3.0], layer="conv1")
        assert smap.boundaries == (1.0, 2.0)
        assert smap.layer == "conv1"

    def test_uniform_population(self):
        values = np.random.default_rng(0).uniform(size=1000)
        counts = np.bincount(tier(values).tiers, minlength=3)
        assert np.all(np.abs(counts - 1000 / 3) <= 50)

    @pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [np.inf]])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(RelevanceFlowError):
            tier(bad)

    @given(int_values)
    def test_monotone(self, values):
        t = tier(values.astype(float)).tiers
        order = np.argsort(values, kind="stable")
        assert np.all(np.diff(t[order]) >= 0)

    @given(int_values, st.sampled_from([0.25, 0.5, 1.0, 2.0, 8.0]), st.integers(-64, 64))
    def test_affine_invariance(self, values, alpha, beta):
        values = values.astype(float)
        np.testing.assert_array_equal(tier(values).tiers, tier(alpha * values + beta).tiers)

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1, allow_nan=False)))
    def test_consistent_with_boundaries(self, values):
        smap = tier(values)
        lo, hi = smap.boundaries
        assert np.all(values[smap.tiers == BLUE] <= lo + 1e-12)
        assert np.all(values[smap.tiers == RED] >= hi - 1e-12)


class TestSalientPoints:
    def test_all_tiers(self):
        assert salient_points(tier([0, 0.5, 1]), {"blue", "pink", "red"}).tolist() == [0, 1, 2]

    def test_red_only(self):
        assert salient_points(tier([0, 1, 0.5]), {"red"}).tolist() == [1]

    def test_empty_tier_set(self):
        with pytest.raises(ValueError):
            salient_points(tier([0, 1]), set())

    def test_unknown_tier(self):
        with pytest.raises(ValueError):
            salient_points(tier([0, 1]), {"green"})

    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 1, allow_nan=False)))
    def test_default_matches_filter(self, values):
        smap = tier(values)
        expected = [i for i, name in enumerate(smap.tier_names()) if name in ("pink", "red")]
        assert salient_points(smap).tolist() == expected


class TestExport:
    def test_ply_colors(self, tmp_path):
        cloud = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        export_ply(cloud, tier([0, 0.5, 1]), tmp_path / "m.ply")
        text = (tmp_path / "m.ply").read_text().splitlines()
        assert "element vertex 3" in text
        body = text[text.index("end_header") + 1:]
        assert [line.split()[3:] for line in body] == [
            ["0", "0", "255"], ["255", "105", "180"], ["255", "0", "0"]]

    def test_ply_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        cloud = rng.uniform(-1, 1, size=(50, 3))
        smap = tier(rng.uniform(size=50))
        export_ply(cloud, smap, tmp_path / "m.ply")
        points, colors = read_ply(tmp_path / "m.ply")
        np.testing.assert_allclose(points, cloud, atol=1e-6)
        np.testing.assert_array_equal(tiers_from_colors(colors), smap.tiers)

    def test_empty_cloud_writes_nothing(self, tmp_path):
        with pytest.raises(ValueError):
            export_ply(np.zeros((0, 3)), tier([1.0]), tmp_path / "e.ply")
        assert not (tmp_path / "e.ply").exists()

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(ValueError):
            export_ply(np.zeros((2, 3)), tier([1.0]), tmp_path / "e.ply")

    def test_json_layout(self, tmp_path):
        export_json(tier([0.0, 3.0], layer="fc1"), tmp_path / "m.json")
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["layer"] == "fc1"
        assert data["boundaries"] == [1.0, 2.0]
        assert data["points"][1] == {"i": 1, "salience": 3.0, "tier": "red"}

    def test_mandated_colors(self):
        assert TIER_COLORS == {RED: (255, 0, 0), PINK: (255, 105, 180), BLUE: (0, 0, 255)}
