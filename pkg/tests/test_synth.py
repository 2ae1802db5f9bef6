import numpy as np
import pytest

from gridcast.errors import DataError
from gridcast.synth import MARGIN_CELLS, make_world, oracle_scores, sample_observations


@pytest.fixture(scope="module")
def world():
    return make_world(seed=7, size=128, cellsize=250.0)


class TestMakeWorld:
    def test_same_seed_reproduces_raster(self):
        a = make_world(seed=3, size=96)
        b = make_world(seed=3, size=96)
        assert np.array_equal(a.raster.values, b.raster.values)

    def test_different_seed_changes_terrain(self):
        a = make_world(seed=3, size=96)
        b = make_world(seed=4, size=96)
        assert not np.array_equal(a.raster.values, b.raster.values)

    def test_terrain_has_spread(self, world):
        assert world.raster.valid_values().std() > 0.0

    def test_flat_world_mean_reduces_to_trend(self):
        flat = make_world(seed=1, size=96, flat=True)
        xs = np.linspace(*flat.interior_box()[::2], 7)
        ys = np.linspace(*flat.interior_box()[1::2], 7)
        np.testing.assert_allclose(flat.mean_at(xs, ys), flat.trend_at(xs, ys), atol=1e-12)

    def test_too_small_world_rejected(self):
        with pytest.raises(DataError):
            make_world(seed=0, size=64)

    def test_noise_sd_within_declared_band(self, world):
        rng = np.random.default_rng(0)
        xmin, ymin, xmax, ymax = world.interior_box()
        xs = rng.uniform(xmin, xmax, 500)
        ys = rng.uniform(ymin, ymax, 500)
        s = world.sd_at(xs, ys)
        assert np.all(s > world.noise_floor)
        assert np.all(s < world.noise_floor + world.noise_scale)

    def test_mean_field_has_terrain_component(self, world):
        rng = np.random.default_rng(1)
        xmin, ymin, xmax, ymax = world.interior_box()
        xs = rng.uniform(xmin, xmax, 2000)
        ys = rng.uniform(ymin, ymax, 2000)
        terrain_part = world.mean_at(xs, ys) - world.trend_at(xs, ys)
        assert terrain_part.std() > 0.1


class TestSampleObservations:
    def test_zero_noise_world_targets_equal_mean(self):
        silent = make_world(seed=2, size=96, noise_floor=0.0, noise_scale=0.0)
        obs = sample_observations(silent, 50, seed=5)
        easting = np.array([o.easting for o in obs])
        northing = np.array([o.northing for o in obs])
        targets = np.array([o.target for o in obs])
        np.testing.assert_allclose(targets, silent.mean_at(easting, northing), atol=1e-12)

    def test_residuals_are_standard_normal(self, world):
        obs = sample_observations(world, 100_000, seed=9)
        easting = np.array([o.easting for o in obs])
        northing = np.array([o.northing for o in obs])
        targets = np.array([o.target for o in obs])
        z = (targets - world.mean_at(easting, northing)) / world.sd_at(easting, northing)
        assert z.mean() == pytest.approx(0.0, abs=0.01)
        assert z.std() == pytest.approx(1.0, abs=0.01)

    def test_points_keep_patch_margin(self, world):
        obs = sample_observations(world, 1000, seed=1)
        cs = world.raster.cellsize
        for o in obs:
            assert o.easting - world.raster.xll >= 16 * cs
            assert world.raster.xmax - o.easting >= 16 * cs
            assert o.northing - world.raster.yll >= 16 * cs
            assert world.raster.ymax - o.northing >= 16 * cs
        assert MARGIN_CELLS >= 16

    def test_deterministic_given_seed(self, world):
        a = sample_observations(world, 20, seed=3)
        b = sample_observations(world, 20, seed=3)
        assert a == b


class TestOracleScores:
    def test_oracle_coverage_is_nominal(self, world):
        obs = sample_observations(world, 100_000, seed=11)
        report = oracle_scores(world, obs)
        assert report.coverage[0.95] == pytest.approx(0.95, abs=0.005)
        assert report.coverage[0.7] == pytest.approx(0.7, abs=0.005)
        assert report.coverage[0.5] == pytest.approx(0.5, abs=0.005)

    def test_oracle_nll_is_analytic_mean(self, world):
        obs = sample_observations(world, 500, seed=12)
        report = oracle_scores(world, obs)
        easting = np.array([o.easting for o in obs])
        northing = np.array([o.northing for o in obs])
        y = np.array([o.target for o in obs])
        m = world.mean_at(easting, northing)
        s = world.sd_at(easting, northing)
        expected = np.mean(0.5 * np.log(2 * np.pi * s ** 2) + (y - m) ** 2 / (2 * s ** 2))
        assert report.mean_nll == pytest.approx(expected, abs=1e-12)

    def test_oracle_r2_matches_noise_share(self, world):
        obs = sample_observations(world, 50_000, seed=13)
        report = oracle_scores(world, obs)
        easting = np.array([o.easting for o in obs])
        northing = np.array([o.northing for o in obs])
        y = np.array([o.target for o in obs])
        s2 = world.sd_at(easting, northing) ** 2
        expected = 1.0 - s2.mean() / y.var()
        assert report.r2 == pytest.approx(expected, abs=0.01)

    def test_noiseless_world_has_no_oracle(self):
        silent = make_world(seed=2, size=96, noise_floor=0.0, noise_scale=0.0)
        obs = sample_observations(silent, 10, seed=0)
        with pytest.raises(DataError):
            oracle_scores(silent, obs)
