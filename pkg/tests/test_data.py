import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast.dataset import (
    Observation,
    StandardScaler,
    assign_folds,
    build_dataset,
    read_observations,
    zero_patches,
)
from gridcast.errors import DataError, ParseError
from gridcast.grid import Raster


def bumpy_raster(n=96, cellsize=1.0):
    rng = np.random.default_rng(3)
    x = (np.arange(n) + 0.5) * cellsize
    y = (n - np.arange(n) - 0.5) * cellsize
    ex, ny = np.meshgrid(x, y)
    values = 0.01 * ex + 0.02 * ny + 5.0 * np.sin(ex / 7.0) + rng.normal(0, 0.5, size=(n, n))
    return Raster(ncols=n, nrows=n, xll=0.0, yll=0.0, cellsize=cellsize,
                  nodata=-9999.0, values=values)


def interior_observations(raster, n, seed=0, patch_size=8):
    rng = np.random.default_rng(seed)
    margin = (patch_size / 2 + 3) * raster.cellsize
    xs = rng.uniform(raster.xll + margin, raster.xmax - margin, size=n)
    ys = rng.uniform(raster.yll + margin, raster.ymax - margin, size=n)
    ts = rng.normal(size=n)
    return [Observation(float(x), float(y), float(t)) for x, y, t in zip(xs, ys, ts)]


# ---------------------------------------------------------------------------
# CSV reading
# ---------------------------------------------------------------------------


class TestReadObservations:
    def test_reads_valid_rows(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("easting,northing,value\n1,2,3\n4,5,6\n7,8,9\n")
        obs, dropped = read_observations(path)
        assert len(obs) == 3 and dropped == 0
        assert obs[0] == Observation(1.0, 2.0, 3.0)

    def test_empty_value_dropped_and_counted(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("easting,northing,value\n1,2,\n4,5,6\n")
        obs, dropped = read_observations(path)
        assert len(obs) == 1 and dropped == 1

    def test_na_fixture_100_rows_7_missing(self, tmp_path):
        rng = np.random.default_rng(1)
        rows = []
        na_rows = set(rng.choice(100, size=7, replace=False).tolist())
        for i in range(100):
            value = "NA" if i in na_rows else f"{rng.normal():.4f}"
            rows.append(f"{i},{i * 2},{value}")
        path = tmp_path / "obs.csv"
        path.write_text("easting,northing,value\n" + "\n".join(rows) + "\n")
        obs, dropped = read_observations(path)
        assert len(obs) == 93 and dropped == 7

    def test_nonfinite_values_dropped(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("easting,northing,value\n1,2,inf\n3,4,5\n")
        obs, dropped = read_observations(path)
        assert len(obs) == 1 and dropped == 1

    def test_missing_header_errors(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("x,y,z\n1,2,3\n")
        with pytest.raises(ParseError) as err:
            read_observations(path)
        assert err.value.line == 1

    def test_unparseable_row_errors_with_line(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("easting,northing,value\n1,2,3\n4,rock,6\n")
        with pytest.raises(ParseError) as err:
            read_observations(path)
        assert err.value.line == 3

    def test_wrong_field_count_errors(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("easting,northing,value\n1,2\n")
        with pytest.raises(ParseError) as err:
            read_observations(path)
        assert err.value.line == 2

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "obs.csv"
        path.write_text("")
        with pytest.raises(ParseError) as err:
            read_observations(path)
        assert err.value.line == 1


# ---------------------------------------------------------------------------
# Fold assignment
# ---------------------------------------------------------------------------


class TestAssignFolds:
    def test_ten_observations_ten_folds(self):
        labels = assign_folds(10, k=10, seed=0)
        assert sorted(labels.tolist()) == list(range(10))

    def test_deterministic_given_seed(self):
        a = assign_folds(1000, k=10, seed=42)
        b = assign_folds(1000, k=10, seed=42)
        assert np.array_equal(a, b)
        c = assign_folds(1000, k=10, seed=43)
        assert not np.array_equal(a, c)

    def test_full_survey_fold_sizes(self):
        # 109201 points in 10 folds: nine folds of 10920 and one of 10921,
        # with the last (test) fold at the floor size of 10920
        labels = assign_folds(109201, k=10, seed=0)
        sizes = np.bincount(labels, minlength=10)
        assert sorted(sizes.tolist()) == [10920] * 9 + [10921]
        assert sizes[9] == 10920

    def test_rejects_too_few_folds(self):
        with pytest.raises(DataError):
            assign_folds(100, k=2, seed=0)

    def test_rejects_more_folds_than_points(self):
        with pytest.raises(DataError):
            assign_folds(5, k=10, seed=0)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(10, 500), k=st.integers(3, 10), seed=st.integers(0, 99))
    def test_partition_with_near_equal_sizes(self, n, k, seed):
        if k > n:
            return
        labels = assign_folds(n, k=k, seed=seed)
        assert labels.shape == (n,)
        sizes = np.bincount(labels, minlength=k)
        assert sizes.sum() == n
        assert sizes.max() - sizes.min() <= 1


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


class TestBuildDataset:
    def test_split_sizes_eight_one_one(self):
        raster = bumpy_raster()
        obs = interior_observations(raster, 200)
        result = build_dataset(obs, raster, patch_size=8, k=10, seed=1)
        split = result.split
        assert len(split.train) == 160
        assert len(split.eval) == 20
        assert len(split.test) == 20
        assert result.n_dropped == 0

    def test_training_locations_standardised(self):
        raster = bumpy_raster()
        obs = interior_observations(raster, 300)
        split = build_dataset(obs, raster, patch_size=8, k=10, seed=2).split
        means = split.train.locations.mean(axis=0)
        sds = split.train.locations.std(axis=0)
        np.testing.assert_allclose(means, 0.0, atol=1e-9)
        np.testing.assert_allclose(sds, 1.0, atol=1e-9)

    def test_patch_centres_normalised(self):
        raster = bumpy_raster()
        obs = interior_observations(raster, 50)
        split = build_dataset(obs, raster, patch_size=9, k=5, seed=0).split
        # odd patch size: the centre cell coincides with the centre sample
        centre = split.train.patches[:, 4, 4]
        np.testing.assert_allclose(centre, 0.0, atol=1e-9)

    def test_identical_locations_degenerate_scaler(self):
        raster = bumpy_raster()
        obs = [Observation(48.0, 48.0, float(t)) for t in range(30)]
        with pytest.raises(DataError):
            build_dataset(obs, raster, patch_size=8, k=3, seed=0)

    def test_scaler_ignores_test_fold(self):
        # replacing the test fold's targets/coordinates must not move the scaler
        raster = bumpy_raster()
        obs = interior_observations(raster, 120)
        first = build_dataset(obs, raster, patch_size=8, k=5, seed=3)
        test_rows = [i for i, (idx, fold, _) in enumerate(first.manifest) if fold == 4]
        mutated = list(obs)
        for i in test_rows:
            mutated[i] = Observation(obs[i].easting, obs[i].northing, 1234.5)
        second = build_dataset(mutated, raster, patch_size=8, k=5, seed=3)
        assert first.scaler == second.scaler

    def test_observations_outside_support_dropped_and_logged(self):
        raster = bumpy_raster()
        obs = interior_observations(raster, 60)
        obs.append(Observation(1.0, 1.0, 0.0))   # outside patch support
        result = build_dataset(obs, raster, patch_size=8, k=5, seed=0)
        assert result.n_dropped == 1
        dropped = [m for m in result.manifest if m[1] == -1]
        assert len(dropped) == 1 and dropped[0][0] == 60 and dropped[0][2]

    def test_fold_partition_complete(self):
        raster = bumpy_raster()
        obs = interior_observations(raster, 97)
        result = build_dataset(obs, raster, patch_size=8, k=10, seed=5)
        folds = result.split.all_folds()
        assert len(folds) == 97
        sizes = np.bincount(folds, minlength=10)
        assert sizes.max() - sizes.min() <= 1

    def test_zero_patches_ablation(self):
        raster = bumpy_raster()
        obs = interior_observations(raster, 40)
        split = build_dataset(obs, raster, patch_size=8, k=4, seed=0).split
        ablated = zero_patches(split)
        assert np.all(ablated.train.patches == 0.0)
        np.testing.assert_array_equal(ablated.train.targets, split.train.targets)

    def test_no_surviving_observations_rejected(self):
        raster = bumpy_raster()
        obs = [Observation(1.0, 1.0, 0.0), Observation(2.0, 2.0, 1.0),
               Observation(95.0, 95.0, 2.0)]   # all outside patch support
        with pytest.raises(DataError):
            build_dataset(obs, raster, patch_size=8, k=3, seed=0)

    def test_patch_cellsize_passed_through(self):
        from gridcast.grid import extract_patch, normalize_patch
        raster = bumpy_raster()
        obs = interior_observations(raster, 30, patch_size=16)
        result = build_dataset(obs, raster, patch_size=8, patch_cellsize=2.0,
                               k=3, seed=1)
        # locate the first training sample's source observation
        first_idx = next(i for i, fold, _ in result.manifest if fold == 0)
        o = obs[first_idx]
        expected = normalize_patch(
            extract_patch(raster, o.easting, o.northing, 8, 2.0),
            result.scaler.grid_sd,
        ).values
        train = result.split.train
        row = np.where(train.folds == 0)[0]
        match = [i for i in row if np.allclose(train.patches[i], expected, atol=1e-12)]
        assert match


class TestStandardScaler:
    def test_rejects_nonpositive_sd(self):
        with pytest.raises(DataError):
            StandardScaler(0, 1, 0, 1, 0, 0.0, 1)

    def test_roundtrips_through_dict(self):
        s = StandardScaler(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
        assert StandardScaler.from_dict(s.to_dict()) == s

    def test_transform_standardises(self):
        s = StandardScaler(10.0, 2.0, 20.0, 4.0, 30.0, 5.0, 1.0)
        out = s.transform_locations(12.0, 16.0, 40.0)
        np.testing.assert_allclose(out, [1.0, -1.0, 2.0])
