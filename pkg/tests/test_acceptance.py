"""Acceptance gate: every criterion prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -rA` to see the per-criterion
lines in the summary. The calibration pipeline (synthetic world, dropout
tuning over three rates, held-out scoring, ablation) is built once and
shared across the criteria that need it.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from gridcast.checkpoint import load_checkpoint, save_checkpoint
from gridcast.dataset import StandardScaler, build_dataset, zero_patches
from gridcast.grid import read_raster, write_raster
from gridcast.metrics import (
    crps_ensemble,
    crps_gaussian,
    evaluate,
    log_score,
)
from gridcast.model import build_network, build_default_network, shape_chain
from gridcast.nn import (
    AvgPool2d,
    Concat,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    NetworkSpec,
    Relu,
    forward,
    init_weights,
    loss_and_grad,
    nll_loss,
    param_count,
    sample_mask,
)
from gridcast.predict import PredictiveEnsemble, cross_section, mc_predict, predict_map, summarize
from gridcast.synth import make_world, oracle_scores, sample_observations
from gridcast.train import TrainConfig, train, tune_dropout


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL")
        raise
    print(f"ACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# Shared calibration pipeline (seed-fixed, built once)
# ---------------------------------------------------------------------------

WORLD_SEED = 11
OBS_SEED = 12
FOLD_SEED = 13
TRAIN_SEED = 21
SCORING_SEED = 99
TUNE_RATES = (0.05, 0.1, 0.2)


@pytest.fixture(scope="module")
def pipeline():
    """World, dataset, dropout-tuned model, ablation and score reports."""
    t_start = time.perf_counter()
    world = make_world(seed=WORLD_SEED, size=256, cellsize=250.0)
    observations = sample_observations(world, 4000, seed=OBS_SEED)
    built = build_dataset(observations, world.raster, patch_size=32, k=10, seed=FOLD_SEED)

    spec, _ = build_network(0.1, conv_channels=16, branch_units=64, head_units=(64, 32))
    cfg = TrainConfig(batch_size=256, learning_rate=2.5e-3, max_epochs=100,
                      patience=12, dropout_rate=0.1, seed=TRAIN_SEED, eval_samples=20)

    tuned = tune_dropout(spec, built.split, cfg, TUNE_RATES)
    report = evaluate(tuned.best_weights, suited_spec(spec, tuned.best_rate),
                      built.split.test, 50, np.random.default_rng(SCORING_SEED))

    ablated_split = zero_patches(built.split)
    abl_cfg = TrainConfig(batch_size=256, learning_rate=2.5e-3, max_epochs=100,
                          patience=12, dropout_rate=tuned.best_rate,
                          seed=TRAIN_SEED, eval_samples=20)
    abl_weights, _ = train(spec, ablated_split, abl_cfg)
    abl_report = evaluate(abl_weights, suited_spec(spec, tuned.best_rate),
                          ablated_split.test, 50, np.random.default_rng(SCORING_SEED))

    test_indices = [idx for idx, fold, _ in built.manifest if fold == 9]
    oracle = oracle_scores(world, [observations[idx] for idx in test_indices])

    return {
        "world": world,
        "observations": observations,
        "built": built,
        "spec": suited_spec(spec, tuned.best_rate),
        "tuned": tuned,
        "report": report,
        "ablation_report": abl_report,
        "oracle": oracle,
        "elapsed": time.perf_counter() - t_start,
    }


def suited_spec(spec, rate):
    import dataclasses
    return dataclasses.replace(spec, dropout_rate=rate)


# ---------------------------------------------------------------------------
# Criterion 1: architecture oracle
# ---------------------------------------------------------------------------


def test_architecture_oracle():
    with criterion("architecture-oracle"):
        t0 = time.perf_counter()
        spec, _ = build_default_network(0.1)
        assert param_count(spec) == 741_634
        assert shape_chain(spec) == [32, 10, 8, 6, 4, 2]
        assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# Criterion 2: gradient correctness
# ---------------------------------------------------------------------------


def _random_full_kind_spec(rng):
    """A tiny random network containing every layer kind."""
    c1 = int(rng.integers(2, 4))
    c2 = int(rng.integers(2, 4))
    units = int(rng.integers(3, 6))
    h1 = int(rng.integers(4, 7))
    flat = 1 * 1 * c2
    return NetworkSpec(
        patch_layers=(
            Conv2d(1, c1, kernel=3, stride=3), Relu(), Dropout(),
            Conv2d(c1, c2, kernel=3, stride=1), Relu(), Dropout(),
            AvgPool2d(pool=2, stride=1), Flatten(),
        ),
        loc_layers=(Dense(3, units), Relu(), Dropout()),
        head_layers=(Concat(), Dense(flat + units, h1), Relu(), Dropout(), Dense(h1, 2)),
        patch_size=12, in_channels=1, loc_features=3,
        dropout_rate=float(rng.uniform(0.1, 0.4)),
    )


def test_gradient_correctness():
    with criterion("gradient-correctness"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        h = 1e-4
        for _ in range(5):
            spec = _random_full_kind_spec(rng)
            weights = init_weights(spec, rng, dtype=np.float64)
            mask = sample_mask(spec, spec.dropout_rate, rng)
            patches = rng.normal(size=(3, 12, 12))
            locs = rng.normal(size=(3, 3))
            y = rng.normal(size=3)
            _, grads = loss_and_grad(spec, weights, mask, patches, locs, y)
            for a, g in zip(weights.arrays, grads.arrays):
                flat, gfl = a.ravel(), g.ravel()
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = nll_loss(forward(spec, weights, mask, patches, locs), y)
                    flat[i] = orig - h
                    down = nll_loss(forward(spec, weights, mask, patches, locs), y)
                    flat[i] = orig
                    fd = (up - down) / (2 * h)
                    worst = max(worst, abs(fd - gfl[i]) / max(1e-8, abs(fd) + abs(gfl[i])))
        assert worst < 1e-4, f"max relative gradient error {worst}"
        assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------------------------------
# Criterion 3: scoring-rule correctness
# ---------------------------------------------------------------------------


def test_scoring_rule_correctness():
    with criterion("scoring-rules"):
        # sample CRPS converges to the Gaussian closed form
        rng = np.random.default_rng(31)
        samples = rng.standard_normal(10_000)
        sample_crps = crps_ensemble(samples, 0.0)
        exact = crps_gaussian(0.0, 1.0, 0.0)
        assert abs(sample_crps - exact) / exact < 0.02

        # log score equals a direct mixture-density evaluation
        mus = rng.normal(size=(20, 50))
        sig2 = rng.uniform(0.2, 2.0, size=(20, 50))
        y = rng.normal(size=50)
        ensemble = PredictiveEnsemble(mus=mus, sigma2s=sig2)
        direct = -np.log(np.mean(
            np.exp(-0.5 * (y - mus) ** 2 / sig2) / np.sqrt(2 * np.pi * sig2), axis=0))
        np.testing.assert_allclose(log_score(ensemble, y), direct, atol=1e-12)

        # CRPS of a standard normal at its centre
        assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.233695, abs=1e-6)


# ---------------------------------------------------------------------------
# Criterion 4: calibration end-to-end on the synthetic world
# ---------------------------------------------------------------------------


def test_calibration_end_to_end(pipeline):
    with criterion("calibration-end-to-end"):
        report = pipeline["report"]
        oracle = pipeline["oracle"]
        assert report.n == 400
        for level in (0.5, 0.7, 0.95):
            assert abs(report.coverage[level] - level) <= 0.05, (
                f"coverage at {level}: {report.coverage[level]}")
        assert abs(report.mean_nll - oracle.mean_nll) <= 0.15, (
            f"NLL {report.mean_nll} vs oracle {oracle.mean_nll}")
        # the true generating distribution dominates any trained model up
        # to Monte Carlo noise
        assert report.mean_nll >= oracle.mean_nll - 0.02
        assert report.mean_crps >= oracle.mean_crps - 0.01
        assert pipeline["elapsed"] < 900.0


def test_tuned_rate_comes_from_the_sweep(pipeline):
    tuned = pipeline["tuned"]
    assert tuned.best_rate in TUNE_RATES
    assert set(tuned.scores) == set(TUNE_RATES)


def test_mean_map_tracks_truth(pipeline):
    # map R^2 against the known mean field over a dense interior region
    world = pipeline["world"]
    built = pipeline["built"]
    grids = predict_map(
        pipeline["tuned"].best_weights, pipeline["spec"], world.raster,
        built.scaler, (16000.0, 16000.0, 48000.0, 48000.0), 1000.0,
        n_samples=50, products=["mean"], rng=np.random.default_rng(7),
    )
    mean_map = grids["mean"]
    xs, ys = mean_map.cell_centers()
    ee = np.tile(xs, mean_map.nrows)
    nn = np.repeat(ys, mean_map.ncols)
    truth = world.mean_at(ee, nn)
    predicted = mean_map.values.ravel()
    ss_res = np.sum((truth - predicted) ** 2)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    assert 1.0 - ss_res / ss_tot > 0.5


# ---------------------------------------------------------------------------
# Criterion 5: feature-learning lift
# ---------------------------------------------------------------------------


def test_feature_learning_lift(pipeline):
    with criterion("feature-learning-lift"):
        lift = pipeline["report"].r2 - pipeline["ablation_report"].r2
        assert lift >= 0.1, (
            f"full r2 {pipeline['report'].r2:.3f}, "
            f"ablation r2 {pipeline['ablation_report'].r2:.3f}, lift {lift:.3f}")


# ---------------------------------------------------------------------------
# Criterion 6: uncertainty decomposition identities
# ---------------------------------------------------------------------------


def test_uncertainty_decomposition(pipeline):
    with criterion("uncertainty-decomposition"):
        built = pipeline["built"]
        spec = pipeline["spec"]
        weights = pipeline["tuned"].best_weights
        world = pipeline["world"]

        # (a) law of total variance, exactly, on real predictive summaries
        test = built.split.test
        ensemble = mc_predict(weights, spec, test.patches[:100], test.locations[:100],
                              50, np.random.default_rng(5))
        summary = summarize(ensemble)
        second_moment = (ensemble.mus ** 2 + ensemble.sigma2s).mean(axis=0)
        mixture_var = second_moment - ensemble.mus.mean(axis=0) ** 2
        np.testing.assert_allclose(summary.var_total, mixture_var, rtol=1e-12)
        np.testing.assert_allclose(
            summary.var_total, summary.var_epistemic + summary.var_aleatoric, rtol=1e-15)

        # (b) epistemic sd identically zero at dropout rate 0
        spec0 = suited_spec(spec, 0.0)
        e0 = mc_predict(weights, spec0, test.patches[:20], test.locations[:20],
                        8, np.random.default_rng(6))
        s0 = summarize(e0)
        assert np.all(s0.var_epistemic == 0.0)

        # (c) epistemic band nested inside the total band at every step
        cols = cross_section(weights, spec, world.raster, built.scaler,
                             easting=32000.0, northing_range=(8000.0, 56000.0),
                             step=500.0, n_samples=50, rng=np.random.default_rng(8))
        assert np.all(cols["epi_lo"] >= cols["tot_lo"])
        assert np.all(cols["epi_hi"] <= cols["tot_hi"])
        assert np.all(cols["epi_lo"] <= cols["epi_hi"])


# ---------------------------------------------------------------------------
# Criterion 7: determinism
# ---------------------------------------------------------------------------


def _small_deterministic_run(tmp_path, tag):
    world = make_world(seed=3, size=128, cellsize=250.0)
    observations = sample_observations(world, 300, seed=4)
    built = build_dataset(observations, world.raster, patch_size=32, k=5, seed=5)
    spec, _ = build_network(0.1, conv_channels=4, branch_units=16, head_units=(16, 8))
    cfg = TrainConfig(batch_size=64, learning_rate=2e-3, max_epochs=4, patience=5,
                      dropout_rate=0.1, seed=6, eval_samples=4)
    weights, _ = train(spec, built.split, cfg)
    ckpt_path = tmp_path / f"{tag}.gcw"
    save_checkpoint(ckpt_path, spec, weights, built.scaler, meta={"seed": 6})
    report = evaluate(weights, spec, built.split.test, 8, np.random.default_rng(7))
    import json
    report_bytes = json.dumps(report.summary_dict(), sort_keys=True).encode()
    return ckpt_path.read_bytes(), report_bytes


def test_determinism(tmp_path):
    with criterion("determinism"):
        ckpt_a, report_a = _small_deterministic_run(tmp_path, "a")
        ckpt_b, report_b = _small_deterministic_run(tmp_path, "b")
        assert ckpt_a == ckpt_b
        assert report_a == report_b


# ---------------------------------------------------------------------------
# Criterion 8: I/O round trips
# ---------------------------------------------------------------------------


def test_io_round_trips(tmp_path):
    with criterion("io-round-trips"):
        # raster: bitwise identity for 9-significant-digit values
        rng = np.random.default_rng(17)
        values = rng.integers(-10_000_000, 10_000_000, size=(64, 64)) / 1000.0
        from gridcast.grid import Raster
        raster = Raster(ncols=64, nrows=64, xll=500.0, yll=250.0, cellsize=100.0,
                        nodata=-9999.0, values=values)
        raster_path = tmp_path / "r.asc"
        write_raster(raster, raster_path)
        back = read_raster(raster_path)
        assert np.array_equal(back.values, raster.values)
        write_raster(back, tmp_path / "r2.asc")
        assert (tmp_path / "r.asc").read_bytes() == (tmp_path / "r2.asc").read_bytes()

        # checkpoint: float32 arrays and header reproduce exactly
        spec, _ = build_network(0.2, conv_channels=4, branch_units=8, head_units=(8, 4))
        weights = init_weights(spec, np.random.default_rng(0), dtype=np.float32)
        scaler = StandardScaler(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0)
        p1, p2 = tmp_path / "w1.gcw", tmp_path / "w2.gcw"
        save_checkpoint(p1, spec, weights, scaler, meta={"k": 1})
        loaded = load_checkpoint(p1)
        assert loaded.spec == spec and loaded.scaler == scaler
        assert all(np.array_equal(a, b) for a, b in zip(loaded.weights.arrays, weights.arrays))
        save_checkpoint(p2, loaded.spec, loaded.weights, loaded.scaler, meta={"k": 1})
        assert p1.read_bytes() == p2.read_bytes()
