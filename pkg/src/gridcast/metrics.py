"""Probabilistic verification: proper scoring rules, coverage and R².

Scores are computed against the analytic predictive mixture wherever
possible; sampled outcomes are only used for the pooled distribution
comparison. All scores stay finite thanks to the network's variance floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .dataset import SampleSet
from .errors import DataError
from .nn import NetworkSpec, WeightSet
from .predict import PredictiveEnsemble, mc_predict, mixture_cdf, summarize

__all__ = [
    "ScoreReport",
    "r_squared",
    "log_score",
    "crps_gaussian",
    "crps_mixture",
    "crps_ensemble",
    "interval_coverage",
    "gaussian_coverage",
    "evaluate",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _phi(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT_2PI


# ---------------------------------------------------------------------------
# Deterministic skill
# ---------------------------------------------------------------------------


def r_squared(pred, y) -> float:
    """Fraction of variance explained: 1 - SS_res / SS_tot."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size < 2:
        raise DataError("r_squared needs at least two observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("r_squared undefined for constant observations")
    ss_res = float(np.sum((y - pred) ** 2))
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# Proper scoring rules
# ---------------------------------------------------------------------------


def log_score(ensemble: PredictiveEnsemble, y) -> np.ndarray:
    """Negative log density of the predictive mixture at each outcome.

    Uses log-sum-exp so scores stay finite for outcomes far in the tails.
    """
    y = np.asarray(y, dtype=np.float64)
    s2 = ensemble.sigma2s
    log_comp = -0.5 * np.log(2.0 * np.pi * s2) - (y - ensemble.mus) ** 2 / (2.0 * s2)
    peak = log_comp.max(axis=0)
    return -(peak + np.log(np.mean(np.exp(log_comp - peak), axis=0)))


def crps_gaussian(mu, sigma, y) -> np.ndarray | float:
    """Closed-form CRPS of a Gaussian forecast N(mu, sigma^2) against y."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=np.float64)
    z = (y - mu) / sigma
    out = sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * _phi(z) - 1.0 / math.sqrt(math.pi))
    return float(out) if out.ndim == 0 else out


def _mean_abs_gaussian(m, s2):
    """E|X| for X ~ N(m, s2), elementwise."""
    s = np.sqrt(s2)
    z = m / s
    return m * (2.0 * ndtr(z) - 1.0) + 2.0 * s * _phi(z)


def crps_mixture(ensemble: PredictiveEnsemble, y) -> np.ndarray:
    """Exact CRPS of the Gaussian-mixture predictive distribution.

    CRPS(F, y) = E|X - y| - 0.5 E|X - X'| with both expectations available
    in closed form for Gaussian components.
    """
    y = np.asarray(y, dtype=np.float64)
    mus, s2 = ensemble.mus, ensemble.sigma2s
    term1 = _mean_abs_gaussian(y - mus, s2).mean(axis=0)
    n = ensemble.n_points
    term2 = np.empty(n, dtype=np.float64)
    block = max(1, int(4e6) // max(1, ensemble.n_draws ** 2))
    for start in range(0, n, block):
        sl = slice(start, min(start + block, n))
        dm = mus[:, None, sl] - mus[None, :, sl]
        dv = s2[:, None, sl] + s2[None, :, sl]
        term2[sl] = _mean_abs_gaussian(dm, dv).mean(axis=(0, 1))
    return term1 - 0.5 * term2


def crps_ensemble(samples, y) -> np.ndarray | float:
    """Fair (unbiased) sample CRPS: mean|X-y| - sum|X_i - X_j| / (2 S(S-1)).

    `samples` has draws along axis 0; needs at least two draws.
    """
    x = np.asarray(samples, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x.T).T if squeeze else x
    s = x.shape[0]
    if s < 2:
        raise ValueError("crps_ensemble needs at least two samples")
    y = np.asarray(y, dtype=np.float64)
    term1 = np.mean(np.abs(x - y), axis=0)
    xs = np.sort(x, axis=0)
    coef = (2.0 * np.arange(s) - s + 1.0)
    pair_sum = 2.0 * np.tensordot(coef, xs, axes=(0, 0))   # sum over ordered pairs
    out = term1 - pair_sum / (2.0 * s * (s - 1))
    return float(out.reshape(-1)[0]) if squeeze else out


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def interval_coverage(ensemble: PredictiveEnsemble, y,
                      levels=(0.5, 0.7, 0.95)) -> dict[float, float]:
    """Fraction of outcomes inside central mixture intervals per level.

    y sits inside the closed central level-L interval exactly when its CDF
    position lies in [(1-L)/2, (1+L)/2]; the mixture CDF is continuous and
    strictly increasing, so no quantile inversion is needed.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise DataError("interval_coverage needs a nonempty test set")
    pos = mixture_cdf(ensemble, y)
    out = {}
    for level in levels:
        alpha = (1.0 - float(level)) / 2.0
        inside = (pos >= alpha) & (pos <= 1.0 - alpha)
        out[float(level)] = float(np.mean(inside))
    return out


def gaussian_coverage(mu, sigma, y, levels=(0.5, 0.7, 0.95)) -> dict[float, float]:
    """Coverage of central Gaussian intervals (the oracle's special case)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = {}
    for level in levels:
        z = ndtri(0.5 + float(level) / 2.0)
        out[float(level)] = float(np.mean(np.abs(y - mu) <= z * sigma))
    return out


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    """Verification metrics over a held-out set, plus plot-ready tables."""

    n: int
    r2: float
    mean_nll: float
    mean_crps: float
    coverage: dict
    table: dict = field(default_factory=dict)
    y_samples: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def summary_dict(self) -> dict:
        return {
            "n": self.n,
            "r2": self.r2,
            "mean_nll": self.mean_nll,
            "mean_crps": self.mean_crps,
            "coverage": {f"{k:g}": v for k, v in sorted(self.coverage.items())},
            "meta": self.meta,
        }


def evaluate(weights: WeightSet, spec: NetworkSpec, samples: SampleSet,
             n_samples: int, rng: np.random.Generator,
             levels=(0.5, 0.7, 0.95)) -> ScoreReport:
    """Score a trained model on a sample set with S dropout masks per point.

    Emits per-observation scores plus the observed-vs-predicted scatter
    columns and pooled predictive outcome draws for distribution plots.
    """
    if len(samples) == 0:
        raise DataError("evaluate needs a nonempty sample set")
    ensemble = mc_predict(weights, spec, samples.patches, samples.locations,
                          n_samples, rng)
    y = samples.targets.astype(np.float64)
    summary = summarize(ensemble)
    scores = log_score(ensemble, y)
    crps = crps_mixture(ensemble, y)
    coverage = interval_coverage(ensemble, y, levels)
    pos = mixture_cdf(ensemble, y)
    table = {
        "observed": y,
        "predicted_mean": summary.mean,
        "sd_total": np.sqrt(summary.var_total),
        "sd_epistemic": np.sqrt(summary.var_epistemic),
        "sd_aleatoric": np.sqrt(summary.var_aleatoric),
        "log_score": scores,
        "crps": crps,
        "cdf_position": pos,
    }
    return ScoreReport(
        n=len(samples),
        r2=r_squared(summary.mean, y),
        mean_nll=float(scores.mean()),
        mean_crps=float(crps.mean()),
        coverage=coverage,
        table=table,
        y_samples=ensemble.sample_outcomes(rng),
        meta={"n_samples": n_samples},
    )
