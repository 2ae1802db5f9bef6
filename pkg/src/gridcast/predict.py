"""Monte Carlo dropout prediction and uncertainty products.

Each of the S sampled dropout masks realises one network from the
ensemble; evaluating all of them at a query yields a Gaussian mixture
(1/S) * sum_s N(mu_s, sigma2_s) approximating the posterior predictive.
The spread of mu_s is the epistemic part, the average sigma2_s the
aleatoric part, and their sum is exactly the mixture variance.

Quantiles and exceedance probabilities come from the analytic mixture
CDF (inverted by bisection) rather than from sampled outcomes, which
removes one layer of Monte Carlo error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .dataset import Observation, StandardScaler
from .errors import DataError, GridcastError
from .grid import Raster, extract_patch, normalize_patch
from .nn import NetworkSpec, WeightSet, forward, sample_mask

__all__ = [
    "PredictiveEnsemble",
    "PredictiveSummary",
    "mc_predict",
    "mixture_cdf",
    "mixture_quantile",
    "summarize",
    "predict_map",
    "cross_section",
    "nearby_observations",
    "parse_products",
]

_QUANTILE_TOL = 1e-8


@dataclass(frozen=True)
class PredictiveEnsemble:
    """(S, n) arrays of per-mask Gaussian parameters for n query points."""

    mus: np.ndarray
    sigma2s: np.ndarray

    def __post_init__(self):
        mus = np.atleast_2d(np.asarray(self.mus, dtype=np.float64))
        sig = np.atleast_2d(np.asarray(self.sigma2s, dtype=np.float64))
        if mus.shape != sig.shape:
            raise ValueError("mus and sigma2s must have matching shapes")
        if mus.shape[0] < 1:
            raise ValueError("ensemble needs at least one draw")
        if np.any(sig <= 0):
            raise ValueError("ensemble variances must be positive")
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "sigma2s", sig)

    @property
    def n_draws(self) -> int:
        return self.mus.shape[0]

    @property
    def n_points(self) -> int:
        return self.mus.shape[1]

    def sample_outcomes(self, rng: np.random.Generator) -> np.ndarray:
        """One Gaussian outcome draw per mask per point, shape (S, n)."""
        return self.mus + np.sqrt(self.sigma2s) * rng.standard_normal(self.mus.shape)


def mc_predict(weights: WeightSet, spec: NetworkSpec, patches, locs,
               n_samples: int, rng: np.random.Generator,
               chunk_size: int = 256) -> PredictiveEnsemble:
    """Forward the batch under `n_samples` independent dropout masks.

    Querying runs in blocks of `chunk_size` points per mask so arbitrarily
    large maps stay within the memory the training batch size already
    implies; the same masks apply to every block.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    masks = [sample_mask(spec, spec.dropout_rate, rng) for _ in range(n_samples)]
    patches = np.asarray(patches)
    locs = np.asarray(locs)
    n = locs.shape[0]
    mus = np.empty((n_samples, n), dtype=np.float64)
    sig2s = np.empty((n_samples, n), dtype=np.float64)
    for s, mask in enumerate(masks):
        for start in range(0, n, chunk_size):
            sl = slice(start, min(start + chunk_size, n))
            pred = forward(spec, weights, mask, patches[sl], locs[sl])
            mus[s, sl] = pred.mu
            sig2s[s, sl] = pred.sigma2
    return PredictiveEnsemble(mus=mus, sigma2s=sig2s)


# ---------------------------------------------------------------------------
# Mixture distribution helpers
# ---------------------------------------------------------------------------


def mixture_cdf(ensemble: PredictiveEnsemble, t) -> np.ndarray:
    """CDF of the per-point predictive mixture evaluated at t (scalar or (n,))."""
    t = np.asarray(t, dtype=np.float64)
    z = (t - ensemble.mus) / np.sqrt(ensemble.sigma2s)
    return ndtr(z).mean(axis=0)


def mixture_quantile(ensemble: PredictiveEnsemble, p: float) -> np.ndarray:
    """Invert the mixture CDF at level p by bisection (absolute tol 1e-8).

    The quantile of a mixture lies between the extreme component quantiles,
    which gives an exact starting bracket.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    z = ndtri(p)
    comp = ensemble.mus + np.sqrt(ensemble.sigma2s) * z
    lo = comp.min(axis=0)
    hi = comp.max(axis=0)
    for _ in range(200):
        if np.all(hi - lo <= _QUANTILE_TOL):
            break
        mid = 0.5 * (lo + hi)
        below = mixture_cdf(ensemble, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PredictiveSummary:
    """Per-point posterior predictive summary over n query points.

    var_total equals var_epistemic + var_aleatoric exactly (law of total
    variance for the mixture).
    """

    mean: np.ndarray
    var_total: np.ndarray
    var_epistemic: np.ndarray
    var_aleatoric: np.ndarray
    quantiles: dict
    exceedance: dict


def summarize(ensemble: PredictiveEnsemble, quantile_levels=(),
              thresholds=()) -> PredictiveSummary:
    """Reduce an ensemble to moments, mixture quantiles and exceedances."""
    mean = ensemble.mus.mean(axis=0)
    # population variance over draws, shifted by the first draw so that an
    # ensemble of identical networks (dropout rate 0) gives exactly zero
    d = ensemble.mus - ensemble.mus[0]
    var_epi = np.maximum((d ** 2).mean(axis=0) - d.mean(axis=0) ** 2, 0.0)
    var_alea = ensemble.sigma2s.mean(axis=0)
    quantiles = {}
    for level in quantile_levels:
        quantiles[float(level)] = mixture_quantile(ensemble, float(level))
    exceedance = {}
    for thr in thresholds:
        exceedance[float(thr)] = 1.0 - mixture_cdf(ensemble, float(thr))
    return PredictiveSummary(
        mean=mean,
        var_total=var_epi + var_alea,
        var_epistemic=var_epi,
        var_aleatoric=var_alea,
        quantiles=quantiles,
        exceedance=exceedance,
    )


# ---------------------------------------------------------------------------
# Query preparation shared by map and cross-section products
# ---------------------------------------------------------------------------


def _prepare_queries(raster, scaler, spec, easting, northing, patch_cellsize):
    """Extract and normalise patches at query points; None marks failures."""
    n = len(easting)
    patches = np.zeros((n, spec.patch_size, spec.patch_size), dtype=np.float64)
    locs = np.zeros((n, spec.loc_features), dtype=np.float64)
    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            p = extract_patch(raster, easting[i], northing[i], spec.patch_size, patch_cellsize)
        except GridcastError:
            continue
        patches[i] = normalize_patch(p, scaler.grid_sd).values
        locs[i] = scaler.transform_locations(easting[i], northing[i], p.centre_elevation)
        ok[i] = True
    return patches, locs, ok


PRODUCT_KINDS = ("mean", "sd_total", "sd_epistemic", "sd_aleatoric")


def parse_products(names) -> tuple[list[str], list[float], list[float]]:
    """Split product names into plain products, quantile levels, thresholds.

    Plain products are the four moment maps; "q:0.975" asks for a quantile
    raster and "exceed:2.5" for an exceedance-probability raster.
    """
    plain, q_levels, thresholds = [], [], []
    for name in names:
        name = name.strip()
        if name in PRODUCT_KINDS:
            plain.append(name)
        elif name.startswith("q:"):
            try:
                level = float(name[2:])
            except ValueError:
                raise DataError(f"bad quantile product {name!r}") from None
            if not 0.0 < level < 1.0:
                raise DataError(f"quantile level {level} outside (0, 1)")
            q_levels.append(level)
        elif name.startswith("exceed:"):
            try:
                thresholds.append(float(name[7:]))
            except ValueError:
                raise DataError(f"bad exceedance product {name!r}") from None
        else:
            raise DataError(f"unknown product {name!r}")
    return plain, q_levels, thresholds


def predict_map(weights: WeightSet, spec: NetworkSpec, raster: Raster,
                scaler: StandardScaler, region: tuple[float, float, float, float],
                out_cellsize: float, n_samples: int, products,
                rng: np.random.Generator, patch_cellsize: float | None = None,
                nodata: float = -9999.0) -> dict[str, Raster]:
    """Produce one output raster per requested product over a bounding box.

    Cells whose patch cannot be extracted (outside support or touching
    nodata) are set to the output nodata value in every product.
    """
    xmin, ymin, xmax, ymax = region
    if out_cellsize <= 0:
        raise DataError("output cellsize must be positive")
    ncols = int(math.floor((xmax - xmin) / out_cellsize + 1e-9))
    nrows = int(math.floor((ymax - ymin) / out_cellsize + 1e-9))
    if ncols < 1 or nrows < 1:
        raise DataError("empty prediction region")

    plain, q_levels, thresholds = parse_products(products)
    if not (plain or q_levels or thresholds):
        raise DataError("no products requested")

    xs = xmin + (np.arange(ncols) + 0.5) * out_cellsize
    ys = ymin + (nrows - np.arange(nrows) - 0.5) * out_cellsize
    ee = np.tile(xs, nrows)
    nn_ = np.repeat(ys, ncols)

    patches, locs, ok = _prepare_queries(raster, scaler, spec, ee, nn_, patch_cellsize)
    grids = {}

    def _blank():
        return np.full(nrows * ncols, nodata, dtype=np.float64)

    if not np.any(ok):
        summary = None
    else:
        ensemble = mc_predict(weights, spec, patches[ok], locs[ok], n_samples, rng)
        summary = summarize(ensemble, quantile_levels=q_levels, thresholds=thresholds)

    def _fill(values):
        g = _blank()
        if summary is not None:
            g[ok] = values
        return g

    for name in plain:
        if summary is None:
            grids[name] = _blank()
        elif name == "mean":
            grids[name] = _fill(summary.mean)
        elif name == "sd_total":
            grids[name] = _fill(np.sqrt(summary.var_total))
        elif name == "sd_epistemic":
            grids[name] = _fill(np.sqrt(summary.var_epistemic))
        elif name == "sd_aleatoric":
            grids[name] = _fill(np.sqrt(summary.var_aleatoric))
    for level in q_levels:
        grids[f"q:{level:g}"] = _blank() if summary is None else _fill(summary.quantiles[level])
    for thr in thresholds:
        grids[f"exceed:{thr:g}"] = _blank() if summary is None else _fill(summary.exceedance[thr])

    return {
        name: Raster(ncols=ncols, nrows=nrows, xll=xmin, yll=ymin,
                     cellsize=out_cellsize, nodata=nodata,
                     values=g.reshape(nrows, ncols))
        for name, g in grids.items()
    }


def cross_section(weights: WeightSet, spec: NetworkSpec, raster: Raster,
                  scaler: StandardScaler, easting: float,
                  northing_range: tuple[float, float], step: float,
                  n_samples: int, rng: np.random.Generator,
                  level: float = 0.95,
                  patch_cellsize: float | None = None) -> dict[str, np.ndarray]:
    """Predict along a fixed-easting line; returns plot-ready columns.

    epi_lo/epi_hi is the central credible band for the mixture mean
    (quantiles of the mu draws); tot_lo/tot_hi the same level of the full
    predictive mixture, so the epistemic band nests inside the total band.
    """
    n0, n1 = northing_range
    if step <= 0:
        raise DataError("step must be positive")
    if n1 < n0:
        raise DataError("northing range must be increasing")
    count = int(math.floor((n1 - n0) / step + 1e-9)) + 1
    norths = n0 + step * np.arange(count)
    ee = np.full(count, float(easting))

    patches, locs, ok = _prepare_queries(raster, scaler, spec, ee, norths, patch_cellsize)
    if not np.all(ok):
        bad = norths[~ok][0]
        raise DataError(f"cross-section point ({easting}, {bad}) is outside patch support")

    ensemble = mc_predict(weights, spec, patches, locs, n_samples, rng)
    alpha = (1.0 - level) / 2.0
    epi = np.quantile(ensemble.mus, [alpha, 1.0 - alpha], axis=0)
    tot_lo = mixture_quantile(ensemble, alpha)
    tot_hi = mixture_quantile(ensemble, 1.0 - alpha)
    return {
        "northing": norths,
        "mean": ensemble.mus.mean(axis=0),
        "epi_lo": epi[0],
        "epi_hi": epi[1],
        "tot_lo": tot_lo,
        "tot_hi": tot_hi,
    }


def nearby_observations(observations: list[Observation], easting: float,
                        window: float) -> dict[str, np.ndarray]:
    """Observations within `window` metres either side of a section line."""
    rows = [(o.northing, o.target) for o in observations
            if abs(o.easting - easting) <= window]
    rows.sort()
    if not rows:
        return {"northing": np.empty(0), "value": np.empty(0)}
    northing, value = zip(*rows)
    return {"northing": np.array(northing), "value": np.array(value)}
