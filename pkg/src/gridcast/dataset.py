"""Observation ingestion, fold splitting and dataset assembly.

Builds the training tables that pair each point observation with its
centre-normalised terrain patch and standardised location triple
(easting, northing, elevation). Standardisation statistics are fitted on
the training folds only; the patch scale uses the standard deviation of
the full auxiliary raster, which is exogenous to the target variable.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, GridcastError, ParseError
from .grid import Raster, extract_patch, normalize_patch

logger = logging.getLogger(__name__)

__all__ = [
    "Observation",
    "StandardScaler",
    "SampleSet",
    "DatasetSplit",
    "BuildResult",
    "read_observations",
    "write_observations",
    "assign_folds",
    "build_dataset",
    "zero_patches",
]

_CSV_HEADER = ["easting", "northing", "value"]
_MISSING_TOKENS = {"", "na", "nan", "null"}


@dataclass(frozen=True)
class Observation:
    """A point-sampled target value, already in model space."""

    easting: float
    northing: float
    target: float


@dataclass(frozen=True)
class StandardScaler:
    """Per-variable location statistics plus the patch scale.

    Fitted on training folds only. `grid_sd` is the standard deviation of
    the auxiliary raster's valid cells and scales the terrain patches.
    """

    easting_mean: float
    easting_sd: float
    northing_mean: float
    northing_sd: float
    elevation_mean: float
    elevation_sd: float
    grid_sd: float

    def __post_init__(self):
        for name in ("easting_sd", "northing_sd", "elevation_sd", "grid_sd"):
            if getattr(self, name) <= 0:
                raise DataError(f"degenerate scaler: {name} must be positive")

    def transform_locations(self, easting, northing, elevation) -> np.ndarray:
        """Standardise to the (n, 3) location matrix fed to the network."""
        e = (np.asarray(easting, dtype=np.float64) - self.easting_mean) / self.easting_sd
        n = (np.asarray(northing, dtype=np.float64) - self.northing_mean) / self.northing_sd
        z = (np.asarray(elevation, dtype=np.float64) - self.elevation_mean) / self.elevation_sd
        return np.stack([e, n, z], axis=-1)

    def to_dict(self) -> dict:
        return {
            "easting_mean": self.easting_mean,
            "easting_sd": self.easting_sd,
            "northing_mean": self.northing_mean,
            "northing_sd": self.northing_sd,
            "elevation_mean": self.elevation_mean,
            "elevation_sd": self.elevation_sd,
            "grid_sd": self.grid_sd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardScaler":
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class SampleSet:
    """Columnar collection of prepared samples.

    patches: (n, size, size) centre-normalised terrain windows
    locations: (n, 3) standardised (easting, northing, elevation)
    targets: (n,)
    folds: (n,) fold label of each sample
    """

    patches: np.ndarray
    locations: np.ndarray
    targets: np.ndarray
    folds: np.ndarray

    def __len__(self) -> int:
        return self.targets.shape[0]

    def subset(self, idx) -> "SampleSet":
        return SampleSet(
            patches=self.patches[idx],
            locations=self.locations[idx],
            targets=self.targets[idx],
            folds=self.folds[idx],
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train / eval / test sample sets."""

    train: SampleSet
    eval: SampleSet
    test: SampleSet

    def all_folds(self) -> np.ndarray:
        return np.concatenate([self.train.folds, self.eval.folds, self.test.folds])


@dataclass(frozen=True)
class BuildResult:
    split: DatasetSplit
    scaler: StandardScaler
    manifest: list  # (index, fold, reason) per input observation; fold -1 if dropped
    n_dropped: int


# ---------------------------------------------------------------------------
# Observation CSV I/O
# ---------------------------------------------------------------------------


def read_observations(path) -> tuple[list[Observation], int]:
    """Read observations from a CSV with header `easting,northing,value`.

    Rows whose value (or coordinate) is missing or non-finite are dropped;
    the second return value counts them. Structurally broken rows raise a
    ParseError naming the line.
    """
    observations: list[Observation] = []
    dropped = 0
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file, expected header 'easting,northing,value'") from None
        if [h.strip().lower() for h in header] != _CSV_HEADER:
            raise ParseError(path, 1, f"expected header 'easting,northing,value', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, found {len(row)}")
            fields = []
            missing = False
            for token in row:
                token = token.strip()
                if token.lower() in _MISSING_TOKENS:
                    missing = True
                    break
                try:
                    fields.append(float(token))
                except ValueError:
                    raise ParseError(path, lineno, f"unparseable field {token!r}") from None
            if missing or not all(np.isfinite(fields)):
                dropped += 1
                continue
            observations.append(Observation(*fields))
    if dropped:
        logger.info("read_observations: dropped %d rows with missing or non-finite values", dropped)
    return observations, dropped


def write_observations(observations: list[Observation], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for o in observations:
            writer.writerow([repr(o.easting), repr(o.northing), repr(o.target)])


# ---------------------------------------------------------------------------
# Fold assignment
# ---------------------------------------------------------------------------


def assign_folds(n_observations: int, k: int = 10, seed: int = 0) -> np.ndarray:
    """Partition observation indices into k near-equal random folds.

    Returns an (n,) array of fold labels in [0, k). Sizes differ by at most
    one, with any remainder going to the lowest-numbered folds, so the last
    fold (used as the test fold) always has the floor size. Deterministic
    given the seed.
    """
    if k < 3:
        raise DataError("need k >= 3 folds (train/eval/test)")
    if k > n_observations:
        raise DataError(f"cannot split {n_observations} observations into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_observations)
    base, extra = divmod(n_observations, k)
    labels = np.empty(n_observations, dtype=np.int64)
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        labels[perm[start:start + size]] = fold
        start += size
    return labels


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def build_dataset(
    observations: list[Observation],
    raster: Raster,
    patch_size: int = 32,
    patch_cellsize: float | None = None,
    k: int = 10,
    seed: int = 0,
) -> BuildResult:
    """Extract patches, split into folds and standardise.

    Observations whose patch extraction fails (outside support, nodata in
    the window) are dropped and recorded in the manifest. The location
    scaler is fitted on the training folds only; folds k-2 and k-1 become
    the eval and test sets.
    """
    raw_patches = []
    kept_idx = []
    manifest: list[tuple[int, int, str]] = []
    reasons = {}
    for i, obs in enumerate(observations):
        try:
            p = extract_patch(raster, obs.easting, obs.northing, patch_size, patch_cellsize)
        except GridcastError as exc:
            reasons[i] = str(exc)
            continue
        raw_patches.append(p)
        kept_idx.append(i)

    if not kept_idx:
        raise DataError("no observations survived patch extraction")

    n = len(kept_idx)
    folds = assign_folds(n, k=k, seed=seed)

    fold_of = dict(zip(kept_idx, folds.tolist()))
    for i in range(len(observations)):
        if i in fold_of:
            manifest.append((i, fold_of[i], ""))
        else:
            manifest.append((i, -1, reasons[i]))
    n_dropped = len(observations) - n
    if n_dropped:
        logger.info("build_dataset: dropped %d/%d observations during extraction",
                    n_dropped, len(observations))

    easting = np.array([observations[i].easting for i in kept_idx])
    northing = np.array([observations[i].northing for i in kept_idx])
    elevation = np.array([p.centre_elevation for p in raw_patches])
    targets = np.array([observations[i].target for i in kept_idx])

    train_mask = folds < k - 2
    if not np.any(train_mask):
        raise DataError("no training samples after fold assignment")

    grid_sd = float(np.std(raster.valid_values()))
    if grid_sd <= 0:
        raise DataError("degenerate scaler: auxiliary raster is constant (grid_sd = 0)")

    def _stats(x):
        mean = float(np.mean(x[train_mask]))
        sd = float(np.std(x[train_mask]))
        return mean, sd

    e_mean, e_sd = _stats(easting)
    n_mean, n_sd = _stats(northing)
    z_mean, z_sd = _stats(elevation)
    if min(e_sd, n_sd, z_sd) <= 0:
        raise DataError("degenerate scaler: a location variable is constant on the training folds")

    scaler = StandardScaler(e_mean, e_sd, n_mean, n_sd, z_mean, z_sd, grid_sd)

    patches = np.stack([normalize_patch(p, grid_sd).values for p in raw_patches])
    locations = scaler.transform_locations(easting, northing, elevation)

    samples = SampleSet(patches=patches, locations=locations, targets=targets, folds=folds)
    split = DatasetSplit(
        train=samples.subset(train_mask),
        eval=samples.subset(folds == k - 2),
        test=samples.subset(folds == k - 1),
    )
    return BuildResult(split=split, scaler=scaler, manifest=manifest, n_dropped=n_dropped)


def zero_patches(split: DatasetSplit) -> DatasetSplit:
    """Replace every patch with zeros (location-only ablation input)."""

    def _zero(s: SampleSet) -> SampleSet:
        return replace(s, patches=np.zeros_like(s.patches))

    return DatasetSplit(train=_zero(split.train), eval=_zero(split.eval), test=_zero(split.test))


def write_manifest(manifest, path) -> None:
    """Write the per-observation fold/drop manifest CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["observation", "fold", "dropped_reason"])
        for idx, fold, reason in manifest:
            writer.writerow([idx, fold, reason])
