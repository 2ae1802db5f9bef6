"""Raster data model, ASCII grid I/O, bicubic sampling and patch extraction.

A Raster is an immutable georeferenced grid of auxiliary values (row 0 is
the northernmost row, cells are square, registration is the lower-left
corner of the grid). All sampling operations are pure functions of the
raster and are safe to call concurrently.

Interpolation is cubic convolution with the Catmull-Rom kernel (a = -0.5),
which reproduces linear and bilinear surfaces exactly and interpolates the
cell-centre values themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, NodataError, ParseError, SupportError

__all__ = [
    "Raster",
    "Patch",
    "read_raster",
    "write_raster",
    "bicubic_sample",
    "extract_patch",
    "normalize_patch",
]

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")

# 9 significant digits: enough for a stable decimal round trip of values
# that originated from <= 9 significant decimal digits.
_FMT = "#.9g"


def _render(v: float) -> str:
    return format(float(v), _FMT)


@dataclass(frozen=True)
class Raster:
    """A georeferenced grid. `values` has shape (nrows, ncols), row 0 north."""

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float
    values: np.ndarray

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise DataError("raster must have at least one row and one column")
        if self.cellsize <= 0:
            raise DataError("cellsize must be positive")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.nrows, self.ncols):
            raise DataError(
                f"values shape {v.shape} does not match (nrows, ncols)="
                f"({self.nrows}, {self.ncols})"
            )
        valid = v != self.nodata
        if not np.all(np.isfinite(v[valid])):
            raise DataError("raster contains non-finite values that are not nodata")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # -- geometry -----------------------------------------------------------

    @property
    def xmax(self) -> float:
        return self.xll + self.ncols * self.cellsize

    @property
    def ymax(self) -> float:
        return self.yll + self.nrows * self.cellsize

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Easting of each column, northing of each row (row 0 north)."""
        x = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        y = self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * self.cellsize
        return x, y

    def valid_values(self) -> np.ndarray:
        return self.values[self.values != self.nodata]

    def flipped_north_south(self) -> "Raster":
        return replace(self, values=self.values[::-1].copy())


@dataclass(frozen=True)
class Patch:
    """A square window of interpolated raster values centred on a point.

    `centre_elevation` is the interpolated value at the centre point itself,
    kept separately because for even patch sizes the centre is the shared
    corner of the middle four cells, not a cell. After normalisation it is 0.
    """

    size: int
    values: np.ndarray
    centre_easting: float
    centre_northing: float
    centre_elevation: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.size, self.size):
            raise DataError(f"patch values shape {v.shape} != ({self.size}, {self.size})")
        if not np.all(np.isfinite(v)):
            raise DataError("patch contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# ASCII grid file format
# ---------------------------------------------------------------------------


def read_raster(path) -> Raster:
    """Read an ASCII grid file.

    The format is six header lines (NCOLS, NROWS, XLLCORNER, YLLCORNER,
    CELLSIZE, NODATA_VALUE; keys case-insensitive) followed by nrows lines
    of ncols space-separated values, northernmost row first.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()

    header = {}
    for lineno, key in enumerate(_HEADER_KEYS, start=1):
        if lineno > len(lines):
            raise ParseError(path, lineno, f"missing header line {key.upper()}")
        parts = lines[lineno - 1].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise ParseError(path, lineno, f"expected '{key.upper()} <value>'")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric {key.upper()}: {parts[1]!r}") from None

    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise ParseError(path, 1, "NCOLS/NROWS must be positive integers")

    body = lines[6:]
    if len(body) < nrows:
        raise ParseError(path, 6 + len(body) + 1, f"expected {nrows} data rows, found {len(body)}")
    if len([ln for ln in body if ln.strip()]) > nrows:
        raise ParseError(path, 6 + nrows + 1, f"more than {nrows} data rows")

    values = np.empty((nrows, ncols), dtype=np.float64)
    for i in range(nrows):
        lineno = 7 + i
        tokens = body[i].split()
        if len(tokens) != ncols:
            raise ParseError(path, lineno, f"expected {ncols} values, found {len(tokens)}")
        try:
            values[i] = [float(t) for t in tokens]
        except ValueError:
            bad = next(t for t in tokens if not _is_float(t))
            raise ParseError(path, lineno, f"non-numeric cell value {bad!r}") from None

    try:
        return Raster(
            ncols=ncols,
            nrows=nrows,
            xll=header["xllcorner"],
            yll=header["yllcorner"],
            cellsize=header["cellsize"],
            nodata=header["nodata_value"],
            values=values,
        )
    except DataError as exc:
        raise ParseError(path, 1, str(exc)) from None


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def write_raster(r: Raster, path) -> None:
    """Write `r` in the ASCII grid format with 9-significant-digit values.

    Nodata cells are emitted as the same token declared on the
    NODATA_VALUE header line, so they survive the round trip exactly.
    """
    nodata_token = _render(r.nodata)
    header = (
        f"NCOLS {r.ncols}\n"
        f"NROWS {r.nrows}\n"
        f"XLLCORNER {_render(r.xll)}\n"
        f"YLLCORNER {_render(r.yll)}\n"
        f"CELLSIZE {_render(r.cellsize)}\n"
        f"NODATA_VALUE {nodata_token}\n"
    )
    rows = []
    nodata_mask = r.values == r.nodata
    for i in range(r.nrows):
        row = [
            nodata_token if nodata_mask[i, j] else _render(r.values[i, j])
            for j in range(r.ncols)
        ]
        rows.append(" ".join(row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(header)
        fh.write("\n".join(rows))
        fh.write("\n")


# ---------------------------------------------------------------------------
# Bicubic sampling
# ---------------------------------------------------------------------------


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Weights over the 4 support nodes at offsets -1, 0, 1, 2 for fraction t."""
    t2 = t * t
    t3 = t2 * t
    w = np.empty(t.shape + (4,), dtype=np.float64)
    w[..., 0] = -0.5 * t3 + t2 - 0.5 * t
    w[..., 1] = 1.5 * t3 - 2.5 * t2 + 1.0
    w[..., 2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w[..., 3] = 0.5 * t3 - 0.5 * t2
    return w


def bicubic_sample(r: Raster, easting, northing):
    """Catmull-Rom bicubic interpolation of cell-centre values.

    Accepts scalars or equal-shaped arrays of coordinates and returns a
    matching scalar or array. Every query needs a full 4x4 neighbourhood of
    valid cells: points closer than ~2 cells to the edge raise SupportError
    and nodata anywhere in the support raises NodataError.
    """
    e = np.asarray(easting, dtype=np.float64)
    n = np.asarray(northing, dtype=np.float64)
    scalar = e.ndim == 0 and n.ndim == 0
    e, n = np.atleast_1d(e), np.atleast_1d(n)
    if e.shape != n.shape:
        raise ValueError("easting and northing must have the same shape")

    # Continuous grid coordinates: cell centre (i, j) sits at (v, u) = (i, j).
    u = (e - r.xll) / r.cellsize - 0.5
    v = (r.nrows - (n - r.yll) / r.cellsize) - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)

    bad = (j0 < 1) | (j0 > r.ncols - 3) | (i0 < 1) | (i0 > r.nrows - 3)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise SupportError(
            f"query point ({e.flat[k]:.3f}, {n.flat[k]:.3f}) lies outside the "
            f"bicubic support of the raster"
        )

    off = np.arange(-1, 3)
    rows = i0[..., None] + off            # (..., 4)
    cols = j0[..., None] + off
    support = r.values[rows[..., :, None], cols[..., None, :]]   # (..., 4, 4)

    if np.any(support == r.nodata):
        hit = np.any(support == r.nodata, axis=(-2, -1))
        k = int(np.argmax(hit))
        raise NodataError(
            f"nodata in the interpolation support of point "
            f"({e.flat[k]:.3f}, {n.flat[k]:.3f})"
        )

    wy = _catmull_rom_weights(v - i0)     # (..., 4)
    wx = _catmull_rom_weights(u - j0)
    out = np.einsum("...i,...j,...ij->...", wy, wx, support)
    return float(out[0]) if scalar else out.reshape(np.shape(easting))


# ---------------------------------------------------------------------------
# Patch extraction and normalisation
# ---------------------------------------------------------------------------


def extract_patch(r: Raster, easting: float, northing: float,
                  size: int = 32, cellsize: float | None = None) -> Patch:
    """Extract a size x size patch of interpolated values centred on a point.

    The patch grid may use a different cell size than the raster. For even
    sizes the centre point is the shared corner of the middle four patch
    cells; `centre_elevation` is sampled at the point itself. The whole
    footprint must lie inside bicubic support; extraction refuses (raises)
    rather than pad or embed nodata.
    """
    if size < 1:
        raise ValueError("patch size must be >= 1")
    pcs = r.cellsize if cellsize is None else float(cellsize)
    if pcs <= 0:
        raise ValueError("patch cellsize must be positive")

    half = (size - 1) / 2.0
    dx = (np.arange(size) - half) * pcs
    dy = (half - np.arange(size)) * pcs
    ee = easting + np.tile(dx, size)
    nn = northing + np.repeat(dy, size)
    try:
        vals = bicubic_sample(r, ee, nn).reshape(size, size)
        centre = bicubic_sample(r, easting, northing)
    except (SupportError, NodataError) as exc:
        raise type(exc)(
            f"patch extraction failed at observation ({easting:.3f}, {northing:.3f}): {exc}"
        ) from None
    return Patch(
        size=size,
        values=vals,
        centre_easting=float(easting),
        centre_northing=float(northing),
        centre_elevation=centre,
    )


def normalize_patch(p: Patch, grid_sd: float) -> Patch:
    """Shift the patch so its centre sample is 0 and scale by `grid_sd`.

    Returns a new Patch; the stored centre sample becomes exactly 0, which
    is what the normalisation invariant is asserted on.
    """
    if grid_sd <= 0:
        raise ValueError("grid_sd must be positive")
    values = (p.values - p.centre_elevation) / grid_sd
    return replace(p, values=values, centre_elevation=0.0)
