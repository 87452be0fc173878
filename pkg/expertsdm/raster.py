"""Regular rasters and ESRI ASCII grid files.

Values are held as a (nrows, ncols) float array whose row 0 is the southern
edge of the grid, so cell (i, j) has its center at
(xll + (j + 0.5) * cell_size, yll + (i + 0.5) * cell_size). Missing entries
are NaN. ESRI files store the northern row first; readers and writers flip.
"""

import logging
import numpy as np

from expertsdm.exceptions import InputError
from expertsdm.util import float_text

CATEGORIES = (1, 2, 3, 4)

class Raster():

    def __init__(self, ncols, nrows, cell_size, origin, values=None):
        ncols = int(ncols)
        nrows = int(nrows)
        if ncols < 1 or nrows < 1:
            raise InputError(f"Raster must have at least one row and column, got {nrows}x{ncols}")
        if not cell_size > 0:
            raise InputError(f"Raster cell size must be positive, got {cell_size}")
        self.ncols = ncols
        self.nrows = nrows
        self.cell_size = float(cell_size)
        self.origin = (float(origin[0]), float(origin[1]))
        if values is None:
            values = np.full((nrows, ncols), np.nan)
        values = np.array(values, dtype=float).reshape(nrows, ncols)
        values.setflags(write=False)
        self.values = values

    def __repr__(self):
        return (f"Raster(ncols={self.ncols}, nrows={self.nrows}, "
                f"cell_size={self.cell_size}, origin={self.origin})")

    def with_values(self, values):
        return Raster(self.ncols, self.nrows, self.cell_size, self.origin, values)

    def extent(self):
        x0, y0 = self.origin
        return (x0, y0,
                x0 + self.ncols * self.cell_size,
                y0 + self.nrows * self.cell_size)

    def width(self):
        return self.ncols * self.cell_size

    def height(self):
        return self.nrows * self.cell_size

    def cell_centers(self):
        x0, y0 = self.origin
        xs = x0 + (np.arange(self.ncols) + 0.5) * self.cell_size
        ys = y0 + (np.arange(self.nrows) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def flat(self):
        return self.values.ravel()

    def cell_index(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        x0, y0 = self.origin
        j = np.floor((points[:, 0] - x0) / self.cell_size).astype(int)
        i = np.floor((points[:, 1] - y0) / self.cell_size).astype(int)
        # the far edges belong to the last row/column
        j[(j == self.ncols) & np.isclose(points[:, 0], x0 + self.width())] = self.ncols - 1
        i[(i == self.nrows) & np.isclose(points[:, 1], y0 + self.height())] = self.nrows - 1
        inside = (i >= 0) & (i < self.nrows) & (j >= 0) & (j < self.ncols)
        index = np.where(inside, i * self.ncols + j, -1)
        return index

    def sample(self, points):
        index = self.cell_index(points)
        out = np.full(index.shape, np.nan)
        ok = index >= 0
        out[ok] = self.flat()[index[ok]]
        return out

    def is_categorical(self):
        v = self.flat()
        v = v[~np.isnan(v)]
        return bool(np.all(np.isin(v, CATEGORIES)))

    def check_categorical(self):
        if not self.is_categorical():
            v = self.flat()
            bad = np.unique(v[~np.isnan(v) & ~np.isin(v, CATEGORIES)])
            raise InputError(f"Categorical raster holds values outside 1..4: {bad[:5].tolist()}")
        return self

    def same_geometry(self, other):
        return (self.ncols == other.ncols and self.nrows == other.nrows and
                np.isclose(self.cell_size, other.cell_size) and
                np.allclose(self.origin, other.origin))

    def header(self):
        return {"ncols": self.ncols, "nrows": self.nrows,
                "xllcorner": self.origin[0], "yllcorner": self.origin[1],
                "cellsize": self.cell_size}


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter",
                "yllcenter", "cellsize", "nodata_value")

def read_raster(path):
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as ex:
        raise InputError(f"Unable to read raster {path}: {ex.strerror}") from ex

    header = {}
    body_start = 0
    for (ix, line) in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            body_start = ix
            break
        if len(parts) != 2:
            raise InputError(f"{path}:{ix+1}: malformed header line '{line}'")
        header[key] = parts[1]
    else:
        body_start = len(lines)

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise InputError(f"{path}: header entry {key} missing")
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        cell_size = float(header["cellsize"])
        nodata = float(header.get("nodata_value", -9999))
        if "xllcorner" in header and "yllcorner" in header:
            origin = (float(header["xllcorner"]), float(header["yllcorner"]))
        elif "xllcenter" in header and "yllcenter" in header:
            origin = (float(header["xllcenter"]) - cell_size / 2,
                      float(header["yllcenter"]) - cell_size / 2)
        else:
            raise InputError(f"{path}: lower-left corner missing from header")
    except ValueError as ex:
        raise InputError(f"{path}: malformed header, {ex}") from ex

    rows = []
    for (ix, line) in enumerate(lines[body_start:], start=body_start + 1):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split()]
        except ValueError as ex:
            raise InputError(f"{path}:{ix}: {ex}") from ex
        if len(row) != ncols:
            raise InputError(f"{path}:{ix}: expected {ncols} values, got {len(row)}")
        rows.append(row)
    if len(rows) != nrows:
        raise InputError(f"{path}: expected {nrows} rows, got {len(rows)}")

    values = np.array(rows[::-1], dtype=float)
    values[values == nodata] = np.nan
    logging.debug(f"read raster {path}: {nrows}x{ncols}, cell size {cell_size}")
    return Raster(ncols, nrows, cell_size, origin, values)

def format_raster(raster, nodata=-9999):
    out = [f"ncols {raster.ncols}",
           f"nrows {raster.nrows}",
           f"xllcorner {float_text(raster.origin[0])}",
           f"yllcorner {float_text(raster.origin[1])}",
           f"cellsize {float_text(raster.cell_size)}",
           f"NODATA_value {nodata}"]
    nodata_text = str(nodata)
    for row in raster.values[::-1]:
        out.append(" ".join(nodata_text if np.isnan(v) else float_text(v) for v in row))
    return "\n".join(out) + "\n"

def write_raster(path, raster, nodata=-9999):
    logging.debug(f"writing raster {path}")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_raster(raster, nodata=nodata))
    except OSError as ex:
        raise InputError(f"Unable to write raster {path}: {ex.strerror}") from ex

def aggregate_raster(raster, factor, categorical=False):
    """Coarsen by an integer factor.

    Continuous cells take the mean of the non-missing fine cells; categorical
    cells take the most frequent category, ties going to the lower one.
    Partial blocks at the northern and eastern edges are kept.
    """
    factor = int(factor)
    if factor < 1:
        raise InputError(f"Aggregation factor must be a positive integer, got {factor}")
    nrows = -(-raster.nrows // factor)
    ncols = -(-raster.ncols // factor)
    out = np.full((nrows, ncols), np.nan)
    for i in range(nrows):
        for j in range(ncols):
            block = raster.values[i*factor:(i+1)*factor, j*factor:(j+1)*factor].ravel()
            block = block[~np.isnan(block)]
            if block.size == 0:
                continue
            if categorical:
                counts = [np.count_nonzero(block == c) for c in CATEGORIES]
                out[i, j] = CATEGORIES[int(np.argmax(counts))]
            else:
                out[i, j] = block.mean()
    return Raster(ncols, nrows, raster.cell_size * factor, raster.origin, out)
