"""Terrain rasters of coefficients ``v in [0, 1]`` with potential ``-log v``.

File format: a header line ``ncols,nrows,cellsize,origin_x,origin_y``
followed by ``nrows`` lines of ``ncols`` comma-separated values, top row
first. The origin is the lower-left corner of the raster.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

# coefficients for artificial, agricultural, forest, water and wetland cells
TERRAIN_COEFFICIENTS = {"artificial": 0.2, "agricultural": 0.6, "forest": 0.5, "water": 0.0, "wetland": 0.5}


@dataclass(frozen=True)
class TerrainRaster:
    v: np.ndarray  # (nrows, ncols), row 0 is the top row
    cellsize: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.v, float)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("raster must be a non-empty 2-d grid")
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("terrain coefficients must lie in [0, 1]")
        if not self.cellsize > 0:
            raise ValueError("cellsize must be positive")
        object.__setattr__(self, "v", v)

    @property
    def nrows(self):
        return self.v.shape[0]

    @property
    def ncols(self):
        return self.v.shape[1]

    @property
    def extent(self):
        """``(xmin, xmax, ymin, ymax)``."""
        return (self.origin_x, self.origin_x + self.ncols * self.cellsize,
                self.origin_y, self.origin_y + self.nrows * self.cellsize)

    def potential(self):
        """``-log v`` with ``inf`` on zero-coefficient cells."""
        with np.errstate(divide="ignore"):
            return -np.log(self.v)

    def cell_of(self, x, y):
        """``(row, col)`` indices (row 0 on top) or ``-1`` entries off the raster."""
        col = np.floor((np.asarray(x, float) - self.origin_x) / self.cellsize).astype(np.int64)
        rb = np.floor((np.asarray(y, float) - self.origin_y) / self.cellsize).astype(np.int64)
        inside = (col >= 0) & (col < self.ncols) & (rb >= 0) & (rb < self.nrows)
        row = np.where(inside, self.nrows - 1 - rb, -1)
        return row, np.where(inside, col, -1)

    def value_at(self, x, y, off=0.0):
        """Coefficient ``v`` at points; ``off`` outside the raster."""
        row, col = self.cell_of(x, y)
        inside = row >= 0
        return np.where(inside, self.v[np.maximum(row, 0), np.maximum(col, 0)], off)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.ncols, self.nrows, repr(self.cellsize), repr(self.origin_x), repr(self.origin_y)])
            for row in self.v:
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if not rows or len(rows[0]) != 5:
            raise ValueError("raster header must be ncols,nrows,cellsize,origin_x,origin_y")
        ncols, nrows = int(rows[0][0]), int(rows[0][1])
        cellsize, ox, oy = (float(x) for x in rows[0][2:])
        v = np.array([[float(x) for x in r] for r in rows[1:]])
        if v.shape != (nrows, ncols):
            raise ValueError(f"raster body is {v.shape}, header says {(nrows, ncols)}")
        return cls(v, cellsize, ox, oy)


def two_lake_raster(cellsize=20.0):
    """Synthetic 2 km x 1.5 km map with two circular lakes and mixed land cover."""
    ncols, nrows = int(2000 / cellsize), int(1500 / cellsize)
    xc = (np.arange(ncols) + 0.5) * cellsize
    yc = (np.arange(nrows)[::-1] + 0.5) * cellsize
    X, Y = np.meshgrid(xc, yc)
    c = TERRAIN_COEFFICIENTS
    v = np.full((nrows, ncols), c["forest"])
    v[(X > 900) & (X < 1100)] = c["agricultural"]
    v[Y > 1300] = c["artificial"]
    v[(Y < 200) & (X > 1200)] = c["wetland"]
    lake = ((X - 600) ** 2 + (Y - 750) ** 2 < 250 ** 2) | ((X - 1400) ** 2 + (Y - 750) ** 2 < 250 ** 2)
    v[lake] = c["water"]
    return TerrainRaster(v, cellsize, 0.0, 0.0)


def two_lake_observations(n=16, tau=16.0):
    """``n`` locations clockwise on an ellipse around both lakes at times ``k tau / n``."""
    times = tau * np.arange(n) / n
    ang = np.pi / 2 - 2 * np.pi * np.arange(n) / n
    z = np.column_stack([1000 + 800 * np.cos(ang), 750 + 500 * np.sin(ang)])
    return times, z
