"""Coarse geometry extraction: per-lattice-point distance to the nearest
qualifying Gaussian center (an unsigned distance field on the grid).

After pool release every grid point hosts a Gaussian again, most of them
nearly transparent, so a raw nearest-center query would be geometry-free.
``opacity_floor`` restricts the candidate set to visibly contributing
Gaussians.  The fast path hashes centers into voxel-sized bins and walks
expanding rings; it computes the same squared distances as the exhaustive
oracle, so the two agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import EmptyGeometryError, ShapeError
from .model import Bounds, GaussianVolume

# Above this many hash cells (wildly scattered centers) brute force wins.
_MAX_HASH_CELLS = 4_000_000


@dataclass
class GDFVolume:
    """Nonnegative distances in the volume's lexicographic grid order."""

    resolution: int
    bounds: Bounds
    values: np.ndarray  # (resolution**3,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape != (self.resolution ** 3,):
            raise ShapeError(
                f"values length {self.values.size} != resolution^3 {self.resolution ** 3}")

    def grid(self) -> np.ndarray:
        n = self.resolution
        return self.values.reshape(n, n, n)


def _qualifying_centers(volume: GaussianVolume, opacity_floor: float) -> np.ndarray:
    opac = volume.activated_opacities()
    mask = volume.active_mask & (opac >= opacity_floor)
    if not mask.any():
        raise EmptyGeometryError(
            f"no active Gaussian reaches opacity floor {opacity_floor}")
    return volume.centers()[mask]


@njit(cache=True)
def _scan_cell(cid, qx, qy, qz, centers, cell_order, cell_start, best):
    for k in range(cell_start[cid], cell_start[cid + 1]):
        j = cell_order[k]
        dx = qx - centers[j, 0]
        dy = qy - centers[j, 1]
        dz = qz - centers[j, 2]
        sq = dx * dx + dy * dy + dz * dz
        if sq < best:
            best = sq
    return best


@njit(cache=True)
def _nearest_distances(queries, centers, cell_order, cell_start,
                       ncx, ncy, ncz, ox, oy, oz, cell, out):
    max_ring = max(ncx, max(ncy, ncz))
    for i in range(queries.shape[0]):
        qx = queries[i, 0]
        qy = queries[i, 1]
        qz = queries[i, 2]
        cx = min(max(int(math.floor((qx - ox) / cell)), 0), ncx - 1)
        cy = min(max(int(math.floor((qy - oy) / cell)), 0), ncy - 1)
        cz = min(max(int(math.floor((qz - oz) / cell)), 0), ncz - 1)
        best = np.inf
        for ring in range(max_ring + 1):
            if ring == 0:
                cid = (cx * ncy + cy) * ncz + cz
                best = _scan_cell(cid, qx, qy, qz, centers, cell_order, cell_start, best)
            else:
                y0 = max(cy - ring, 0)
                y1 = min(cy + ring, ncy - 1)
                z0 = max(cz - ring, 0)
                z1 = min(cz + ring, ncz - 1)
                # Two x-extreme faces of the Chebyshev shell.
                for ax in (cx - ring, cx + ring):
                    if 0 <= ax < ncx:
                        for ay in range(y0, y1 + 1):
                            for az in range(z0, z1 + 1):
                                cid = (ax * ncy + ay) * ncz + az
                                best = _scan_cell(cid, qx, qy, qz, centers,
                                                  cell_order, cell_start, best)
                # y faces, interior x range to avoid rescanning x faces.
                xi0 = max(cx - ring + 1, 0)
                xi1 = min(cx + ring - 1, ncx - 1)
                for ay in (cy - ring, cy + ring):
                    if 0 <= ay < ncy:
                        for ax in range(xi0, xi1 + 1):
                            for az in range(z0, z1 + 1):
                                cid = (ax * ncy + ay) * ncz + az
                                best = _scan_cell(cid, qx, qy, qz, centers,
                                                  cell_order, cell_start, best)
                # z faces, interior x and y ranges.
                yi0 = max(cy - ring + 1, 0)
                yi1 = min(cy + ring - 1, ncy - 1)
                for az in (cz - ring, cz + ring):
                    if 0 <= az < ncz:
                        for ax in range(xi0, xi1 + 1):
                            for ay in range(yi0, yi1 + 1):
                                cid = (ax * ncy + ay) * ncz + az
                                best = _scan_cell(cid, qx, qy, qz, centers,
                                                  cell_order, cell_start, best)
            # Any point in ring r+1 sits at least ring*cell away.
            if best <= (ring * cell) ** 2:
                break
        out[i] = math.sqrt(best)


def extract_gdf(volume: GaussianVolume, opacity_floor: float = 0.05) -> GDFVolume:
    """Distance from every lattice point to its nearest qualifying center."""
    centers = _qualifying_centers(volume, opacity_floor)
    queries = volume.grid_positions()
    cell = float(volume.bounds.spacing(volume.resolution).min())
    lo = np.minimum(centers.min(axis=0), queries.min(axis=0)) - 0.5 * cell
    hi = np.maximum(centers.max(axis=0), queries.max(axis=0))
    ncells = np.maximum(np.floor((hi - lo) / cell).astype(np.int64) + 1, 1)
    total = int(ncells.prod())
    if total > _MAX_HASH_CELLS:
        return gdf_oracle(volume, opacity_floor)
    coords = np.clip(((centers - lo) / cell).astype(np.int64), 0, ncells - 1)
    cell_ids = (coords[:, 0] * ncells[1] + coords[:, 1]) * ncells[2] + coords[:, 2]
    order = np.argsort(cell_ids, kind="stable")
    cell_start = np.searchsorted(cell_ids[order], np.arange(total + 1)).astype(np.int64)
    out = np.empty(queries.shape[0])
    _nearest_distances(queries, centers, order.astype(np.int64), cell_start,
                       int(ncells[0]), int(ncells[1]), int(ncells[2]),
                       float(lo[0]), float(lo[1]), float(lo[2]), cell, out)
    return GDFVolume(resolution=volume.resolution, bounds=volume.bounds, values=out)


def gdf_oracle(volume: GaussianVolume, opacity_floor: float = 0.05) -> GDFVolume:
    """Exhaustive reference: minimum over all pairwise distances."""
    centers = _qualifying_centers(volume, opacity_floor)
    queries = volume.grid_positions()
    out = np.empty(queries.shape[0])
    chunk = max(1, 2_000_000 // max(centers.shape[0], 1))
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        diff = q[:, None, :] - centers[None, :, :]
        sq = (diff * diff).sum(axis=2)
        out[s:s + chunk] = np.sqrt(sq.min(axis=1))
    return GDFVolume(resolution=volume.resolution, bounds=volume.bounds, values=out)
