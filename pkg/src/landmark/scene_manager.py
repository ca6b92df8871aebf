"""Scene bookkeeping: cell grid, traversal order, voxel index, frustum filter.

All spatial binning uses half-open intervals; boundary points go to the
higher index (clamped at the top edge of the grid).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .common import InvalidInputError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# cell grid


@dataclass
class SceneGrid:
    """2D partition of the scene footprint on the x-y plane."""

    bbox: np.ndarray  # (2, 3) world box
    nx: int
    ny: int
    block_to_submodel: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        if self.nx < 1 or self.ny < 1:
            raise InvalidInputError("cell counts must be >= 1")
        if not np.all(self.bbox[1] > self.bbox[0]):
            raise InvalidInputError("degenerate scene bbox")
        if not self.block_to_submodel:
            self.block_to_submodel = {
                (ix, iy): iy * self.nx + ix for iy in range(self.ny) for ix in range(self.nx)
            }

    @property
    def cell_extent(self) -> np.ndarray:
        span = self.bbox[1, :2] - self.bbox[0, :2]
        return span / np.array([self.nx, self.ny])

    def cell_of_point(self, xy) -> tuple[int, int]:
        xy = np.asarray(xy, dtype=np.float64)[:2]
        w, h = self.cell_extent
        ix = int(np.floor((xy[0] - self.bbox[0, 0]) / w))
        iy = int(np.floor((xy[1] - self.bbox[0, 1]) / h))
        return min(max(ix, 0), self.nx - 1), min(max(iy, 0), self.ny - 1)

    def cell_bbox(self, index) -> np.ndarray:
        ix, iy = index
        w, h = self.cell_extent
        lo = np.array(
            [self.bbox[0, 0] + ix * w, self.bbox[0, 1] + iy * h, self.bbox[0, 2]]
        )
        hi = np.array(
            [self.bbox[0, 0] + (ix + 1) * w, self.bbox[0, 1] + (iy + 1) * h, self.bbox[1, 2]]
        )
        return np.stack([lo, hi])

    def cells(self):
        return [(ix, iy) for iy in range(self.ny) for ix in range(self.nx)]


@dataclass
class Cell:
    index: tuple[int, int]
    bbox: np.ndarray
    resident_bytes: int = 0


def partition_scene(bbox, nx: int, ny: int) -> SceneGrid:
    """Cells tile the footprint exactly with half-open x/y intervals."""
    return SceneGrid(bbox=np.asarray(bbox, dtype=np.float64), nx=nx, ny=ny)


def zigzag_order(grid: SceneGrid) -> list[tuple[int, int]]:
    """Serpentine row order: row 0 left to right, row 1 right to left, ..."""
    out = []
    for iy in range(grid.ny):
        xs = range(grid.nx) if iy % 2 == 0 else range(grid.nx - 1, -1, -1)
        out.extend((ix, iy) for ix in xs)
    return out


def onload_region(grid: SceneGrid, core: tuple[int, int], ring: int = 1) -> set[tuple[int, int]]:
    """Cells within Chebyshev distance `ring` of the core, clipped to the grid."""
    cx, cy = core
    if not (0 <= cx < grid.nx and 0 <= cy < grid.ny):
        raise InvalidInputError(f"core cell {core} outside grid")
    if ring < 0:
        raise InvalidInputError("ring must be >= 0")
    return {
        (ix, iy)
        for ix in range(max(0, cx - ring), min(grid.nx, cx + ring + 1))
        for iy in range(max(0, cy - ring), min(grid.ny, cy + ring + 1))
    }


def assign_cameras_to_cells(cameras, grid: SceneGrid) -> dict:
    """Each camera goes to exactly one cell by its center (half-open rule);
    out-of-footprint centers clamp to the nearest cell and are logged."""
    table = {c: [] for c in grid.cells()}
    for i, cam in enumerate(cameras):
        center = cam.center
        inside = (
            grid.bbox[0, 0] <= center[0] < grid.bbox[1, 0]
            and grid.bbox[0, 1] <= center[1] < grid.bbox[1, 1]
        )
        if not inside:
            log.info("camera %d center %s outside footprint; clamped to nearest cell", i, center[:2])
        table[grid.cell_of_point(center)].append(i)
    return table


def filter_samples(positions, block_bbox) -> np.ndarray:
    """Indices of samples inside the block (half-open), order preserved."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    bb = np.asarray(block_bbox, dtype=np.float64)
    inside = np.all((p >= bb[0]) & (p < bb[1]), axis=-1)
    return np.nonzero(inside)[0]


# ---------------------------------------------------------------------------
# voxel index


@dataclass
class VoxelIndex:
    """Contiguous per-voxel ranges into a spatially reordered primitive array."""

    voxel_size: float
    origin: np.ndarray  # (3,) grid origin
    voxel_keys: np.ndarray  # (V, 3) int coords, lexicographic order
    ranges: np.ndarray  # (V, 2) [start, end) into the reordered array
    permutation: np.ndarray  # (N,) reordered position -> original id
    voxel_max_scale: np.ndarray  # (V,) max world sigma of resident primitives

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_keys)

    def voxel_bbox(self, v: int, margin: float = 0.0) -> np.ndarray:
        lo = self.origin + self.voxel_keys[v] * self.voxel_size - margin
        hi = self.origin + (self.voxel_keys[v] + 1) * self.voxel_size + margin
        return np.stack([lo, hi])

    def voxel_prim_ids(self, v: int) -> np.ndarray:
        s, e = self.ranges[v]
        return self.permutation[s:e]


def reorder_voxel_grid(model, voxel_size: float) -> tuple[VoxelIndex, "object"]:
    """Group primitives contiguously per voxel (lexicographic ix, iy, iz order;
    original order preserved within a voxel).  Returns (index, reordered model)."""
    if voxel_size <= 0:
        raise InvalidInputError("voxel_size must be positive")
    means = model.means.numpy()
    origin = np.floor(means.min(axis=0) / voxel_size) * voxel_size
    keys = np.floor((means - origin) / voxel_size).astype(np.int64)
    # lexicographic (ix, iy, iz) major-to-minor; stable keeps in-voxel order
    perm = np.lexsort((np.arange(len(means)), keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[perm]
    boundaries = np.nonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(means)]])
    voxel_keys = sorted_keys[starts]
    max_scale = model.scales.max(dim=-1).values.numpy()
    vox_scale = np.array([max_scale[perm[s:e]].max() for s, e in zip(starts, ends)])
    index = VoxelIndex(
        voxel_size=float(voxel_size),
        origin=origin,
        voxel_keys=voxel_keys,
        ranges=np.stack([starts, ends], axis=1),
        permutation=perm,
        voxel_max_scale=vox_scale,
    )
    return index, model.subset(torch.as_tensor(perm))


# ---------------------------------------------------------------------------
# frustum


def frustum_planes(camera) -> np.ndarray:
    """Six inward-facing world-space planes (a, b, c, d) with ax+by+cz+d >= 0 inside."""
    r = camera.r_wc
    t = camera.t_wc
    c = camera.center
    fwd = r[2]
    planes = []
    # near and far
    planes.append(np.concatenate([fwd, [-(fwd @ c) - camera.near]]))
    planes.append(np.concatenate([-fwd, [(fwd @ c) + camera.far]]))
    # side planes through the camera center; normals point inward
    corners_px = [
        (0.0, 0.0),
        (camera.width, 0.0),
        (camera.width, camera.height),
        (0.0, camera.height),
    ]
    dirs = []
    for u, v in corners_px:
        d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
        dirs.append(r.T @ d_cam)
    for i in range(4):
        n = np.cross(dirs[i], dirs[(i + 1) % 4])
        n /= np.linalg.norm(n)
        if n @ fwd < 0:
            n = -n
        planes.append(np.concatenate([n, [-(n @ c)]]))
    return np.stack(planes)


def aabb_intersects_frustum(bbox: np.ndarray, planes: np.ndarray) -> bool:
    """Conservative 6-plane test: out only if fully outside some plane."""
    corners = np.array(
        [[bbox[i, 0], bbox[j, 1], bbox[k, 2]] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    )
    for p in planes:
        if np.all(corners @ p[:3] + p[3] < 0):
            return False
    return True


def frustum_visible_voxels(index: VoxelIndex, camera, margin_sigma: float = 3.0) -> list[int]:
    """Voxels whose inflated AABB meets the camera frustum.

    Inflation: margin_sigma times the voxel's max resident world sigma, plus
    a small absolute slack covering the rasterizer's screen-space low-pass
    radius so culling never removes a visible contribution.
    """
    planes = frustum_planes(camera)
    out = []
    for v in range(index.n_voxels):
        margin = margin_sigma * float(index.voxel_max_scale[v]) + 0.05 * index.voxel_size
        if aabb_intersects_frustum(index.voxel_bbox(v, margin), planes):
            out.append(v)
    return out


def frustum_filter(index: VoxelIndex, camera, margin_sigma: float = 3.0) -> np.ndarray:
    """Sorted original primitive ids in frustum-visible voxels."""
    voxels = frustum_visible_voxels(index, camera, margin_sigma)
    if not voxels:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([index.voxel_prim_ids(v) for v in voxels]))
