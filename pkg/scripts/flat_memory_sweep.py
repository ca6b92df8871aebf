"""Peak resident memory vs scene size for each rendering mode.

Builds constant-density scenes at 1x/2x/4x primitive count (the same per-cell
layout extended over a larger footprint) and replays one interior fly-through
under static, block double-buffer, and frustum-voxel sessions with a single
fixed byte budget. The offloading modes should stay flat while the static
footprint grows with the scene.

Usage: python3 scripts/flat_memory_sweep.py
"""

import numpy as np

from landmark.common import VirtualClock, make_rng
from landmark.data_io import look_at_camera
from landmark.engine_api import gaussian_cell_groups
from landmark.gaussian_core import GaussianModel
from landmark.render_runtime import SessionConfig, run_session
from landmark.scene_manager import onload_region, partition_scene

CELL = 2.0
PRIMS_PER_CELL = 12


def tiled_scene(nx_cells, ny_cells):
    """Cell-seeded layout: cell (ix, iy) holds identical primitives at every scale."""
    parts = {"means": [], "quats": [], "scales": [], "logits": [], "sh": []}
    for iy in range(ny_cells):
        for ix in range(nx_cells):
            rng = make_rng(7000 + ix * 97 + iy, "offload_cell")
            lo = np.array([ix * CELL + 0.1, iy * CELL + 0.1, -0.4])
            hi = np.array([(ix + 1) * CELL - 0.1, (iy + 1) * CELL - 0.1, 0.4])
            parts["means"].append(rng.uniform(lo, hi, (PRIMS_PER_CELL, 3)))
            q = rng.standard_normal((PRIMS_PER_CELL, 4))
            parts["quats"].append(q / np.linalg.norm(q, axis=1, keepdims=True))
            parts["scales"].append(rng.uniform(0.08, 0.2, (PRIMS_PER_CELL, 3)))
            parts["logits"].append(rng.uniform(0.0, 2.0, PRIMS_PER_CELL))
            sh = np.zeros((PRIMS_PER_CELL, 4, 3))
            sh[:, 0] = rng.uniform(0.3, 3.0, (PRIMS_PER_CELL, 3))
            parts["sh"].append(sh)
    model = GaussianModel(
        means=np.concatenate(parts["means"]),
        quats=np.concatenate(parts["quats"]),
        scales=np.concatenate(parts["scales"]),
        opacity_logits=np.concatenate(parts["logits"]),
        sh=np.concatenate(parts["sh"]),
        sh_degree=1,
    )
    bbox = np.array([[0.0, 0.0, -1.0], [nx_cells * CELL, ny_cells * CELL, 1.0]])
    return model, partition_scene(bbox, nx_cells, ny_cells)


def shared_trajectory(n=20, size=24):
    xs = np.linspace(3.2, 4.8, n)
    ys = np.linspace(3.2, 4.2, n)
    cams = [
        look_at_camera((x, y, 4.0), (x, y + 1e-3, 0.0), fov_deg=40.0,
                       width=size, height=size, near=0.01, far=6.0)
        for x, y in zip(xs, ys)
    ]
    return cams, np.linspace(0.0, 5.0, n)


def main():
    cams, times = shared_trajectory()
    model1, grid1 = tiled_scene(4, 4)
    groups1 = gaussian_cell_groups(model1, grid1)
    budget = int(2.5 * max(
        sum(groups1[c].nbytes for c in onload_region(grid1, cell, 1))
        for cell in grid1.cells()
    ))
    print(f"fixed budget: {budget} bytes")
    print(f"{'grid':>7} {'prims':>6} {'static':>8} {'block':>8} {'frustum':>8}")
    for nx, ny in ((4, 4), (8, 4), (8, 8)):
        model, grid = tiled_scene(nx, ny)
        _, s = run_session(model, cams, times, SessionConfig(mode="static_full"),
                           keep_images=False)
        _, b = run_session(model, cams, times,
                           SessionConfig(mode="block_double_buffer", budget_bytes=budget),
                           grid=grid, keep_images=False, clock=VirtualClock())
        _, f = run_session(model, cams, times,
                           SessionConfig(mode="frustum_voxel", budget_bytes=budget,
                                         voxel_size=CELL),
                           keep_images=False, clock=VirtualClock())
        print(f"{nx:>3}x{ny:<3} {model.count:>6} {s[-1].peak_resident_bytes:>8} "
              f"{b[-1].peak_resident_bytes:>8} {f[-1].peak_resident_bytes:>8}")


if __name__ == "__main__":
    main()
