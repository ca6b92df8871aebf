"""Stall behavior of the block double-buffer prefetcher vs link bandwidth.

Replays a serpentine trajectory that crosses many cell boundaries under a
simulated transfer link. High bandwidth should produce zero stalls (every
swap is prefetched in time); starving the link forces stall-then-swap events.

Usage: python3 scripts/prefetch_stall_trace.py
"""

import numpy as np

from landmark.common import VirtualClock
from landmark.data_io import generate_synthetic_scene, look_at_camera
from landmark.memory_tiers import TransferConfig
from landmark.render_runtime import SessionConfig, run_session
from landmark.scene_manager import partition_scene


def serpentine(n=200, size=24):
    path = []
    for row, y in enumerate(np.linspace(-3.0, 3.0, 4)):
        xs = np.linspace(-3.7, 3.7, n // 4)
        if row % 2 == 1:
            xs = xs[::-1]
        path.extend((x, y) for x in xs)
    cams = [
        look_at_camera((x, y, 1.0), (x, y + 2.0, 0.0), fov_deg=70.0,
                       width=size, height=size)
        for x, y in path
    ]
    return cams, np.linspace(0.0, 100.0, len(cams))


def main():
    scene = generate_synthetic_scene(41, n_prims=100, n_cameras=2, image_size=24)
    grid = partition_scene(scene.bbox, 4, 4)
    cams, times = serpentine()
    print(f"{'bandwidth (B/s)':>16} {'stalls':>7} {'crossings':>10}")
    for bw in (1e9, 1e6, 1e4, 2e3):
        cfg = SessionConfig(
            mode="block_double_buffer", budget_bytes=1 << 30,
            transfer=TransferConfig(bandwidth_bytes_per_s=bw),
        )
        _, stats = run_session(scene.model, cams, times, cfg, grid=grid,
                               keep_images=False, clock=VirtualClock())
        crossings = sum(
            1 for a, b in zip(stats, stats[1:]) if a.core_cell != b.core_cell
        )
        print(f"{bw:>16.0e} {stats[-1].stalls:>7} {crossings:>10}")


if __name__ == "__main__":
    main()
