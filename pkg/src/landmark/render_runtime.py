"""Rendering sessions over camera trajectories, plus a socket frontend.

Three session modes:
  static_full          -- whole model resident, every frame rendered directly
  block_double_buffer  -- camera-following cell regions with a front/back
                          buffer pair and nested trigger-zone prefetching
  frustum_voxel        -- voxel-reordered model with per-frame frustum culling
                          and a budget-bounded least-recently-visible cache

Wire protocol (little-endian):
  every message is  u32 payload_length | u8 type | payload
  type 1 pose   (client -> server): 9 x f32: t, px, py, pz, qw, qx, qy, qz, fov_deg
  type 2 frame  (server -> client): u32 header_len | JSON header | RGB8 pixels
  type 3 status (server -> client): JSON object
  type 4 error  (server -> client): UTF-8 message; the session stays open
"""

from __future__ import annotations

import json
import logging
import socket
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .common import InvalidConfigError, InvalidInputError, VirtualClock
from .data_io import Camera
from .engine_api import gaussian_cell_groups, model_from_groups
from .gaussian_core import GaussianModel, render_image
from .memory_tiers import (
    BudgetExceededError,
    BufferPair,
    ParamGroup,
    Region,
    TierStore,
    TransferConfig,
    TriggerZones,
    prefetch_policy,
)
from .scene_manager import (
    SceneGrid,
    frustum_visible_voxels,
    onload_region,
    reorder_voxel_grid,
)

log = logging.getLogger(__name__)

MSG_POSE = 1
MSG_FRAME = 2
MSG_STATUS = 3
MSG_ERROR = 4

POSE_STRUCT = struct.Struct("<9f")

RENDER_MODES = ("static_full", "block_double_buffer", "frustum_voxel")


@dataclass
class FrameStats:
    index: int
    t: float
    latency_ms: float
    resident_bytes: int
    peak_resident_bytes: int
    stalls: int
    core_cell: tuple | None = None
    n_primitives: int = 0

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["core_cell"] = list(self.core_cell) if self.core_cell else None
        return d


@dataclass
class SessionConfig:
    mode: str = "static_full"
    budget_bytes: int | None = None
    ring: int = 1
    tile_size: int = 16
    zones: TriggerZones = field(default_factory=TriggerZones)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    voxel_size: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in RENDER_MODES:
            raise InvalidConfigError(f"mode must be one of {RENDER_MODES}, got {self.mode!r}")
        if self.mode != "static_full" and self.budget_bytes is None:
            raise InvalidConfigError(f"mode {self.mode!r} requires budget_bytes")


def _render(model, camera, cfg: SessionConfig, subset=None):
    image, _ = render_image(model, camera, cfg.tile_size, cfg.background, subset=subset)
    return image


# ---------------------------------------------------------------------------
# block double-buffer session


class BlockSession:
    """Front buffer always covers the camera's core cell; the back buffer is
    filled ahead of crossings so swaps are ready before they are needed."""

    def __init__(self, model: GaussianModel, grid: SceneGrid, cfg: SessionConfig,
                 clock: VirtualClock | None = None):
        self.grid = grid
        self.cfg = cfg
        self.clock = clock or VirtualClock()
        self.store = TierStore(cfg.budget_bytes, cfg.transfer, self.clock)
        for cell, group in gaussian_cell_groups(model, grid).items():
            self.store.put_host(cell, group)
        self.sh_degree = model.sh_degree
        worst = max(
            sum(self.store.host_bytes(c) for c in onload_region(grid, cell, cfg.ring))
            for cell in grid.cells()
        )
        if 2 * worst > cfg.budget_bytes:
            raise BudgetExceededError(
                f"budget {cfg.budget_bytes} bytes cannot double-buffer the largest "
                f"onload region (2 x {worst} bytes)"
            )
        self.pair = BufferPair()
        self.stalls = 0
        self._prev_pos = None

    def _region_cells(self, core):
        return frozenset(onload_region(self.grid, core, self.cfg.ring))

    def _load_region(self, core):
        cells = self._region_cells(core)
        handle = self.store.load_cells(sorted(cells))
        return Region(cells, core), handle

    def _drop_unreferenced(self):
        keep = set()
        if self.pair.front:
            keep |= self.pair.front.cell_ids
        if self.pair.back:
            keep |= self.pair.back[0].cell_ids
        stale = [c for c in list(self.store.device) if c not in keep]
        if stale:
            self.store.offload_cells(stale, write_back=False)

    def _force_resident(self, core):
        """Out-of-plan crossing: count a stall and load synchronously."""
        self.stalls += 1
        self.store.stats.stalls += 1
        region, handle = self._load_region(core)
        self.clock.advance(max(0.0, handle.ready_at - self.clock.now))
        self.pair.front, self.pair.back = region, None
        self._drop_unreferenced()

    def step(self, camera: Camera, velocity) -> tuple[torch.Tensor, int]:
        core = self.grid.cell_of_point(camera.center)
        if self.pair.front is None:
            region, handle = self._load_region(core)
            self.clock.advance(max(0.0, handle.ready_at - self.clock.now))
            self.pair.front = region

        action = prefetch_policy(
            camera.center, velocity, self.pair.front.core, self.cfg.zones,
            self.pair, self.grid, self.clock,
        )
        if action.kind == "start_load":
            self.pair.back = self._load_region(action.target_core)
        elif action.kind == "swap":
            self.pair.swap(self.clock)
            self._drop_unreferenced()
        elif action.kind == "stall_then_swap":
            self.stalls += 1
            self.store.stats.stalls += 1
            _, handle = self.pair.back
            self.clock.advance(max(0.0, handle.ready_at - self.clock.now))
            self.pair.swap(self.clock)
            self._drop_unreferenced()

        if core not in self.pair.front.cell_ids:
            self._force_resident(core)

        groups = [self.store.resident(c) for c in sorted(self.pair.front.cell_ids)]
        model, _ = model_from_groups(groups, self.sh_degree)
        image = _render(model, camera, self.cfg)
        return image, model.count


# ---------------------------------------------------------------------------
# frustum voxel session


class FrustumSession:
    """Least-recently-visible voxel cache bounded by the byte budget."""

    def __init__(self, model: GaussianModel, cfg: SessionConfig,
                 clock: VirtualClock | None = None):
        self.cfg = cfg
        self.clock = clock or VirtualClock()
        self.index, self.model = reorder_voxel_grid(model, cfg.voxel_size)
        self.store = TierStore(cfg.budget_bytes, cfg.transfer, self.clock)
        for v in range(self.index.n_voxels):
            s, e = self.index.ranges[v]
            idx = torch.arange(int(s), int(e))
            sub = self.model.subset(idx)
            self.store.put_host(v, ParamGroup({
                "rows": idx, "means": sub.means, "quats": sub.quats, "scales": sub.scales,
                "opacity_logits": sub.opacity_logits, "sh": sub.sh,
            }))
        self.last_visible = {}
        self.frame = 0
        self.stalls = 0

    def step(self, camera: Camera) -> tuple[torch.Tensor, int]:
        self.frame += 1
        needed = frustum_visible_voxels(self.index, camera)
        need_bytes = sum(self.store.host_bytes(v) for v in needed if not self.store.is_resident(v))
        if self.store.resident_bytes + need_bytes > self.store.budget_bytes:
            evictable = sorted(
                (v for v in self.store.device if v not in needed),
                key=lambda v: self.last_visible.get(v, -1),
            )
            while evictable and self.store.resident_bytes + need_bytes > self.store.budget_bytes:
                self.store.offload_cells([evictable.pop(0)], write_back=False)
        handle = self.store.load_cells(needed)
        wait = handle.ready_at - self.clock.now
        if wait > 0:
            self.stalls += 1
            self.store.stats.stalls += 1
            self.clock.advance(wait)
        for v in needed:
            self.last_visible[v] = self.frame
        rows = np.sort(np.concatenate(
            [np.arange(*self.index.ranges[v]) for v in needed]
        )) if needed else np.zeros(0, dtype=np.int64)
        image = _render(self.model, camera, self.cfg, subset=torch.as_tensor(rows))
        return image, len(rows)


# ---------------------------------------------------------------------------
# session driver


def run_session(model: GaussianModel, cameras, timestamps, cfg: SessionConfig,
                grid: SceneGrid | None = None, clock: VirtualClock | None = None,
                keep_images: bool = True):
    """Render the pose sequence under the chosen mode.

    Returns (images, [FrameStats]).  `timestamps` drives the virtual clock;
    camera velocity is the finite difference of consecutive positions.
    """
    if len(cameras) != len(timestamps):
        raise InvalidInputError("one timestamp per camera required")
    clock = clock or VirtualClock()
    if cfg.mode == "block_double_buffer":
        if grid is None:
            raise InvalidInputError("block_double_buffer requires a scene grid")
        session = BlockSession(model, grid, cfg, clock)
    elif cfg.mode == "frustum_voxel":
        session = FrustumSession(model, cfg, clock)
    else:
        session = None

    model_nbytes = sum(
        t.numel() * t.element_size()
        for t in (model.means, model.quats, model.scales, model.opacity_logits, model.sh)
    )
    images, stats = [], []
    prev_pos, prev_t = None, None
    for i, (cam, t) in enumerate(zip(cameras, timestamps)):
        if prev_t is not None and t > prev_t:
            clock.advance(t - prev_t)
        pos = cam.center
        dt = (t - prev_t) if prev_t is not None and t > prev_t else 1.0
        vel = (pos - prev_pos) / dt if prev_pos is not None else np.zeros(3)
        wall0 = time.perf_counter()
        if cfg.mode == "static_full":
            image = _render(model, cam, cfg)
            n_prims, core = model.count, None
            resident = peak = model_nbytes  # whole model stays loaded
            stalls = 0
        elif cfg.mode == "block_double_buffer":
            image, n_prims = session.step(cam, vel)
            core = session.pair.front.core
            resident = session.store.resident_bytes
            peak = session.store.stats.peak_resident_bytes
            stalls = session.stalls
        else:
            image, n_prims = session.step(cam)
            core = None
            resident = session.store.resident_bytes
            peak = session.store.stats.peak_resident_bytes
            stalls = session.stalls
        stats.append(FrameStats(
            index=i, t=float(t), latency_ms=(time.perf_counter() - wall0) * 1e3,
            resident_bytes=resident, peak_resident_bytes=peak, stalls=stalls,
            core_cell=core, n_primitives=n_prims,
        ))
        if keep_images:
            images.append(image)
        prev_pos, prev_t = pos, t
    return images, stats


def bench(model: GaussianModel, cameras, timestamps, cfg: SessionConfig,
          grid: SceneGrid | None = None) -> dict:
    """Deterministic summary over a session (virtual-clock transfer timing)."""
    _, stats = run_session(model, cameras, timestamps, cfg, grid=grid, keep_images=False)
    lat = [s.latency_ms for s in stats]
    total_s = sum(lat) / 1e3
    return {
        "frames": len(stats),
        "mean_latency_ms": statistics.fmean(lat) if lat else 0.0,
        "median_latency_ms": statistics.median(lat) if lat else 0.0,
        "fps": len(stats) / total_s if total_s > 0 else 0.0,
        "peak_resident_bytes": max((s.peak_resident_bytes for s in stats), default=0),
        "stalls": stats[-1].stalls if stats else 0,
    }


# ---------------------------------------------------------------------------
# wire protocol


def pack_message(msg_type: int, payload: bytes) -> bytes:
    return struct.pack("<IB", len(payload), msg_type) + payload


def read_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        buf += chunk
    return buf


def read_message(sock) -> tuple[int, bytes]:
    head = read_exact(sock, 5)
    length, msg_type = struct.unpack("<IB", head)
    return msg_type, read_exact(sock, length)


def encode_pose(t: float, position, quat_wxyz, fov_deg: float) -> bytes:
    p = np.asarray(position, dtype=np.float32)
    q = np.asarray(quat_wxyz, dtype=np.float32)
    return POSE_STRUCT.pack(t, p[0], p[1], p[2], q[0], q[1], q[2], q[3], fov_deg)


def decode_pose(payload: bytes):
    if len(payload) != POSE_STRUCT.size:
        raise InvalidInputError(
            f"pose payload must be {POSE_STRUCT.size} bytes, got {len(payload)}"
        )
    vals = POSE_STRUCT.unpack(payload)
    t = vals[0]
    position = np.array(vals[1:4], dtype=np.float64)
    quat = np.array(vals[4:8], dtype=np.float64)
    norm = np.linalg.norm(quat)
    if not np.isfinite(vals).all():
        raise InvalidInputError("pose contains non-finite values")
    if norm < 1e-6:
        raise InvalidInputError("pose quaternion has near-zero norm")
    fov = float(vals[8])
    if not 0.0 < fov < 180.0:
        raise InvalidInputError(f"field of view {fov} out of range (0, 180)")
    return t, position, quat / norm, fov


def _quat_to_rotmat_np(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def camera_from_pose(position, quat_wxyz, fov_deg: float, width: int, height: int,
                     near: float = 0.05, far: float = 100.0) -> Camera:
    """The quaternion rotates camera axes into world axes (z is the view dir)."""
    r_cw = _quat_to_rotmat_np(quat_wxyz)
    r_wc = r_cw.T
    t_wc = -r_wc @ np.asarray(position, dtype=np.float64)
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height,
                  r_wc=r_wc, t_wc=t_wc, near=near, far=far)


def encode_frame(image: np.ndarray, header: dict) -> bytes:
    rgb = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(rgb * 255.0).astype(np.uint8).tobytes()
    hdr = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<I", len(hdr)) + hdr + pixels


def decode_frame(payload: bytes):
    (hlen,) = struct.unpack_from("<I", payload)
    header = json.loads(payload[4:4 + hlen].decode())
    pixels = np.frombuffer(payload[4 + hlen:], dtype=np.uint8)
    return header, pixels.reshape(header["height"], header["width"], 3)


class ViewerServer:
    """One-client-at-a-time pose-in / frame-out TCP server."""

    def __init__(self, render_fn, width: int = 64, height: int = 64,
                 host: str = "127.0.0.1", port: int = 0):
        self.render_fn = render_fn  # Camera -> (image array, stats dict)
        self.width = width
        self.height = height
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = None

    def serve_forever(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            with conn:
                conn.sendall(pack_message(MSG_STATUS, json.dumps(
                    {"width": self.width, "height": self.height, "protocol": 1},
                    sort_keys=True).encode()))
                self._session(conn)
        self._sock.close()

    def _session(self, conn):
        frame_index = 0
        while not self._stop.is_set():
            try:
                msg_type, payload = read_message(conn)
            except (ConnectionError, OSError):
                return
            if msg_type != MSG_POSE:
                conn.sendall(pack_message(MSG_ERROR, f"unexpected message type {msg_type}".encode()))
                continue
            try:
                t, position, quat, fov = decode_pose(payload)
            except InvalidInputError as e:
                conn.sendall(pack_message(MSG_ERROR, str(e).encode()))
                continue
            camera = camera_from_pose(position, quat, fov, self.width, self.height)
            image, stats = self.render_fn(camera)
            header = {
                "frame": frame_index, "t": t, "width": self.width, "height": self.height,
                **{k: v for k, v in stats.items() if v is not None},
            }
            conn.sendall(pack_message(MSG_FRAME, encode_frame(np.asarray(image), header)))
            frame_index += 1

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)


def serve(render_fn, width: int = 64, height: int = 64, host: str = "127.0.0.1",
          port: int = 0, block: bool = True) -> ViewerServer:
    server = ViewerServer(render_fn, width, height, host, port)
    log.info("viewer server listening on %s:%d", *server.address)
    if block:
        server.serve_forever()
    else:
        server.start()
    return server
