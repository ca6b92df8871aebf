"""Cameras, rays, synthetic scenes, trajectories, checkpoints, images, metrics.

Checkpoint formats (little-endian throughout):

Gaussian checkpoint ("LMGS"):
    magic 4s | version u32 | sh_degree u32 | count u64
    per primitive: mean 3*f32 | quaternion 4*f32 (w,x,y,z) | scale 3*f32 |
                   opacity logit f32 | SH coeffs (3*(deg+1)^2)*f32
    grid flag u8; if 1: bbox 6*f32 | nx u32 | ny u32 | nx*ny submodel ids u32

Field checkpoint ("LMNF"):
    magic 4s | version u32 | resolution u32 | r_sigma u32 | r_c u32
    raw f32 grids in order: density planes, density lines, appearance planes,
    appearance lines; then bbox 6*f32.

Trajectory text format: one pose per line,
    t x y z qw qx qy qz
with strictly increasing t; '#' lines are comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .common import DTYPE, FormatError, InvalidInputError, ShapeError, make_rng, to_tensor
from .nerf_core import PlaneLineField, RayBatch

MAGIC_GAUSSIAN = b"LMGS"
MAGIC_FIELD = b"LMNF"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    """Pinhole camera: intrinsics plus world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    r_wc: np.ndarray  # (3, 3) world-to-camera rotation
    t_wc: np.ndarray  # (3,) world-to-camera translation
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.r_wc = np.asarray(self.r_wc, dtype=np.float64)
        self.t_wc = np.asarray(self.t_wc, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise InvalidInputError("require 0 < near < far")

    @property
    def center(self) -> np.ndarray:
        return -self.r_wc.T @ self.t_wc

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.r_wc.T + self.t_wc


def look_at_camera(
    position, target, up=(0.0, 0.0, 1.0), fov_deg=60.0, width=64, height=64, near=0.05, far=100.0
) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_wc = np.stack([right, down, fwd])  # camera x right, y down, z forward
    t_wc = -r_wc @ position
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(f, f, width / 2, height / 2, width, height, r_wc, t_wc, near, far)


def pose_to_rays(camera: Camera) -> RayBatch:
    """One ray per pixel, pixel-center convention (u + 0.5, v + 0.5)."""
    u = np.arange(camera.width) + 0.5
    v = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(u, v)  # row-major: v varies along rows
    dirs_cam = np.stack(
        [(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    dirs_world = dirs_cam @ camera.r_wc  # = R^T applied to each row
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs_world.shape).copy()
    return RayBatch(origins=origins, directions=dirs_world, near=camera.near, far=camera.far)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Timestamped camera poses (position + orientation quaternion)."""

    times: np.ndarray  # (N,)
    positions: np.ndarray  # (N, 3)
    quaternions: np.ndarray  # (N, 4) w, x, y, z

    def __post_init__(self):
        if not np.all(np.diff(self.times) > 0):
            raise InvalidInputError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


def load_trajectory(path) -> Trajectory:
    times, positions, quats = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        times.append(vals[0])
        positions.append(vals[1:4])
        quats.append(vals[4:8])
    traj = np.asarray(times), np.asarray(positions), np.asarray(quats)
    if len(times) >= 2 and not np.all(np.diff(traj[0]) > 0):
        bad = int(np.argmax(np.diff(traj[0]) <= 0)) + 2
        raise FormatError(f"{path}: timestamps not strictly increasing at pose {bad}")
    return Trajectory(*traj)


def save_trajectory(traj: Trajectory, path) -> None:
    lines = [
        " ".join(
            f"{x:.9g}"
            for x in (traj.times[i], *traj.positions[i], *traj.quaternions[i])
        )
        for i in range(len(traj))
    ]
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# metrics


def psnr(image_a, image_b) -> float:
    """10 * log10(1 / MSE) for [0, 1] images; identical images cap at 99 dB."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# images


def save_image(image, path) -> None:
    """Write an HxWx3 [0,1] float image as PPM (.ppm) or lossless PNG (.png)."""
    img8 = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    if path.suffix == ".ppm":
        header = f"P6\n{img8.shape[1]} {img8.shape[0]}\n255\n".encode()
        _atomic_write_bytes(path, header + img8.tobytes())
    elif path.suffix == ".png":
        from PIL import Image

        tmp = path.with_suffix(path.suffix + ".tmp")
        Image.fromarray(img8).save(tmp, format="PNG")
        tmp.replace(path)
    else:
        raise FormatError(f"unsupported image extension: {path.suffix}")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        data = path.read_bytes()
        if not data.startswith(b"P6"):
            raise FormatError(f"{path}: not a binary PPM")
        parts = data.split(maxsplit=4)
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
        if maxval != 255:
            raise FormatError(f"{path}: only 8-bit PPM supported")
        pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
        if pixels.size != w * h * 3:
            raise FormatError(f"{path}: truncated pixel data")
        return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
    if path.suffix == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    raise FormatError(f"unsupported image extension: {path.suffix}")


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.off = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.name}: truncated at byte offset {self.off}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)


def save_gaussian_checkpoint(model, path, grid=None) -> None:
    """`model` is a gaussian_core.GaussianModel; values quantize to f32."""
    n = model.count
    out = bytearray()
    out += struct.pack("<4sIIQ", MAGIC_GAUSSIAN, CHECKPOINT_VERSION, model.sh_degree, n)
    per = np.concatenate(
        [
            model.means.numpy(),
            model.quats.numpy(),
            model.scales.numpy(),
            model.opacity_logits.numpy()[:, None],
            model.sh.detach().numpy().reshape(n, -1),
        ],
        axis=1,
    ).astype("<f4")
    out += per.tobytes()
    if grid is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += np.asarray(grid.bbox, dtype="<f4").tobytes()
        out += struct.pack("<II", grid.nx, grid.ny)
        out += np.asarray(
            [grid.block_to_submodel[(ix, iy)] for iy in range(grid.ny) for ix in range(grid.nx)],
            dtype="<u4",
        ).tobytes()
    _atomic_write_bytes(path, bytes(out))


def load_gaussian_checkpoint(path):
    from .gaussian_core import GaussianModel
    from .scene_manager import SceneGrid

    r = _Reader(Path(path).read_bytes(), str(path))
    magic, version, sh_degree, n = r.unpack("4sIIQ")
    if magic != MAGIC_GAUSSIAN:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    sh_dim = 3 * (sh_degree + 1) ** 2
    stride = 3 + 4 + 3 + 1 + sh_dim
    per = r.f32(n * stride).reshape(n, stride)
    model = GaussianModel(
        means=per[:, 0:3],
        quats=per[:, 3:7],
        scales=per[:, 7:10],
        opacity_logits=per[:, 10],
        sh=per[:, 11:].reshape(n, (sh_degree + 1) ** 2, 3),
        sh_degree=sh_degree,
    )
    (flag,) = r.unpack("B")
    grid = None
    if flag:
        bbox = r.f32(6).reshape(2, 3)
        nx, ny = r.unpack("II")
        table = np.frombuffer(r.take(4 * nx * ny), dtype="<u4")
        grid = SceneGrid(bbox=bbox, nx=nx, ny=ny)
        grid.block_to_submodel = {
            (ix, iy): int(table[iy * nx + ix]) for iy in range(ny) for ix in range(nx)
        }
    return model, grid


def save_field_checkpoint(fld: PlaneLineField, path) -> None:
    out = bytearray()
    out += struct.pack(
        "<4sIIII", MAGIC_FIELD, CHECKPOINT_VERSION, fld.resolution, fld.r_sigma, fld.r_c
    )
    for t in (fld.density_planes, fld.density_lines, fld.app_planes, fld.app_lines):
        out += t.detach().numpy().astype("<f4").tobytes()
    out += fld.bbox.numpy().astype("<f4").tobytes()
    _atomic_write_bytes(path, bytes(out))


def load_field_checkpoint(path) -> PlaneLineField:
    r = _Reader(Path(path).read_bytes(), str(path))
    magic, version, res, r_sigma, r_c = r.unpack("4sIIII")
    if magic != MAGIC_FIELD:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dp = r.f32(r_sigma * res * res).reshape(r_sigma, res, res)
    dl = r.f32(r_sigma * res).reshape(r_sigma, res)
    ap = r.f32(r_c * res * res).reshape(r_c, res, res)
    al = r.f32(r_c * res).reshape(r_c, res)
    bbox = r.f32(6).reshape(2, 3)
    fld = PlaneLineField(bbox, res, r_sigma, r_c)
    with torch.no_grad():
        fld.density_planes.copy_(torch.as_tensor(dp, dtype=DTYPE))
        fld.density_lines.copy_(torch.as_tensor(dl, dtype=DTYPE))
        fld.app_planes.copy_(torch.as_tensor(ap, dtype=DTYPE))
        fld.app_lines.copy_(torch.as_tensor(al, dtype=DTYPE))
    return fld


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    seed: int
    extent: float
    model: "object"  # gaussian_core.GaussianModel
    cameras: list[Camera] = field(default_factory=list)
    gt_images: list[np.ndarray] = field(default_factory=list)

    @property
    def bbox(self) -> np.ndarray:
        e = self.extent
        return np.array([[-e, -e, -e / 4], [e, e, e / 4]])


def generate_synthetic_scene(
    seed: int,
    extent: float = 4.0,
    n_prims: int = 100,
    n_cameras: int = 4,
    image_size: int = 64,
    render_gt: bool = True,
) -> SyntheticScene:
    """Deterministic Gaussian scene with orbit cameras that see every primitive.

    All parameters are drawn in f32 so checkpoints round-trip bit-exactly.
    """
    from .gaussian_core import GaussianModel, rasterize_oracle, project_splats

    if n_prims < 1 or n_cameras < 1:
        raise InvalidInputError("need at least one primitive and one camera")
    rng = make_rng(seed, "scene")
    means = rng.uniform(
        [-extent, -extent, -extent / 4], [extent, extent, extent / 4], (n_prims, 3)
    ).astype(np.float32)
    quats = rng.standard_normal((n_prims, 4)).astype(np.float32)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True).astype(np.float32)
    scales = rng.uniform(0.05, 0.25, (n_prims, 3)).astype(np.float32) * extent / 4.0
    logits = rng.uniform(-1.0, 2.0, n_prims).astype(np.float32)
    sh = np.zeros((n_prims, 4, 3), dtype=np.float32)
    sh[:, 0, :] = rng.uniform(0.1, 3.0, (n_prims, 3)).astype(np.float32)
    model = GaussianModel(
        means=means, quats=quats, scales=scales, opacity_logits=logits, sh=sh, sh_degree=1
    )

    cam_rng = make_rng(seed, "cameras")
    cameras = []
    radius = 2.6 * extent
    for i in range(n_cameras):
        ang = 2 * np.pi * i / n_cameras + cam_rng.uniform(-0.1, 0.1)
        height = radius * 0.9 + cam_rng.uniform(-0.1, 0.1) * extent
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cameras.append(
            look_at_camera(pos, (0.0, 0.0, 0.0), fov_deg=70.0, width=image_size, height=image_size)
        )

    scene = SyntheticScene(seed=seed, extent=extent, model=model, cameras=cameras)
    if render_gt:
        for cam in cameras:
            splats, colors, opac = project_splats(model, cam)
            scene.gt_images.append(
                rasterize_oracle(splats, colors, opac, image_size, image_size).numpy()
            )
    return scene


# ---------------------------------------------------------------------------
# analytic blob field (radiance-field training target)

BLOB_CENTERS = np.array([[-0.7, 0.0, 0.0], [0.8, 0.2, 0.1]])
BLOB_SIGMAS = np.array([0.5, 0.6])
BLOB_AMPLITUDES = np.array([4.0, 3.0])
BLOB_COLORS = np.array([[0.9, 0.2, 0.1], [0.1, 0.4, 0.9]])
BLOB_BBOX = np.array([[-2.0, -2.0, -2.0], [2.0, 2.0, 2.0]])


def blob_field(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth two-lobe density/color field with a closed form everywhere."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d2 = ((p[:, None, :] - BLOB_CENTERS[None]) ** 2).sum(-1)  # (N, 2)
    contrib = BLOB_AMPLITUDES * np.exp(-d2 / (2 * BLOB_SIGMAS**2))
    density = contrib.sum(-1)
    color = (contrib @ BLOB_COLORS + 1e-12 * 0.5) / (contrib.sum(-1, keepdims=True) + 1e-12)
    return density, color


def generate_blob_ray_dataset(seed: int, n_rays: int = 64, n_quad: int = 512,
                              near: float = 0.5, far: float = 6.0) -> dict:
    """Rays aimed at the blob pair with ground-truth colors from dense
    midpoint quadrature of the emission-absorption integral."""
    rng = make_rng(seed, "blob_rays")
    theta = rng.uniform(0, 2 * np.pi, n_rays)
    phi = rng.uniform(-0.4, 0.4, n_rays)
    radius = 3.0
    origins = np.stack(
        [radius * np.cos(theta) * np.cos(phi), radius * np.sin(theta) * np.cos(phi),
         radius * np.sin(phi)], axis=-1
    )
    targets = rng.uniform(-0.8, 0.8, (n_rays, 3)) * np.array([1.0, 1.0, 0.4])
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    dt = (far - near) / n_quad
    ts = near + (np.arange(n_quad) + 0.5) * dt
    pts = origins[:, None, :] + dirs[:, None, :] * ts[None, :, None]
    density, color = blob_field(pts.reshape(-1, 3))
    density = density.reshape(n_rays, n_quad)
    color = color.reshape(n_rays, n_quad, 3)
    alpha = 1.0 - np.exp(-density * dt)
    trans = np.exp(-np.cumsum(density * dt, axis=-1) + density * dt)  # exclusive
    weights = trans * alpha
    gt = (weights[..., None] * color).sum(axis=1)
    return {
        "origins": origins,
        "directions": dirs,
        "gt": gt,
        "near": near,
        "far": far,
        "bbox": BLOB_BBOX.copy(),
    }
