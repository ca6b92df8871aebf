"""3D Gaussian splatting: primitives, EWA projection, tile rasterizer + oracle.

The tile rasterizer and the brute-force oracle compute the identical
mathematical function: a splat contributes to a pixel iff the pixel center
lies within its 3-sigma screen radius, splats blend front to back in
(depth, primitive_id) order, and a pixel stops accepting contributions once
its residual transmittance drops below TERM_EPS.  Tiles are only a
conservative prefilter, so per-pixel results agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .common import DTYPE, InvalidInputError, ShapeError, to_tensor

TERM_EPS = 1e-4  # residual transmittance below which a pixel is finished
SIGMA_MAX = 0.9999  # keeps (1 - sigma) bounded away from zero
COV2D_REG = 0.3  # pixels^2 low-pass floor added to screen covariance
NEAR_CULL_Z = 0.01  # camera-space z at or below this is culled

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


# ---------------------------------------------------------------------------
# primitives


@dataclass
class GaussianModel:
    """Structure-of-arrays Gaussian set.

    means (N,3), quats (N,4) unit (w,x,y,z), scales (N,3) positive,
    opacity_logits (N,), sh (N, (deg+1)^2, 3).
    """

    means: Tensor
    quats: Tensor
    scales: Tensor
    opacity_logits: Tensor
    sh: Tensor
    sh_degree: int = 1

    def __post_init__(self):
        self.means = to_tensor(self.means)
        self.quats = to_tensor(self.quats)
        self.scales = to_tensor(self.scales)
        self.opacity_logits = to_tensor(self.opacity_logits)
        self.sh = to_tensor(self.sh)
        if not torch.all(self.scales > 0):
            raise InvalidInputError("scales must be positive")
        norms = self.quats.norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise InvalidInputError("quaternions must be unit norm")
        if self.sh.shape[1] != (self.sh_degree + 1) ** 2:
            raise ShapeError("SH coefficient count does not match degree")

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def opacities(self) -> Tensor:
        return torch.sigmoid(self.opacity_logits)

    def clone(self) -> "GaussianModel":
        return GaussianModel(
            self.means.clone(),
            self.quats.clone(),
            self.scales.clone(),
            self.opacity_logits.clone(),
            self.sh.clone(),
            self.sh_degree,
        )

    def subset(self, idx) -> "GaussianModel":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return GaussianModel(
            self.means[idx],
            self.quats[idx],
            self.scales[idx],
            self.opacity_logits[idx],
            self.sh[idx],
            self.sh_degree,
        )


def quat_to_rotmat(quats: Tensor) -> Tensor:
    """(N,4) unit (w,x,y,z) quaternions -> (N,3,3) rotation matrices."""
    q = quats / quats.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)


def covariance_3d(rotation, s) -> Tensor:
    """Sigma = R S S^T R^T from a unit quaternion and positive scales."""
    rotation = to_tensor(rotation)
    s = to_tensor(s)
    if not torch.isfinite(rotation).all() or not torch.isfinite(s).all():
        raise InvalidInputError("non-finite covariance inputs")
    single = rotation.ndim == 1
    if single:
        rotation, s = rotation[None], s[None]
    r = quat_to_rotmat(rotation)
    m = r * s[..., None, :]
    cov = m @ m.transpose(-1, -2)
    return cov[0] if single else cov


def evaluate_gaussian(mean, rotation, s, x) -> Tensor:
    """exp(-(x - mu)^T Sigma^{-1} (x - mu) / 2) in (0, 1]."""
    cov = covariance_3d(rotation, s)
    cov = cov + 1e-12 * torch.eye(3, dtype=DTYPE)
    d = to_tensor(x) - to_tensor(mean)
    sol = torch.linalg.solve(cov, d)
    return torch.exp(-0.5 * (d * sol).sum(-1))


def eval_sh_colors(model: GaussianModel, cam_center) -> Tensor:
    """Per-primitive view color: clamp(SH eval along center->mean, 0, 1)."""
    dirs = model.means - to_tensor(cam_center)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    c = SH_C0 * model.sh[:, 0, :]
    if model.sh_degree >= 1:
        x, y, z = dirs.unbind(-1)
        c = (
            c
            - SH_C1 * y[:, None] * model.sh[:, 1, :]
            + SH_C1 * z[:, None] * model.sh[:, 2, :]
            - SH_C1 * x[:, None] * model.sh[:, 3, :]
        )
    return c.clamp(0.0, 1.0)


def sh_color_grad_to_coeffs(model: GaussianModel, cam_center, d_colors: Tensor) -> Tensor:
    """Chain view-color gradients back to SH coefficients (clamp-gated)."""
    dirs = model.means - to_tensor(cam_center)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    raw = SH_C0 * model.sh[:, 0, :]
    if model.sh_degree >= 1:
        x, y, z = dirs.unbind(-1)
        raw = (
            raw
            - SH_C1 * y[:, None] * model.sh[:, 1, :]
            + SH_C1 * z[:, None] * model.sh[:, 2, :]
            - SH_C1 * x[:, None] * model.sh[:, 3, :]
        )
    gate = ((raw > 0.0) & (raw < 1.0)).to(DTYPE)
    g = d_colors * gate
    grad = torch.zeros_like(model.sh)
    grad[:, 0, :] = SH_C0 * g
    if model.sh_degree >= 1:
        grad[:, 1, :] = -SH_C1 * y[:, None] * g
        grad[:, 2, :] = SH_C1 * z[:, None] * g
        grad[:, 3, :] = -SH_C1 * x[:, None] * g
    return grad


# ---------------------------------------------------------------------------
# projection


@dataclass
class Splat2DBatch:
    """Screen-space splats after culling, aligned arrays of length M."""

    means2d: Tensor  # (M, 2) pixel coords
    cov2d: Tensor  # (M, 2, 2) positive definite (regularized)
    depth: Tensor  # (M,) camera-space z
    radius_px: Tensor  # (M,) conservative 3-sigma radius
    prim_id: Tensor  # (M,) index into the source primitive array

    def __len__(self) -> int:
        return self.means2d.shape[0]


def project_splats(model: GaussianModel, camera) -> tuple[Splat2DBatch, Tensor, Tensor]:
    """EWA projection of all primitives; returns (splats, view_colors, opacities).

    Primitives with camera-space z <= NEAR_CULL_Z are culled.  cov2d is
    J W Sigma W^T J^T plus the COV2D_REG low-pass floor.
    """
    r_wc = to_tensor(camera.r_wc)
    t_wc = to_tensor(camera.t_wc)
    p_cam = model.means @ r_wc.T + t_wc
    keep = p_cam[:, 2] > NEAR_CULL_Z
    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    p = p_cam[idx]
    x, y, z = p.unbind(-1)

    mean2d = torch.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], dim=-1)

    cov3d = covariance_3d(model.quats[idx], model.scales[idx])
    zeros = torch.zeros_like(z)
    # clamp the off-axis angle entering the Jacobian: the local affine
    # approximation degrades far outside the view cone and would otherwise
    # produce unbounded footprints for near, off-screen primitives
    lim_x = 1.3 * max(camera.cx, camera.width - camera.cx) / camera.fx
    lim_y = 1.3 * max(camera.cy, camera.height - camera.cy) / camera.fy
    tx = torch.clamp(x / z, -lim_x, lim_x) * z
    ty = torch.clamp(y / z, -lim_y, lim_y) * z
    j = torch.stack(
        [
            torch.stack([camera.fx / z, zeros, -camera.fx * tx / (z * z)], dim=-1),
            torch.stack([zeros, camera.fy / z, -camera.fy * ty / (z * z)], dim=-1),
        ],
        dim=-2,
    )  # (M, 2, 3)
    jw = j @ r_wc
    cov2d = jw @ cov3d @ jw.transpose(-1, -2)
    cov2d = cov2d + COV2D_REG * torch.eye(2, dtype=DTYPE)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
    radius = 3.0 * torch.sqrt(lam_max)

    splats = Splat2DBatch(mean2d, cov2d, z, radius, idx)
    colors = eval_sh_colors(model, camera.center)[idx]
    opac = model.opacities[idx]
    return splats, colors, opac


def project_splat(model: GaussianModel, i: int, camera):
    """Single-primitive projection; None when culled."""
    splats, _, _ = project_splats(model.subset([i]), camera)
    if len(splats) == 0:
        return None
    return splats


# ---------------------------------------------------------------------------
# rasterization


@dataclass(frozen=True)
class TileConfig:
    tile_size: int = 16
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.tile_size < 1:
            raise InvalidInputError("tile_size must be >= 1")


@dataclass
class TileRecord:
    pix_xy: Tensor  # (P, 2) pixel centers
    pix_idx: Tensor  # (P,) linear pixel index
    order: Tensor  # (K,) indices into the splat arrays, blend order
    sigma: Tensor  # (K, P) effective per-pixel opacity (after masks)
    t_before: Tensor  # (K, P) transmittance before each splat
    t_final: Tensor  # (P,)


@dataclass
class RenderRecord:
    splats: Splat2DBatch
    colors: Tensor
    opacities: Tensor
    background: Tensor
    width: int
    height: int
    tiles: list[TileRecord] = field(default_factory=list)


def _sort_order(splats: Splat2DBatch, subset: Tensor | None = None) -> Tensor:
    """Front-to-back order by depth, ties by primitive id ascending."""
    depth = splats.depth if subset is None else splats.depth[subset]
    pid = splats.prim_id if subset is None else splats.prim_id[subset]
    order = np.lexsort((pid.numpy(), depth.numpy()))
    order = torch.as_tensor(order, dtype=torch.long)
    return order if subset is None else subset[order]


def _blend(
    pix_xy: Tensor,
    order: Tensor,
    splats: Splat2DBatch,
    colors: Tensor,
    opacities: Tensor,
    background: Tensor,
    collect: bool,
):
    """Sequential front-to-back blending over `order`, vectorized over pixels.

    Elementwise float ops only, so any pixel gets bitwise-identical results
    regardless of which pixel batch it is evaluated in.
    """
    p = pix_xy.shape[0]
    c_out = torch.zeros(p, 3, dtype=DTYPE)
    t = torch.ones(p, dtype=DTYPE)
    sig_steps = [] if collect else None
    t_steps = [] if collect else None
    touched = torch.zeros(len(splats), dtype=torch.long)
    for s in order.tolist():
        mean = splats.means2d[s]
        cov = splats.cov2d[s]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[0, 1]
        ca, cb, cc = cov[1, 1] / det, -cov[0, 1] / det, cov[0, 0] / det
        d = pix_xy - mean
        maha = ca * d[:, 0] ** 2 + 2 * cb * d[:, 0] * d[:, 1] + cc * d[:, 1] ** 2
        sigma = opacities[s] * torch.exp(-0.5 * maha)
        inside = (d * d).sum(-1) <= splats.radius_px[s] ** 2
        active = t >= TERM_EPS
        sigma = torch.where(inside & active, sigma.clamp(max=SIGMA_MAX), torch.zeros_like(sigma))
        w = t * sigma
        c_out = c_out + w[:, None] * colors[s]
        if collect:
            sig_steps.append(sigma)
            t_steps.append(t)
        t = t * (1.0 - sigma)
        touched[s] = int((w > 0).sum())
        if not collect and not bool((t >= TERM_EPS).any()):
            break
    c_out = c_out + t[:, None] * background
    if collect:
        k = len(order)
        sig = torch.stack(sig_steps) if k else torch.zeros(0, p, dtype=DTYPE)
        tb = torch.stack(t_steps) if k else torch.zeros(0, p, dtype=DTYPE)
        return c_out, t, sig, tb, touched
    return c_out, t, None, None, touched


def _pixel_centers(xs: Tensor, ys: Tensor) -> Tensor:
    yy, xx = torch.meshgrid(ys.to(DTYPE) + 0.5, xs.to(DTYPE) + 0.5, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def rasterize(
    splats: Splat2DBatch,
    colors: Tensor,
    opacities: Tensor,
    tile_config: TileConfig,
    background=(0.0, 0.0, 0.0),
    with_record: bool = False,
):
    """Tile-based front-to-back alpha blending.

    Returns (image (H, W, 3), per-splat touched-pixel counts[, RenderRecord]).
    """
    bg = to_tensor(background)
    w, h, ts = tile_config.width, tile_config.height, tile_config.tile_size
    image = torch.zeros(h * w, 3, dtype=DTYPE)
    image += bg  # tiles with no splats keep pure background
    touched = torch.zeros(len(splats), dtype=torch.long)
    record = RenderRecord(splats, colors, opacities, bg, w, h) if with_record else None

    if len(splats):
        lo = splats.means2d - splats.radius_px[:, None]
        hi = splats.means2d + splats.radius_px[:, None]
    for ty in range(0, h, ts):
        for tx in range(0, w, ts):
            tw = min(ts, w - tx)
            th = min(ts, h - ty)
            if len(splats):
                overlap = (
                    (hi[:, 0] >= tx)
                    & (lo[:, 0] <= tx + tw)
                    & (hi[:, 1] >= ty)
                    & (lo[:, 1] <= ty + th)
                )
                subset = torch.nonzero(overlap, as_tuple=False).squeeze(-1)
            else:
                subset = torch.zeros(0, dtype=torch.long)
            xs = torch.arange(tx, tx + tw)
            ys = torch.arange(ty, ty + th)
            pix_xy = _pixel_centers(xs, ys)
            pix_idx = (ys[:, None] * w + xs[None, :]).reshape(-1)
            if len(subset) == 0:
                if with_record:
                    record.tiles.append(
                        TileRecord(
                            pix_xy, pix_idx,
                            torch.zeros(0, dtype=torch.long),
                            torch.zeros(0, len(pix_idx), dtype=DTYPE),
                            torch.zeros(0, len(pix_idx), dtype=DTYPE),
                            torch.ones(len(pix_idx), dtype=DTYPE),
                        )
                    )
                continue
            order = _sort_order(splats, subset)
            c_out, t, sig, tb, tile_touched = _blend(
                pix_xy, order, splats, colors, opacities, bg, collect=with_record
            )
            image[pix_idx] = c_out
            touched += tile_touched
            if with_record:
                record.tiles.append(TileRecord(pix_xy, pix_idx, order, sig, tb, t))
    image = image.reshape(h, w, 3)
    if with_record:
        return image, touched, record
    return image, touched


def rasterize_oracle(
    splats: Splat2DBatch,
    colors: Tensor,
    opacities: Tensor,
    width: int,
    height: int,
    background=(0.0, 0.0, 0.0),
) -> Tensor:
    """Brute force: every splat against every pixel, globally depth-sorted."""
    bg = to_tensor(background)
    pix_xy = _pixel_centers(torch.arange(width), torch.arange(height))
    if len(splats) == 0:
        return (torch.zeros(height * width, 3, dtype=DTYPE) + bg).reshape(height, width, 3)
    order = _sort_order(splats)
    c_out, _, _, _, _ = _blend(pix_xy, order, splats, colors, opacities, bg, collect=False)
    return c_out.reshape(height, width, 3)


# ---------------------------------------------------------------------------
# backward


@dataclass
class RenderGrads:
    """Gradients per splat (aligned with the Splat2DBatch of the record)."""

    d_colors: Tensor  # (M, 3)
    d_opacities: Tensor  # (M,)
    d_mean2d: Tensor  # (M, 2) screen-space positional gradient (stats only)
    touched: Tensor  # (M,) pixels with nonzero blend weight


def backward_render(image_grad, record: RenderRecord) -> RenderGrads:
    """Exact reverse-mode gradients of the blend w.r.t. colors and opacities.

    Geometry stays frozen; the screen-space positional gradient is still
    accumulated because densification statistics consume it.
    """
    g_img = to_tensor(image_grad)
    if g_img.shape != (record.height, record.width, 3):
        raise ShapeError("image gradient shape does not match forward record")
    g_flat = g_img.reshape(-1, 3)
    m = len(record.splats)
    d_colors = torch.zeros(m, 3, dtype=DTYPE)
    d_opac = torch.zeros(m, dtype=DTYPE)
    d_mean = torch.zeros(m, 2, dtype=DTYPE)
    touched = torch.zeros(m, dtype=torch.long)

    for tile in record.tiles:
        k = len(tile.order)
        if k == 0:
            continue
        g = g_flat[tile.pix_idx]  # (P, 3)
        # suffix of downstream contributions, including background
        suffix = tile.t_final[:, None] * record.background[None, :]  # (P, 3)
        for step in range(k - 1, -1, -1):
            s = int(tile.order[step])
            sigma = tile.sigma[step]  # (P,)
            t_before = tile.t_before[step]
            w = t_before * sigma
            color = record.colors[s]
            applied = sigma > 0
            d_colors[s] += (g * w[:, None]).sum(0)
            # dC/dsigma = c * T_before - suffix / (1 - sigma), where applied
            denom = (1.0 - sigma).clamp_min(1e-6)
            d_sigma = (g * (color[None, :] * t_before[:, None] - suffix / denom[:, None])).sum(-1)
            d_sigma = torch.where(applied, d_sigma, torch.zeros_like(d_sigma))
            alpha = record.opacities[s]
            d_opac[s] += (d_sigma * sigma / alpha).sum()
            # positional gradient: dsigma/dmean = sigma * (conic @ (pix - mean))
            cov = record.splats.cov2d[s]
            det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[0, 1]
            ca, cb, cc = cov[1, 1] / det, -cov[0, 1] / det, cov[0, 0] / det
            d = tile.pix_xy - record.splats.means2d[s]
            dm_x = sigma * (ca * d[:, 0] + cb * d[:, 1])
            dm_y = sigma * (cb * d[:, 0] + cc * d[:, 1])
            d_mean[s, 0] += (d_sigma * dm_x).sum()
            d_mean[s, 1] += (d_sigma * dm_y).sum()
            touched[s] += int((w > 0).sum())
            suffix = suffix + color[None, :] * w[:, None]
    return RenderGrads(d_colors, d_opac, d_mean, touched)


# ---------------------------------------------------------------------------
# densification


@dataclass
class DensifyStats:
    """Accumulated screen-gradient statistics per primitive."""

    grad_norm_sum: Tensor  # (N,)
    steps_seen: Tensor  # (N,) number of accumulation steps with visibility

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=torch.long))

    def accumulate(self, splat_ids: Tensor, d_mean2d: Tensor, touched: Tensor) -> None:
        seen = touched > 0
        ids = splat_ids[seen]
        self.grad_norm_sum[ids] += d_mean2d[seen].norm(dim=-1)
        self.steps_seen[ids] += 1

    def mean_grad(self) -> Tensor:
        return self.grad_norm_sum / self.steps_seen.clamp_min(1).to(DTYPE)


@dataclass(frozen=True)
class DensifyThresholds:
    grad: float = 2e-4
    scale: float = 0.04  # world units; default 1% of a 4-unit scene extent
    split_factor: float = 1.6
    opacity: float = 0.005
    interval: int = 100


def densify_and_prune(
    model: GaussianModel, stats: DensifyStats, thr: DensifyThresholds
) -> tuple[GaussianModel, dict]:
    """Clone small / split large high-gradient primitives, prune transparent ones.

    Deterministic: surviving originals keep their order (split shrinks them in
    place), then clones, then split twins.  Split offsets the twin pair along
    the primitive's major axis by half its largest scale.
    """
    mean_grad = stats.mean_grad()
    max_scale = model.scales.max(dim=-1).values
    high = mean_grad > thr.grad
    clone_ids = torch.nonzero(high & (max_scale < thr.scale), as_tuple=False).squeeze(-1)
    split_ids = torch.nonzero(high & (max_scale >= thr.scale), as_tuple=False).squeeze(-1)
    keep = model.opacities >= thr.opacity

    new = model.clone()
    twins = []
    if len(split_ids):
        rot = quat_to_rotmat(new.quats[split_ids])
        axis_idx = new.scales[split_ids].argmax(dim=-1)
        major = rot[torch.arange(len(split_ids)), :, axis_idx]
        offset = 0.5 * max_scale[split_ids][:, None] * major
        twin = new.subset(split_ids)
        twin.means = twin.means + offset
        twin.scales = twin.scales / thr.split_factor
        new.means[split_ids] -= offset
        new.scales[split_ids] = new.scales[split_ids] / thr.split_factor
        twins.append(twin)

    parts = [new.subset(torch.nonzero(keep, as_tuple=False).squeeze(-1))]
    clone_keep = clone_ids[keep[clone_ids]]
    if len(clone_keep):
        parts.append(new.subset(clone_keep))
    for twin in twins:
        keep_twin = keep[split_ids]
        if keep_twin.any():
            parts.append(twin.subset(torch.nonzero(keep_twin, as_tuple=False).squeeze(-1)))

    merged = GaussianModel(
        torch.cat([p.means for p in parts]),
        torch.cat([p.quats for p in parts]),
        torch.cat([p.scales for p in parts]),
        torch.cat([p.opacity_logits for p in parts]),
        torch.cat([p.sh for p in parts]),
        model.sh_degree,
    )
    decisions = {
        "cloned": clone_keep.tolist(),
        "split": split_ids[keep[split_ids]].tolist(),
        "pruned": torch.nonzero(~keep, as_tuple=False).squeeze(-1).tolist(),
    }
    return merged, decisions


# ---------------------------------------------------------------------------
# model-level helpers


def render_image(
    model: GaussianModel,
    camera,
    tile_size: int = 16,
    background=(0.0, 0.0, 0.0),
    with_record: bool = False,
    subset=None,
):
    """Project + rasterize; `subset` restricts to a primitive id list."""
    src = model if subset is None else model.subset(subset)
    splats, colors, opac = project_splats(src, camera)
    if subset is not None:
        ids = torch.as_tensor(subset, dtype=torch.long)
        splats.prim_id = ids[splats.prim_id]
    cfg = TileConfig(tile_size, camera.width, camera.height)
    return rasterize(splats, colors, opac, cfg, background, with_record)


def render_loss_and_grads(
    model: GaussianModel, cameras, gt_images, tile_size: int = 16, background=(0.0, 0.0, 0.0)
):
    """Mean-squared-error fit over cameras; manual backward through the blend.

    Returns (loss, grads dict with 'sh' and 'opacity_logits', DensifyStats
    increment arrays).
    """
    n = model.count
    d_sh = torch.zeros_like(model.sh)
    d_logit = torch.zeros(n, dtype=DTYPE)
    stats = DensifyStats.zeros(n)
    total = 0.0
    for cam, gt in zip(cameras, gt_images):
        image, _, record = render_image(model, cam, tile_size, background, with_record=True)
        gt_t = to_tensor(gt)
        diff = image - gt_t
        total += float((diff**2).mean())
        g_img = 2.0 * diff / diff.numel()
        grads = backward_render(g_img, record)
        ids = record.splats.prim_id
        d_colors_full = torch.zeros(n, 3, dtype=DTYPE)
        d_colors_full[ids] = grads.d_colors
        d_sh += sh_color_grad_to_coeffs(model, cam.center, d_colors_full)
        alpha = model.opacities[ids]
        d_logit[ids] += grads.d_opacities * alpha * (1.0 - alpha)
        stats.accumulate(ids, grads.d_mean2d, grads.touched)
    k = max(1, len(cameras))
    loss = total / k
    return loss, {"sh": d_sh / k, "opacity_logits": d_logit / k}, stats
