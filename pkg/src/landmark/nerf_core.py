"""Volume-rendering pipeline: encodings, staged MLP, sampling, compositing.

The scene is represented by a factorized plane-line grid (density features
summed over ranks, appearance features concatenated over ranks) decoded by a
two-stage MLP: stage 1 maps encoded position to raw density and a feature
vector, stage 2 maps direction encoding plus features to color.  Density is
therefore independent of viewing direction by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .common import (
    DTYPE,
    InvalidConfigError,
    InvalidInputError,
    OutOfBoundsError,
    ShapeError,
    make_rng,
    to_tensor,
)


# ---------------------------------------------------------------------------
# rays and samples


@dataclass
class RayBatch:
    """A batch of rays: origins o, unit directions d, and [near, far] range."""

    origins: Tensor  # (R, 3)
    directions: Tensor  # (R, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        self.origins = to_tensor(self.origins)
        self.directions = to_tensor(self.directions)
        norms = self.directions.norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
            raise InvalidInputError("ray directions must be unit length")
        if not self.far > self.near >= 0:
            raise InvalidInputError("require 0 <= near < far")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def points_at(self, t_values: Tensor) -> Tensor:
        # t_values: (R, N) -> positions (R, N, 3)
        return self.origins[:, None, :] + t_values[..., None] * self.directions[:, None, :]


@dataclass
class SampleBatch:
    """Per-ray sample points with model outputs attached as they are produced."""

    rays: RayBatch
    t_values: Tensor  # (R, N), strictly increasing per ray
    positions: Tensor  # (R, N, 3)
    densities: Tensor | None = None  # (R, N), >= 0
    colors: Tensor | None = None  # (R, N, 3) in [0, 1]
    features: Tensor | None = None  # (R, N, F)
    deltas: Tensor | None = None  # (R, N) interval lengths; derived when omitted

    def __post_init__(self):
        if not torch.all(self.t_values[..., 1:] > self.t_values[..., :-1]):
            raise InvalidInputError("t_values must be strictly increasing per ray")
        expected = self.rays.points_at(self.t_values)
        if not torch.allclose(expected, self.positions, atol=1e-6):
            raise InvalidInputError("positions inconsistent with parent rays")


# ---------------------------------------------------------------------------
# encodings


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal encoding lengths for positions and directions."""

    s_pos: int = 6
    s_dir: int = 4

    def __post_init__(self):
        if self.s_pos < 1 or self.s_dir < 1:
            raise InvalidConfigError("encoding sequence lengths must be >= 1")


def encode_positional(x, s: int) -> Tensor:
    """Sinusoidal lift: (sin 2^0 x .. sin 2^{S-1} x, cos 2^0 x .. cos 2^{S-1} x).

    Applied per input scalar; a (..., D) input yields (..., D * 2S) laid out
    per scalar so each coordinate keeps its sin block followed by cos block.
    """
    if s < 1:
        raise InvalidConfigError("encoding length S must be >= 1")
    x = to_tensor(x)
    scalar_in = x.ndim == 0
    if scalar_in:
        x = x[None]
    freqs = torch.pow(2.0, torch.arange(s, dtype=DTYPE))
    angles = x[..., None] * freqs  # (..., D, S)
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (..., D, 2S)
    enc = enc.reshape(*x.shape[:-1], -1) if x.ndim > 1 else enc.reshape(-1)
    return enc


class PlaneLineField(nn.Module):
    """Factorized grid encoding: per rank, a 2D (x, y) plane times a 1D z line.

    Density feature is the sum over the R_sigma rank components; appearance
    feature is the concatenation of the R_c rank components.
    """

    def __init__(
        self,
        bbox,  # (2, 3) array-like: min corner, max corner
        resolution: int = 64,
        r_sigma: int = 4,
        r_c: int = 12,
        init_scale: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        bbox = np.asarray(bbox, dtype=np.float64)
        if bbox.shape != (2, 3) or not np.all(bbox[1] > bbox[0]):
            raise InvalidInputError("bbox must be (2, 3) with max > min")
        self.register_buffer("bbox", torch.as_tensor(bbox, dtype=DTYPE))
        self.resolution = resolution
        self.r_sigma = r_sigma
        self.r_c = r_c
        rng = rng if rng is not None else make_rng(0, "field")

        def grids(r, *dims):
            a = rng.standard_normal((r, *dims)).astype(np.float32) * init_scale
            return nn.Parameter(torch.as_tensor(a, dtype=DTYPE))

        self.density_planes = grids(r_sigma, resolution, resolution)
        self.density_lines = grids(r_sigma, resolution)
        self.app_planes = grids(r_c, resolution, resolution)
        self.app_lines = grids(r_c, resolution)

    def normalize(self, positions: Tensor) -> Tensor:
        lo, hi = self.bbox[0], self.bbox[1]
        return (positions - lo) / (hi - lo)

    def in_bounds(self, positions: Tensor) -> Tensor:
        u = self.normalize(positions)
        return ((u >= 0.0) & (u <= 1.0)).all(dim=-1)

    @staticmethod
    def _sample_planes(planes: Tensor, u: Tensor, v: Tensor) -> Tensor:
        # planes: (R, res, res) indexed [x, y]; u, v in [0, 1]; returns (N, R)
        res = planes.shape[-1]
        x = u * (res - 1)
        y = v * (res - 1)
        x0 = x.floor().clamp(0, res - 2).long()
        y0 = y.floor().clamp(0, res - 2).long()
        fx = x - x0
        fy = y - y0
        p00 = planes[:, x0, y0]
        p10 = planes[:, x0 + 1, y0]
        p01 = planes[:, x0, y0 + 1]
        p11 = planes[:, x0 + 1, y0 + 1]
        out = (
            p00 * (1 - fx) * (1 - fy)
            + p10 * fx * (1 - fy)
            + p01 * (1 - fx) * fy
            + p11 * fx * fy
        )
        return out.T  # (N, R)

    @staticmethod
    def _sample_lines(lines: Tensor, w: Tensor) -> Tensor:
        res = lines.shape[-1]
        z = w * (res - 1)
        z0 = z.floor().clamp(0, res - 2).long()
        fz = z - z0
        out = lines[:, z0] * (1 - fz) + lines[:, z0 + 1] * fz
        return out.T  # (N, R)

    def forward(self, positions: Tensor) -> tuple[Tensor, Tensor]:
        """(density_feature (N,), appearance_feature (N, R_c)) at in-bounds points."""
        positions = to_tensor(positions)
        single = positions.ndim == 1
        if single:
            positions = positions[None]
        u = self.normalize(positions)
        if torch.any((u < 0) | (u > 1)):
            raise OutOfBoundsError("position outside field bounding box")
        dplane = self._sample_planes(self.density_planes, u[:, 0], u[:, 1])
        dline = self._sample_lines(self.density_lines, u[:, 2])
        density = (dplane * dline).sum(dim=-1)
        aplane = self._sample_planes(self.app_planes, u[:, 0], u[:, 1])
        aline = self._sample_lines(self.app_lines, u[:, 2])
        appearance = aplane * aline
        if single:
            return density[0], appearance[0]
        return density, appearance


def grid_encode(fld: PlaneLineField, position) -> tuple[Tensor, Tensor]:
    """Query the factorized grid at one position or a batch of positions."""
    return fld(to_tensor(position))


class MlpDecoder(nn.Module):
    """Two-stage decoder.

    Stage 1: encoded position -> (raw density, feature u).  Stage 2: encoded
    direction plus u (plus an optional extra appearance feature) -> rgb.
    """

    def __init__(
        self,
        enc: EncodingConfig = EncodingConfig(),
        hidden: int = 64,
        n_hidden: int = 2,
        feat_dim: int = 16,
        app_dim: int = 0,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        self.enc = enc
        self.feat_dim = feat_dim
        self.app_dim = app_dim
        self.pos_in = 3 * 2 * enc.s_pos
        self.dir_in = 3 * 2 * enc.s_dir
        rng = rng if rng is not None else make_rng(0, "decoder")

        def mlp(din, dout):
            dims = [din] + [hidden] * n_hidden + [dout]
            layers = []
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                lin = nn.Linear(a, b, dtype=DTYPE)
                bound = 1.0 / np.sqrt(a)
                with torch.no_grad():
                    lin.weight.copy_(
                        torch.as_tensor(rng.uniform(-bound, bound, (b, a)).astype(np.float32), dtype=DTYPE)
                    )
                    lin.bias.zero_()
                layers.append(lin)
                if i < len(dims) - 2:
                    layers.append(nn.ReLU())
            return nn.Sequential(*layers)

        self.stage1 = mlp(self.pos_in, 1 + feat_dim)
        self.stage2 = mlp(self.dir_in + feat_dim + app_dim, 3)

    def forward(
        self, pos_enc: Tensor, dir_enc: Tensor, app_feat: Tensor | None = None
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (raw density before activation, color, feature u)."""
        if pos_enc.shape[-1] != self.pos_in or dir_enc.shape[-1] != self.dir_in:
            raise ShapeError(
                f"encoding dims {pos_enc.shape[-1]}/{dir_enc.shape[-1]} do not match "
                f"decoder inputs {self.pos_in}/{self.dir_in}"
            )
        out1 = self.stage1(pos_enc)
        sigma_raw, u = out1[..., 0], out1[..., 1:]
        if self.app_dim:
            if app_feat is None:
                app_feat = torch.zeros(*u.shape[:-1], self.app_dim, dtype=DTYPE)
            stage2_in = torch.cat([dir_enc, u, app_feat], dim=-1)
        else:
            stage2_in = torch.cat([dir_enc, u], dim=-1)
        color = torch.sigmoid(self.stage2(stage2_in))
        return sigma_raw, color, u


def mlp_decode(decoder: MlpDecoder, pos_enc, dir_enc) -> tuple[Tensor, Tensor]:
    """(sigma, rgb) for one encoded point; sigma = ReLU(raw), rgb = sigmoid."""
    pos_enc = to_tensor(pos_enc)
    dir_enc = to_tensor(dir_enc)
    sigma_raw, color, _ = decoder(pos_enc, dir_enc)
    return torch.relu(sigma_raw), color


# ---------------------------------------------------------------------------
# sampling


def sample_coarse(rays: RayBatch, n: int, stratified: bool = False, rng=None) -> SampleBatch:
    """N samples per ray: bin midpoints, or one uniform draw per bin."""
    if n < 1:
        raise InvalidConfigError("sample count must be >= 1")
    r = len(rays)
    edges = torch.linspace(0.0, 1.0, n + 1, dtype=DTYPE)
    if stratified:
        if rng is None:
            rng = make_rng(0, "coarse")
        jitter = to_tensor(rng.random((r, n)))
        frac = edges[:-1] + jitter / n
    else:
        mid = (edges[:-1] + edges[1:]) / 2
        frac = mid[None, :].expand(r, n)
    t = rays.near + frac * (rays.far - rays.near)
    return SampleBatch(rays=rays, t_values=t, positions=rays.points_at(t))


def per_ray_uniform(seed: int, ray_ids, n: int) -> Tensor:
    """(R, n) uniforms where row i depends only on (seed, ray_ids[i]).

    Keeps fine sampling identical for a given ray no matter how the batch is
    sharded, which makes data-parallel gradients an algebraic identity.
    """
    rows = [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(rid)]))).random(n)
        for rid in np.asarray(ray_ids).tolist()
    ]
    return to_tensor(np.stack(rows))


def sample_fine_pdf(
    rays: RayBatch,
    coarse_t: Tensor,
    coarse_weights: Tensor,
    n_fine: int,
    rng=None,
    u: Tensor | None = None,
) -> SampleBatch:
    """Inverse-CDF samples from the piecewise-constant PDF over coarse bins,
    merged with the coarse samples and sorted.

    Bins are the uniform partition of [near, far] that produced the coarse
    samples.  All-zero weight rows fall back to a uniform PDF.
    """
    if torch.any(coarse_weights < 0):
        raise InvalidInputError("weights must be nonnegative")
    r, n = coarse_weights.shape
    w = coarse_weights.clone()
    degenerate = w.sum(dim=-1) <= 0
    w[degenerate] = 1.0
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros(r, 1, dtype=DTYPE), cdf], dim=-1)
    cdf[:, -1] = 1.0

    if u is None:
        if rng is None:
            rng = make_rng(0, "fine")
        u = to_tensor(rng.random((r, n_fine)))
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, n) - 1  # bin index
    c0 = torch.gather(cdf, 1, idx)
    c1 = torch.gather(cdf, 1, idx + 1)
    frac_in_bin = (u - c0) / torch.where(c1 - c0 > 0, c1 - c0, torch.ones_like(c0))
    bin_w = (rays.far - rays.near) / n
    t_fine = rays.near + (idx.to(DTYPE) + frac_in_bin) * bin_w

    t_all, _ = torch.sort(torch.cat([coarse_t, t_fine], dim=-1), dim=-1)
    # Duplicate t values would break strict monotonicity; nudge them apart.
    eps = 1e-12 * (rays.far - rays.near)
    for _ in range(3):
        dup = t_all[..., 1:] <= t_all[..., :-1]
        if not dup.any():
            break
        t_all[..., 1:][dup] = t_all[..., :-1][dup] + eps
    return SampleBatch(rays=rays, t_values=t_all, positions=rays.points_at(t_all))


# ---------------------------------------------------------------------------
# compositing and loss


def volume_render(batch: SampleBatch) -> tuple[Tensor, Tensor, Tensor]:
    """Numerical integration of transmittance-weighted color along each ray.

    weight_k = T_k * (1 - exp(-sigma_k * delta_k)) with
    T_k = exp(-sum_{k'<k} sigma_k' * delta_k'); the last interval is closed
    with delta = far - t_last.
    """
    if batch.densities is None or batch.colors is None:
        raise InvalidInputError("sample batch lacks densities or colors")
    sigma, color, t = batch.densities, batch.colors, batch.t_values
    if torch.any(sigma < 0):
        raise InvalidInputError("densities must be nonnegative")
    far = batch.rays.far
    if batch.deltas is not None:
        deltas = batch.deltas
        if torch.any(deltas < 0):
            raise InvalidInputError("deltas must be nonnegative")
    else:
        deltas = torch.cat([t[..., 1:] - t[..., :-1], far - t[..., -1:]], dim=-1)
    od = sigma * deltas  # optical depth per interval
    t_trans = torch.exp(-torch.cumsum(od, dim=-1) + od)  # exclusive cumsum
    weights = t_trans * (1.0 - torch.exp(-od))
    ray_color = (weights[..., None] * color).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    return ray_color, opacity, weights


def nerf_loss(pred_coarse: Tensor, pred_fine: Tensor, gt: Tensor) -> Tensor:
    """Mean over rays of squared-L2 coarse error plus fine error."""
    if pred_coarse.shape != gt.shape or pred_fine.shape != gt.shape:
        raise ShapeError("prediction/ground-truth shape mismatch")
    per_ray = ((gt - pred_coarse) ** 2).sum(-1) + ((gt - pred_fine) ** 2).sum(-1)
    return per_ray.mean()


# ---------------------------------------------------------------------------
# the full grid model


@dataclass(frozen=True)
class NerfConfig:
    resolution: int = 64
    r_sigma: int = 4
    r_c: int = 12
    enc: EncodingConfig = field(default_factory=EncodingConfig)
    hidden: int = 64
    n_hidden: int = 2
    feat_dim: int = 16
    app_dim: int = 16
    n_coarse: int = 32
    n_fine: int = 64
    lr_grids: float = 5e-3
    lr_mlp: float = 1e-3


class GridNerfModel(nn.Module):
    """Shared plane-line field plus independent coarse/fine decoders.

    Raw density is the grid density feature plus the stage-1 MLP head; the
    concatenated appearance feature enters stage 2 through a learned linear
    map.  Out-of-bounds sample points contribute zero density.
    """

    def __init__(self, bbox, cfg: NerfConfig = NerfConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.field = PlaneLineField(
            bbox, cfg.resolution, cfg.r_sigma, cfg.r_c, rng=make_rng(seed, "field")
        )
        self.decoder_coarse = MlpDecoder(
            cfg.enc, cfg.hidden, cfg.n_hidden, cfg.feat_dim, cfg.app_dim,
            rng=make_rng(seed, "dec_coarse"),
        )
        self.decoder_fine = MlpDecoder(
            cfg.enc, cfg.hidden, cfg.n_hidden, cfg.feat_dim, cfg.app_dim,
            rng=make_rng(seed, "dec_fine"),
        )
        app_rng = make_rng(seed, "app_lin")
        w = app_rng.uniform(-1, 1, (cfg.app_dim, cfg.r_c)).astype(np.float32) / np.sqrt(cfg.r_c)
        self.app_lin = nn.Linear(cfg.r_c, cfg.app_dim, dtype=DTYPE)
        with torch.no_grad():
            self.app_lin.weight.copy_(torch.as_tensor(w, dtype=DTYPE))
            self.app_lin.bias.zero_()

    def query(self, positions: Tensor, directions: Tensor, stage: str) -> tuple[Tensor, Tensor]:
        """(sigma, rgb) at arbitrary points; out-of-bounds points get sigma 0."""
        decoder = self.decoder_coarse if stage == "coarse" else self.decoder_fine
        flat_pos = positions.reshape(-1, 3)
        flat_dir = directions.reshape(-1, 3)
        inside = self.field.in_bounds(flat_pos)
        sigma = torch.zeros(flat_pos.shape[0], dtype=DTYPE)
        rgb = torch.full((flat_pos.shape[0], 3), 0.5, dtype=DTYPE)
        if inside.any():
            p = flat_pos[inside]
            d = flat_dir[inside]
            dens_feat, app_feat = self.field(p)
            pos_enc = encode_positional(p, self.cfg.enc.s_pos)
            dir_enc = encode_positional(d, self.cfg.enc.s_dir)
            sigma_raw, color, _ = decoder(pos_enc, dir_enc, self.app_lin(app_feat))
            sigma = torch.zeros(flat_pos.shape[0], dtype=DTYPE).masked_scatter(
                inside, torch.relu(sigma_raw + dens_feat)
            )
            rgb = rgb.masked_scatter(inside[:, None].expand_as(rgb), color)
        return sigma.reshape(positions.shape[:-1]), rgb.reshape(positions.shape)

    def render_rays(self, rays: RayBatch, rng=None, stratified: bool = False,
                    fine_u: Tensor | None = None):
        """Coarse/fine render: returns (rgb_coarse, rgb_fine, aux dict)."""
        cfg = self.cfg
        dirs = rays.directions
        coarse = sample_coarse(rays, cfg.n_coarse, stratified=stratified, rng=rng)
        dir_c = dirs[:, None, :].expand_as(coarse.positions)
        coarse.densities, coarse.colors = self.query(coarse.positions, dir_c, "coarse")
        rgb_c, op_c, w_c = volume_render(coarse)
        fine = sample_fine_pdf(rays, coarse.t_values, w_c.detach(), cfg.n_fine, rng=rng,
                               u=fine_u)
        dir_f = dirs[:, None, :].expand_as(fine.positions)
        fine.densities, fine.colors = self.query(fine.positions, dir_f, "fine")
        rgb_f, op_f, w_f = volume_render(fine)
        return rgb_c, rgb_f, {"opacity_coarse": op_c, "opacity_fine": op_f}

    def grid_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if n.startswith("field.")}
