"""Deterministic in-process simulation of distributed execution.

Ranks live in one process; collectives are plain functions with a reduction
order fixed by rank index, so every distributed claim is a reproducible,
bitwise-testable statement.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .common import DTYPE, InvalidConfigError, to_tensor
from .gaussian_core import (
    DensifyStats,
    DensifyThresholds,
    GaussianModel,
    densify_and_prune,
    render_loss_and_grads,
)
from .nerf_core import GridNerfModel, PlaneLineField, RayBatch, nerf_loss, per_ray_uniform
from .optim import Adam, GaussianAdam
from .scene_manager import SceneGrid

log = logging.getLogger(__name__)


class UnsupportedConversionError(TypeError):
    pass


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class ParallelConfig:
    dp_size: int = 1
    tp_size: int = 1
    mode: str = "none"  # channel | branch | none

    def __post_init__(self):
        if self.dp_size < 1 or self.tp_size < 1:
            raise InvalidConfigError("dp_size and tp_size must be >= 1")
        if self.mode not in ("channel", "branch", "none"):
            raise InvalidConfigError(f"unknown tp mode {self.mode!r}")
        if self.tp_size > 1 and self.mode == "none":
            raise InvalidConfigError("tp_size > 1 requires a tp mode")

    @property
    def world_size(self) -> int:
        return self.dp_size * self.tp_size


def derive_world_size(dp: int, tp: int, declared: int | None = None) -> int:
    if dp < 1 or tp < 1:
        raise InvalidConfigError("dp and tp must be >= 1")
    ws = dp * tp
    if declared is not None and declared != ws:
        raise InvalidConfigError(f"declared world_size {declared} != dp*tp = {ws}")
    return ws


class RankGroup:
    """Simulated collectives with a fixed, rank-indexed reduction order."""

    def __init__(self, n: int):
        if n < 1:
            raise InvalidConfigError("rank count must be >= 1")
        self.n = n

    def all_gather(self, per_rank_values: list) -> list[list]:
        assert len(per_rank_values) == self.n
        return [list(per_rank_values) for _ in range(self.n)]

    def all_reduce_sum(self, per_rank_tensors: list[Tensor]) -> list[Tensor]:
        assert len(per_rank_tensors) == self.n
        total = per_rank_tensors[0].clone()
        for t in per_rank_tensors[1:]:
            total = total + t
        return [total.clone() for _ in range(self.n)]

    def all_reduce_mean(self, per_rank_tensors: list[Tensor]) -> list[Tensor]:
        summed = self.all_reduce_sum(per_rank_tensors)
        return [t / self.n for t in summed]

    def broadcast(self, per_rank_values: list, root: int = 0) -> list:
        assert len(per_rank_values) == self.n
        return [copy.deepcopy(per_rank_values[root]) for _ in range(self.n)]


# ---------------------------------------------------------------------------
# channel parallel


class ChannelParallelField(nn.Module):
    """Rank-sharded plane-line field: each simulated rank owns a contiguous
    slice of the decomposition ranks; forward gathers (sum for density,
    concatenation for appearance) to reproduce the sequential combination."""

    def __init__(self, shards: list[PlaneLineField], tp: int):
        super().__init__()
        self.shards = nn.ModuleList(shards)
        self.tp = tp
        self.bbox = shards[0].bbox

    @classmethod
    def from_field(cls, fld: PlaneLineField, tp: int) -> "ChannelParallelField":
        if fld.r_sigma % tp or fld.r_c % tp:
            raise InvalidConfigError(
                f"rank counts ({fld.r_sigma}, {fld.r_c}) not divisible by tp={tp}"
            )
        ks, kc = fld.r_sigma // tp, fld.r_c // tp
        shards = []
        for k in range(tp):
            shard = PlaneLineField(fld.bbox.numpy(), fld.resolution, ks, kc)
            with torch.no_grad():
                shard.density_planes.copy_(fld.density_planes[k * ks : (k + 1) * ks])
                shard.density_lines.copy_(fld.density_lines[k * ks : (k + 1) * ks])
                shard.app_planes.copy_(fld.app_planes[k * kc : (k + 1) * kc])
                shard.app_lines.copy_(fld.app_lines[k * kc : (k + 1) * kc])
            shards.append(shard)
        return cls(shards, tp)

    def normalize(self, p):
        return self.shards[0].normalize(p)

    def in_bounds(self, p):
        return self.shards[0].in_bounds(p)

    def forward(self, positions):
        partial = [shard(positions) for shard in self.shards]
        density = partial[0][0]
        for d, _ in partial[1:]:
            density = density + d
        appearance = torch.cat([a for _, a in partial], dim=-1)
        return density, appearance


def convert_channel_parallel(model: GridNerfModel, tp: int) -> GridNerfModel:
    """tp = 1 is the identity; decoders are shared (replicated) unchanged."""
    if tp == 1:
        return model
    out = copy.deepcopy(model)
    out.field = ChannelParallelField.from_field(model.field, tp)
    return out


# ---------------------------------------------------------------------------
# branch parallel


class BranchField(nn.Module):
    """One independent field per grid cell plus half-open spatial routing.

    Branch fields keep the source field's global normalization, so branches
    initialized as copies reproduce the unbranched model exactly.
    """

    def __init__(self, fields: list[PlaneLineField], grid: SceneGrid):
        super().__init__()
        self.branches = nn.ModuleList(fields)
        self.grid = grid
        self.bbox = fields[0].bbox

    @classmethod
    def from_field(cls, fld: PlaneLineField, grid: SceneGrid) -> "BranchField":
        fields = [copy.deepcopy(fld) for _ in grid.cells()]
        return cls(fields, grid)

    def normalize(self, p):
        return self.branches[0].normalize(p)

    def in_bounds(self, p):
        return self.branches[0].in_bounds(p)

    def _branch_of(self, positions: Tensor) -> Tensor:
        xy = positions[:, :2].numpy() if not positions.requires_grad else positions[:, :2].detach().numpy()
        w, h = self.grid.cell_extent
        ix = np.clip(np.floor((xy[:, 0] - self.grid.bbox[0, 0]) / w).astype(int), 0, self.grid.nx - 1)
        iy = np.clip(np.floor((xy[:, 1] - self.grid.bbox[0, 1]) / h).astype(int), 0, self.grid.ny - 1)
        return torch.as_tensor(iy * self.grid.nx + ix, dtype=torch.long)

    def forward(self, positions):
        single = positions.ndim == 1
        if single:
            positions = positions[None]
        owner = self._branch_of(positions)
        n = positions.shape[0]
        density = torch.zeros(n, dtype=DTYPE)
        appearance = torch.zeros(n, self.branches[0].r_c, dtype=DTYPE)
        for b in owner.unique().tolist():
            sel = owner == b
            d, a = self.branches[b](positions[sel])
            density = density.masked_scatter(sel, d)
            appearance = appearance.masked_scatter(sel[:, None].expand_as(appearance), a)
        if single:
            return density[0], appearance[0]
        return density, appearance


def convert_branch_parallel(model: GridNerfModel, grid: SceneGrid) -> GridNerfModel:
    out = copy.deepcopy(model)
    out.field = BranchField.from_field(model.field, grid)
    return out


# ---------------------------------------------------------------------------
# component mapping


def _convert_nerf(model, cfg: ParallelConfig, grid=None):
    if cfg.mode == "channel":
        if isinstance(model.field, ChannelParallelField):
            return model
        return convert_channel_parallel(model, cfg.tp_size)
    if cfg.mode == "branch":
        if isinstance(model.field, BranchField):
            return model
        if grid is None:
            raise InvalidConfigError("branch mode needs a scene grid")
        return convert_branch_parallel(model, grid)
    return model


def _convert_gaussian(model, cfg: ParallelConfig, grid=None):
    if cfg.mode == "channel" and cfg.tp_size > 1:
        raise UnsupportedConversionError(
            "Gaussian primitive sets have no factorized feature channels to shard"
        )
    return model


DEFAULT_COMPONENT_MAP = {
    GridNerfModel: _convert_nerf,
    GaussianModel: _convert_gaussian,
}


def convert_components(model, cfg: ParallelConfig, component_map=None, grid=None):
    """Structural conversion per the component map; idempotent by design."""
    cmap = component_map or DEFAULT_COMPONENT_MAP
    for kind, fn in cmap.items():
        if isinstance(model, kind):
            return fn(model, cfg, grid=grid)
    if cfg.tp_size > 1:
        raise UnsupportedConversionError(f"no conversion known for {type(model).__name__}")
    return model


# ---------------------------------------------------------------------------
# data-parallel training steps


def _named_grads(model: nn.Module) -> dict[str, Tensor]:
    return {
        n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }


def split_batch(n: int, dp: int) -> list[slice]:
    """Contiguous shards; a non-divisible remainder is truncated with a warning."""
    if n // dp == 0:
        raise InvalidConfigError(f"batch of {n} rays leaves an empty shard for dp={dp}")
    per = n // dp
    if n % dp:
        log.warning("truncating %d remainder rays to keep dp shards equal", n % dp)
    return [slice(r * per, (r + 1) * per) for r in range(dp)]


def dp_train_step_nerf(
    group: RankGroup,
    replicas: list[GridNerfModel],
    optimizers: list[Adam],
    origins,
    directions,
    gt,
    near: float,
    far: float,
    ray_ids,
    fine_seed: int,
) -> list[float]:
    """One synchronous data-parallel step; returns per-rank local losses."""
    dp = group.n
    origins, directions, gt = to_tensor(origins), to_tensor(directions), to_tensor(gt)
    shards = split_batch(origins.shape[0], dp)
    losses, grads = [], []
    for r, sl in enumerate(shards):
        model = replicas[r]
        model.zero_grad(set_to_none=True)
        rays = RayBatch(origins[sl], directions[sl], near, far)
        u = per_ray_uniform(fine_seed, np.asarray(ray_ids)[sl], model.cfg.n_fine)
        rgb_c, rgb_f, _ = model.render_rays(rays, fine_u=u)
        loss = nerf_loss(rgb_c, rgb_f, gt[sl])
        loss.backward()
        losses.append(float(loss.detach()))
        grads.append(_named_grads(model))
    names = list(grads[0].keys())
    reduced = {}
    for name in names:
        reduced[name] = group.all_reduce_mean([g[name] for g in grads])[0]
    for r in range(dp):
        params = dict(replicas[r].named_parameters())
        optimizers[r].step(params, reduced)
    return losses


def dp_train_step_gs(
    group: RankGroup,
    replicas: list[GaussianModel],
    optimizers: list[GaussianAdam],
    per_rank_cameras: list,
    per_rank_gts: list,
    shared_stats: list[DensifyStats],
    densify: bool = False,
    thresholds: DensifyThresholds = DensifyThresholds(),
    tile_size: int = 16,
) -> tuple[list[GaussianModel], list[GaussianAdam], list[float], dict | None]:
    """One GS data-parallel step with the pre-backward all-gather protocol.

    Local losses and screen-gradient statistics are gathered before any
    update; gradients are mean-reduced; densification decisions derive from
    the gathered statistics so every rank makes the identical choice.
    """
    dp = group.n
    locals_ = [
        render_loss_and_grads(replicas[r], per_rank_cameras[r], per_rank_gts[r], tile_size)
        for r in range(dp)
    ]
    losses = [l for l, _, _ in locals_]
    # early all-gather of losses and densification statistics
    gathered_losses = group.all_gather(losses)
    gathered_grad_sums = group.all_reduce_sum([s.grad_norm_sum for _, _, s in locals_])
    gathered_seen = group.all_reduce_sum([s.steps_seen for _, _, s in locals_])
    for r in range(dp):
        shared_stats[r].grad_norm_sum += gathered_grad_sums[r]
        shared_stats[r].steps_seen += gathered_seen[r]
    reduced = {
        "sh": group.all_reduce_mean([g["sh"] for _, g, _ in locals_])[0],
        "opacity_logits": group.all_reduce_mean([g["opacity_logits"] for _, g, _ in locals_])[0],
    }
    for r in range(dp):
        optimizers[r].step(replicas[r], reduced)

    decisions = None
    if densify:
        new_replicas, new_opts, new_stats = [], [], []
        for r in range(dp):
            merged, decisions = densify_and_prune(replicas[r], shared_stats[r], thresholds)
            keep = torch.as_tensor(
                [i for i in range(replicas[r].count) if i not in set(decisions["pruned"])],
                dtype=torch.long,
            )
            n_new = merged.count - len(keep)
            new_replicas.append(merged)
            new_opts.append(optimizers[r].remap(keep, n_new))
            new_stats.append(DensifyStats.zeros(merged.count))
        replicas, optimizers = new_replicas, new_opts
        for r in range(dp):
            shared_stats[r] = new_stats[r]
    _ = gathered_losses
    return replicas, optimizers, losses, decisions
