"""Training drivers: sequential, dynamic-loading (zig-zag), data-parallel.

Sequential runs are the dp=1 case of the parallel step functions, and the
dynamic-loading loop reuses the identical step function on the resident
subset, so the degenerate configurations (dp=1, 1x1 grid) agree bitwise
with the plain sequential run.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .common import InvalidConfigError, make_rng
from .gaussian_core import DensifyStats, DensifyThresholds, GaussianModel
from .memory_tiers import BudgetExceededError, ParamGroup, TierStore, TierStats
from .metrics import MetricsLog
from .nerf_core import GridNerfModel
from .optim import Adam, GaussianAdam
from .parallel_engine import (
    ParallelConfig,
    RankGroup,
    convert_components,
    dp_train_step_gs,
    dp_train_step_nerf,
)
from .scene_manager import SceneGrid, assign_cameras_to_cells, onload_region, zigzag_order

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 100
    batch_rays: int = 256  # NeRF
    cameras_per_step: int = 1  # GS
    seed: int = 0
    lr_grids: float = 5e-3
    lr_mlp: float = 1e-3
    lr_sh: float = 2.5e-2
    lr_opacity: float = 5e-2
    densify_interval: int = 0  # 0 disables densification
    densify: DensifyThresholds = field(default_factory=DensifyThresholds)
    # dynamic loading
    cell_steps: int = 50
    epochs: int = 1
    ring: int = 1
    tile_size: int = 16

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidConfigError("steps must be >= 0")


def make_nerf_optimizer(model: GridNerfModel, cfg: TrainConfig) -> Adam:
    return Adam(dict(model.named_parameters()), cfg.lr_mlp, {"field.": cfg.lr_grids})


# ---------------------------------------------------------------------------
# NeRF


def _train_nerf(replicas, opts, dataset, cfg: TrainConfig, metrics: MetricsLog | None):
    origins, dirs, gts, near, far = (
        dataset["origins"], dataset["directions"], dataset["gt"], dataset["near"], dataset["far"]
    )
    n = len(origins)
    group = RankGroup(len(replicas))
    rng = make_rng(cfg.seed, "nerf_batches")
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_rays)
        losses = dp_train_step_nerf(
            group, replicas, opts,
            origins[idx], dirs[idx], gts[idx], near, far, idx, fine_seed=cfg.seed,
        )
        loss = float(np.mean(losses))
        curve.append(loss)
        if metrics:
            metrics.append({"kind": "train_step", "family": "nerf", "step": step, "loss": loss})
    return curve


def train_sequential_nerf(model: GridNerfModel, dataset, cfg: TrainConfig,
                          metrics: MetricsLog | None = None):
    opt = make_nerf_optimizer(model, cfg)
    curve = _train_nerf([model], [opt], dataset, cfg, metrics)
    return model, curve


# ---------------------------------------------------------------------------
# Gaussian


def train_sequential_gs(model: GaussianModel, cameras, gt_images, cfg: TrainConfig,
                        metrics: MetricsLog | None = None):
    opt = GaussianAdam.for_model(model, cfg.lr_sh, cfg.lr_opacity)
    stats = DensifyStats.zeros(model.count)
    rng = make_rng(cfg.seed, "gs_batches")
    group = RankGroup(1)
    replicas, opts, shared = [model], [opt], [stats]
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(cameras), size=cfg.cameras_per_step)
        cams = [cameras[i] for i in idx]
        gts = [gt_images[i] for i in idx]
        densify_now = cfg.densify_interval > 0 and (step + 1) % cfg.densify_interval == 0
        replicas, opts, losses, _ = dp_train_step_gs(
            group, replicas, opts, [cams], [gts], shared,
            densify=densify_now, thresholds=cfg.densify, tile_size=cfg.tile_size,
        )
        curve.append(losses[0])
        if metrics:
            metrics.append({"kind": "train_step", "family": "gs", "step": step, "loss": losses[0]})
    return replicas[0], curve


# ---------------------------------------------------------------------------
# dynamic loading (Gaussian primitives)


def _gs_train_groups(model: GaussianModel, opt: GaussianAdam, grid: SceneGrid) -> dict:
    """Per-cell parameter + optimizer-state groups, original order preserved."""
    means = model.means.numpy()
    w, h = grid.cell_extent
    ix = np.clip(np.floor((means[:, 0] - grid.bbox[0, 0]) / w).astype(int), 0, grid.nx - 1)
    iy = np.clip(np.floor((means[:, 1] - grid.bbox[0, 1]) / h).astype(int), 0, grid.ny - 1)
    groups = {}
    for cell in grid.cells():
        sel = np.nonzero((ix == cell[0]) & (iy == cell[1]))[0]
        idx = torch.as_tensor(sel, dtype=torch.long)
        sub = model.subset(idx)
        sub_opt = opt.subset(idx)
        groups[cell] = ParamGroup(
            {
                "means": sub.means, "quats": sub.quats, "scales": sub.scales,
                "opacity_logits": sub.opacity_logits, "sh": sub.sh,
                "m_sh": sub_opt.m_sh, "v_sh": sub_opt.v_sh,
                "m_logit": sub_opt.m_logit, "v_logit": sub_opt.v_logit,
                "t": sub_opt.t,
            }
        )
    return groups


def _assemble_resident(groups: list[ParamGroup], sh_degree: int, cfg: TrainConfig):
    model = GaussianModel(
        torch.cat([g.tensors["means"] for g in groups]),
        torch.cat([g.tensors["quats"] for g in groups]),
        torch.cat([g.tensors["scales"] for g in groups]),
        torch.cat([g.tensors["opacity_logits"] for g in groups]),
        torch.cat([g.tensors["sh"] for g in groups]),
        sh_degree,
    )
    opt = GaussianAdam(model.count, model.sh.shape, cfg.lr_sh, cfg.lr_opacity)
    opt.m_sh = torch.cat([g.tensors["m_sh"] for g in groups])
    opt.v_sh = torch.cat([g.tensors["v_sh"] for g in groups])
    opt.m_logit = torch.cat([g.tensors["m_logit"] for g in groups])
    opt.v_logit = torch.cat([g.tensors["v_logit"] for g in groups])
    opt.t = torch.cat([g.tensors["t"] for g in groups])
    return model, opt


def _split_resident(model: GaussianModel, opt: GaussianAdam, cells: list, grid: SceneGrid,
                    core: tuple) -> dict:
    """Write-back split: primitives go to the resident cell owning their mean;
    primitives drifting outside the resident region land in the core cell."""
    means = model.means.numpy()
    w, h = grid.cell_extent
    ix = np.clip(np.floor((means[:, 0] - grid.bbox[0, 0]) / w).astype(int), 0, grid.nx - 1)
    iy = np.clip(np.floor((means[:, 1] - grid.bbox[0, 1]) / h).astype(int), 0, grid.ny - 1)
    cell_set = set(cells)
    out = {}
    owner = []
    for i in range(model.count):
        cell = (int(ix[i]), int(iy[i]))
        owner.append(cell if cell in cell_set else core)
    for cell in cells:
        sel = np.nonzero([o == cell for o in owner])[0]
        idx = torch.as_tensor(sel, dtype=torch.long)
        sub = model.subset(idx)
        sub_opt = opt.subset(idx)
        out[cell] = ParamGroup(
            {
                "means": sub.means, "quats": sub.quats, "scales": sub.scales,
                "opacity_logits": sub.opacity_logits, "sh": sub.sh,
                "m_sh": sub_opt.m_sh, "v_sh": sub_opt.v_sh,
                "m_logit": sub_opt.m_logit, "v_logit": sub_opt.v_logit,
                "t": sub_opt.t,
            }
        )
    return out


def train_dynamic_loading_gs(
    model: GaussianModel,
    cameras,
    gt_images,
    grid: SceneGrid,
    budget_bytes: int,
    cfg: TrainConfig,
    metrics: MetricsLog | None = None,
):
    """Zig-zag traversal over cells: load core + ring, train on core cameras,
    offload with write-back.  Returns (model, stats dict)."""
    opt = GaussianAdam.for_model(model, cfg.lr_sh, cfg.lr_opacity)
    store = TierStore(budget_bytes)
    for cell, group in _gs_train_groups(model, opt, grid).items():
        store.put_host(cell, group)
    worst = max(
        sum(store.host_bytes(c) for c in onload_region(grid, cell, cfg.ring))
        for cell in grid.cells()
    )
    if worst > budget_bytes:
        raise BudgetExceededError(
            f"budget {budget_bytes} bytes below largest onload region ({worst} bytes)"
        )
    cam_table = assign_cameras_to_cells(cameras, grid)
    order = zigzag_order(grid)
    rng = make_rng(cfg.seed, "gs_batches")
    group1 = RankGroup(1)
    visit_counts = {cell: 0 for cell in grid.cells()}
    peak_checks = []
    curve = []
    local_step = 0
    for _epoch in range(cfg.epochs):
        for core in order:
            region = sorted(onload_region(grid, core, cfg.ring))
            store.load_cells(region)
            peak_checks.append(store.resident_bytes)
            resident, local_opt = _assemble_resident(
                [store.resident(c) for c in region], model.sh_degree, cfg
            )
            core_cams = cam_table[core]
            replicas, opts, shared = [resident], [local_opt], [DensifyStats.zeros(resident.count)]
            for _ in range(cfg.cell_steps):
                if not core_cams:
                    break
                idx = rng.integers(0, len(core_cams), size=cfg.cameras_per_step)
                cams = [cameras[core_cams[i]] for i in idx]
                gts = [gt_images[core_cams[i]] for i in idx]
                local_step += 1
                densify_now = cfg.densify_interval > 0 and local_step % cfg.densify_interval == 0
                replicas, opts, losses, _ = dp_train_step_gs(
                    group1, replicas, opts, [cams], [gts], shared,
                    densify=densify_now, thresholds=cfg.densify, tile_size=cfg.tile_size,
                )
                curve.append(losses[0])
            visit_counts[core] += 1
            # write back the (possibly densified) resident set
            new_groups = _split_resident(replicas[0], opts[0], region, grid, core)
            store.offload_cells(region, write_back=False)
            for cell, g in new_groups.items():
                store.put_host(cell, g)
            if metrics:
                metrics.append(
                    {"kind": "dyn_visit", "core": list(core),
                     "resident_bytes": peak_checks[-1],
                     "loss": curve[-1] if curve else None}
                )
    final_groups = [store.host[c] for c in sorted(grid.cells())]
    final_model, _ = _assemble_resident(final_groups, model.sh_degree, cfg)
    info = {
        "visit_counts": visit_counts,
        "peak_resident_bytes": store.stats.peak_resident_bytes,
        "budget_bytes": budget_bytes,
        "store_stats": store.stats.snapshot(),
        "curve": curve,
    }
    return final_model, info


# ---------------------------------------------------------------------------
# parallel dispatch


def train_parallel_nerf(model: GridNerfModel, dataset, pcfg: ParallelConfig, cfg: TrainConfig,
                        grid: SceneGrid | None = None, metrics: MetricsLog | None = None):
    base = convert_components(model, pcfg, grid=grid)
    replicas = [base if r == 0 else copy.deepcopy(base) for r in range(pcfg.dp_size)]
    opts = [make_nerf_optimizer(rep, cfg) for rep in replicas]
    curve = _train_nerf(replicas, opts, dataset, cfg, metrics)
    return replicas, curve


def train_parallel_gs(model: GaussianModel, cameras, gt_images, pcfg: ParallelConfig,
                      cfg: TrainConfig, metrics: MetricsLog | None = None):
    dp = pcfg.dp_size
    replicas = [model if r == 0 else model.clone() for r in range(dp)]
    opts = [GaussianAdam.for_model(rep, cfg.lr_sh, cfg.lr_opacity) for rep in replicas]
    shared = [DensifyStats.zeros(model.count) for _ in range(dp)]
    group = RankGroup(dp)
    rng = make_rng(cfg.seed, "gs_batches")
    per_rank = cfg.cameras_per_step
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(0, len(cameras), size=dp * per_rank)
        cam_batches = [[cameras[i] for i in idx[r * per_rank:(r + 1) * per_rank]] for r in range(dp)]
        gt_batches = [[gt_images[i] for i in idx[r * per_rank:(r + 1) * per_rank]] for r in range(dp)]
        densify_now = cfg.densify_interval > 0 and (step + 1) % cfg.densify_interval == 0
        replicas, opts, losses, _ = dp_train_step_gs(
            group, replicas, opts, cam_batches, gt_batches, shared,
            densify=densify_now, thresholds=cfg.densify, tile_size=cfg.tile_size,
        )
        curve.append(float(np.mean(losses)))
        if metrics:
            metrics.append({"kind": "train_step", "family": "gs", "step": step,
                            "loss": curve[-1], "dp": dp})
    return replicas, curve
