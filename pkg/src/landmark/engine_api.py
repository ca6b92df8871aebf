"""User-facing pipeline: config schema, engine initialization, rendering.

Config files are a YAML key/value tree (documented in the README).
Environment variables with prefix LANDMARK_ override top-level scalars,
e.g. LANDMARK_RUNTIME=reference.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import yaml

from .common import InvalidConfigError, InvalidInputError, VirtualClock
from .data_io import Camera, pose_to_rays
from .gaussian_core import GaussianModel, project_splats, rasterize, rasterize_oracle, TileConfig
from .memory_tiers import BudgetExceededError, ParamGroup, TierStore, TransferConfig, TriggerZones
from .nerf_core import GridNerfModel, RayBatch
from .parallel_engine import ParallelConfig, convert_components, derive_world_size
from .scene_manager import SceneGrid, onload_region, partition_scene

ENV_PREFIX = "LANDMARK_"


class ConfigError(InvalidConfigError):
    def __init__(self, fieldpath: str, message: str):
        super().__init__(f"config field '{fieldpath}': {message}")
        self.fieldpath = fieldpath


# ---------------------------------------------------------------------------
# configuration schema


@dataclass(frozen=True)
class OffloadConfig:
    budget_bytes: int
    local_plane_split: tuple[int, int] = (1, 1)
    zones: TriggerZones = field(default_factory=TriggerZones)
    bandwidth_bytes_per_s: float | None = None
    fixed_latency_s: float = 0.0
    ring: int = 1


@dataclass(frozen=True)
class ModelConfig:
    family: str = "gaussian"  # nerf | gaussian
    options: tuple = ()  # sorted (key, value) pairs; kept hashable for equality

    def opt(self, key, default=None):
        return dict(self.options).get(key, default)


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    offload: OffloadConfig | None = None
    runtime: str = "optimized"  # reference | optimized
    seed: int = 0


def validate_config(text: str) -> EngineConfig:
    """Parse, apply LANDMARK_ env overrides, fill defaults, cross-check fields."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError("<root>", f"parse error: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")

    for key, val in os.environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            raw[name] = yaml.safe_load(val)

    model_raw = raw.get("model", {}) or {}
    if isinstance(model_raw, str):
        model_raw = {"family": model_raw}
    family = raw.get("family", model_raw.get("family", "gaussian"))
    if family not in ("nerf", "gaussian"):
        raise ConfigError("model.family", f"unknown family {family!r}")
    options = tuple(sorted((k, v) for k, v in model_raw.items() if k != "family"))
    model = ModelConfig(family=family, options=options)

    par_raw = raw.get("parallel_config", {}) or {}
    dp = int(par_raw.get("dp_size", 1))
    tp = int(par_raw.get("tp_size", 1))
    mode = par_raw.get("mode", "none" if tp == 1 else "channel")
    try:
        parallel = ParallelConfig(dp, tp, mode)
    except InvalidConfigError as e:
        raise ConfigError("parallel_config", str(e)) from None
    if "world_size" in par_raw:
        try:
            derive_world_size(dp, tp, int(par_raw["world_size"]))
        except InvalidConfigError as e:
            raise ConfigError("parallel_config.world_size", str(e)) from None

    offload = None
    if raw.get("offload_config"):
        off = raw["offload_config"]
        if "budget_bytes" not in off:
            raise ConfigError("offload_config.budget_bytes", "required")
        split = tuple(off.get("local_plane_split", (1, 1)))
        if len(split) != 2 or split[0] < 1 or split[1] < 1:
            raise ConfigError("offload_config.local_plane_split", "must be (nx, ny) >= (1, 1)")
        zones_raw = off.get("zones", {}) or {}
        inner = float(zones_raw.get("inner_fraction", 0.5))
        outer = float(zones_raw.get("outer_fraction", 0.8))
        if not outer > inner:
            raise ConfigError("offload_config.zones", "outer must exceed inner")
        try:
            zones = TriggerZones(inner, outer)
        except InvalidConfigError as e:
            raise ConfigError("offload_config.zones", str(e)) from None
        offload = OffloadConfig(
            budget_bytes=int(off["budget_bytes"]),
            local_plane_split=(int(split[0]), int(split[1])),
            zones=zones,
            bandwidth_bytes_per_s=off.get("bandwidth_bytes_per_s"),
            fixed_latency_s=float(off.get("fixed_latency_s", 0.0)),
            ring=int(off.get("ring", 1)),
        )

    runtime = raw.get("runtime", "optimized")
    if runtime not in ("reference", "optimized"):
        raise ConfigError("runtime", f"must be 'reference' or 'optimized', got {runtime!r}")
    return EngineConfig(
        model=model, parallel=parallel, offload=offload, runtime=runtime,
        seed=int(raw.get("seed", 0)),
    )


def serialize_config(cfg: EngineConfig) -> str:
    doc = {
        "model": {"family": cfg.model.family, **dict(cfg.model.options)},
        "parallel_config": {
            "dp_size": cfg.parallel.dp_size,
            "tp_size": cfg.parallel.tp_size,
            "mode": cfg.parallel.mode,
        },
        "runtime": cfg.runtime,
        "seed": cfg.seed,
    }
    if cfg.offload:
        doc["offload_config"] = {
            "budget_bytes": cfg.offload.budget_bytes,
            "local_plane_split": list(cfg.offload.local_plane_split),
            "zones": {
                "inner_fraction": cfg.offload.zones.inner_fraction,
                "outer_fraction": cfg.offload.zones.outer_fraction,
            },
            "bandwidth_bytes_per_s": cfg.offload.bandwidth_bytes_per_s,
            "fixed_latency_s": cfg.offload.fixed_latency_s,
            "ring": cfg.offload.ring,
        }
    return yaml.safe_dump(doc, sort_keys=True)


# ---------------------------------------------------------------------------
# inference stages


@dataclass
class InferenceStagePlan:
    """preprocess -> forward -> postprocess; omitted stages are identities."""

    preprocess: Callable = staticmethod(lambda x: x)
    postprocess: Callable = staticmethod(lambda x: x)


# ---------------------------------------------------------------------------
# gaussian parameter groups for offloading


def gaussian_cell_groups(model: GaussianModel, grid: SceneGrid) -> dict:
    """Partition primitives into per-cell parameter groups by mean position."""
    means = model.means.numpy()
    groups = {}
    for cell in grid.cells():
        groups[cell] = []
    w, h = grid.cell_extent
    ix = np.clip(np.floor((means[:, 0] - grid.bbox[0, 0]) / w).astype(int), 0, grid.nx - 1)
    iy = np.clip(np.floor((means[:, 1] - grid.bbox[0, 1]) / h).astype(int), 0, grid.ny - 1)
    for i in range(model.count):
        groups[(int(ix[i]), int(iy[i]))].append(i)
    out = {}
    for cell, ids in groups.items():
        idx = torch.as_tensor(ids, dtype=torch.long)
        sub = model.subset(idx)
        out[cell] = ParamGroup(
            {
                "ids": idx,
                "means": sub.means,
                "quats": sub.quats,
                "scales": sub.scales,
                "opacity_logits": sub.opacity_logits,
                "sh": sub.sh,
            }
        )
    return out


def model_from_groups(groups: list[ParamGroup], sh_degree: int) -> tuple[GaussianModel, torch.Tensor]:
    """Assemble a model from resident groups; returns (model, original ids)."""
    ids = torch.cat([g.tensors["ids"] for g in groups])
    model = GaussianModel(
        torch.cat([g.tensors["means"] for g in groups]),
        torch.cat([g.tensors["quats"] for g in groups]),
        torch.cat([g.tensors["scales"] for g in groups]),
        torch.cat([g.tensors["opacity_logits"] for g in groups]),
        torch.cat([g.tensors["sh"] for g in groups]),
        sh_degree,
    )
    return model, ids


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Holds the (possibly converted) model plus optional offload wiring."""

    def __init__(self, model, plan: InferenceStagePlan, config: EngineConfig,
                 scene_bbox=None, clock: VirtualClock | None = None):
        self.config = config
        self.plan = plan
        self.clock = clock or VirtualClock()
        self.grid = None
        self.store = None
        self._resident_core = None

        grid = None
        if config.offload is not None:
            if scene_bbox is None:
                if isinstance(model, GaussianModel):
                    m = model.means.numpy()
                    pad = 1e-6 + float(model.scales.max()) * 3
                    scene_bbox = np.stack([m.min(0) - pad, m.max(0) + pad])
                else:
                    scene_bbox = model.field.bbox.numpy()
            nx, ny = config.offload.local_plane_split
            grid = partition_scene(scene_bbox, nx, ny)
        self.model = convert_components(model, config.parallel, grid=grid)

        if config.offload is not None:
            if not isinstance(model, GaussianModel):
                raise InvalidConfigError("offload wiring currently supports the gaussian family")
            self.grid = grid
            self.store = TierStore(
                config.offload.budget_bytes,
                TransferConfig(config.offload.bandwidth_bytes_per_s, config.offload.fixed_latency_s),
                self.clock,
            )
            for cell, group in gaussian_cell_groups(model, grid).items():
                self.store.put_host(cell, group)
            worst = max(
                sum(self.store.host_bytes(c) for c in onload_region(grid, cell, config.offload.ring))
                for cell in grid.cells()
            )
            if worst > config.offload.budget_bytes:
                raise BudgetExceededError(
                    f"budget {config.offload.budget_bytes} bytes cannot hold the largest "
                    f"onload region ({worst} bytes); raise budget or local_plane_split"
                )
            self.sh_degree = model.sh_degree

    # -- rendering

    def _ensure_region(self, camera: Camera):
        core = self.grid.cell_of_point(camera.center)
        if core != self._resident_core:
            wanted = onload_region(self.grid, core, self.config.offload.ring)
            stale = [c for c in list(self.store.device) if c not in wanted]
            if stale:
                self.store.offload_cells(stale, write_back=False)
            handle = self.store.load_cells(sorted(wanted))
            self.clock.advance(max(0.0, handle.ready_at - self.clock.now))
            self._resident_core = core
        region = onload_region(self.grid, self._resident_core, self.config.offload.ring)
        groups = [self.store.resident(c) for c in sorted(region)]
        return model_from_groups(groups, self.sh_degree)[0]

    def _render_gaussian(self, camera: Camera):
        model = self.model if self.store is None else self._ensure_region(camera)
        splats, colors, opac = project_splats(model, camera)
        if self.config.runtime == "reference":
            image = rasterize_oracle(splats, colors, opac, camera.width, camera.height)
        else:
            cfg = TileConfig(16, camera.width, camera.height)
            image, _ = rasterize(splats, colors, opac, cfg)
        return image.numpy()

    def _render_nerf(self, camera: Camera, chunk: int = 4096):
        rays = pose_to_rays(camera)
        out = []
        with torch.no_grad():
            for s in range(0, len(rays), chunk):
                sub = RayBatch(rays.origins[s:s + chunk], rays.directions[s:s + chunk],
                               rays.near, rays.far)
                _, rgb_f, _ = self.model.render_rays(sub)
                out.append(rgb_f)
        return torch.cat(out).reshape(camera.height, camera.width, 3).numpy()

    def render(self, raw_input):
        """preprocess -> forward -> postprocess, with a stats snapshot attached."""
        t0 = time.perf_counter()
        model_input = self.plan.preprocess(raw_input)
        if isinstance(model_input, Camera):
            if isinstance(self.model, GaussianModel) or self.store is not None:
                result = self._render_gaussian(model_input)
            else:
                result = self._render_nerf(model_input)
        elif isinstance(model_input, RayBatch):
            if not isinstance(self.model, GridNerfModel):
                raise InvalidInputError("ray-batch input requires the nerf family")
            with torch.no_grad():
                _, rgb_f, _ = self.model.render_rays(model_input)
            result = rgb_f.numpy()
        else:
            raise InvalidInputError(
                f"unsupported engine input {type(model_input).__name__}; "
                "expected Camera or RayBatch"
            )
        output = self.plan.postprocess(result)
        stats = {
            "latency_ms": (time.perf_counter() - t0) * 1e3,
            "resident_bytes": self.store.resident_bytes if self.store else None,
            "peak_resident_bytes": self.store.stats.peak_resident_bytes if self.store else None,
            "stalls": self.store.stats.stalls if self.store else 0,
        }
        return output, stats


def init_inference(model, stage_plan: InferenceStagePlan | None, config: EngineConfig,
                   scene_bbox=None) -> Engine:
    """Build the engine: conversion, offload wiring, runtime selection."""
    plan = stage_plan or InferenceStagePlan()
    return Engine(model, plan, config, scene_bbox=scene_bbox)


def engine_render(engine: Engine, raw_input):
    return engine.render(raw_input)
