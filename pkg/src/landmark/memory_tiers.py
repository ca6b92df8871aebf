"""Two-tier parameter store: complete host tier, budgeted device tier.

Loads are all-or-nothing against the byte budget and complete on a virtual
clock (bytes / bandwidth + fixed latency); device copies are snapshots and
write back to the host tier only on offload(write_back=True).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch

from .common import InvalidConfigError, InvalidInputError, VirtualClock


class BudgetExceededError(RuntimeError):
    pass


class NotResidentError(KeyError):
    pass


class IncompleteLoadError(RuntimeError):
    pass


@dataclass
class ParamGroup:
    """Named tensors plus their exact byte footprint."""

    tensors: dict

    @property
    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in self.tensors.values())

    def clone(self) -> "ParamGroup":
        return ParamGroup({k: v.clone() for k, v in self.tensors.items()})


@dataclass
class TransferConfig:
    """bandwidth None means instant transfers (tests default to that)."""

    bandwidth_bytes_per_s: float | None = None
    fixed_latency_s: float = 0.0


@dataclass
class TierStats:
    loads: int = 0
    offloads: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    stalls: int = 0
    peak_resident_bytes: int = 0

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass
class LoadHandle:
    cell_ids: tuple
    ready_at: float
    nbytes: int

    def ready(self, clock: VirtualClock) -> bool:
        return clock.now >= self.ready_at


class TierStore:
    def __init__(self, budget_bytes: int, transfer: TransferConfig | None = None,
                 clock: VirtualClock | None = None):
        self.budget_bytes = int(budget_bytes)
        self.transfer = transfer or TransferConfig()
        self.clock = clock or VirtualClock()
        self.host: dict = {}
        self.device: dict = {}
        self.resident_bytes = 0
        self.stats = TierStats()

    # -- host management

    def put_host(self, cell_id, group: ParamGroup) -> None:
        self.host[cell_id] = group

    def host_bytes(self, cell_id) -> int:
        return self.host[cell_id].nbytes

    def total_host_bytes(self) -> int:
        return sum(g.nbytes for g in self.host.values())

    # -- transfers

    def _transfer_time(self, nbytes: int) -> float:
        bw = self.transfer.bandwidth_bytes_per_s
        dur = self.transfer.fixed_latency_s
        if bw is not None and bw > 0:
            dur += nbytes / bw
        return dur

    def load_cells(self, cell_ids) -> LoadHandle:
        """All-or-nothing async load; already-resident cells are no-ops."""
        cell_ids = tuple(cell_ids)
        for cid in cell_ids:
            if cid not in self.host:
                raise NotResidentError(f"cell {cid} not in host tier")
        new = [cid for cid in cell_ids if cid not in self.device]
        nbytes = sum(self.host[cid].nbytes for cid in new)
        if self.resident_bytes + nbytes > self.budget_bytes:
            raise BudgetExceededError(
                f"loading {nbytes} bytes would exceed budget "
                f"({self.resident_bytes}/{self.budget_bytes} resident)"
            )
        for cid in new:
            self.device[cid] = self.host[cid].clone()
        self.resident_bytes += nbytes
        self.stats.loads += len(new)
        self.stats.bytes_in += nbytes
        self.stats.peak_resident_bytes = max(self.stats.peak_resident_bytes, self.resident_bytes)
        return LoadHandle(cell_ids, self.clock.now + self._transfer_time(nbytes), nbytes)

    def offload_cells(self, cell_ids, write_back: bool = False) -> int:
        freed = 0
        for cid in cell_ids:
            if cid not in self.device:
                raise NotResidentError(f"cell {cid} not resident on device")
        for cid in cell_ids:
            group = self.device.pop(cid)
            if write_back:
                self.host[cid] = group
            freed += group.nbytes
        self.resident_bytes -= freed
        self.stats.offloads += len(tuple(cell_ids))
        self.stats.bytes_out += freed
        return freed

    def resident(self, cell_id) -> ParamGroup:
        if cell_id not in self.device:
            raise NotResidentError(f"cell {cell_id} not resident on device")
        return self.device[cell_id]

    def is_resident(self, cell_id) -> bool:
        return cell_id in self.device


# ---------------------------------------------------------------------------
# double buffering


@dataclass
class Region:
    cell_ids: frozenset
    core: tuple | None = None


@dataclass
class BufferPair:
    front: Region | None = None
    back: tuple | None = None  # (Region, LoadHandle)

    def swap(self, clock: VirtualClock) -> None:
        if self.back is None:
            raise IncompleteLoadError("no back buffer to swap in")
        region, handle = self.back
        if not handle.ready(clock):
            raise IncompleteLoadError(
                f"back buffer load completes at t={handle.ready_at:.6f}, now t={clock.now:.6f}"
            )
        self.front, self.back = region, None


def swap_buffers(pair: BufferPair, clock: VirtualClock) -> None:
    pair.swap(clock)


# ---------------------------------------------------------------------------
# prefetch policy


@dataclass(frozen=True)
class TriggerZones:
    """Nested per-axis boundaries as fractions of the cell half-extent."""

    inner_fraction: float = 0.5
    outer_fraction: float = 0.8

    def __post_init__(self):
        if not 0 < self.inner_fraction < self.outer_fraction <= 1:
            raise InvalidConfigError("require 0 < inner < outer <= 1")


@dataclass(frozen=True)
class PrefetchAction:
    kind: str  # none | start_load | swap | stall_then_swap
    target_core: tuple | None = None


def prefetch_policy(position, velocity, core_cell, zones: TriggerZones, pair: BufferPair,
                    grid, clock: VirtualClock) -> PrefetchAction:
    """Nested trigger zones inside the current core cell.

    Inside the inner boundary: nothing.  Past the inner boundary: start
    loading the region around the neighbor in the dominant motion direction
    (unless that load is already pending).  Past the outer boundary: swap,
    or stall-then-swap when the back buffer is still loading.
    """
    import numpy as np

    cb = grid.cell_bbox(core_cell)
    center = (cb[0, :2] + cb[1, :2]) / 2
    half = (cb[1, :2] - cb[0, :2]) / 2
    rel = (np.asarray(position, dtype=float)[:2] - center) / half  # in [-1, 1]
    frac = np.abs(rel)
    if np.all(frac < zones.inner_fraction):
        return PrefetchAction("none")

    vel = np.asarray(velocity, dtype=float)[:2]
    crossed = frac >= zones.inner_fraction
    # dominant motion axis among crossed boundaries, moving outward
    candidates = [a for a in (0, 1) if crossed[a] and vel[a] * rel[a] > 0]
    if not candidates:
        candidates = [int(np.argmax(frac))]
    axis = max(candidates, key=lambda a: abs(vel[a]))
    step = 1 if rel[axis] > 0 else -1
    target = list(core_cell)
    target[axis] += step
    target[0] = min(max(target[0], 0), grid.nx - 1)
    target[1] = min(max(target[1], 0), grid.ny - 1)
    target = tuple(target)

    beyond_outer = bool(np.any(frac >= zones.outer_fraction))
    if beyond_outer and pair.back is not None:
        region, handle = pair.back
        if handle.ready(clock):
            return PrefetchAction("swap", target_core=region.core)
        return PrefetchAction("stall_then_swap", target_core=region.core)
    pending = pair.back is not None and pair.back[0].core == target
    front_covers = pair.front is not None and pair.front.core == target
    if pending or front_covers or target == core_cell:
        return PrefetchAction("none")
    return PrefetchAction("start_load", target_core=target)
