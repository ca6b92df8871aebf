import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from landmark.common import InvalidConfigError, VirtualClock, make_rng
from landmark.memory_tiers import (
    BudgetExceededError,
    BufferPair,
    IncompleteLoadError,
    LoadHandle,
    NotResidentError,
    ParamGroup,
    PrefetchAction,
    Region,
    TierStore,
    TransferConfig,
    TriggerZones,
    prefetch_policy,
    swap_buffers,
)
from landmark.scene_manager import partition_scene


def group_of(nbytes, seed=0):
    assert nbytes % 8 == 0
    rng = make_rng(seed, "grp")
    return ParamGroup({"w": torch.as_tensor(rng.standard_normal(nbytes // 8))})


def store_with_cells(budget, sizes, **kw):
    store = TierStore(budget, **kw)
    for cid, nbytes in sizes.items():
        store.put_host(cid, group_of(nbytes, seed=hash(cid) % 1000))
    return store


# ---------------------------------------------------------------------------
# accounting


def test_param_group_nbytes_exact():
    g = ParamGroup({"a": torch.zeros(10, dtype=torch.float64),
                    "b": torch.zeros(3, 4, dtype=torch.float32)})
    assert g.nbytes == 10 * 8 + 12 * 4


def test_load_offload_accounting():
    store = store_with_cells(1000, {"a": 400, "b": 400, "c": 400})
    store.load_cells(["a", "b"])
    assert store.resident_bytes == 800
    assert store.stats.loads == 2 and store.stats.bytes_in == 800
    store.offload_cells(["a"])
    assert store.resident_bytes == 400
    store.load_cells(["c"])
    assert store.resident_bytes == 800
    assert store.stats.peak_resident_bytes == 800


def test_load_all_or_nothing():
    store = store_with_cells(700, {"a": 400, "b": 400})
    with pytest.raises(BudgetExceededError):
        store.load_cells(["a", "b"])
    # nothing was loaded
    assert store.resident_bytes == 0
    assert not store.is_resident("a") and not store.is_resident("b")
    store.load_cells(["a"])
    assert store.resident_bytes == 400


def test_load_idempotent_for_resident_cells():
    store = store_with_cells(500, {"a": 400})
    store.load_cells(["a"])
    store.load_cells(["a"])  # no-op: fits despite budget < 2x
    assert store.resident_bytes == 400
    assert store.stats.loads == 1


def test_load_unknown_cell_raises():
    store = store_with_cells(500, {"a": 400})
    with pytest.raises(NotResidentError):
        store.load_cells(["missing"])


def test_offload_non_resident_raises():
    store = store_with_cells(500, {"a": 400})
    with pytest.raises(NotResidentError):
        store.offload_cells(["a"])


def test_device_copy_is_snapshot():
    store = store_with_cells(500, {"a": 400})
    store.load_cells(["a"])
    dev = store.resident("a")
    dev.tensors["w"][:] = 7.0
    assert not torch.equal(store.host["a"].tensors["w"], dev.tensors["w"])


def test_write_back_bit_exact():
    store = store_with_cells(500, {"a": 400})
    store.load_cells(["a"])
    dev = store.resident("a")
    dev.tensors["w"][:] = torch.linspace(0, 1, 50, dtype=torch.float64)
    store.offload_cells(["a"], write_back=True)
    assert torch.equal(store.host["a"].tensors["w"],
                       torch.linspace(0, 1, 50, dtype=torch.float64))


def test_offload_without_write_back_discards():
    store = store_with_cells(500, {"a": 400})
    before = store.host["a"].tensors["w"].clone()
    store.load_cells(["a"])
    store.resident("a").tensors["w"][:] = -1.0
    store.offload_cells(["a"], write_back=False)
    assert torch.equal(store.host["a"].tensors["w"], before)


@settings(deadline=None, max_examples=30)
@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=12))
def test_resident_bytes_never_exceed_budget(ops):
    store = store_with_cells(900, {c: 400 for c in "abcd"})
    for cid in ops:
        try:
            store.load_cells([cid])
        except BudgetExceededError:
            if store.device:
                store.offload_cells([next(iter(store.device))])
        assert store.resident_bytes <= store.budget_bytes
        assert store.resident_bytes == sum(g.nbytes for g in store.device.values())


# ---------------------------------------------------------------------------
# transfer timing


def test_transfer_time_bandwidth_and_latency():
    clock = VirtualClock()
    store = store_with_cells(
        1000, {"a": 800},
        transfer=TransferConfig(bandwidth_bytes_per_s=100.0, fixed_latency_s=0.5),
        clock=clock,
    )
    handle = store.load_cells(["a"])
    assert handle.ready_at == pytest.approx(8.5)
    assert not handle.ready(clock)
    clock.advance(8.5)
    assert handle.ready(clock)


def test_instant_transfer_default():
    clock = VirtualClock()
    store = store_with_cells(1000, {"a": 800}, clock=clock)
    assert store.load_cells(["a"]).ready(clock)


# ---------------------------------------------------------------------------
# double buffering


def test_swap_requires_ready_back_buffer():
    clock = VirtualClock()
    pair = BufferPair(front=Region(frozenset({(0, 0)}), core=(0, 0)))
    with pytest.raises(IncompleteLoadError):
        pair.swap(clock)
    handle = LoadHandle(((1, 0),), ready_at=2.0, nbytes=100)
    pair.back = (Region(frozenset({(1, 0)}), core=(1, 0)), handle)
    with pytest.raises(IncompleteLoadError):
        swap_buffers(pair, clock)
    clock.advance(2.0)
    swap_buffers(pair, clock)
    assert pair.front.core == (1, 0)
    assert pair.back is None


# ---------------------------------------------------------------------------
# trigger zones / prefetch policy


def test_trigger_zone_validation():
    TriggerZones(0.5, 0.8)
    with pytest.raises(InvalidConfigError):
        TriggerZones(0.8, 0.5)
    with pytest.raises(InvalidConfigError):
        TriggerZones(0.0, 0.8)
    with pytest.raises(InvalidConfigError):
        TriggerZones(0.5, 1.1)


GRID = partition_scene(np.array([[-4.0, -4.0, -1.0], [4.0, 4.0, 1.0]]), 4, 4)
ZONES = TriggerZones(0.5, 0.8)


def idle_pair(core=(1, 1)):
    return BufferPair(front=Region(frozenset({core}), core=core))


def test_policy_none_at_cell_center():
    # cell (1,1) spans [-2,0)x[-2,0), center (-1,-1)
    act = prefetch_policy((-1.0, -1.0, 0.0), (1.0, 0.0, 0.0), (1, 1), ZONES,
                          idle_pair(), GRID, VirtualClock())
    assert act == PrefetchAction("none")


def test_policy_start_load_past_inner_boundary():
    # 0.6 of the half-extent toward +x, moving +x
    act = prefetch_policy((-0.4, -1.0, 0.0), (1.0, 0.0, 0.0), (1, 1), ZONES,
                          idle_pair(), GRID, VirtualClock())
    assert act.kind == "start_load" and act.target_core == (2, 1)


def test_policy_start_load_not_repeated_while_pending():
    pair = idle_pair()
    pair.back = (Region(frozenset({(2, 1)}), core=(2, 1)),
                 LoadHandle(((2, 1),), ready_at=5.0, nbytes=10))
    act = prefetch_policy((-0.4, -1.0, 0.0), (1.0, 0.0, 0.0), (1, 1), ZONES,
                          pair, GRID, VirtualClock())
    assert act == PrefetchAction("none")


def test_policy_swap_past_outer_when_ready():
    clock = VirtualClock()
    pair = idle_pair()
    pair.back = (Region(frozenset({(2, 1)}), core=(2, 1)),
                 LoadHandle(((2, 1),), ready_at=0.0, nbytes=10))
    act = prefetch_policy((-0.1, -1.0, 0.0), (1.0, 0.0, 0.0), (1, 1), ZONES,
                          pair, GRID, clock)
    assert act.kind == "swap" and act.target_core == (2, 1)


def test_policy_stall_past_outer_when_loading():
    clock = VirtualClock()
    pair = idle_pair()
    pair.back = (Region(frozenset({(2, 1)}), core=(2, 1)),
                 LoadHandle(((2, 1),), ready_at=9.0, nbytes=10))
    act = prefetch_policy((-0.1, -1.0, 0.0), (1.0, 0.0, 0.0), (1, 1), ZONES,
                          pair, GRID, clock)
    assert act.kind == "stall_then_swap"


def test_policy_dominant_axis_follows_velocity():
    # both boundaries crossed; velocity mostly -y => target is (1, 0)
    act = prefetch_policy((-0.35, -1.9, 0.0), (0.5, -2.0, 0.0), (1, 1), ZONES,
                          idle_pair(), GRID, VirtualClock())
    assert act.kind == "start_load" and act.target_core == (1, 0)


def test_policy_clamps_at_grid_edge():
    # cell (0,0) spans [-4,-2)^2; moving -x past the inner boundary: no neighbor
    act = prefetch_policy((-3.7, -3.0, 0.0), (-1.0, 0.0, 0.0), (0, 0), ZONES,
                          BufferPair(front=Region(frozenset({(0, 0)}), core=(0, 0))),
                          GRID, VirtualClock())
    assert act == PrefetchAction("none")
