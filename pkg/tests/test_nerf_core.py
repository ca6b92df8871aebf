import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from landmark.common import InvalidConfigError, InvalidInputError, ShapeError, make_rng
from landmark.data_io import generate_blob_ray_dataset
from landmark.nerf_core import (
    EncodingConfig,
    GridNerfModel,
    MlpDecoder,
    NerfConfig,
    PlaneLineField,
    RayBatch,
    SampleBatch,
    encode_positional,
    grid_encode,
    mlp_decode,
    nerf_loss,
    per_ray_uniform,
    sample_coarse,
    sample_fine_pdf,
    volume_render,
)

BBOX = np.array([[-2.0, -2.0, -2.0], [2.0, 2.0, 2.0]])


def make_rays(n, seed=0, near=0.1, far=4.0):
    rng = make_rng(seed, "rays")
    o = rng.uniform(-1, 1, (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return RayBatch(o, d, near, far)


# ---------------------------------------------------------------------------
# rays and sample batches


def test_ray_direction_must_be_unit():
    with pytest.raises(InvalidInputError):
        RayBatch(np.zeros((1, 3)), np.array([[1.0, 1.0, 0.0]]), 0.1, 1.0)


def test_ray_far_must_exceed_near():
    with pytest.raises(InvalidInputError):
        RayBatch(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]]), 1.0, 0.5)


def test_sample_batch_requires_increasing_t():
    rays = make_rays(1)
    t = torch.tensor([[0.5, 0.4]], dtype=torch.float64)
    with pytest.raises(InvalidInputError):
        SampleBatch(rays, t, rays.points_at(t))


def test_sample_batch_position_consistency():
    rays = make_rays(1)
    t = torch.tensor([[0.2, 0.4]], dtype=torch.float64)
    good = rays.points_at(t)
    SampleBatch(rays, t, good)  # ok
    with pytest.raises(InvalidInputError):
        SampleBatch(rays, t, good + 1e-3)


# ---------------------------------------------------------------------------
# positional encoding


def test_encode_zero():
    assert torch.allclose(
        encode_positional(torch.tensor(0.0), 2), torch.tensor([0.0, 0.0, 1.0, 1.0]).double()
    )


def test_encode_half_pi():
    out = encode_positional(torch.tensor(math.pi / 2, dtype=torch.float64), 1)
    assert torch.allclose(out, torch.tensor([1.0, 0.0]).double(), atol=1e-12)


def test_encode_quarter_pi():
    out = encode_positional(torch.tensor(math.pi / 4, dtype=torch.float64), 2)
    expected = torch.tensor([0.70711, 1.0, 0.70711, 0.0]).double()
    assert torch.allclose(out, expected, atol=1e-5)


def test_encode_vector_layout_per_scalar():
    x = torch.tensor([0.3, -1.1], dtype=torch.float64)
    out = encode_positional(x, 3)
    assert out.shape == (2 * 2 * 3,)
    per0 = encode_positional(x[0], 3)
    assert torch.equal(out[:6], per0)


def test_encode_rejects_bad_length():
    with pytest.raises(InvalidConfigError):
        encode_positional(torch.tensor(1.0), 0)


@given(st.floats(-10, 10), st.integers(1, 8))
def test_encode_bounded(x, s):
    out = encode_positional(torch.tensor(x, dtype=torch.float64), s)
    assert out.shape == (2 * s,)
    assert float(out.abs().max()) <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# plane-line field


def test_grid_encode_all_ones():
    fld = PlaneLineField(BBOX, 8, 3, 2)
    with torch.no_grad():
        fld.density_planes.fill_(1.0)
        fld.density_lines.fill_(1.0)
    dens, _ = grid_encode(fld, torch.tensor([0.1, 0.2, 0.3], dtype=torch.float64))
    assert torch.allclose(dens, torch.tensor(3.0).double(), atol=1e-12)


def test_grid_encode_node_value_product():
    res = 5
    fld = PlaneLineField(BBOX, res, 1, 1)
    rng = make_rng(0, "grid")
    with torch.no_grad():
        fld.density_planes.copy_(torch.as_tensor(rng.standard_normal(fld.density_planes.shape)))
        fld.density_lines.copy_(torch.as_tensor(rng.standard_normal(fld.density_lines.shape)))
    # position exactly at node (1, 2) in x-y and node 3 in z
    lo, hi = BBOX[0], BBOX[1]
    p = torch.tensor(
        [
            lo[0] + (hi[0] - lo[0]) * 1 / (res - 1),
            lo[1] + (hi[1] - lo[1]) * 2 / (res - 1),
            lo[2] + (hi[2] - lo[2]) * 3 / (res - 1),
        ],
        dtype=torch.float64,
    )
    dens, _ = grid_encode(fld, p)
    expected = fld.density_planes[0, 1, 2] * fld.density_lines[0, 3]  # planes indexed [x, y]
    assert torch.allclose(dens, expected, atol=1e-9)


def test_grid_encode_midpoint_bilinear():
    res = 2
    fld = PlaneLineField(BBOX, res, 1, 1)
    with torch.no_grad():
        fld.density_planes.zero_()
        fld.density_planes[0, 1, 0] = 1.0  # node at (x=hi, y=lo); planes indexed [x, y]
        fld.density_lines.fill_(1.0)
    mid_x = torch.tensor([0.0, -2.0, 0.0], dtype=torch.float64)  # halfway in x, at y=lo
    dens, _ = grid_encode(fld, mid_x)
    assert torch.allclose(dens, torch.tensor(0.5).double(), atol=1e-12)


def test_grid_encode_out_of_bounds():
    fld = PlaneLineField(BBOX, 4, 1, 1)
    from landmark.common import OutOfBoundsError

    with pytest.raises(OutOfBoundsError):
        grid_encode(fld, torch.tensor([5.0, 0.0, 0.0], dtype=torch.float64))


def test_grid_encode_edge_convex_combination():
    fld = PlaneLineField(BBOX, 4, 2, 1)
    rng = make_rng(1, "grid")
    with torch.no_grad():
        fld.density_planes.copy_(torch.as_tensor(rng.standard_normal(fld.density_planes.shape)))
        fld.density_lines.copy_(torch.as_tensor(rng.standard_normal(fld.density_lines.shape)))
    step = (BBOX[1, 0] - BBOX[0, 0]) / 3  # node spacing for resolution 4
    a = torch.tensor([BBOX[0, 0] + step, 0.2, 0.1], dtype=torch.float64)  # x exactly at node 1
    b = a.clone()
    b[0] += step  # x exactly at node 2: segment spans a single cell edge
    for lam in (0.0, 0.25, 0.5, 1.0):
        p = (1 - lam) * a + lam * b
        d, _ = grid_encode(fld, p)
        da, _ = grid_encode(fld, a)
        db, _ = grid_encode(fld, b)
        assert torch.allclose(d, (1 - lam) * da + lam * db, atol=1e-9)


# ---------------------------------------------------------------------------
# decoder


def test_mlp_decode_zero_weights():
    enc = EncodingConfig(2, 2)
    dec = MlpDecoder(enc, 8, 1, 4, 4, rng=make_rng(0, "d"))
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
    pos = encode_positional(torch.zeros(1, 3, dtype=torch.float64), 2)
    direc = encode_positional(torch.zeros(1, 3, dtype=torch.float64), 2)
    sigma, rgb = mlp_decode(dec, pos, direc)
    assert float(sigma.detach()) == 0.0
    assert torch.allclose(rgb.detach(), torch.full((1, 3), 0.5).double())


def test_mlp_decode_sigma_independent_of_direction():
    enc = EncodingConfig(3, 2)
    dec = MlpDecoder(enc, 16, 2, 8, 4, rng=make_rng(1, "d"))
    pos = encode_positional(torch.randn(5, 3, dtype=torch.float64), 3)
    d1 = encode_positional(torch.randn(5, 3, dtype=torch.float64), 2)
    d2 = encode_positional(torch.randn(5, 3, dtype=torch.float64), 2)
    s1, _ = mlp_decode(dec, pos, d1)
    s2, _ = mlp_decode(dec, pos, d2)
    assert torch.equal(s1, s2)


def test_mlp_decode_deterministic():
    enc = EncodingConfig(3, 2)
    dec = MlpDecoder(enc, 16, 2, 8, 4, rng=make_rng(2, "d"))
    pos = encode_positional(torch.randn(4, 3, dtype=torch.float64), 3)
    direc = encode_positional(torch.randn(4, 3, dtype=torch.float64), 2)
    s1, c1 = mlp_decode(dec, pos, direc)
    s2, c2 = mlp_decode(dec, pos, direc)
    assert torch.equal(s1, s2) and torch.equal(c1, c2)


def test_mlp_decode_dim_mismatch():
    enc = EncodingConfig(3, 2)
    dec = MlpDecoder(enc, 16, 2, 8, 4, rng=make_rng(3, "d"))
    pos = encode_positional(torch.randn(4, 3, dtype=torch.float64), 2)  # wrong length
    direc = encode_positional(torch.randn(4, 3, dtype=torch.float64), 2)
    with pytest.raises(ShapeError):
        mlp_decode(dec, pos, direc)


# ---------------------------------------------------------------------------
# sampling


def test_sample_coarse_midpoints():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.0, 1.0)
    batch = sample_coarse(rays, 4)
    assert torch.allclose(
        batch.t_values[0], torch.tensor([0.125, 0.375, 0.625, 0.875]).double()
    )


def test_sample_coarse_single():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.2, 0.8)
    batch = sample_coarse(rays, 1)
    assert torch.allclose(batch.t_values[0], torch.tensor([0.5]).double())


def test_sample_coarse_stratified_in_bins():
    rays = make_rays(8, near=0.0, far=1.0)
    batch = sample_coarse(rays, 16, stratified=True, rng=make_rng(0, "s"))
    edges = torch.arange(17, dtype=torch.float64) / 16
    assert torch.all(batch.t_values >= edges[:-1])
    assert torch.all(batch.t_values < edges[1:])


def test_sample_coarse_rejects_zero():
    with pytest.raises(InvalidConfigError):
        sample_coarse(make_rays(1), 0)


def test_fine_pdf_mass_in_one_bin():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.0, 1.0)
    coarse = sample_coarse(rays, 8)
    weights = torch.zeros(1, 8, dtype=torch.float64)
    weights[0, 3] = 1.0
    fine = sample_fine_pdf(rays, coarse.t_values, weights, 16, rng=make_rng(0, "f"))
    new = [t for t in fine.t_values[0].tolist() if t not in coarse.t_values[0].tolist()]
    assert len(new) == 16
    # bin 3 of the uniform coarse partition covers [3/8, 4/8)
    assert all(3 / 8 <= t < 4 / 8 for t in new)


def test_fine_pdf_zero_weights_uniform_fallback():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.0, 1.0)
    coarse = sample_coarse(rays, 8)
    weights = torch.zeros(1, 8, dtype=torch.float64)
    fine = sample_fine_pdf(rays, coarse.t_values, weights, 64, rng=make_rng(0, "f"))
    assert torch.all(fine.t_values >= 0.0) and torch.all(fine.t_values <= 1.0)
    assert fine.t_values.shape == (1, 8 + 64)


def test_fine_pdf_uniform_weights_cdf():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.0, 1.0)
    coarse = sample_coarse(rays, 8)
    weights = torch.ones(1, 8, dtype=torch.float64)
    fine = sample_fine_pdf(rays, coarse.t_values, weights, 4096, rng=make_rng(0, "f"))
    samples = np.sort(fine.t_values[0].numpy())
    ecdf = np.arange(1, len(samples) + 1) / len(samples)
    sup = np.abs(ecdf - samples).max()
    assert sup < 0.05


def test_per_ray_uniform_is_per_ray_stable():
    u_all = per_ray_uniform(3, [10, 11, 12], 8)
    u_sub = per_ray_uniform(3, [11], 8)
    assert torch.equal(u_all[1], u_sub[0])


# ---------------------------------------------------------------------------
# volume rendering


def make_sample_batch(n_rays, n, seed=0, near=0.0, far=1.0):
    rays = make_rays(n_rays, seed=seed, near=near, far=far)
    batch = sample_coarse(rays, n)
    rng = make_rng(seed, "vr")
    batch.densities = torch.as_tensor(rng.uniform(0, 5, (n_rays, n)))
    batch.colors = torch.as_tensor(rng.uniform(0, 1, (n_rays, n, 3)))
    return batch


def test_volume_render_zero_density():
    batch = make_sample_batch(4, 8)
    batch.densities = torch.zeros_like(batch.densities)
    color, opac, weights = volume_render(batch)
    assert torch.all(color == 0) and torch.all(opac == 0) and torch.all(weights == 0)


def test_volume_render_two_sample_value():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.0, 2.0)
    t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    batch = SampleBatch(rays, t, rays.points_at(t))
    batch.densities = torch.ones(1, 2, dtype=torch.float64)
    batch.colors = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]], dtype=torch.float64)
    color, opac, _ = volume_render(batch)
    assert torch.allclose(color[0], torch.tensor([0.63212, 0.23254, 0.0]).double(), atol=1e-5)
    assert abs(float(opac[0]) - 0.86466) < 1e-5


def test_volume_render_saturated_first_sample():
    rays = RayBatch(np.zeros((1, 3)), np.array([[0.0, 0.0, 1.0]]), 0.0, 2.0)
    t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    batch = SampleBatch(rays, t, rays.points_at(t))
    batch.densities = torch.tensor([[50.0, 1.0]], dtype=torch.float64)
    batch.colors = torch.tensor([[[0.2, 0.7, 0.4], [0.9, 0.9, 0.9]]], dtype=torch.float64)
    color, _, _ = volume_render(batch)
    assert torch.allclose(color[0], batch.colors[0, 0], atol=1e-9)


def test_volume_render_rejects_negative_density():
    batch = make_sample_batch(1, 4)
    batch.densities[0, 0] = -0.1
    with pytest.raises(InvalidInputError):
        volume_render(batch)


def test_weight_identity_and_monotone_transmittance():
    batch = make_sample_batch(50, 32, seed=5)
    _, _, weights = volume_render(batch)
    t = batch.t_values
    deltas = torch.cat([t[..., 1:] - t[..., :-1], batch.rays.far - t[..., -1:]], dim=-1)
    total = (batch.densities * deltas).sum(-1)
    assert float((weights.sum(-1) - (1 - torch.exp(-total))).abs().max()) < 1e-9
    # transmittance inferred from weights is non-increasing
    trans = 1.0 - torch.cumsum(weights, dim=-1)
    assert torch.all(trans[..., 1:] <= trans[..., :-1] + 1e-12)


def test_zero_density_insertion_invariance():
    """A transparent sample (sigma 0, zero-length interval) is a no-op."""
    batch = make_sample_batch(10, 16, seed=9)
    color, opac, _ = volume_render(batch)
    t = batch.t_values
    deltas = torch.cat([t[:, 1:] - t[:, :-1], batch.rays.far - t[:, -1:]], dim=-1)
    mid = (t[:, 7] + t[:, 8]) / 2
    t2 = torch.cat([t[:, :8], mid[:, None], t[:, 8:]], dim=1)
    b2 = SampleBatch(batch.rays, t2, batch.rays.points_at(t2))
    b2.densities = torch.cat(
        [batch.densities[:, :8], torch.zeros(10, 1, dtype=torch.float64), batch.densities[:, 8:]],
        dim=1,
    )
    b2.colors = torch.cat(
        [batch.colors[:, :8], torch.rand(10, 1, 3, dtype=torch.float64), batch.colors[:, 8:]],
        dim=1,
    )
    b2.deltas = torch.cat(
        [deltas[:, :8], torch.zeros(10, 1, dtype=torch.float64), deltas[:, 8:]], dim=1
    )
    color2, opac2, _ = volume_render(b2)
    assert float((color - color2).abs().max()) < 1e-9
    assert float((opac - opac2).abs().max()) < 1e-9


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 10_000))
def test_weight_identity_property(seed):
    batch = make_sample_batch(4, 8, seed=seed)
    _, opac, weights = volume_render(batch)
    t = batch.t_values
    deltas = torch.cat([t[..., 1:] - t[..., :-1], batch.rays.far - t[..., -1:]], dim=-1)
    total = (batch.densities * deltas).sum(-1)
    assert float((weights.sum(-1) - (1 - torch.exp(-total))).abs().max()) < 1e-9
    assert torch.all(opac >= 0) and torch.all(opac <= 1)


# ---------------------------------------------------------------------------
# loss


def test_nerf_loss_zero_when_exact():
    gt = torch.rand(5, 3, dtype=torch.float64)
    assert float(nerf_loss(gt, gt, gt)) == 0.0


def test_nerf_loss_single_offset():
    gt = torch.zeros(1, 3, dtype=torch.float64)
    coarse = torch.tensor([[0.1, 0.0, 0.0]], dtype=torch.float64)
    assert abs(float(nerf_loss(coarse, gt, gt)) - 0.01) < 1e-12


def test_nerf_loss_symmetric_in_stages():
    gt = torch.rand(6, 3, dtype=torch.float64)
    a = torch.rand(6, 3, dtype=torch.float64)
    b = torch.rand(6, 3, dtype=torch.float64)
    assert float(nerf_loss(a, b, gt)) == pytest.approx(float(nerf_loss(b, a, gt)), abs=1e-15)


def test_nerf_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        nerf_loss(torch.zeros(2, 3).double(), torch.zeros(2, 3).double(), torch.zeros(3, 3).double())


# ---------------------------------------------------------------------------
# full model


def test_model_out_of_bounds_sigma_zero():
    model = GridNerfModel(BBOX, NerfConfig(resolution=8, hidden=16), seed=0)
    pos = torch.tensor([[10.0, 0.0, 0.0]], dtype=torch.float64)
    direc = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    sigma, _ = model.query(pos, direc, "fine")
    assert float(sigma) == 0.0


def test_model_render_deterministic():
    ds = generate_blob_ray_dataset(0, n_rays=6, n_quad=32)
    model = GridNerfModel(ds["bbox"], NerfConfig(resolution=8, hidden=16), seed=0)
    rays = RayBatch(ds["origins"], ds["directions"], ds["near"], ds["far"])
    with torch.no_grad():
        c1, f1, _ = model.render_rays(rays)
        c2, f2, _ = model.render_rays(rays)
    assert torch.equal(c1, c2) and torch.equal(f1, f2)
