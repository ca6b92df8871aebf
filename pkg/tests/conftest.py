import numpy as np
import pytest
import torch

from landmark.data_io import generate_synthetic_scene


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene(7, n_prims=60, n_cameras=4, image_size=32)


def perturb_appearance(model):
    """Reset colors/opacities so fitting against oracle ground truth is nontrivial."""
    m = model.clone()
    with torch.no_grad():
        m.sh[:, 0, :] = 0.8
        m.sh[:, 1:, :] = 0.0
        m.opacity_logits[:] = 0.5
    return m


def max_param_diff(model_a, model_b) -> float:
    pa = dict(model_a.named_parameters())
    pb = dict(model_b.named_parameters())
    assert pa.keys() == pb.keys()
    return max(float((pa[k].detach() - pb[k].detach()).abs().max()) for k in pa)


def gaussian_models_equal(a, b) -> bool:
    return all(
        torch.equal(getattr(a, n), getattr(b, n))
        for n in ("means", "quats", "scales", "opacity_logits", "sh")
    )
