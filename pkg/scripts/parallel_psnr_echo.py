"""Quality parity of data-parallel training.

Trains the same Gaussian scene with 1, 2, and 4 replicas at equal total
sample counts and reports mean PSNR over the training views. The per-step
camera draws are shared across configurations, so the columns should agree
to float rounding.

Usage: python3 scripts/parallel_psnr_echo.py [--steps 60] [--prims 300]
"""

import argparse

import numpy as np
import torch

from landmark.data_io import generate_synthetic_scene, psnr
from landmark.gaussian_core import render_image
from landmark.parallel_engine import ParallelConfig
from landmark.train_runtime import TrainConfig, train_parallel_gs


def perturbed(model):
    """Reset appearance so the fit against ground truth is nontrivial."""
    m = model.clone()
    with torch.no_grad():
        m.sh[:, 0, :] = 0.8
        m.sh[:, 1:, :] = 0.0
        m.opacity_logits[:] = 0.5
    return m


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--prims", type=int, default=300)
    ap.add_argument("--seed", type=int, default=21)
    args = ap.parse_args()

    scene = generate_synthetic_scene(args.seed, n_prims=args.prims, n_cameras=8, image_size=32)
    print(f"{'dp':>3} {'cams/step/rank':>15} {'mean PSNR (dB)':>15}")
    base = None
    for dp in (1, 2, 4):
        cfg = TrainConfig(steps=args.steps, seed=0, cameras_per_step=4 // dp)
        replicas, _ = train_parallel_gs(perturbed(scene.model), scene.cameras,
                                        scene.gt_images, ParallelConfig(dp, 1, "none"), cfg)
        val = float(np.mean([
            psnr(render_image(replicas[0], cam)[0].numpy(), gt)
            for cam, gt in zip(scene.cameras, scene.gt_images)
        ]))
        base = base or val
        print(f"{dp:>3} {4 // dp:>15} {val:>15.3f}   (gap {abs(val - base) / base:.2e})")


if __name__ == "__main__":
    main()
