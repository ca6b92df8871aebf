"""Shared plumbing: seeded RNG trees, virtual clock, small error types."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# All model math runs in float64; checkpoints quantize to float32.
DTYPE = torch.float64


class InvalidConfigError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


class FormatError(ValueError):
    pass


def make_rng(seed: int, *path: str) -> np.random.Generator:
    """Portable splittable RNG: PCG64 keyed by a root seed plus a string path.

    Every subsystem (scene generation, sampling, parameter init) derives its
    own independent stream so that reordering one consumer never perturbs
    another.  Bit-reproducible across platforms.
    """
    keys = [seed] + [int.from_bytes(p.encode(), "little") % (2**32) for p in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


def to_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class VirtualClock:
    """Deterministic time source for transfer simulation and stats."""

    now: float = 0.0

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise InvalidInputError("clock cannot go backwards")
        self.now += dt
