"""Small deterministic Adam implementations with offloadable state.

Two variants: a dict-of-tensors Adam for the grid NeRF model (per-group
learning rates by parameter-name prefix) and a per-primitive Adam for
Gaussian sets whose moment vectors and step counters travel with the
primitives through load/offload cycles.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .common import DTYPE

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class Adam:
    """Adam over a named tensor dict; state is keyed by name."""

    def __init__(self, params: dict[str, Tensor], lr: float, lr_overrides: dict[str, float] | None = None):
        self.lr = lr
        self.lr_overrides = dict(lr_overrides or {})
        self.m = {k: torch.zeros_like(v) for k, v in params.items()}
        self.v = {k: torch.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def _lr_for(self, name: str) -> float:
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    @torch.no_grad()
    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - BETA1**self.t
        bc2 = 1.0 - BETA2**self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k].mul_(BETA1).add_(g, alpha=1 - BETA1)
            self.v[k].mul_(BETA2).addcmul_(g, g, value=1 - BETA2)
            denom = (self.v[k] / bc2).sqrt().add_(EPS)
            p.add_((self.m[k] / bc1) / denom, alpha=-self._lr_for(k))

    def clone_state(self) -> dict:
        return {
            "m": {k: v.clone() for k, v in self.m.items()},
            "v": {k: v.clone() for k, v in self.v.items()},
            "t": self.t,
        }

    def load_state(self, state: dict) -> None:
        self.m = {k: v.clone() for k, v in state["m"].items()}
        self.v = {k: v.clone() for k, v in state["v"].items()}
        self.t = state["t"]


class GaussianAdam:
    """Adam for SH coefficients and opacity logits with per-primitive moments.

    The bias-correction step counter is also per primitive so partially
    resident training (dynamic loading) matches full-residency training on
    whatever subset is being updated.
    """

    def __init__(self, n: int, sh_shape, lr_sh: float = 2.5e-2, lr_opacity: float = 5e-2):
        self.lr_sh = lr_sh
        self.lr_opacity = lr_opacity
        self.m_sh = torch.zeros(sh_shape, dtype=DTYPE)
        self.v_sh = torch.zeros(sh_shape, dtype=DTYPE)
        self.m_logit = torch.zeros(n, dtype=DTYPE)
        self.v_logit = torch.zeros(n, dtype=DTYPE)
        self.t = torch.zeros(n, dtype=torch.long)

    @classmethod
    def for_model(cls, model, lr_sh: float = 2.5e-2, lr_opacity: float = 5e-2) -> "GaussianAdam":
        return cls(model.count, model.sh.shape, lr_sh, lr_opacity)

    @torch.no_grad()
    def step(self, model, grads: dict[str, Tensor], idx: Tensor | None = None) -> None:
        if idx is None:
            idx = torch.arange(model.count)
        self.t[idx] += 1
        t = self.t[idx].to(DTYPE)
        bc1 = (1.0 - BETA1**t)
        bc2 = (1.0 - BETA2**t)

        g_sh = grads["sh"][idx] if grads["sh"].shape[0] == model.count else grads["sh"]
        self.m_sh[idx] = BETA1 * self.m_sh[idx] + (1 - BETA1) * g_sh
        self.v_sh[idx] = BETA2 * self.v_sh[idx] + (1 - BETA2) * g_sh * g_sh
        upd = (self.m_sh[idx] / bc1[:, None, None]) / (
            (self.v_sh[idx] / bc2[:, None, None]).sqrt() + EPS
        )
        model.sh[idx] = model.sh[idx] - self.lr_sh * upd

        g_l = grads["opacity_logits"][idx] if grads["opacity_logits"].shape[0] == model.count else grads["opacity_logits"]
        self.m_logit[idx] = BETA1 * self.m_logit[idx] + (1 - BETA1) * g_l
        self.v_logit[idx] = BETA2 * self.v_logit[idx] + (1 - BETA2) * g_l * g_l
        upd_l = (self.m_logit[idx] / bc1) / ((self.v_logit[idx] / bc2).sqrt() + EPS)
        model.opacity_logits[idx] = model.opacity_logits[idx] - self.lr_opacity * upd_l

    def remap(self, kept_ids: Tensor, n_new: int) -> "GaussianAdam":
        """State after densify: survivors keep moments, appended rows start cold."""
        out = GaussianAdam(
            len(kept_ids) + n_new,
            (len(kept_ids) + n_new, *self.m_sh.shape[1:]),
            self.lr_sh,
            self.lr_opacity,
        )
        k = len(kept_ids)
        out.m_sh[:k] = self.m_sh[kept_ids]
        out.v_sh[:k] = self.v_sh[kept_ids]
        out.m_logit[:k] = self.m_logit[kept_ids]
        out.v_logit[:k] = self.v_logit[kept_ids]
        out.t[:k] = self.t[kept_ids]
        return out

    def subset(self, idx: Tensor) -> "GaussianAdam":
        out = GaussianAdam(len(idx), (len(idx), *self.m_sh.shape[1:]), self.lr_sh, self.lr_opacity)
        out.m_sh = self.m_sh[idx].clone()
        out.v_sh = self.v_sh[idx].clone()
        out.m_logit = self.m_logit[idx].clone()
        out.v_logit = self.v_logit[idx].clone()
        out.t = self.t[idx].clone()
        return out

    def write_rows(self, idx: Tensor, other: "GaussianAdam") -> None:
        self.m_sh[idx] = other.m_sh
        self.v_sh[idx] = other.v_sh
        self.m_logit[idx] = other.m_logit
        self.v_logit[idx] = other.v_logit
        self.t[idx] = other.t
