"""Uncertainty-weighted fusion of the main and auxiliary branch features."""

from dataclasses import dataclass

import torch

from .errors import InvalidInputError


@dataclass
class FusionWeights:
    w_main: torch.Tensor
    w_aux: torch.Tensor


@dataclass
class FusedOutput:
    feature: torch.Tensor
    weights: FusionWeights


def fusion_weights(u_main, u_aux):
    """Two-way softmax of the negated uncertainties; the less uncertain branch wins."""
    u_main = torch.as_tensor(u_main, dtype=torch.float64) if not isinstance(u_main, torch.Tensor) else u_main
    u_aux = torch.as_tensor(u_aux, dtype=u_main.dtype) if not isinstance(u_aux, torch.Tensor) else u_aux
    for name, u in (("u_main", u_main), ("u_aux", u_aux)):
        if not torch.isfinite(u).all() or (u <= 0).any() or (u > 1).any():
            raise InvalidInputError(f"{name} must lie in (0, 1]")
    w = torch.softmax(torch.stack([-u_main, -u_aux], dim=-1), dim=-1)
    return FusionWeights(w_main=w[..., 0], w_aux=w[..., 1])


def fuse(f_main, f_aux, u_main, u_aux):
    """Return ``w_M * f_M + w_A * f_A`` with per-sample weights.

    Features have shape ``(C,)`` or ``(B, C)``; uncertainties are scalars or ``(B,)``.
    """
    if not isinstance(f_main, torch.Tensor):
        f_main = torch.as_tensor(f_main, dtype=torch.float64)
    if not isinstance(f_aux, torch.Tensor):
        f_aux = torch.as_tensor(f_aux, dtype=f_main.dtype)
    if f_main.shape != f_aux.shape:
        raise InvalidInputError(f"feature shapes differ: {tuple(f_main.shape)} vs {tuple(f_aux.shape)}")
    weights = fusion_weights(u_main, u_aux)
    feature = weights.w_main.unsqueeze(-1) * f_main + weights.w_aux.unsqueeze(-1) * f_aux
    return FusedOutput(feature=feature, weights=weights)
