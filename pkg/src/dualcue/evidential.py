"""Dirichlet evidence, strength, uncertainty and class belief.

All functions work on tensors whose last dimension indexes the K classes, so a
single sample (shape ``(K,)``) and a batch (shape ``(B, K)``) go through the same
code path. Gradients flow through everything except ``y_hat``.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError

ACTIVATIONS = ("clamped_exponential", "rectifier", "smooth_rectifier")
EXP_CLAMP = 10.0


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def evidence_from_logits(logits, activation="clamped_exponential"):
    logits = _as_tensor(logits)
    if logits.dim() == 0 or logits.shape[-1] < 2:
        raise ConfigurationError(f"need at least 2 classes, got logits of shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain NaN or inf")
    if activation == "clamped_exponential":
        return torch.exp(torch.clamp(logits, -EXP_CLAMP, EXP_CLAMP))
    if activation == "rectifier":
        return F.relu(logits)
    if activation == "smooth_rectifier":
        return F.softplus(logits)
    raise ConfigurationError(f"unknown evidence activation {activation!r}; choose from {ACTIVATIONS}")


@dataclass
class DirichletSummary:
    """Per-sample Dirichlet quantities; every field keeps the batch shape.

    ``belief`` has shape ``(..., K)``; the remaining fields have shape ``(...)``.
    """

    strength: torch.Tensor
    uncertainty: torch.Tensor
    prob: torch.Tensor
    y_hat: torch.Tensor
    belief: torch.Tensor

    @property
    def num_classes(self):
        return self.belief.shape[-1]

    def class_prob(self, k):
        """Belief mass of class ``k`` (``k=1`` is the fake class)."""
        return self.belief[..., k]


def dirichlet_summary(evidence):
    evidence = _as_tensor(evidence)
    if evidence.dim() == 0 or evidence.shape[-1] < 2:
        raise ConfigurationError(f"need at least 2 classes, got evidence of shape {tuple(evidence.shape)}")
    if not torch.isfinite(evidence).all():
        raise InvalidInputError("evidence contains NaN or inf")
    if (evidence < 0).any():
        raise InvalidInputError("evidence must be non-negative")
    k = evidence.shape[-1]
    alpha = evidence + 1.0
    strength = alpha.sum(dim=-1)
    belief = alpha / strength.unsqueeze(-1)
    # torch.max returns the first maximal index, i.e. ties go to the lower class
    prob, y_hat = belief.max(dim=-1)
    return DirichletSummary(
        strength=strength,
        uncertainty=k / strength,
        prob=prob,
        y_hat=y_hat,
        belief=belief,
    )


def summarize_logits(logits, activation="clamped_exponential"):
    """Shortcut for ``dirichlet_summary(evidence_from_logits(...))``; returns both."""
    e = evidence_from_logits(logits, activation)
    return e, dirichlet_summary(e)
