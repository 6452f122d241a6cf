"""Training objectives: fused-head cross-entropy, branch decorrelation, EDL, EUC
and the unweighted total.

Batch reduction: ``cross_entropy``, ``edl_loss`` and ``euc_loss`` sum over the
batch by default (``reduction="mean"`` is available); ``decorrelation_loss``
always averages its per-sample coefficients.
"""

import math
import warnings
from dataclasses import dataclass, fields

import torch

from .errors import ConfigurationError, DegenerateInputError, InvalidInputError

LOG_EPS = 1e-7
DEC_EPS = 1e-8


class EmptyBatchWarning(UserWarning):
    pass


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _reduce(values, reduction):
    if reduction == "sum":
        return values.sum()
    if reduction == "mean":
        return values.mean()
    if reduction == "none":
        return values
    raise ConfigurationError(f"unknown reduction {reduction!r}")


def cross_entropy(p, y, eps=LOG_EPS, reduction="sum"):
    """Binary cross-entropy of the fake-class probability ``p`` against ``y``."""
    p = _t(p)
    y = _t(y, like=p).to(p.dtype)
    if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise InvalidInputError("probabilities must lie in [0, 1]")
    p = p.clamp(eps, 1.0 - eps)
    values = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    return _reduce(values, reduction)


def pearson(f_m, f_a, eps=None):
    """Pearson coefficient over the last (feature) dimension, one per sample.

    With ``eps=None`` a zero-variance input raises; otherwise ``eps`` is added to
    the denominator, which is what training uses.
    """
    f_m = _t(f_m)
    f_a = _t(f_a, like=f_m)
    if f_m.shape != f_a.shape:
        raise InvalidInputError(f"feature shapes differ: {tuple(f_m.shape)} vs {tuple(f_a.shape)}")
    if f_m.dim() == 0 or f_m.shape[-1] < 2:
        raise InvalidInputError("need at least 2 feature dimensions")
    dm = f_m - f_m.mean(dim=-1, keepdim=True)
    da = f_a - f_a.mean(dim=-1, keepdim=True)
    num = (dm * da).sum(dim=-1)
    ss = (dm * dm).sum(dim=-1) * (da * da).sum(dim=-1)
    if eps is None:
        if (ss <= 0).any():
            raise DegenerateInputError("zero-variance feature vector")
        return num / torch.sqrt(ss)
    return num / (torch.sqrt(ss) + eps)


def decorrelation_loss(f_m, f_a, eps=None, mode="signed"):
    """Mean per-sample Pearson coefficient between main and auxiliary features.

    ``mode="abs"`` averages ``|rho|`` instead, pulling features toward zero
    correlation rather than anticorrelation.
    """
    rho = pearson(f_m, f_a, eps=eps)
    if mode == "signed":
        return rho.mean()
    if mode == "abs":
        return rho.abs().mean()
    raise ConfigurationError(f"unknown decorrelation mode {mode!r}")


def one_hot(labels, num_classes=2, dtype=torch.float64):
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.nn.functional.one_hot(labels, num_classes).to(dtype)


def edl_loss(evidence, y_onehot, reduction="sum"):
    evidence = _t(evidence)
    y = _t(y_onehot, like=evidence).to(evidence.dtype)
    if y.shape != evidence.shape:
        raise InvalidInputError(f"one-hot shape {tuple(y.shape)} does not match evidence {tuple(evidence.shape)}")
    if not ((y == 0) | (y == 1)).all() or not (y.sum(dim=-1) == 1).all():
        raise InvalidInputError("labels are not one-hot")
    if (evidence < 0).any():
        raise InvalidInputError("evidence must be non-negative")
    alpha = evidence + 1.0
    strength = alpha.sum(dim=-1, keepdim=True)
    values = (y * (torch.log(strength) - torch.log(alpha))).sum(dim=-1)
    return _reduce(values, reduction)


def euc_loss(prob, uncertainty, y_hat, y, lambda_t, eps=LOG_EPS, reduction="sum"):
    """Evidential uncertainty calibration.

    Correct predictions are charged ``-lambda_t * p * log(1 - u)`` and wrong ones
    ``-(1 - lambda_t) * (1 - p) * log(u)``. An empty batch returns zero and emits
    :class:`EmptyBatchWarning`.
    """
    prob = _t(prob)
    uncertainty = _t(uncertainty, like=prob)
    if prob.numel() == 0:
        warnings.warn("euc_loss called on an empty batch", EmptyBatchWarning, stacklevel=2)
        return prob.new_zeros(())
    if not 0.0 <= float(lambda_t) <= 1.0:
        raise ConfigurationError(f"lambda_t must lie in [0, 1], got {lambda_t}")
    correct = torch.as_tensor(y_hat).reshape(prob.shape) == torch.as_tensor(y).reshape(prob.shape)
    u = uncertainty.clamp(eps, 1.0)
    one_minus_u = (1.0 - uncertainty).clamp(eps, 1.0)
    right = -lambda_t * prob * torch.log(one_minus_u)
    wrong = -(1.0 - lambda_t) * (1.0 - prob) * torch.log(u)
    values = torch.where(correct, right, wrong)
    return _reduce(values, reduction)


def edu_loss(evidence, summary, labels, lambda_t, reduction="sum"):
    """EDL plus EUC for one evidential branch; ``labels`` are class indices."""
    y_onehot = one_hot(labels, evidence.shape[-1], dtype=evidence.dtype)
    edl = edl_loss(evidence, y_onehot, reduction=reduction)
    euc = euc_loss(summary.prob, summary.uncertainty, summary.y_hat, labels, lambda_t, reduction=reduction)
    return edl + euc


def anneal_factor(t, T, lambda0):
    """``lambda0 ** (1 - t/T)``: starts at ``lambda0`` and reaches exactly 1 at ``t == T``."""
    if not 0.0 < lambda0 < 1.0:
        raise ConfigurationError(f"lambda0 must lie in (0, 1), got {lambda0}")
    if T < 1:
        raise ConfigurationError(f"total epochs must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise InvalidInputError(f"epoch {t} outside [0, {T}]")
    return math.pow(lambda0, 1.0 - t / T)


@dataclass(frozen=True)
class AnnealSchedule:
    lambda0: float = 0.01
    T: int = 5

    def __post_init__(self):
        anneal_factor(0, self.T, self.lambda0)

    def __call__(self, t):
        return anneal_factor(t, self.T, self.lambda0)


@dataclass
class LossBreakdown:
    l_edu_main: torch.Tensor
    l_edu_aux: torch.Tensor
    l_ce_fused: torch.Tensor
    l_dec: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def total_loss(l_edu_main, l_edu_aux, l_ce_fused, l_dec):
    parts = [_t(x) for x in (l_edu_main, l_edu_aux, l_ce_fused, l_dec)]
    return LossBreakdown(*parts, total=parts[0] + parts[1] + parts[2] + parts[3])
