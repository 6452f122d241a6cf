"""Dual-branch competitive fine-tuning: model, losses, training loop, inference.

Two unshared ViT branches see the same batch. Each branch has its own
evidential head; the two uncertainties weight the fusion of the class-token
features, and a third head classifies the fused feature with cross-entropy.
The decorrelation term is computed with one branch's feature detached (the
main branch by default), so only the other branch is pushed away by it. At
inference only the main branch runs.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses
from .backbone import ViTConfig, VisionTransformer, read_checkpoint, save_checkpoint
from .errors import ConfigurationError, InvalidInputError, LoadError, NumericFailure
from .evidential import ACTIVATIONS, DirichletSummary, dirichlet_summary, evidence_from_logits
from .fusion import FusionWeights, fuse
from .metrics import auc

log = logging.getLogger(__name__)

FAKE = 1
LOG_FIELDS = ("epoch", "lambda_t", "lr", "l_edu_main", "l_edu_aux", "l_ce_fused", "l_dec", "total", "val_auc")


@dataclass
class LossConfig:
    activation: str = "clamped_exponential"
    lambda0: float = 0.01
    dec_enabled: bool = True
    dec_mode: str = "signed"
    stop_gradient: str = "main"
    reduction: str = "sum"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if not 0.0 < self.lambda0 < 1.0:
            raise ConfigurationError(f"lambda0 must lie in (0, 1), got {self.lambda0}")
        if self.dec_mode not in ("signed", "abs"):
            raise ConfigurationError("dec_mode must be 'signed' or 'abs'")
        if self.stop_gradient not in ("main", "aux", "none"):
            raise ConfigurationError("stop_gradient must be 'main', 'aux' or 'none'")
        if self.reduction not in ("sum", "mean"):
            raise ConfigurationError("reduction must be 'sum' or 'mean'")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.0
    eval_batch_size: int = 256
    seed: int = 0
    aux_init: str = "copy_main"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("epochs and batch sizes must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be >= 0")
        if self.aux_init not in ("copy_main", "independent"):
            raise ConfigurationError("aux_init must be 'copy_main' or 'independent'")


class EvidentialBranch(nn.Module):
    """A backbone with its linear classification head."""

    def __init__(self, vit: ViTConfig, num_classes=2):
        super().__init__()
        self.backbone = VisionTransformer(vit)
        self.head = nn.Linear(vit.embed_dim, num_classes)

    def forward(self, x):
        f = self.backbone(x)
        return f, self.head(f)


class _Normalized(nn.Module):
    def _init_norm(self, in_chans):
        self.register_buffer("pixel_mean", torch.zeros(in_chans))
        self.register_buffer("pixel_std", torch.ones(in_chans))

    def set_normalization(self, mean, std):
        with torch.no_grad():
            self.pixel_mean.copy_(torch.as_tensor(mean, dtype=self.pixel_mean.dtype))
            self.pixel_std.copy_(torch.as_tensor(std, dtype=self.pixel_std.dtype))

    def normalize(self, images):
        return (images - self.pixel_mean[:, None, None]) / self.pixel_std[:, None, None]


@dataclass
class BatchOutput:
    f_main: torch.Tensor
    f_aux: torch.Tensor
    evidence_main: torch.Tensor
    evidence_aux: torch.Tensor
    summary_main: DirichletSummary
    summary_aux: DirichletSummary
    weights: FusionWeights
    fused: torch.Tensor
    fused_logits: torch.Tensor
    p_fused: torch.Tensor
    labels: torch.Tensor


def _check_batch(images, labels):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if images.dim() != 4 or labels.shape != (images.shape[0],):
        raise InvalidInputError(f"images {tuple(images.shape)} and labels {tuple(labels.shape)} do not match")
    return labels


class DualBranchModel(_Normalized):
    def __init__(self, vit: ViTConfig | None = None, num_classes=2, aux_init="copy_main", activation="clamped_exponential"):
        super().__init__()
        self.vit_config = vit = vit or ViTConfig()
        self.num_classes = num_classes
        self.activation = activation
        self.main = EvidentialBranch(vit, num_classes)
        self.aux = EvidentialBranch(vit, num_classes)
        if aux_init == "copy_main":
            # both branches start from the same (pre-trained) backbone weights
            self.aux.backbone.load_state_dict(self.main.backbone.state_dict())
        elif aux_init != "independent":
            raise ConfigurationError(f"unknown aux_init {aux_init!r}")
        self.head_fused = nn.Linear(vit.embed_dim, num_classes)
        self._init_norm(vit.in_chans)

    def forward_train(self, images, labels):
        labels = _check_batch(images, labels)
        x = self.normalize(images)
        f_m, logits_m = self.main(x)
        f_a, logits_a = self.aux(x)
        e_m = evidence_from_logits(logits_m, self.activation)
        e_a = evidence_from_logits(logits_a, self.activation)
        s_m = dirichlet_summary(e_m)
        s_a = dirichlet_summary(e_a)
        fused = fuse(f_m, f_a, s_m.uncertainty, s_a.uncertainty)
        fused_logits = self.head_fused(fused.feature)
        p_fused = torch.softmax(fused_logits, dim=-1)[:, FAKE]
        return BatchOutput(f_m, f_a, e_m, e_a, s_m, s_a, fused.weights, fused.feature, fused_logits, p_fused, labels)

    @torch.no_grad()
    def forward_inference(self, images):
        """Main branch only: ``(p_fake, u)`` per image."""
        return _infer(self.main, self.normalize(images), self.activation)

    def detector(self):
        return Detector.from_dual(self)


def _infer(branch, x, activation):
    _, logits = branch(x)
    s = dirichlet_summary(evidence_from_logits(logits, activation))
    return s.class_prob(FAKE), s.uncertainty


class Detector(_Normalized):
    """Deployment model: the main branch and its normalization, nothing else."""

    def __init__(self, vit: ViTConfig | None = None, num_classes=2, activation="clamped_exponential"):
        super().__init__()
        self.vit_config = vit = vit or ViTConfig()
        self.activation = activation
        self.branch = EvidentialBranch(vit, num_classes)
        self._init_norm(vit.in_chans)

    @classmethod
    def from_dual(cls, model: DualBranchModel):
        det = cls(model.vit_config, model.num_classes, model.activation)
        det.branch.load_state_dict(model.main.state_dict())
        det.set_normalization(model.pixel_mean, model.pixel_std)
        return det

    @torch.no_grad()
    def forward_inference(self, images):
        return _infer(self.branch, self.normalize(images), self.activation)

    @torch.no_grad()
    def attentions(self, images):
        _, attn = self.branch.backbone(self.normalize(images), return_attention=True)
        return attn


def compute_losses(out: BatchOutput, lambda_t, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    labels = out.labels
    edu_m = losses.edu_loss(out.evidence_main, out.summary_main, labels, lambda_t, cfg.reduction)
    edu_a = losses.edu_loss(out.evidence_aux, out.summary_aux, labels, lambda_t, cfg.reduction)
    ce = losses.cross_entropy(out.p_fused, labels, reduction=cfg.reduction)
    if cfg.dec_enabled:
        f_m, f_a = out.f_main, out.f_aux
        if cfg.stop_gradient == "main":
            f_m = f_m.detach()
        elif cfg.stop_gradient == "aux":
            f_a = f_a.detach()
        dec = losses.decorrelation_loss(f_m, f_a, eps=losses.DEC_EPS, mode=cfg.dec_mode)
    else:
        dec = out.f_main.new_zeros(())
    return losses.total_loss(edu_m, edu_a, ce, dec)


# ---------------------------------------------------------------------------
# training


def cosine_lr(base_lr, step, total_steps):
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    total_epochs: int
    steps_per_epoch: int
    base_lr: float
    seed: int
    epoch: int = 0
    step: int = 0
    best_val_auc: float = -math.inf
    best_path: str | None = None
    history: list = field(default_factory=list)

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch


def make_state(model, train_cfg: TrainConfig, steps_per_epoch):
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    return TrainState(opt, train_cfg.epochs, steps_per_epoch, train_cfg.lr, train_cfg.seed)


def _batch_diagnostics(images, labels, parts):
    return {
        "image_mean": float(images.mean()),
        "image_std": float(images.std()) if images.numel() > 1 else 0.0,
        "image_min": float(images.min()),
        "image_max": float(images.max()),
        "image_finite": bool(torch.isfinite(images).all()),
        "n_fake": int((labels == 1).sum()),
        "n_real": int((labels == 0).sum()),
        "losses": parts,
    }


def train_step(model: DualBranchModel, state: TrainState, images, labels, loss_cfg: LossConfig, lambda_t):
    """One optimizer update. Returns the detached :class:`LossBreakdown`."""
    model.train()
    lr = cosine_lr(state.base_lr, state.step, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    labels = _check_batch(images, labels)
    try:
        out = model.forward_train(images, labels)
        parts = compute_losses(out, lambda_t, loss_cfg)
    except InvalidInputError as exc:
        # shapes are already checked, so this is a non-finite intermediate
        diag = _batch_diagnostics(images, labels, {"error": str(exc)})
        raise NumericFailure(f"non-finite values at epoch {state.epoch} step {state.step}: {diag}", diag) from exc
    if not torch.isfinite(parts.total):
        diag = _batch_diagnostics(images, labels, parts.as_floats())
        raise NumericFailure(f"non-finite loss at epoch {state.epoch} step {state.step}: {diag}", diag)
    state.optimizer.zero_grad(set_to_none=True)
    parts.total.backward()
    state.optimizer.step()
    state.step += 1
    return losses.LossBreakdown(**{f.name: getattr(parts, f.name).detach() for f in fields(parts)})


@torch.no_grad()
def predict(model, images, batch_size=256):
    """Main-branch ``(p, u)`` as float64 numpy arrays for a float32 image array."""
    model.eval()
    ps, us = [], []
    x_all = torch.as_tensor(images)
    for i in range(0, len(x_all), batch_size):
        p, u = model.forward_inference(x_all[i : i + batch_size])
        ps.append(p.double().numpy())
        us.append(u.double().numpy())
    return np.concatenate(ps), np.concatenate(us)


@torch.no_grad()
def branch_features(model: DualBranchModel, images, batch_size=256):
    model.eval()
    fm, fa = [], []
    x_all = torch.as_tensor(images)
    for i in range(0, len(x_all), batch_size):
        x = model.normalize(x_all[i : i + batch_size])
        fm.append(model.main.backbone(x))
        fa.append(model.aux.backbone(x))
    return torch.cat(fm), torch.cat(fa)


def channel_stats(images):
    x = np.asarray(images, dtype=np.float64)
    return x.mean(axis=(0, 2, 3)).tolist(), (x.std(axis=(0, 2, 3)) + 1e-6).tolist()


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def build_model(vit: ViTConfig, train_cfg: TrainConfig, loss_cfg: LossConfig):
    seed_everything(train_cfg.seed)
    return DualBranchModel(vit, aux_init=train_cfg.aux_init, activation=loss_cfg.activation)


def _epoch_order(seed, epoch, n):
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(n, generator=g)


def fit(
    model: DualBranchModel,
    train_x,
    train_y,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    val_x=None,
    val_y=None,
    out_dir=None,
    state: TrainState | None = None,
    run_meta=None,
):
    """Train for ``train_cfg.epochs`` epochs (continuing from ``state.epoch``).

    With ``out_dir`` set, appends one row per epoch to ``metrics.csv`` and
    writes ``last.pt`` every epoch and ``best.pt`` on validation improvement.
    """
    x = torch.as_tensor(train_x)
    y = torch.as_tensor(train_y, dtype=torch.long)
    n = len(y)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    if state is None:
        state = make_state(model, train_cfg, steps_per_epoch)
    schedule = losses.AnnealSchedule(loss_cfg.lambda0, train_cfg.epochs)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.csv"
        if state.epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    while state.epoch < train_cfg.epochs:
        lambda_t = schedule(state.epoch)
        lr_start = cosine_lr(state.base_lr, state.step, state.total_steps)
        totals = {k: 0.0 for k in LOG_FIELDS[3:8]}
        order = _epoch_order(state.seed, state.epoch, n)
        batches = 0
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            parts = train_step(model, state, x[idx], y[idx], loss_cfg, lambda_t)
            for k, v in parts.as_floats().items():
                totals[k] += v
            batches += 1
        row = {"epoch": state.epoch, "lambda_t": lambda_t, "lr": lr_start}
        row.update({k: v / batches for k, v in totals.items()})
        val_auc = float("nan")
        if val_x is not None:
            p, _ = predict(model, val_x, train_cfg.eval_batch_size)
            val_auc = auc(p, val_y)
        row["val_auc"] = val_auc
        state.history.append(row)
        state.epoch += 1
        log.info("epoch %d: %s", state.epoch, row)
        if out_dir:
            with open(out_dir / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS])
            meta = dict(run_meta or {})
            save_training_checkpoint(out_dir / "last.pt", model, state, train_cfg, loss_cfg, meta)
            if val_auc > state.best_val_auc or state.best_path is None:
                state.best_val_auc = val_auc if not math.isnan(val_auc) else state.best_val_auc
                state.best_path = str(out_dir / "best.pt")
                save_training_checkpoint(out_dir / "best.pt", model, state, train_cfg, loss_cfg, meta)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _model_meta(model, loss_cfg=None):
    return {
        "vit": asdict(model.vit_config),
        "num_classes": int(getattr(model, "num_classes", 2)),
        "activation": model.activation,
        "pixel_mean": [float(v) for v in model.pixel_mean],
        "pixel_std": [float(v) for v in model.pixel_std],
    }


def save_training_checkpoint(path, model, state: TrainState, train_cfg, loss_cfg, extra_meta=None):
    meta = _model_meta(model)
    meta.update(
        kind="dual",
        epoch=state.epoch,
        total_epochs=state.total_epochs,
        step=state.step,
        steps_per_epoch=state.steps_per_epoch,
        seed=state.seed,
        best_val_auc=None if math.isinf(state.best_val_auc) else state.best_val_auc,
        train=asdict(train_cfg),
        loss=asdict(loss_cfg),
    )
    meta.update(extra_meta or {})
    tensors = dict(model.state_dict())
    opt = state.optimizer.state_dict()
    for pid, pstate in opt["state"].items():
        for k, v in pstate.items():
            tensors[f"optimizer.{pid}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    save_checkpoint(path, tensors, meta)


def _vit_from_meta(meta):
    try:
        return ViTConfig(**meta["vit"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"checkpoint metadata lacks a usable ViT config: {exc}") from exc


def load_training_checkpoint(path, train_cfg: TrainConfig | None = None):
    """Rebuild ``(model, state, meta)`` for resuming."""
    tensors, meta = read_checkpoint(path)
    if meta.get("kind") != "dual":
        raise LoadError(f"{path} is not a dual-branch training checkpoint")
    train_cfg = train_cfg or TrainConfig(**meta["train"])
    model = DualBranchModel(_vit_from_meta(meta), meta.get("num_classes", 2), "independent", meta["activation"])
    model_keys = set(model.state_dict())
    missing = model_keys - set(tensors)
    if missing:
        raise LoadError(f"{path} is missing model tensors: {sorted(missing)[:5]}...")
    model.load_state_dict({k: tensors[k] for k in model_keys})
    state = make_state(model, train_cfg, meta["steps_per_epoch"])
    opt_sd = state.optimizer.state_dict()
    restored = {}
    for key, v in tensors.items():
        if key.startswith("optimizer."):
            _, pid, name = key.split(".", 2)
            restored.setdefault(int(pid), {})[name] = v
    opt_sd["state"] = restored
    state.optimizer.load_state_dict(opt_sd)
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.seed = meta["seed"]
    if meta.get("best_val_auc") is not None:
        state.best_val_auc = meta["best_val_auc"]
    return model, state, meta


def export_detector(model: DualBranchModel, path, extra_meta=None):
    """Write a main-branch-only checkpoint (the auxiliary branch is dropped)."""
    det = model.detector()
    meta = _model_meta(det)
    meta.update(kind="detector", num_classes=model.num_classes)
    meta.update(extra_meta or {})
    save_checkpoint(path, det.state_dict(), meta)


def load_detector(path):
    """Load a :class:`Detector` from either a dual or a detector checkpoint."""
    tensors, meta = read_checkpoint(path)
    det = Detector(_vit_from_meta(meta), meta.get("num_classes", 2), meta.get("activation", "clamped_exponential"))
    if meta.get("kind") == "dual":
        tensors = {("branch." + k[len("main."):] if k.startswith("main.") else k): v for k, v in tensors.items()}
    wanted = det.state_dict()
    missing = [k for k in wanted if k not in tensors]
    mismatched = [k for k in wanted if k in tensors and tensors[k].shape != wanted[k].shape]
    if missing or mismatched:
        raise LoadError(f"{path}: cannot build detector, missing={missing[:5]} mismatched={mismatched[:5]}")
    det.load_state_dict({k: tensors[k] for k in wanted})
    det.eval()
    return det, meta


def clone_model(model):
    return copy.deepcopy(model)
