"""AUC, ACC and HTER, plus frame-to-video score aggregation."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, DataIntegrityError, UndefinedMetricError
from .threshold import ScoreTable, _check_scores, accuracy_at


def _both_classes(labels):
    n_fake = int(labels.sum())
    n_real = labels.size - n_fake
    if n_fake == 0 or n_real == 0:
        raise UndefinedMetricError("metric needs both real and fake samples")
    return n_real, n_fake


def auc(scores, labels):
    """Mann-Whitney AUC: P(fake score > real score), ties counted as 1/2."""
    scores, labels = _check_scores(scores, labels)
    n_real, n_fake = _both_classes(labels)
    ranks = rankdata(scores)  # average ranks resolve ties
    u_stat = ranks[labels == 1].sum() - n_fake * (n_fake + 1) / 2.0
    return float(u_stat / (n_fake * n_real))


def error_rates(scores, labels, tau=0.5):
    """``(far, frr)``: fakes accepted as real, reals rejected as fake."""
    scores, labels = _check_scores(scores, labels)
    _both_classes(labels)
    fake = labels == 1
    far = np.count_nonzero(scores[fake] < tau) / np.count_nonzero(fake)
    frr = np.count_nonzero(scores[~fake] >= tau) / np.count_nonzero(~fake)
    return far, frr


def hter(scores, labels, tau=0.5):
    far, frr = error_rates(scores, labels, tau)
    return (far + frr) / 2.0


@dataclass
class MetricReport:
    auc: float
    acc: float
    hter: float
    far: float
    frr: float
    n_real: int
    n_fake: int
    tau: float
    name: str = ""

    def to_text(self):
        return "\n".join(f"{k}: {v!r}" for k, v in asdict(self).items()) + "\n"

    def row(self):
        return asdict(self)


def evaluate(scores, labels, tau=0.5, name=""):
    scores, labels = _check_scores(scores, labels)
    n_real, n_fake = _both_classes(labels)
    far, frr = error_rates(scores, labels, tau)
    return MetricReport(
        auc=auc(scores, labels),
        acc=accuracy_at(scores, labels, tau),
        hter=(far + frr) / 2.0,
        far=far,
        frr=frr,
        n_real=n_real,
        n_fake=n_fake,
        tau=float(tau),
        name=name,
    )


def video_aggregate(table: ScoreTable, adjust="ratio_of_means"):
    """Average frame scores per ``video_id`` (first-appearance order).

    ``adjust="ratio_of_means"`` sets the video's adjusted score to
    ``mean(p) / mean(u)``; ``"mean_of_ratios"`` averages the frame ``p / u``.
    """
    if adjust not in ("ratio_of_means", "mean_of_ratios"):
        raise ConfigurationError(f"unknown video adjustment {adjust!r}")
    groups = OrderedDict()
    for i, vid in enumerate(table.video_id):
        groups.setdefault(vid, []).append(i)
    sample_id, video_id, dataset_id, label, p, u, p_adj = [], [], [], [], [], [], []
    for vid, idx in groups.items():
        idx = np.asarray(idx)
        labels = np.unique(table.label[idx])
        if labels.size != 1:
            raise DataIntegrityError(f"video {vid} mixes real and fake frames")
        datasets = {table.dataset_id[i] for i in idx}
        if len(datasets) != 1:
            raise DataIntegrityError(f"video {vid} spans datasets {sorted(datasets)}")
        mp, mu = table.p[idx].mean(), table.u[idx].mean()
        sample_id.append(vid)
        video_id.append(vid)
        dataset_id.append(datasets.pop())
        label.append(int(labels[0]))
        p.append(mp)
        u.append(mu)
        p_adj.append(mp / mu if adjust == "ratio_of_means" else table.p_adj[idx].mean())
    return ScoreTable(sample_id, video_id, dataset_id, label, p, u, p_adj)
