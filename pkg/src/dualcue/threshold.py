"""Score tables, uncertainty-adjusted scores and accuracy-optimal thresholds.

A sample is classified fake when ``score >= tau``. Scores are either the raw
fake probability ``p`` or the adjusted score ``p / u``; the adjusted score is
deliberately left unclipped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, DataIntegrityError, FormatError, InvalidInputError

SCORE_KINDS = ("raw_p", "adjusted_p")
DUMP_HEADER = ("sample_id", "video_id", "dataset_id", "label", "p", "u")


def adjust_probability(p, u):
    """``p / u``. Works elementwise on arrays; ``u`` must lie in (0, 1]."""
    p_arr = np.asarray(p, dtype=np.float64)
    u_arr = np.asarray(u, dtype=np.float64)
    if (u_arr <= 0).any() or (u_arr > 1).any() or not np.isfinite(u_arr).all():
        raise InvalidInputError("uncertainty must lie in (0, 1]")
    out = p_arr / u_arr
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    video_id: str
    dataset_id: str
    y: int
    p: float
    u: float

    @property
    def p_adj(self):
        return adjust_probability(self.p, self.u)


class ScoredSet(NamedTuple):
    """Scores of one kind with their labels; the unit threshold search works on."""

    scores: np.ndarray
    labels: np.ndarray
    kind: str


@dataclass
class ScoreTable:
    """Column-oriented collection of prediction records.

    ``p_adj`` defaults to ``p / u``; video aggregation may override it (see
    :func:`dualcue.metrics.video_aggregate`).
    """

    sample_id: list
    video_id: list
    dataset_id: list
    label: np.ndarray
    p: np.ndarray
    u: np.ndarray
    p_adj: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        n = len(self.label)
        if not (len(self.sample_id) == len(self.video_id) == len(self.dataset_id) == len(self.p) == len(self.u) == n):
            raise InvalidInputError("score table columns have different lengths")
        if not np.isin(self.label, (0, 1)).all():
            raise DataIntegrityError("labels must be 0 or 1")
        if not np.isfinite(self.p).all() or (self.p < 0).any() or (self.p > 1).any():
            raise DataIntegrityError("p must lie in [0, 1]")
        if (self.u <= 0).any() or (self.u > 1).any() or not np.isfinite(self.u).all():
            raise DataIntegrityError("u must lie in (0, 1]")
        if self.p_adj is None:
            self.p_adj = self.p / self.u
        else:
            self.p_adj = np.asarray(self.p_adj, dtype=np.float64)

    def __len__(self):
        return len(self.label)

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord]):
        return cls(
            [r.sample_id for r in records],
            [r.video_id for r in records],
            [r.dataset_id for r in records],
            [r.y for r in records],
            [r.p for r in records],
            [r.u for r in records],
        )

    def records(self):
        return [
            PredictionRecord(s, v, d, int(y), float(p), float(u))
            for s, v, d, y, p, u in zip(self.sample_id, self.video_id, self.dataset_id, self.label, self.p, self.u)
        ]

    def scores(self, kind="raw_p"):
        if kind == "raw_p":
            return self.p
        if kind == "adjusted_p":
            return self.p_adj
        raise ConfigurationError(f"unknown score kind {kind!r}; choose from {SCORE_KINDS}")

    def scored(self, kind="raw_p"):
        return ScoredSet(self.scores(kind), self.label, kind)

    def subset(self, mask):
        idx = np.flatnonzero(np.asarray(mask))
        return ScoreTable(
            [self.sample_id[i] for i in idx],
            [self.video_id[i] for i in idx],
            [self.dataset_id[i] for i in idx],
            self.label[idx],
            self.p[idx],
            self.u[idx],
            self.p_adj[idx],
        )

    @classmethod
    def concat(cls, tables):
        tables = list(tables)
        return cls(
            sum((t.sample_id for t in tables), []),
            sum((t.video_id for t in tables), []),
            sum((t.dataset_id for t in tables), []),
            np.concatenate([t.label for t in tables]),
            np.concatenate([t.p for t in tables]),
            np.concatenate([t.u for t in tables]),
            np.concatenate([t.p_adj for t in tables]),
        )


def write_scores(table: ScoreTable, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DUMP_HEADER)
        for s, v, d, y, p, u in zip(table.sample_id, table.video_id, table.dataset_id, table.label, table.p, table.u):
            writer.writerow([s, v, d, int(y), repr(float(p)), repr(float(u))])


def read_scores(path):
    """Load a score dump; ``p_adj`` is derived as ``p / u``."""
    path = Path(path)
    cols = {k: [] for k in DUMP_HEADER}
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != DUMP_HEADER:
                raise FormatError(f"{path}: header must be {','.join(DUMP_HEADER)}, got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(DUMP_HEADER):
                    raise FormatError(f"{path} row {lineno}: expected {len(DUMP_HEADER)} fields")
                for k, v in zip(DUMP_HEADER, row):
                    cols[k].append(v)
    except OSError as exc:
        raise FormatError(f"cannot read score dump {path}: {exc}") from exc
    try:
        labels = [int(v) for v in cols["label"]]
        p = [float(v) for v in cols["p"]]
        u = [float(v) for v in cols["u"]]
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric label/p/u: {exc}") from exc
    return ScoreTable(cols["sample_id"], cols["video_id"], cols["dataset_id"], labels, p, u)


def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.size == 0:
        raise InvalidInputError("no records")
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise InvalidInputError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidInputError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def accuracy_at(scores, labels, tau):
    scores, labels = _check_scores(scores, labels)
    pred = scores >= tau
    correct = np.count_nonzero(pred & (labels == 1)) + np.count_nonzero(~pred & (labels == 0))
    return correct / labels.size


@dataclass
class ThresholdReport:
    tau_ot: float
    acc_at_tau: float
    curve: list
    score_kind: str
    n: int
    n_fake: int
    single_class: bool = False

    def to_text(self):
        lines = [
            f"score_kind: {self.score_kind}",
            f"n: {self.n}",
            f"n_fake: {self.n_fake}",
            f"tau_ot: {self.tau_ot!r}",
            f"acc_at_tau: {self.acc_at_tau!r}",
            f"single_class: {str(self.single_class).lower()}",
            "curve:",
        ]
        lines += [f"  {tau!r}\t{acc!r}" for tau, acc in self.curve]
        return "\n".join(lines) + "\n"


def optimal_threshold(scores, labels, score_kind="raw_p"):
    """Scan every distinct observed score (plus one sentinel above the maximum).

    Each candidate ``s_j`` stands for the interval ``(s_{j-1}, s_j]`` of
    thresholds giving the same accuracy. Among the maximizing intervals the
    widest is chosen and its midpoint is reported as ``tau_ot``. The first
    interval starts at ``min(0, s_0)``; the sentinel interval is
    ``(s_max, s_max + 1]``.
    """
    if score_kind not in SCORE_KINDS:
        raise ConfigurationError(f"unknown score kind {score_kind!r}")
    scores, labels = _check_scores(scores, labels)
    n = labels.size
    uniq, inverse = np.unique(scores, return_inverse=True)
    fakes_at = np.bincount(inverse, weights=labels, minlength=uniq.size).astype(np.int64)
    reals_at = np.bincount(inverse, weights=1 - labels, minlength=uniq.size).astype(np.int64)
    # candidate j < m: fake iff score >= uniq[j]; candidate m: nothing is fake
    fakes_above = np.concatenate([np.cumsum(fakes_at[::-1])[::-1], [0]])
    reals_below = np.concatenate([[0], np.cumsum(reals_at)])
    correct = fakes_above + reals_below
    best = int(correct.max())

    candidates = np.concatenate([uniq, [uniq[-1] + 1.0]])
    lowers = np.concatenate([[min(0.0, uniq[0])], uniq])
    best_idx = np.flatnonzero(correct == best)
    widths = candidates[best_idx] - lowers[best_idx]
    j = int(best_idx[int(np.argmax(widths))])
    lo, hi = lowers[j], candidates[j]
    tau = 0.5 * (lo + hi)
    if not lo < tau <= hi:
        tau = hi
    curve = [(float(c), int(k) / n) for c, k in zip(candidates, correct)]
    return ThresholdReport(
        tau_ot=float(tau),
        acc_at_tau=best / n,
        curve=curve,
        score_kind=score_kind,
        n=n,
        n_fake=int(labels.sum()),
        single_class=bool(labels.min() == labels.max()),
    )


def grid_points(step, upper=1.0):
    """``0, step, 2*step, ...`` up to ``upper``, with ``upper`` always included."""
    if not step > 0 or not math.isfinite(step):
        raise ConfigurationError(f"grid step must be positive, got {step}")
    if not upper > 0:
        raise ConfigurationError(f"grid upper bound must be positive, got {upper}")
    count = int(math.floor(upper / step + 1e-9))
    pts = [i * step for i in range(count + 1)]
    if pts[-1] < upper:
        pts.append(upper)
    return np.asarray(pts, dtype=np.float64)


def grid_threshold(acc_oracle: Callable[[float], float], step, upper=1.0):
    """Black-box search: evaluate ``acc_oracle`` on the grid, return the best point.

    Ties go to the smallest threshold.
    """
    best_tau, best_acc = None, -math.inf
    for tau in grid_points(step, upper):
        acc = acc_oracle(float(tau))
        if acc > best_acc:
            best_tau, best_acc = float(tau), acc
    return best_tau


def grid_upper(scores, score_kind, step):
    """Grid span for a score kind: [0, 1] for raw p, one step past the largest
    adjusted score otherwise (so the all-real split stays reachable)."""
    if score_kind == "raw_p":
        return 1.0
    return float(np.max(scores)) + step


@dataclass
class TransferResult:
    source_report: ThresholdReport
    tau: float
    target_acc: float


def transfer_eval(source: ScoredSet, target: ScoredSet):
    """Pick ``tau_ot`` on ``source`` and measure accuracy on ``target``."""
    if source.kind != target.kind:
        raise ConfigurationError(f"score kinds differ: source {source.kind}, target {target.kind}")
    report = optimal_threshold(source.scores, source.labels, source.kind)
    return TransferResult(report, report.tau_ot, accuracy_at(target.scores, target.labels, report.tau_ot))


def plot_curve(report: ThresholdReport, path, title=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    taus = [t for t, _ in report.curve]
    accs = [a for _, a in report.curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(taus, accs, where="pre", lw=1.2)
    ax.axvline(report.tau_ot, color="C3", ls="--", lw=1, label=f"tau_ot={report.tau_ot:.4g}")
    ax.set_xlabel(f"threshold ({report.score_kind})")
    ax.set_ylabel("ACC")
    ax.set_title(title or "accuracy vs threshold")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
