"""Accuracy bookkeeping and significance tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

EXACT_MAX_N = 20
REPORT_HEADER = ("subject_id", "n_segments", "n_correct", "accuracy")


def accuracy(labels, predictions) -> float:
    labels, predictions = np.asarray(labels), np.asarray(predictions)
    if labels.size == 0 or labels.shape != predictions.shape:
        raise ValueError("accuracy needs equal, non-zero length inputs")
    return float(np.mean(labels == predictions))


class WilcoxonResult(NamedTuple):
    W: float
    p: float
    n: int
    z: float | None = None


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-D")
    d = d[d != 0]
    if d.size == 0:
        raise ValueError("all paired differences are zero: no information")
    ranks = rankdata(np.abs(d))
    return d, ranks


def _exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    """P(T+ <= w) under the null, by counting sign patterns per rank-sum.

    Ranks are doubled to make tied (half-integer) ranks integral, then the
    count of patterns reaching each rank-sum is built up one rank at a time.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    limit = int(np.floor(2 * w + 1e-9))
    return float(counts[:limit + 1].sum() / 2.0 ** ranks.size)


def wilcoxon_normal(ranks: np.ndarray, w: float) -> tuple[float, float]:
    """Normal approximation with tie and continuity correction: (z, two-sided p)."""
    n = ranks.size
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (w - mu + 0.5) / math.sqrt(var) if var > 0 else 0.0
    return z, min(1.0, 2.0 * float(ndtr(min(z, 0.0))))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Paired Wilcoxon signed-rank test.

    Zero differences are dropped and tied magnitudes get average ranks.
    ``W`` is the smaller of the positive and negative rank sums.  For up to
    20 non-zero pairs the two-sided p-value is exact; above that a normal
    approximation is used and its z-score is returned too.
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    d, ranks = _signed_ranks(a, b)
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    n = d.size
    if n <= EXACT_MAX_N:
        return WilcoxonResult(w, min(1.0, 2.0 * _exact_lower_tail(ranks, w)), n)
    z, p = wilcoxon_normal(ranks, w)
    return WilcoxonResult(w, p, n, z)


def binomial_above_chance(correct: int, total: int) -> float:
    """One-sided P(X >= correct) for X ~ Binomial(total, 1/2), summed exactly."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= correct <= total:
        raise ValueError(f"correct ({correct}) must lie in [0, total={total}]")
    tail = sum(math.comb(total, k) for k in range(correct, total + 1))
    return float(Fraction(tail, 2 ** total))


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    n_segments: int
    n_correct: int

    def __post_init__(self):
        if not 0 <= self.n_correct <= self.n_segments:
            raise ValueError(f"{self.subject_id}: n_correct outside [0, n_segments]")

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_segments if self.n_segments else 0.0


def summarize(values: Sequence[float]) -> dict[str, float]:
    """Mean, median, quartiles (linear interpolation), min and max."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty sequence")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max())}


@dataclass
class EvalReport:
    rows: list[SubjectScore] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rows]

    def aggregate(self) -> dict[str, float]:
        return summarize(self.accuracies)

    def by_subject(self) -> dict[str, SubjectScore]:
        return {r.subject_id: r for r in self.rows}

    def pooled(self) -> tuple[int, int]:
        return sum(r.n_correct for r in self.rows), sum(r.n_segments for r in self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.subject_id, r.n_segments, r.n_correct, repr(r.accuracy)])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader, ()))
            if header != REPORT_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = [SubjectScore(sid, int(n), int(c)) for sid, n, c, _ in reader]
        return cls(rows)


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Wilcoxon comparison of per-subject accuracies on shared subject ids."""
    ia, ib = a.by_subject(), b.by_subject()
    if set(ia) != set(ib):
        raise ValueError(
            f"reports cover different subjects: only in a {sorted(set(ia) - set(ib))}, "
            f"only in b {sorted(set(ib) - set(ia))}")
    ids = sorted(ia)
    res = wilcoxon_signed_rank([ia[s].accuracy for s in ids], [ib[s].accuracy for s in ids])
    out = {"test": "wilcoxon", "W": res.W, "p": res.p, "n": res.n}
    if res.z is not None:
        out["z"] = res.z
    return out


def write_report(path, report: EvalReport) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(path)
