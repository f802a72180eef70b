"""Linear backward model: lagged ridge decoder + Spearman threshold classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from envtrack.dataio import Dataset, SegmentPair
from envtrack.sigproc import split_recording

DEFAULT_LAGS = 17  # 0-250 ms at 64 Hz
LAMBDA_GRID = tuple(10.0 ** k for k in range(-9, 4))


@dataclass(frozen=True)
class Decoder:
    weights: np.ndarray  # (channels, lags)
    n_lags: int
    ridge: float

    def reconstruct(self, eeg: np.ndarray) -> np.ndarray:
        return build_lag_matrix(eeg, self.n_lags) @ self.weights.reshape(-1)


@dataclass(frozen=True)
class ThresholdModel:
    threshold: float


def build_lag_matrix(eeg: np.ndarray, n_lags: int) -> np.ndarray:
    """Design matrix whose row t holds ``eeg[ch, t + lag]`` for each channel, lag.

    Columns are channel-major (all lags of channel 0 first); samples past
    the end are zero.
    """
    eeg = np.asarray(eeg, dtype=np.float64)
    n_ch, n = eeg.shape
    if n <= n_lags:
        raise ValueError(f"need more samples ({n}) than lags ({n_lags})")
    X = np.zeros((n, n_ch, n_lags))
    for lag in range(n_lags):
        X[:n - lag, :, lag] = eeg[:, lag:].T
    return X.reshape(n, n_ch * n_lags)


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(X'X + lam I) w = X'y``."""
    X = np.asarray(X, dtype=np.float64)
    return solve_ridge(X.T @ X, X.T @ np.asarray(y, dtype=np.float64), lam)


def solve_ridge(xtx: np.ndarray, xty: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("ridge parameter must be non-negative")
    d = xtx.shape[0]
    if lam == 0 and np.linalg.matrix_rank(xtx) < d:
        raise np.linalg.LinAlgError("singular normal equations at lambda=0; use lambda > 0")
    return linalg.solve(xtx + lam * np.eye(d), xty, assume_a="pos")


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length vectors of length >= 2")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = rx @ rx, ry @ ry
    if sxx == 0 or syy == 0:
        raise ValueError("spearman correlation undefined for constant input")
    return float(np.clip((rx @ ry) / np.sqrt(sxx * syy), -1.0, 1.0))


def tune_threshold(scores: Sequence[float], labels: Sequence[int]) -> ThresholdModel:
    """Threshold that best balances false positives and false negatives.

    Candidates are midpoints between consecutive distinct scores.  Ties on
    ``|FPR - FNR|`` go to higher accuracy, then to the lower threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("threshold tuning needs both matched and mismatched scores")
    u = np.unique(s)
    cands = (u[:-1] + u[1:]) / 2.0 if u.size > 1 else u
    best = None
    for theta in cands:
        pred = s > theta
        fpr = np.sum(pred & ~y) / n_neg
        fnr = np.sum(~pred & y) / n_pos
        key = (abs(fpr - fnr), -np.mean(pred == y), theta)
        if best is None or key < best:
            best = key
    return ThresholdModel(float(best[2]))


def classify_pair(decoder: Decoder, threshold: ThresholdModel | float, eeg_window: np.ndarray,
                  env_window: np.ndarray) -> bool:
    """Matched iff the Spearman score strictly exceeds the threshold."""
    theta = threshold.threshold if isinstance(threshold, ThresholdModel) else float(threshold)
    return pair_score(decoder, eeg_window, env_window) > theta


def pair_score(decoder: Decoder, eeg_window: np.ndarray, env_window: np.ndarray) -> float:
    return spearman(decoder.reconstruct(eeg_window), np.ravel(env_window))


def _covariances(dataset: Dataset, recording_ids, n_lags: int, split: str):
    xtx = xty = None
    for rid in recording_ids:
        rec = dataset.recordings[rid]
        for lo, hi in split_recording(rec.n_samples).ranges(split):
            if hi - lo <= n_lags:
                continue
            X = build_lag_matrix(rec.eeg[:, lo:hi], n_lags)
            y = rec.envelope[lo:hi]
            if xtx is None:
                xtx, xty = X.T @ X, X.T @ y
            else:
                xtx += X.T @ X
                xty += X.T @ y
    if xtx is None:
        raise ValueError(f"no {split} data to fit the decoder")
    return xtx, xty


def fit_decoder(dataset: Dataset, n_lags: int = DEFAULT_LAGS, grid=LAMBDA_GRID,
                recording_ids=None) -> Decoder:
    """Ridge decoder on the train ranges; lambda chosen by validation Spearman.

    The candidate ridge values are ``grid * trace(X'X) / d``.
    """
    rids = sorted(dataset.recordings) if recording_ids is None else list(recording_ids)
    xtx, xty = _covariances(dataset, rids, n_lags, "train")
    scale = np.trace(xtx) / xtx.shape[0]
    best = None
    for g in grid:
        lam = g * scale
        dec = Decoder(solve_ridge(xtx, xty, lam).reshape(-1, n_lags), n_lags, lam)
        score = _validation_score(dataset, rids, dec)
        if best is None or score > best[0]:
            best = (score, dec)
    return best[1]


def _validation_score(dataset: Dataset, rids, dec: Decoder) -> float:
    scores = []
    for rid in rids:
        rec = dataset.recordings[rid]
        lo, hi = split_recording(rec.n_samples).val
        if hi - lo > dec.n_lags:
            scores.append(spearman(dec.reconstruct(rec.eeg[:, lo:hi]), rec.envelope[lo:hi]))
    return float(np.mean(scores)) if scores else -np.inf


@dataclass
class LinearBaseline:
    decoder: Decoder
    threshold: ThresholdModel

    def scores(self, dataset: Dataset, pairs: Sequence[SegmentPair]) -> np.ndarray:
        return np.array([pair_score(self.decoder, *dataset.windows(p)) for p in pairs])

    def predict(self, dataset: Dataset, pairs: Sequence[SegmentPair]) -> np.ndarray:
        return (self.scores(dataset, pairs) > self.threshold.threshold).astype(int)


def fit_baseline(dataset: Dataset, n_lags: int = DEFAULT_LAGS, grid=LAMBDA_GRID) -> LinearBaseline:
    """Fit the decoder on train, tune the threshold on validation pairs."""
    dec = fit_decoder(dataset, n_lags, grid)
    val = dataset.pairs("val")
    s = np.array([pair_score(dec, *dataset.windows(p)) for p in val])
    return LinearBaseline(dec, tune_threshold(s, [p.label for p in val]))
