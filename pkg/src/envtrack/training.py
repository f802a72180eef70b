"""Adam training with early stopping and the SD / SI / TL scenarios."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from envtrack import model, ndcore
from envtrack.dataio import Dataset, SegmentPair
from envtrack.model import NetworkConfig
from envtrack.stats import EvalReport, SubjectScore

log = logging.getLogger(__name__)

SCENARIOS = ("SD", "SI", "TL")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    scenario: str = "SI"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.scenario.upper() not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        # zero is accepted as the degenerate "no update" case
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for k, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), start=1):
                w.writerow([k, *(repr(float(v)) for v in row)])


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update of every parameter present in ``grads``.

    Parameters without a gradient entry are passed through untouched.
    """
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name}")
        m[name] = cfg.beta1 * m.get(name, 0.0) + (1 - cfg.beta1) * g
        v[name] = cfg.beta2 * v.get(name, 0.0) + (1 - cfg.beta2) * g * g
        m_hat = m[name] / (1 - cfg.beta1 ** step)
        v_hat = v[name] / (1 - cfg.beta2 ** step)
        out[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out, AdamState(step, m, v)


def _chunks(seq: Sequence, size: int) -> Iterable[Sequence]:
    for k in range(0, len(seq), size):
        yield seq[k:k + size]


def predict_pairs(params, net_cfg: NetworkConfig, dataset: Dataset,
                  pairs: Sequence[SegmentPair], batch_size: int = 128) -> np.ndarray:
    """Mean match probability per segment."""
    out = []
    for chunk in _chunks(pairs, batch_size):
        eeg, env, _ = dataset.arrays(chunk)
        out.append(model.predict(params, net_cfg, eeg, env))
    return np.concatenate(out) if out else np.empty(0)


def evaluate_loss(params, net_cfg: NetworkConfig, dataset: Dataset, pairs: Sequence[SegmentPair],
                  batch_size: int = 128) -> tuple[float, float]:
    """(mean BCE, accuracy) over ``pairs`` without recording a tape."""
    consts = {k: ndcore.Tensor(v) for k, v in params.items()}
    total_loss, correct = 0.0, 0
    for chunk in _chunks(pairs, batch_size):
        eeg, env, y = dataset.arrays(chunk)
        a = model.eeg_path_forward(eeg, consts, net_cfg)
        b = model.env_path_forward(env, consts, net_cfg)
        s = model.similarity_scores(a, b)
        total_loss += model.bce_loss(s, y).item() * len(chunk)
        prob = model.match_probability(s).data.mean(axis=-1)
        correct += int(np.sum((prob >= 0.5) == (y == 1)))
    return total_loss / len(pairs), correct / len(pairs)


def train(params: Mapping[str, np.ndarray], dataset: Dataset, cfg: TrainConfig,
          net_cfg: NetworkConfig, frozen: Iterable[str] = ()) -> tuple[dict[str, np.ndarray], TrainHistory]:
    """Mini-batch Adam with early stopping on validation loss.

    Returns the parameters of the best validation epoch.  Names in
    ``frozen`` are held constant (they are never given a gradient).
    Epoch ``e`` shuffles with seed ``cfg.seed + e``.
    """
    cfg.validate()
    train_pairs, val_pairs = dataset.pairs("train"), dataset.pairs("val")
    if not train_pairs or not val_pairs:
        raise ValueError("training needs non-empty train and validation splits")
    frozen = set(frozen)
    trainable = [k for k in params if k not in frozen]
    current = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    best = {k: v.copy() for k, v in current.items()}
    best_loss = np.inf
    state = AdamState()
    hist = TrainHistory()

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(train_pairs))
        epoch_loss = 0.0
        for b, idx in enumerate(_chunks(order, cfg.batch_size)):
            eeg, env, y = dataset.arrays([train_pairs[i] for i in idx])
            try:
                with ndcore.Tape() as tape:
                    tensors = model.as_tensors(current, trainable=trainable)
                    loss = model.forward_loss(tensors, net_cfg, eeg, env, y)
                grads = ndcore.backward(loss, tape)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch + 1}, batch {b + 1}: {exc}") from exc
            epoch_loss += loss.item() * len(idx)
            current, state = adam_step(
                current, {k: grads[tensors[k]] for k in trainable}, state, cfg)
            if not all(np.all(np.isfinite(current[k])) for k in trainable):
                raise TrainingError(f"parameters diverged at epoch {epoch + 1}, batch {b + 1}")

        val_loss, val_acc = evaluate_loss(current, net_cfg, dataset, val_pairs)
        hist.train_loss.append(epoch_loss / len(train_pairs))
        hist.val_loss.append(val_loss)
        hist.val_acc.append(val_acc)
        log.info("epoch %d: train %.4f val %.4f acc %.3f", epoch + 1,
                 hist.train_loss[-1], val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, hist.best_epoch = val_loss, epoch
            best = {k: v.copy() for k, v in current.items()}
        elif epoch - hist.best_epoch >= cfg.patience:
            hist.stopped_early = epoch + 1 < cfg.max_epochs
            break
    return best, hist


def env_path_names(params: Iterable[str]) -> list[str]:
    return [k for k in params if model.path_of(k) == "env"]


def transfer_finetune(si_params: Mapping[str, np.ndarray], subject_dataset: Dataset, cfg: TrainConfig,
                      net_cfg: NetworkConfig) -> tuple[dict[str, np.ndarray], TrainHistory]:
    """Fine-tune only the EEG-path layers of a pooled model on one subject."""
    if len(subject_dataset.subjects) != 1:
        raise ValueError(f"transfer learning expects one subject, got {subject_dataset.subjects}")
    return train(si_params, subject_dataset, cfg, net_cfg, frozen=env_path_names(si_params))


# -- scenarios -------------------------------------------------------------

def worker_count() -> int:
    """Parallel workers, capped by ``ENVTRACK_THREADS``."""
    cores = os.cpu_count() or 1
    raw = os.environ.get("ENVTRACK_THREADS")
    if raw:
        try:
            return max(1, min(cores, int(raw)))
        except ValueError:
            raise ValueError(f"ENVTRACK_THREADS must be an integer, got {raw!r}") from None
    return cores


def _parallel_map(fn: Callable, items: list) -> list:
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, *zip(*items)))


def subject_score(params, net_cfg: NetworkConfig, dataset: Dataset, subject_id: str,
                  split: str = "test") -> SubjectScore:
    pairs = dataset.subset([subject_id]).pairs(split)
    if not pairs:
        return SubjectScore(subject_id, 0, 0)
    prob = predict_pairs(params, net_cfg, dataset, pairs)
    labels = np.array([p.label for p in pairs])
    return SubjectScore(subject_id, len(pairs), int(np.sum((prob >= 0.5) == (labels == 1))))


@dataclass
class ScenarioResult:
    scenario: str
    report: EvalReport
    params: dict[str, dict[str, np.ndarray]]
    histories: dict[str, TrainHistory]


def _sd_job(sid, data, net_cfg, cfg):
    params, hist = train(model.build_network(net_cfg), data, cfg, net_cfg)
    return sid, params, hist, subject_score(params, net_cfg, data, sid)


def _tl_job(sid, data, si_params, net_cfg, cfg):
    params, hist = transfer_finetune(si_params, data, cfg, net_cfg)
    return sid, params, hist, subject_score(params, net_cfg, data, sid)


def run_scenario(scenario: str, subjects: Mapping[str, Dataset], net_cfg: NetworkConfig,
                 cfg: TrainConfig, holdout: Iterable[str] = (),
                 si_params: Mapping[str, np.ndarray] | None = None) -> ScenarioResult:
    """Train and test one scenario over per-subject datasets.

    SD trains one fresh model per subject.  SI pools the training subjects
    and reports every subject, holdout ones included.  TL starts from
    ``si_params`` (trained here with SI when omitted) and fine-tunes the EEG
    path per subject.
    """
    scenario = scenario.upper()
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    holdout = set(holdout)
    for sid, data in subjects.items():
        if data.subjects != [sid]:
            raise ValueError(f"dataset for {sid!r} holds subjects {data.subjects}")
    unknown = holdout - set(subjects)
    if unknown:
        raise ValueError(f"holdout subjects not in data: {sorted(unknown)}")
    train_ids = [s for s in subjects if s not in holdout]
    if not train_ids:
        raise ValueError("no training subjects")

    if scenario == "SI" or (scenario == "TL" and si_params is None):
        pooled = Dataset.merge([subjects[s] for s in train_ids])
        si_params, si_hist = train(model.build_network(net_cfg), pooled, cfg, net_cfg)
        if scenario == "SI":
            rows = [subject_score(si_params, net_cfg, subjects[s], s) for s in subjects]
            return ScenarioResult("SI", EvalReport(rows), {"SI": si_params}, {"SI": si_hist})

    if scenario == "SD":
        jobs = [(s, subjects[s], net_cfg, cfg) for s in train_ids]
        results = _parallel_map(_sd_job, jobs)
    else:
        jobs = [(s, subjects[s], dict(si_params), net_cfg, cfg) for s in train_ids]
        results = _parallel_map(_tl_job, jobs)
    return ScenarioResult(
        scenario,
        EvalReport([r[3] for r in results]),
        {r[0]: r[1] for r in results},
        {r[0]: r[2] for r in results},
    )


