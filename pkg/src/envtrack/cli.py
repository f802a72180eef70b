"""Command-line entry point.

Subcommands: ``synth gen``, ``prep run``, ``train``, ``eval``,
``baseline linear``, ``stats compare``.  Data goes to files; diagnostics go
to stderr.  Exit status is 0 only on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from envtrack import baseline, dataio, model, sigproc, synthgen, training
from envtrack.model import NetworkConfig
from envtrack.stats import EvalReport, SubjectScore, compare_reports
from envtrack.synthgen import SynthConfig
from envtrack.training import TrainConfig

log = logging.getLogger("envtrack")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    window_s: float = 10.0
    overlap: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    n_lags: int = baseline.DEFAULT_LAGS


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["synth"]["snr_db"] = _float_out(out["synth"]["snr_db"])
        return out


def _float_out(x: float):
    return "inf" if math.isinf(x) and x > 0 else x


def _section(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise UsageError(f"config section {where!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in config section {where!r}: {', '.join(unknown)}")
    return cls(**doc)


def parse_config(doc: dict | None) -> ExperimentConfig:
    """Build an ExperimentConfig, rejecting unknown keys at every level."""
    doc = dict(doc or {})
    sections = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise UsageError(f"unknown top-level config key(s): {', '.join(unknown)}")
    synth = dict(doc.get("synth", {}))
    if isinstance(synth.get("snr_db"), str):
        synth["snr_db"] = float(synth["snr_db"])
    return ExperimentConfig(
        network=_section(NetworkConfig, doc.get("network", {}), "network"),
        train=_section(TrainConfig, doc.get("train", {}), "train"),
        synth=_section(SynthConfig, synth, "synth"),
        data=_section(DataConfig, doc.get("data", {}), "data"),
        baseline=_section(BaselineConfig, doc.get("baseline", {}), "baseline"),
    )


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sidecar(model_path: Path, suffix: str) -> Path:
    return model_path.with_name(model_path.stem + suffix)


def _load_datasets(data_dir, cfg: ExperimentConfig, subjects=None) -> dict[str, dataio.Dataset]:
    """Normalized per-subject datasets; negative sampling seeded per subject."""
    recs = [r.normalized() for r in dataio.load_recordings(data_dir, subjects)]
    if not recs:
        raise UsageError(f"no recordings found in {data_dir}")
    by_subject: dict[str, list] = {}
    for r in recs:
        by_subject.setdefault(r.subject_id, []).append(r)
    out = {}
    for k, sid in enumerate(sorted(by_subject)):
        out[sid] = dataio.build_dataset(by_subject[sid], cfg.data.window_s, cfg.data.overlap,
                                        rng=cfg.data.seed + k)
    return out


# -- commands --------------------------------------------------------------

def cmd_synth_gen(args) -> None:
    cfg = load_config(args.config)
    synth = SynthConfig(
        n_subjects=args.subjects if args.subjects is not None else cfg.synth.n_subjects,
        minutes=args.minutes if args.minutes is not None else cfg.synth.minutes,
        snr_db=args.snr_db if args.snr_db is not None else cfg.synth.snr_db,
        mode=args.mode or cfg.synth.mode,
        seed=args.seed if args.seed is not None else cfg.synth.seed,
        drift_ms=cfg.synth.drift_ms,
        drift_period_s=cfg.synth.drift_period_s,
    )
    try:
        synth.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in synthgen.synth_subjects(synth):
        rel = f"{rec.recording_id}.nmm"
        dataio.write_recording(rec, out / rel)
        entries.append((rel, rec))
    synth_doc = asdict(synth)
    synth_doc["snr_db"] = _float_out(synth.snr_db)
    dataio.write_manifest(out, entries, {"generator": synth_doc})
    log.info("wrote %d recordings to %s", len(entries), out)


def cmd_prep_run(args) -> None:
    src, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in dataio.load_recordings(src):
        eeg, env = sigproc.preprocess(
            sigproc.Waveform(rec.eeg, rec.sample_rate_hz),
            sigproc.Waveform(rec.envelope, rec.sample_rate_hz),
            target_rate=args.target_rate,
        )
        new = dataio.Recording(rec.subject_id, rec.recording_id, eeg.samples, env.samples,
                               int(eeg.sample_rate_hz))
        rel = f"{rec.recording_id}.nmm"
        dataio.write_recording(new, out / rel)
        entries.append((rel, new))
    dataio.write_manifest(out, entries, {"preprocessed_from": str(src)})


def cmd_train(args) -> None:
    scenario = args.scenario.upper()
    if scenario == "TL" and not args.init:
        raise UsageError("--scenario tl requires --init <si_model.nmw>")
    cfg = load_config(args.config)
    net_cfg = cfg.network
    expected = int(round(cfg.data.window_s * 64))
    if net_cfg.window_samples != expected:
        net_cfg = NetworkConfig(**{**asdict(net_cfg), "window_samples": expected})
    train_cfg = TrainConfig(**{**asdict(cfg.train), "scenario": scenario})
    subjects = _load_datasets(args.data, cfg)
    if args.subject:
        if args.subject not in subjects:
            raise UsageError(f"subject {args.subject!r} not in {args.data}")
        subjects = {args.subject: subjects[args.subject]}
    holdout = set(args.holdout or [])

    if scenario in ("SD", "TL") and len(subjects) != 1:
        raise UsageError(f"--scenario {args.scenario} trains one subject; pass --subject "
                         f"(available: {', '.join(sorted(subjects))})")
    if scenario == "SI":
        pooled = dataio.Dataset.merge([d for s, d in subjects.items() if s not in holdout])
        params, hist = training.train(model.build_network(net_cfg), pooled, train_cfg, net_cfg)
    elif scenario == "SD":
        (data,) = subjects.values()
        params, hist = training.train(model.build_network(net_cfg), data, train_cfg, net_cfg)
    else:
        init = dataio.read_weights(args.init)
        _check_shapes(init, net_cfg)
        (data,) = subjects.values()
        params, hist = training.transfer_finetune(init, data, train_cfg, net_cfg)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_weights(params, out)
    hist.to_csv(_sidecar(out, ".history.csv"))
    echo = ExperimentConfig(net_cfg, train_cfg, cfg.synth, cfg.data, cfg.baseline).to_dict()
    echo["command"] = {"scenario": scenario, "data": str(args.data), "init": args.init,
                       "subject": args.subject, "holdout": sorted(holdout)}
    _write_json(_sidecar(out, ".config.json"), echo)
    log.info("trained %s model: %d epochs, best %d", scenario, len(hist.val_loss), hist.best_epoch + 1)


def _check_shapes(params: dict, net_cfg: NetworkConfig) -> None:
    want = model.param_shapes(net_cfg)
    if set(params) != set(want):
        raise UsageError(f"weights do not match the network: missing {sorted(set(want) - set(params))}, "
                         f"unexpected {sorted(set(params) - set(want))}")
    for k, shape in want.items():
        if params[k].shape != shape:
            raise UsageError(f"weight {k} has shape {params[k].shape}, network expects {shape}")


def _model_config(model_path: Path) -> ExperimentConfig:
    side = _sidecar(model_path, ".config.json")
    if not side.exists():
        return ExperimentConfig()
    doc = json.loads(side.read_text())
    doc.pop("command", None)
    return parse_config(doc)


def cmd_eval(args) -> None:
    model_path = Path(args.model)
    cfg = _model_config(model_path)
    net_cfg = cfg.network
    window = int(round(args.window_s * 64))
    if window != net_cfg.window_samples:
        raise UsageError(f"--window-s {args.window_s} gives {window} samples but the model was "
                         f"trained on {net_cfg.window_samples}-sample windows")
    params = dataio.read_weights(model_path)
    _check_shapes(params, net_cfg)
    subjects = _load_datasets(args.data, cfg)
    rows = [training.subject_score(params, net_cfg, d, s, args.split) for s, d in subjects.items()]
    report = EvalReport(rows)
    _emit_report(report, Path(args.report))


def _emit_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(path)
    correct, total = report.pooled()
    summary = {"subjects": len(report.rows), "n_segments": total, "n_correct": correct}
    if report.rows:
        summary.update(report.aggregate())
    _write_json(_sidecar(path, ".summary.json"), summary)


def cmd_baseline_linear(args) -> None:
    cfg = load_config(args.config)
    subjects = _load_datasets(args.data, cfg)
    rows = []
    if args.scenario.upper() == "SI":
        fitted = baseline.fit_baseline(dataio.Dataset.merge(list(subjects.values())), cfg.baseline.n_lags)
    for sid, data in subjects.items():
        if args.scenario.upper() == "SD":
            fitted = baseline.fit_baseline(data, cfg.baseline.n_lags)
        pairs = data.pairs("test")
        pred = fitted.predict(data, pairs)
        labels = np.array([p.label for p in pairs])
        rows.append(SubjectScore(sid, len(pairs), int(np.sum(pred == labels))))
    _emit_report(EvalReport(rows), Path(args.report))


def cmd_stats_compare(args) -> None:
    a, b = EvalReport.from_csv(args.a), EvalReport.from_csv(args.b)
    try:
        result = compare_reports(a, b)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- parser ----------------------------------------------------------------

def _snr(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid SNR {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthetic data").add_subparsers(dest="action", required=True)
    gen = synth.add_parser("gen", help="generate synthetic subjects")
    gen.add_argument("--subjects", type=int)
    gen.add_argument("--minutes", type=float)
    gen.add_argument("--mode", choices=["linear", "nonlinear"])
    gen.add_argument("--snr-db", type=_snr)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_synth_gen)

    prep = sub.add_parser("prep", help="preprocessing").add_subparsers(dest="action", required=True)
    run = prep.add_parser("run", help="bandpass, decimate and normalize recordings")
    run.add_argument("--data", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--target-rate", type=int, default=sigproc.TARGET_RATE_HZ)
    run.set_defaults(func=cmd_prep_run)

    tr = sub.add_parser("train", help="train the network")
    tr.add_argument("--scenario", required=True, type=str.lower, choices=["sd", "si", "tl"])
    tr.add_argument("--data", required=True)
    tr.add_argument("--config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--init")
    tr.add_argument("--subject")
    tr.add_argument("--holdout", nargs="*")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a trained network")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--window-s", type=float, default=10.0)
    ev.add_argument("--report", required=True)
    ev.set_defaults(func=cmd_eval)

    bl = sub.add_parser("baseline", help="linear baseline").add_subparsers(dest="action", required=True)
    lin = bl.add_parser("linear", help="ridge backward model + Spearman threshold")
    lin.add_argument("--data", required=True)
    lin.add_argument("--report", required=True)
    lin.add_argument("--config")
    lin.add_argument("--scenario", type=str.lower, choices=["sd", "si"], default="si")
    lin.set_defaults(func=cmd_baseline_linear)

    st = sub.add_parser("stats", help="statistics").add_subparsers(dest="action", required=True)
    cmp_ = st.add_parser("compare", help="Wilcoxon signed-rank test of two reports")
    cmp_.add_argument("--a", required=True)
    cmp_.add_argument("--b", required=True)
    cmp_.add_argument("--out")
    cmp_.set_defaults(func=cmd_stats_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"envtrack: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, training.TrainingError) as exc:
        print(f"envtrack: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
