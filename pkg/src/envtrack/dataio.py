"""Recordings, windowing, mismatch sampling, datasets and file formats.

Binary layouts (all little-endian):

Recording container ``.nmm``::

    b"NMM1"
    u32 version (=1), u32 n_channels, u32 n_samples, u32 sample_rate
    u16 len + UTF-8 subject_id, u16 len + UTF-8 recording_id
    f32 EEG[n_channels][n_samples]   (channel-major)
    f32 envelope[n_samples]

Weights container ``.nmw``::

    b"NMW1"
    u32 tensor count
    per tensor: u16 name length, name, u8 ndim, u32 dims[ndim], f32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from envtrack.sigproc import split_recording, zscore

RECORDING_MAGIC = b"NMM1"
WEIGHTS_MAGIC = b"NMW1"
FORMAT_VERSION = 1
GAP_SAMPLES = 64  # 1 s at 64 Hz
SPLITS = ("train", "val", "test")


class ContainerError(ValueError):
    """Malformed or truncated container file."""


@dataclass
class Recording:
    subject_id: str
    recording_id: str
    eeg: np.ndarray
    envelope: np.ndarray
    sample_rate_hz: int = 64

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg)
        self.envelope = np.asarray(self.envelope).reshape(-1)
        if self.eeg.ndim != 2:
            raise ValueError(f"EEG must be channels x samples, got shape {self.eeg.shape}")
        if self.eeg.shape[1] != self.envelope.size:
            raise ValueError(
                f"EEG has {self.eeg.shape[1]} samples but envelope has {self.envelope.size}"
            )

    @property
    def n_samples(self) -> int:
        return self.envelope.size

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[0]

    def normalized(self) -> "Recording":
        """Copy with every EEG channel and the envelope z-scored."""
        return Recording(self.subject_id, self.recording_id, zscore(self.eeg),
                         zscore(self.envelope), self.sample_rate_hz)


@dataclass(frozen=True)
class SegmentPair:
    """One (EEG window, envelope window) sample, stored by reference."""

    recording_id: str
    eeg_start: int
    env_start: int
    window: int
    label: int  # 1 matched, 0 mismatched

    @property
    def matched(self) -> bool:
        return self.label == 1


@dataclass
class Dataset:
    """Recordings plus labelled segment references per split."""

    recordings: dict[str, Recording]
    window: int
    splits: dict[str, list[SegmentPair]] = field(default_factory=dict)
    skipped: int = 0

    def pairs(self, split: str) -> list[SegmentPair]:
        return self.splits.get(split, [])

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.recordings.values()})

    def windows(self, pair: SegmentPair) -> tuple[np.ndarray, np.ndarray]:
        rec = self.recordings[pair.recording_id]
        eeg = rec.eeg[:, pair.eeg_start:pair.eeg_start + pair.window]
        env = rec.envelope[None, pair.env_start:pair.env_start + pair.window]
        return eeg, env

    def arrays(self, pairs: Sequence[SegmentPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stack ``pairs`` into (eeg, env, labels) batches."""
        if not pairs:
            raise ValueError("no segments to stack")
        n_ch = self.recordings[pairs[0].recording_id].n_channels
        eeg = np.empty((len(pairs), n_ch, self.window))
        env = np.empty((len(pairs), 1, self.window))
        for k, p in enumerate(pairs):
            eeg[k], env[k] = self.windows(p)
        labels = np.array([p.label for p in pairs], dtype=np.float64)
        return eeg, env, labels

    def subset(self, subject_ids: Iterable[str]) -> "Dataset":
        keep = set(subject_ids)
        recs = {k: r for k, r in self.recordings.items() if r.subject_id in keep}
        splits = {s: [p for p in ps if p.recording_id in recs] for s, ps in self.splits.items()}
        return Dataset(recs, self.window, splits)

    @staticmethod
    def merge(parts: Sequence["Dataset"]) -> "Dataset":
        recs, splits = {}, {s: [] for s in SPLITS}
        for d in parts:
            recs.update(d.recordings)
            for s in SPLITS:
                splits[s].extend(d.pairs(s))
        return Dataset(recs, parts[0].window, splits, sum(d.skipped for d in parts))


def hop_samples(window: int, overlap: float) -> int:
    hop = int(round(window * (1.0 - overlap)))
    if hop < 1:
        raise ValueError(f"overlap {overlap} leaves no hop for a {window}-sample window")
    return hop


def window_starts(lo: int, hi: int, window: int, hop: int) -> list[int]:
    """Starts of full windows inside [lo, hi)."""
    if hi - lo < window:
        return []
    return list(range(lo, hi - window + 1, hop))


def segment(rec, window_s: float = 10.0, overlap: float = 0.9, fs: int = 64) -> list[int]:
    """Window starts over a whole recording (or a sample count)."""
    n = rec if isinstance(rec, (int, np.integer)) else rec.n_samples
    window = int(round(window_s * fs))
    return window_starts(0, n, window, hop_samples(window, overlap))


def sample_mismatch(n_samples: int, eeg_start: int, window: int, rng: np.random.Generator,
                    gap: int = GAP_SAMPLES) -> int | None:
    """Start of a mismatched envelope one ``gap`` after or before the matched one.

    Returns None when neither candidate fits inside the recording.
    """
    after = eeg_start + window + gap
    before = eeg_start - gap - window
    valid = [c for c in (after, before) if 0 <= c and c + window <= n_samples]
    if not valid:
        return None
    if len(valid) == 1:
        return valid[0]
    return valid[int(rng.integers(2))]


def build_dataset(recordings: Sequence[Recording], window_s: float = 10.0, overlap: float = 0.9,
                  rng: np.random.Generator | int | None = 0, fs: int = 64) -> Dataset:
    """Cut each recording's splits into matched windows plus one mismatch each.

    Windows never straddle a split boundary; the mismatched envelope may come
    from anywhere in the same recording.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    window = int(round(window_s * fs))
    hop = hop_samples(window, overlap)
    ds = Dataset({}, window, {s: [] for s in SPLITS})
    for rec in recordings:
        if rec.recording_id in ds.recordings:
            raise ValueError(f"duplicate recording id {rec.recording_id!r}")
        ds.recordings[rec.recording_id] = rec
        spec = split_recording(rec.n_samples)
        for split in SPLITS:
            for lo, hi in spec.ranges(split):
                for start in window_starts(lo, hi, window, hop):
                    ds.splits[split].append(
                        SegmentPair(rec.recording_id, start, start, window, 1))
                    env_start = sample_mismatch(rec.n_samples, start, window, rng)
                    if env_start is None:
                        ds.skipped += 1
                        continue
                    ds.splits[split].append(
                        SegmentPair(rec.recording_id, start, env_start, window, 0))
    return ds


# -- recording container ---------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_recording(rec: Recording) -> bytes:
    head = RECORDING_MAGIC + struct.pack(
        "<4I", FORMAT_VERSION, rec.n_channels, rec.n_samples, int(rec.sample_rate_hz))
    body = (_pack_str(rec.subject_id) + _pack_str(rec.recording_id)
            + np.ascontiguousarray(rec.eeg, dtype="<f4").tobytes()
            + np.ascontiguousarray(rec.envelope, dtype="<f4").tobytes())
    return head + body


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf, self.pos, self.name = buf, 0, name

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(
                f"{self.name}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", f"{what} length")
        return self.take(n, what).decode("utf-8")

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").copy()

    def magic(self, expected: bytes):
        got = self.take(4, "magic")
        if got != expected:
            raise ContainerError(f"{self.name}: bad magic {got!r} at offset 0, expected {expected!r}")

    def finish(self):
        if self.pos != len(self.buf):
            raise ContainerError(f"{self.name}: {len(self.buf) - self.pos} trailing bytes at offset {self.pos}")


def decode_recording(buf: bytes, name: str = "<bytes>") -> Recording:
    r = _Reader(buf, name)
    r.magic(RECORDING_MAGIC)
    version, n_ch, n, fs = r.unpack("<4I", "header")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{name}: unsupported version {version} at offset 4")
    subject_id = r.string("subject_id")
    recording_id = r.string("recording_id")
    eeg = r.floats(n_ch * n, "EEG").reshape(n_ch, n)
    env = r.floats(n, "envelope")
    r.finish()
    return Recording(subject_id, recording_id, eeg, env, fs)


def write_recording(rec: Recording, path) -> None:
    Path(path).write_bytes(encode_recording(rec))


def read_recording(path) -> Recording:
    return decode_recording(Path(path).read_bytes(), str(path))


# -- weights container -----------------------------------------------------

def encode_weights(params: dict[str, np.ndarray]) -> bytes:
    out = [WEIGHTS_MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value))
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_weights(buf: bytes, name: str = "<bytes>") -> dict[str, np.ndarray]:
    r = _Reader(buf, name)
    r.magic(WEIGHTS_MAGIC)
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        key = r.string("tensor name")
        (ndim,) = r.unpack("<B", f"ndim of {key}")
        dims = r.unpack(f"<{ndim}I", f"dims of {key}")
        params[key] = r.floats(int(np.prod(dims, dtype=np.int64)), key).reshape(dims).astype(np.float64)
    r.finish()
    return params


def write_weights(params, path) -> None:
    Path(path).write_bytes(encode_weights(params))


def read_weights(path) -> dict[str, np.ndarray]:
    return decode_weights(Path(path).read_bytes(), str(path))


# -- manifest --------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_manifest(directory, entries: list[tuple[str, Recording]], extra: dict | None = None) -> Path:
    """``entries`` are (relative container path, recording) pairs."""
    doc = {
        "format": "envtrack-manifest",
        "version": FORMAT_VERSION,
        "recordings": [
            {
                "path": rel,
                "subject_id": rec.subject_id,
                "recording_id": rec.recording_id,
                "n_samples": rec.n_samples,
                "sample_rate_hz": rec.sample_rate_hz,
                "split": split_recording(rec.n_samples).to_dict()
                if rec.n_samples >= 10 else None,
            }
            for rel, rec in entries
        ],
    }
    if extra:
        doc.update(extra)
    path = Path(directory) / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "envtrack-manifest" or "recordings" not in doc:
        raise ValueError(f"{path}: not an envtrack manifest")
    return doc


def load_recordings(directory, subjects: Iterable[str] | None = None) -> list[Recording]:
    doc = load_manifest(directory)
    keep = None if subjects is None else set(subjects)
    out = []
    for entry in doc["recordings"]:
        if keep is not None and entry["subject_id"] not in keep:
            continue
        out.append(read_recording(Path(directory) / entry["path"]))
    return out

