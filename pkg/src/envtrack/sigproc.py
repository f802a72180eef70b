"""Stimulus envelope extraction and EEG/envelope conditioning."""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy import signal

ENVELOPE_EXPONENT = 0.6
TARGET_RATE_HZ = 64
NYQUIST_MARGIN = 0.45


@dataclass(frozen=True)
class Waveform:
    """Samples along the last axis at ``sample_rate_hz``."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class SplitSpec:
    """Sample-index ranges (half-open) of one recording's splits."""

    n_samples: int
    train: tuple[tuple[int, int], ...]
    val: tuple[int, int]
    test: tuple[int, int]

    def ranges(self, split: str) -> tuple[tuple[int, int], ...]:
        if split == "train":
            return self.train
        if split in ("val", "validation"):
            return (self.val,)
        if split == "test":
            return (self.test,)
        raise ValueError(f"unknown split {split!r}")

    def to_dict(self) -> dict:
        return {
            "train": [list(r) for r in self.train],
            "val": [list(self.val)],
            "test": [list(self.test)],
        }


def erb_space(low_hz: float, high_hz: float, n: int) -> np.ndarray:
    """Center frequencies equally spaced on the ERB-number scale (Glasberg & Moore)."""
    erb_number = lambda f: 21.4 * np.log10(1.0 + 0.00437 * f)
    inverse = lambda e: (10.0 ** (e / 21.4) - 1.0) / 0.00437
    return inverse(np.linspace(erb_number(low_hz), erb_number(high_hz), n))


def extract_envelope(audio: Waveform, n_bands: int = 28, low_hz: float = 50.0,
                     high_hz: float = 5000.0, exponent: float = ENVELOPE_EXPONENT) -> Waveform:
    """Power-law subband envelope at the audio rate.

    Each gammatone subband's Hilbert magnitude is raised to ``exponent`` and
    the subbands are averaged.  Being a linear filterbank followed by a
    power law, ``extract_envelope(a * x) == a**exponent * extract_envelope(x)``.

    At low audio rates the top center frequency is capped at 0.45 of the
    sample rate (3.6 kHz at 8 kHz) so every band stays below Nyquist.
    """
    x = np.asarray(audio.samples)
    if x.ndim != 1:
        raise ValueError(f"expected mono audio, got shape {x.shape}; downmix first")
    fs = audio.sample_rate_hz
    if fs < 8000:
        raise ValueError(f"audio rate {fs} Hz below the 8 kHz minimum")
    high_hz = min(high_hz, NYQUIST_MARGIN * fs)
    if low_hz >= high_hz:
        raise ValueError(f"band range [{low_hz}, {high_hz}] Hz is empty")
    acc = np.zeros_like(x)
    for fc in erb_space(low_hz, high_hz, n_bands):
        b, a = signal.gammatone(fc, "iir", fs=fs)
        band = signal.sosfilt(signal.tf2sos(b, a), x)
        acc += np.abs(signal.hilbert(band)) ** exponent
    return Waveform(acc / n_bands, fs)


def bandpass_zero_phase(x: Waveform, lo: float = 0.5, hi: float = 32.0) -> Waveform:
    """4th-order Butterworth bandpass run forward and backward along the last axis.

    The effective magnitude response is the squared single-pass response,
    with zero phase.
    """
    fs = x.sample_rate_hz
    if hi >= fs / 2:
        raise ValueError(f"upper edge {hi} Hz must be below Nyquist ({fs / 2} Hz)")
    if not 0 < lo < hi:
        raise ValueError(f"invalid band [{lo}, {hi}]")
    # a 2nd-order lowpass prototype gives a 4-pole bandpass
    sos = signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    return Waveform(signal.sosfiltfilt(sos, x.samples, axis=-1), fs)


def decimate(x: Waveform, factor: int) -> Waveform:
    """Keep every ``factor``-th sample; no filtering is applied here."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    new_rate = x.sample_rate_hz / factor
    if x.sample_rate_hz % factor:
        raise ValueError(f"sample rate {x.sample_rate_hz} not divisible by {factor}")
    return Waveform(x.samples[..., ::factor], new_rate)


def zscore(x) -> np.ndarray:
    """Per-row mean/variance normalization (population std); flat rows become 0."""
    arr = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)
    if arr.shape[-1] < 2:
        raise ValueError("need at least two samples to normalize")
    mu = arr.mean(axis=-1, keepdims=True)
    sd = arr.std(axis=-1, keepdims=True)
    flat = sd < 1e-12
    out = (arr - mu) / np.where(flat, 1.0, sd)
    return np.where(flat, 0.0, out)


def split_recording(n_samples: int) -> SplitSpec:
    """First and last 40 % train, then validation and test from the middle 20 %."""
    if n_samples < 10:
        raise ValueError(f"recording of {n_samples} samples is too short to split")
    a, b, c = (4 * n_samples) // 10, n_samples // 2, (6 * n_samples) // 10
    return SplitSpec(n_samples, ((0, a), (c, n_samples)), (a, b), (b, c))


def highpass_zero_phase(x: Waveform, lo: float = 0.5) -> Waveform:
    """Low edge of the bandpass alone, for data whose upper edge is Nyquist."""
    if not 0 < lo < x.sample_rate_hz / 2:
        raise ValueError(f"cutoff {lo} Hz outside (0, Nyquist)")
    sos = signal.butter(2, lo, btype="highpass", fs=x.sample_rate_hz, output="sos")
    return Waveform(signal.sosfiltfilt(sos, x.samples, axis=-1), x.sample_rate_hz)


def preprocess(eeg: Waveform, envelope: Waveform, target_rate: int = TARGET_RATE_HZ,
               lo: float = 0.5, hi: float = 32.0) -> tuple[Waveform, Waveform]:
    """Bandpass, decimate to ``target_rate`` and z-score EEG and envelope.

    Inputs already at ``target_rate`` have their upper band edge on (or
    above) Nyquist, so only the high-pass half of the band is applied.
    """
    out = []
    for w in (eeg, envelope):
        if w.sample_rate_hz != target_rate:
            factor = w.sample_rate_hz / target_rate
            if factor != int(factor) or factor < 1:
                raise ValueError(f"cannot decimate {w.sample_rate_hz} Hz to {target_rate} Hz")
            w = decimate(bandpass_zero_phase(w, lo, hi), int(factor))
        elif hi >= w.sample_rate_hz / 2:
            w = highpass_zero_phase(w, lo)
        else:
            w = bandpass_zero_phase(w, lo, hi)
        out.append(Waveform(zscore(w), w.sample_rate_hz))
    return out[0], out[1]


def read_wav_mono(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        frames = wf.readframes(wf.getnframes())
        rate = wf.getframerate()
    return Waveform(np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0, rate)
