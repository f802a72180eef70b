"""Forward-model simulator for envelope-driven synthetic EEG.

Each synthetic subject has its own response delay and per-channel
temporal response functions (TRFs).  EEG is the envelope (optionally
compressed and delay-modulated) convolved with the TRFs, plus pink noise
at a calibrated per-channel SNR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from envtrack.dataio import Recording

FS = 64
TRF_TAPS = 32
N_CHANNELS = 64
COMPRESSION = 0.4


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    delay_ms: float
    kernels: np.ndarray  # (channels, taps)
    peak_ms: np.ndarray  # per-channel main-lobe latency, delay + jitter
    nonlinear: bool = False
    drift_ms: float = 30.0
    drift_period_s: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if not 80.0 <= self.delay_ms <= 200.0:
            raise ValueError(f"delay {self.delay_ms} ms outside [80, 200]")


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 1
    minutes: float = 10.0
    snr_db: float = float("inf")
    mode: str = "linear"
    seed: int = 0
    drift_ms: float = 30.0
    drift_period_s: float = 60.0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if not self.minutes > 0:
            raise ValueError("minutes must be positive")
        if self.mode not in ("linear", "nonlinear"):
            raise ValueError(f"mode must be 'linear' or 'nonlinear', got {self.mode!r}")


def synth_envelope(duration_s: float, seed: int, fs: int = FS) -> np.ndarray:
    """Speech-like non-negative modulation signal.

    Gaussian noise band-limited to 0.5-10 Hz, rectified, z-scored and
    shifted so its minimum is zero.
    """
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    n = int(round(duration_s * fs))
    rng = np.random.default_rng(seed)
    sos = signal.butter(4, [0.5, 10.0], btype="bandpass", fs=fs, output="sos")
    x = np.abs(signal.sosfiltfilt(sos, rng.standard_normal(n)))
    x = (x - x.mean()) / x.std()
    return x - x.min()


def _gamma_lobe(t: np.ndarray, peak: float, shape: float) -> np.ndarray:
    scale = peak / (shape - 1.0)
    return stats.gamma.pdf(t, shape, scale=scale)


def trf_kernel(peak_ms: float, taps: int = TRF_TAPS, fs: int = FS) -> np.ndarray:
    """Difference-of-gammas response with its main lobe at ``peak_ms``, unit energy."""
    t = np.arange(taps) / fs * 1000.0
    main = _gamma_lobe(t, peak_ms, 8.0)
    late = _gamma_lobe(t, peak_ms + 180.0, 8.0)
    k = main / main.max() - 0.35 * late / late.max()
    return k / np.sqrt(np.sum(k * k))


def make_subject_trf(seed: int, subject_id: str | None = None, n_channels: int = N_CHANNELS,
                     nonlinear: bool = False, drift_ms: float = 30.0,
                     drift_period_s: float = 60.0) -> SubjectProfile:
    rng = np.random.default_rng(seed)
    delay = float(rng.uniform(80.0, 200.0))
    jitter = rng.uniform(-15.0, 15.0, n_channels)
    polarity = rng.choice([-1.0, 1.0], n_channels)
    kernels = np.stack([p * trf_kernel(delay + j) for p, j in zip(polarity, jitter)])
    return SubjectProfile(subject_id or f"S{seed:03d}", delay, kernels, delay + jitter,
                          nonlinear, drift_ms, drift_period_s, seed)


def pink_noise(n: int, seed: int) -> np.ndarray:
    """Unit-variance Gaussian noise with 1/f power spectrum."""
    if n < 64:
        raise ValueError("pink noise needs at least 64 samples")
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * scale, n)
    x -= x.mean()
    return x / x.std()


def channel_noise(n_channels: int, n: int, seed: int) -> np.ndarray:
    """Independent unit-variance pink noise per channel, all derived from ``seed``."""
    streams = np.random.SeedSequence(seed).spawn(n_channels)
    return np.stack([pink_noise(n, int(s.generate_state(1)[0])) for s in streams])


def drifted(u: np.ndarray, drift_ms: float, period_s: float, fs: int = FS) -> np.ndarray:
    """Resample ``u`` at t - d(t) with a sinusoidal delay d(t)."""
    t = np.arange(u.size, dtype=np.float64)
    shift = drift_ms * fs / 1000.0 * np.sin(2 * np.pi * t / (period_s * fs))
    return np.interp(t - shift, t, u)


def synth_recording(envelope: np.ndarray, profile: SubjectProfile, snr_db: float = float("inf"),
                    mode: str = "linear", noise_seed: int | None = None,
                    recording_id: str | None = None) -> Recording:
    """Envelope-driven EEG for one subject.

    ``snr_db`` sets var(signal) / var(noise) per channel; ``inf`` disables
    noise so the EEG is exactly the causal TRF convolution.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if mode == "linear":
        drive = env
    elif mode == "nonlinear":
        drive = np.maximum(env, 0.0) ** COMPRESSION
        if profile.drift_ms:
            drive = drifted(drive, profile.drift_ms, profile.drift_period_s)
    else:
        raise ValueError(f"mode must be 'linear' or 'nonlinear', got {mode!r}")

    sig = np.stack([signal.lfilter(k, 1.0, drive) for k in profile.kernels])
    var = sig.var(axis=1)
    if np.any(var <= 0):
        raise ValueError("simulated signal has zero variance on at least one channel")

    if np.isinf(snr_db) and snr_db > 0:
        eeg = sig
    else:
        seed = profile.seed + 1_000_003 if noise_seed is None else noise_seed
        noise = channel_noise(sig.shape[0], env.size, seed)
        gain = np.sqrt(10.0 ** (snr_db / 10.0) * noise.var(axis=1) / var)
        eeg = sig * gain[:, None] + noise
    return Recording(profile.subject_id, recording_id or f"{profile.subject_id}-R01",
                     eeg, env, FS)


def subject_seeds(seed: int) -> tuple[int, int, int]:
    """Independent (envelope, TRF, noise) seeds spawned from one subject seed."""
    env_seed, trf_seed, noise_seed = (int(s.generate_state(1)[0])
                                      for s in np.random.SeedSequence(seed).spawn(3))
    return env_seed, trf_seed, noise_seed


def synth_subjects(cfg: SynthConfig) -> list[Recording]:
    """One recording per subject; subject k uses seed ``cfg.seed + k``."""
    cfg.validate()
    recs = []
    for k in range(cfg.n_subjects):
        env_seed, trf_seed, noise_seed = subject_seeds(cfg.seed + k)
        profile = make_subject_trf(trf_seed, f"S{k + 1:02d}", nonlinear=cfg.mode == "nonlinear",
                                   drift_ms=cfg.drift_ms, drift_period_s=cfg.drift_period_s)
        env = synth_envelope(cfg.minutes * 60.0, env_seed)
        recs.append(synth_recording(env, profile, cfg.snr_db, cfg.mode, noise_seed))
    return recs
