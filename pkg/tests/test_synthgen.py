import numpy as np
import pytest
from scipy import signal

from envtrack import baseline, dataio, synthgen
from envtrack.synthgen import SynthConfig


def test_envelope_properties():
    env = synthgen.synth_envelope(60.0, seed=1)
    assert env.size == 3840
    assert env.min() == 0.0 and np.all(env >= 0)
    f, pxx = signal.periodogram(env - env.mean(), fs=64)
    assert pxx[f < 10].sum() / pxx.sum() >= 0.6
    np.testing.assert_array_equal(env, synthgen.synth_envelope(60.0, seed=1))


def test_envelope_rejects_nonpositive_duration():
    with pytest.raises(ValueError):
        synthgen.synth_envelope(0.0, 1)


def test_profile_delay_range_and_peaks():
    for seed in range(300):
        prof = synthgen.make_subject_trf(seed)
        assert 80.0 <= prof.delay_ms <= 200.0
        assert np.all(np.abs(prof.peak_ms - prof.delay_ms) <= 15.0)
        expected = np.round(prof.peak_ms * 64 / 1000)
        assert np.all(np.abs(np.argmax(np.abs(prof.kernels), axis=1) - expected) <= 1)


def test_kernels_unit_energy_and_deterministic():
    a, b = synthgen.make_subject_trf(4), synthgen.make_subject_trf(4)
    assert a.kernels.shape == (64, 32)
    np.testing.assert_allclose(np.sum(a.kernels ** 2, axis=1), 1.0)
    np.testing.assert_array_equal(a.kernels, b.kernels)
    assert set(np.sign(a.kernels[:, np.argmax(np.abs(a.kernels[0]))])) <= {-1.0, 1.0}


def test_profile_rejects_out_of_range_delay():
    with pytest.raises(ValueError):
        synthgen.SubjectProfile("S", 50.0, np.zeros((1, 32)), np.zeros(1))


def test_pink_noise():
    x = synthgen.pink_noise(64 * 600, seed=3)
    assert abs(x.var() - 1.0) < 0.05
    f, pxx = signal.welch(x, fs=64, nperseg=2048)
    band = (f >= 1) & (f <= 20)
    slope = np.polyfit(np.log10(f[band]), np.log10(pxx[band]), 1)[0]
    assert abs(slope + 1.0) < 0.3
    np.testing.assert_array_equal(x, synthgen.pink_noise(64 * 600, seed=3))
    with pytest.raises(ValueError):
        synthgen.pink_noise(10, 0)


def test_noiseless_linear_is_pure_convolution():
    env = synthgen.synth_envelope(30.0, 2)
    prof = synthgen.make_subject_trf(2)
    rec = synthgen.synth_recording(env, prof)
    for ch in (0, 17, 63):
        np.testing.assert_array_equal(rec.eeg[ch], np.convolve(env, prof.kernels[ch])[:env.size])


def test_zero_envelope_rejected():
    with pytest.raises(ValueError, match="zero variance"):
        synthgen.synth_recording(np.zeros(640), synthgen.make_subject_trf(0))


@pytest.mark.parametrize("snr_db", [0.0, -20.0, 10.0])
def test_snr_calibration(snr_db):
    env = synthgen.synth_envelope(120.0, 5)
    prof = synthgen.make_subject_trf(5)
    noisy = synthgen.synth_recording(env, prof, snr_db=snr_db, noise_seed=11).eeg
    noise = synthgen.channel_noise(64, env.size, 11)
    ratio = (noisy - noise).var(axis=1) / noise.var(axis=1)
    np.testing.assert_allclose(ratio, 10 ** (snr_db / 10), rtol=0.02)


def test_nonlinear_mode_compresses_and_drifts():
    env = synthgen.synth_envelope(120.0, 6)
    prof = synthgen.make_subject_trf(6)
    nl = synthgen.synth_recording(env, prof, mode="nonlinear").eeg
    no_drift = synthgen.SubjectProfile(prof.subject_id, prof.delay_ms, prof.kernels, prof.peak_ms,
                                       True, 0.0, 60.0, prof.seed)
    compressed = synthgen.synth_recording(env, no_drift, mode="nonlinear").eeg
    expected = signal.lfilter(prof.kernels[0], 1.0, env ** 0.4)
    np.testing.assert_allclose(compressed[0], expected)
    assert not np.allclose(nl, compressed)


def test_drift_is_bounded_shift():
    t = np.arange(64 * 120, dtype=float)
    u = t.copy()  # a ramp reveals the shift directly
    shift = u - synthgen.drifted(u, 30.0, 60.0)
    inner = shift[64:-64]
    assert np.max(np.abs(inner)) == pytest.approx(30.0 * 64 / 1000, rel=1e-3)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        synthgen.synth_recording(np.ones(100), synthgen.make_subject_trf(0), mode="cubic")
    with pytest.raises(ValueError):
        SynthConfig(mode="cubic").validate()


def test_subjects_deterministic_and_distinct():
    cfg = SynthConfig(n_subjects=2, minutes=1, snr_db=0.0, seed=3)
    a, b = synthgen.synth_subjects(cfg), synthgen.synth_subjects(cfg)
    assert [r.subject_id for r in a] == ["S01", "S02"]
    for x, y in zip(a, b):
        assert x.eeg.tobytes() == y.eeg.tobytes() and x.envelope.tobytes() == y.envelope.tobytes()
    assert a[0].eeg.tobytes() != a[1].eeg.tobytes()
    assert a[0].n_samples == 3840


def test_linear_identifiability_anchor():
    """A ridge decoder recovers the noiseless linear envelope almost exactly."""
    rec = synthgen.synth_subjects(SynthConfig(minutes=5, seed=8))[0].normalized()
    ds = dataio.build_dataset([rec])
    dec = baseline.fit_decoder(ds)
    lo, hi = rec.n_samples // 2, (6 * rec.n_samples) // 10
    rho = baseline.spearman(dec.reconstruct(rec.eeg[:, lo:hi]), rec.envelope[lo:hi])
    assert rho > 0.9
