"""Compare the ridge baseline with the subject-independent network.

Three synthetic subjects are generated in nonlinear mode (compressed
envelope, drifting delay) at heavy noise, conditioned (0.5 Hz high-pass, z-score) and cut into matched and
mismatched 10 s segments.  Expect a few minutes of training on one core.

    python3 demos/02_linear_vs_network.py
"""

import logging

import numpy as np

from envtrack import baseline, dataio, sigproc, synthgen, training
from envtrack.dataio import Recording
from envtrack.model import NetworkConfig
from envtrack.sigproc import Waveform
from envtrack.training import TrainConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")

raw = synthgen.synth_subjects(synthgen.SynthConfig(n_subjects=3, minutes=8, snr_db=-28.0,
                                                   mode="nonlinear", seed=3))
subjects = {}
for k, r in enumerate(raw):
    eeg, env = sigproc.preprocess(Waveform(r.eeg, 64), Waveform(r.envelope, 64))
    rec = Recording(r.subject_id, r.recording_id, eeg.samples, env.samples, 64)
    subjects[r.subject_id] = dataio.build_dataset([rec], rng=k)

pooled = dataio.Dataset.merge(list(subjects.values()))
linear = baseline.fit_baseline(pooled)
print(f"decoder ridge {linear.decoder.ridge:.3g}, threshold {linear.threshold.threshold:.3f}")

net = training.run_scenario("SI", subjects, NetworkConfig(), TrainConfig(max_epochs=8))
for row, (sid, data) in zip(net.report.rows, subjects.items()):
    pairs = data.pairs("test")
    labels = np.array([p.label for p in pairs])
    lin_acc = np.mean(linear.predict(data, pairs) == labels)
    print(f"{sid}: linear {lin_acc:.3f}  network {row.accuracy:.3f}  ({row.n_segments} segments)")
