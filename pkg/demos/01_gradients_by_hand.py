"""Check the autodiff engine against finite differences on a tiny network.

The tape records every operation in the forward pass; ``backward`` walks it
in reverse.  Central differences give an independent estimate to compare
against, one coordinate at a time.

    python3 demos/01_gradients_by_hand.py
"""

import numpy as np

from envtrack import model
from envtrack.model import NetworkConfig
from envtrack.ndcore import finite_diff_check

cfg = NetworkConfig(window_samples=46, eeg_channels=4, conv_filters=3, dense1_units=4,
                    embed_dim=4, lstm_hidden=4)
rng = np.random.default_rng(0)
params = model.build_network(cfg)
# small random biases keep embedding columns clear of the zero vector
params = {k: v + 0.1 * rng.standard_normal(v.shape) if v.ndim == 1 else v for k, v in params.items()}
names = sorted(params)

eeg = rng.standard_normal((2, 4, 46))
env = rng.standard_normal((2, 1, 46))
labels = np.array([1, 0])

err = finite_diff_check(
    lambda p: model.forward_loss(dict(zip(names, p)), cfg, eeg, env, labels),
    [params[n] for n in names])
print(f"{model.count_parameters(params)} parameters, max relative gradient error {err:.2e}")
