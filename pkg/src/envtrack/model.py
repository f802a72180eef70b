"""Dual-path match/mismatch network.

EEG path: strided conv -> time-distributed dense (relu) -> time-distributed
dense (linear) -> unit-length columns.  Envelope path: strided conv -> LSTM
-> unit-length columns.  The two embedding sequences are compared step by
step with a dot product and scored with per-step binary cross entropy.

All forward functions accept either a single segment (``(channels, T)``)
or a batch (``(batch, channels, T)``); embeddings come out as
``(embed_dim, steps)`` or ``(batch, embed_dim, steps)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from envtrack import ndcore
from envtrack.ndcore import Tensor, as_tensor

PROB_CLAMP = 1e-7
GATES = ("i", "f", "c", "o")

EEG_PATH = ("eeg_conv", "eeg_dense1", "eeg_dense2")
ENV_PATH = ("env_conv", "lstm")


@dataclass(frozen=True)
class NetworkConfig:
    window_samples: int = 640
    eeg_channels: int = 64
    conv_kernel: int = 10
    conv_stride: int = 3
    conv_filters: int = 8
    dense1_units: int = 16
    embed_dim: int = 16
    lstm_hidden: int = 16
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.conv_kernel > self.window_samples:
            raise ValueError("conv_kernel exceeds window_samples")
        if self.lstm_hidden != self.embed_dim:
            raise ValueError(
                f"lstm_hidden ({self.lstm_hidden}) must equal embed_dim ({self.embed_dim})"
            )

    @property
    def steps(self) -> int:
        return ndcore.conv_output_length(self.window_samples, self.conv_kernel, self.conv_stride)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    F, K, H = cfg.conv_filters, cfg.conv_kernel, cfg.lstm_hidden
    shapes = {
        "eeg_conv.W": (F, cfg.eeg_channels, K),
        "eeg_conv.b": (F,),
        "eeg_dense1.W": (F, cfg.dense1_units),
        "eeg_dense1.b": (cfg.dense1_units,),
        "eeg_dense2.W": (cfg.dense1_units, cfg.embed_dim),
        "eeg_dense2.b": (cfg.embed_dim,),
        "env_conv.W": (F, 1, K),
        "env_conv.b": (F,),
    }
    for g in GATES:
        shapes[f"lstm.W_{g}"] = (F, H)
    for g in GATES:
        shapes[f"lstm.U_{g}"] = (H, H)
    for g in GATES:
        shapes[f"lstm.b_{g}"] = (H,)
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 3:  # conv (c_out, c_in, K)
        return shape[1] * shape[2], shape[0] * shape[2]
    return shape[0], shape[1]


def build_network(cfg: NetworkConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            fill = 1.0 if name == "lstm.b_f" else 0.0
            params[name] = np.full(shape, fill)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def count_parameters(params) -> int:
    return int(sum(np.asarray(p.data if isinstance(p, Tensor) else p).size
                   for p in params.values()))


def path_of(name: str) -> str:
    """'eeg' or 'env' for a parameter name."""
    layer = name.split(".")[0]
    if layer in EEG_PATH:
        return "eeg"
    if layer in ENV_PATH:
        return "env"
    raise KeyError(name)


def as_tensors(params, trainable=None) -> dict[str, Tensor]:
    """Wrap arrays as tensors; names in ``trainable`` (all if None) track gradients."""
    out = {}
    for name, value in params.items():
        if isinstance(value, Tensor):
            out[name] = value
        else:
            out[name] = Tensor(value, requires_grad=trainable is None or name in trainable)
    return out


def _batched(x, channels: int, what: str) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        x = ndcore.custom_op("unsqueeze", x.data[None], (x,), lambda g: (g[0],))
        single = True
    elif x.ndim == 3:
        single = False
    else:
        raise ValueError(f"{what} input must be 2-D or 3-D, got shape {x.shape}")
    if x.shape[-2] != channels:
        raise ValueError(f"{what} input has {x.shape[-2]} channels, expected {channels}")
    return x, single


def _squeeze(t: Tensor, single: bool) -> Tensor:
    if not single or t.ndim == 2:
        return t
    return ndcore.custom_op("squeeze", t.data[0], (t,), lambda g: (g[None],))


def eeg_path_forward(eeg, params, cfg: NetworkConfig) -> Tensor:
    p = as_tensors(params)
    x, single = _batched(eeg, cfg.eeg_channels, "EEG")
    h = ndcore.conv1d(x, p["eeg_conv.W"], p["eeg_conv.b"], cfg.conv_stride)
    h = ndcore.transpose(h)  # (batch, steps, filters)
    h = ndcore.activation(ndcore.matmul(h, p["eeg_dense1.W"]) + p["eeg_dense1.b"], "relu")
    h = ndcore.matmul(h, p["eeg_dense2.W"]) + p["eeg_dense2.b"]
    return _squeeze(ndcore.unit_normalize_columns(ndcore.transpose(h)), single)


def lstm_forward(x, params, h0=None, c0=None) -> Tensor:
    """Run an LSTM over ``x`` of shape ``(steps, in)`` or ``(batch, steps, in)``.

    Gates follow the usual recurrence::

        i, f, o = sigmoid(x W + h U + b)
        c~      = tanh(x W_c + h U_c + b_c)
        c       = f * c_prev + i * c~
        h       = o * tanh(c)

    The whole sequence is a single tape node; its backward pass is explicit
    backpropagation through time.  ``h0``/``c0`` are constants (no gradient).
    """
    p = as_tensors(params)
    x = as_tensor(x)
    single = x.ndim == 2
    X = x.data[None] if single else x.data
    B, T, _ = X.shape
    H = p["lstm.U_i"].shape[0]

    W = np.concatenate([p[f"lstm.W_{g}"].data for g in GATES], axis=1)
    U = np.concatenate([p[f"lstm.U_{g}"].data for g in GATES], axis=1)
    bias = np.concatenate([p[f"lstm.b_{g}"].data for g in GATES])
    if X.shape[-1] != W.shape[0]:
        raise ValueError(f"LSTM input size {X.shape[-1]} != {W.shape[0]}")

    h_prev = np.zeros((B, H)) if h0 is None else np.broadcast_to(h0, (B, H)).astype(float)
    c_prev = np.zeros((B, H)) if c0 is None else np.broadcast_to(c0, (B, H)).astype(float)
    h_init, c_init = h_prev, c_prev

    # time-major storage keeps per-step slices contiguous
    XW = np.swapaxes(X @ W + bias, 0, 1)  # (T, B, 4H)
    gates = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    sig = ndcore._sigmoid
    for t in range(T):
        z = XW[t] + h_prev @ U
        g = gates[t]
        g[:, :2 * H] = sig(z[:, :2 * H])
        g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        g[:, 3 * H:] = sig(z[:, 3 * H:])
        c_prev = g[:, H:2 * H] * c_prev + g[:, :H] * g[:, 2 * H:3 * H]
        h_prev = g[:, 3 * H:] * np.tanh(c_prev)
        cells[t], hs[t] = c_prev, h_prev

    names_w = [f"lstm.W_{g}" for g in GATES]
    names_u = [f"lstm.U_{g}" for g in GATES]
    names_b = [f"lstm.b_{g}" for g in GATES]
    inputs = [x] + [p[n] for n in names_w + names_u + names_b]

    def grad(g_out):
        gH = np.swapaxes(g_out[None] if single else g_out, 0, 1)
        gi, gf = gates[..., :H], gates[..., H:2 * H]
        gc, go = gates[..., 2 * H:3 * H], gates[..., 3 * H:]
        c_before = np.concatenate([c_init[None], cells[:-1]], axis=0)
        tc = np.tanh(cells)
        # local derivatives, vectorised over time
        dc_dh = go * (1.0 - tc * tc)
        dz_dc = np.concatenate(
            [gc * gi * (1.0 - gi), c_before * gf * (1.0 - gf), gi * (1.0 - gc * gc)], axis=-1
        )
        dzo_dh = tc * go * (1.0 - go)
        dZ = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        UT = U.T.copy()
        for t in range(T - 1, -1, -1):
            dh = gH[t] + dh_next
            dc = dh * dc_dh[t] + dc_next
            dz = dZ[t]
            dz[:, :3 * H] = np.tile(dc, 3) * dz_dc[t]
            dz[:, 3 * H:] = dh * dzo_dh[t]
            dc_next = dc * gf[t]
            dh_next = dz @ UT
        h_before = np.concatenate([h_init[None], hs[:-1]], axis=0)
        flat_dz = dZ.reshape(-1, 4 * H)
        dW = np.swapaxes(X, 0, 1).reshape(-1, X.shape[-1]).T @ flat_dz
        dU = h_before.reshape(-1, H).T @ flat_dz
        db = flat_dz.sum(axis=0)
        dx = np.swapaxes(dZ, 0, 1) @ W.T if x.requires_grad else None
        if single and dx is not None:
            dx = dx[0]
        split = lambda m: [m[..., k * H:(k + 1) * H] for k in range(4)]
        return [dx] + split(dW) + split(dU) + split(db)

    hs_out = np.swapaxes(hs, 0, 1)
    return ndcore.custom_op("lstm", hs_out[0] if single else np.ascontiguousarray(hs_out), inputs, grad)


def env_path_forward(env, params, cfg: NetworkConfig) -> Tensor:
    p = as_tensors(params)
    x, single = _batched(env, 1, "envelope")
    h = ndcore.conv1d(x, p["env_conv.W"], p["env_conv.b"], cfg.conv_stride)
    h = lstm_forward(ndcore.transpose(h), p)
    return _squeeze(ndcore.unit_normalize_columns(ndcore.transpose(h)), single)


def similarity_scores(a: Tensor, b: Tensor) -> Tensor:
    """Per-step dot product of two unit-column embedding sequences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return ndcore.total(a * b, axis=-2)


def match_probability(scores: Tensor) -> Tensor:
    """Map scores in [-1, 1] to clamped probabilities (1 + s) / 2."""
    return ndcore.clip(as_tensor(scores) * 0.5 + 0.5, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(scores: Tensor, label) -> Tensor:
    """Mean per-step binary cross entropy.

    ``label`` is 1 (matched) or 0 (mismatched); for batched scores of shape
    ``(batch, steps)`` it may be a length-``batch`` array.
    """
    scores = as_tensor(scores)
    y = np.asarray(label, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    p = match_probability(scores)
    ll = ndcore.log(p) * y + ndcore.log(1.0 - p) * (1.0 - y)
    return -ndcore.mean(ll)


def forward_loss(params, cfg: NetworkConfig, eeg, env, labels) -> Tensor:
    a = eeg_path_forward(eeg, params, cfg)
    b = env_path_forward(env, params, cfg)
    return bce_loss(similarity_scores(a, b), labels)


def decide(scores) -> tuple[bool, float]:
    """Segment decision from per-step scores: (matched, mean probability).

    A mean probability of exactly 0.5 counts as matched.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=float)
    if s.size == 0:
        raise ValueError("cannot decide on an empty score sequence")
    conf = float(np.mean(np.clip((1.0 + s) / 2.0, PROB_CLAMP, 1.0 - PROB_CLAMP)))
    return conf >= 0.5, conf


def predict(params, cfg: NetworkConfig, eeg: np.ndarray, env: np.ndarray) -> np.ndarray:
    """Batched match probabilities for ``(batch, C, T)`` / ``(batch, 1, T)`` windows."""
    consts = {k: Tensor(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    s = similarity_scores(eeg_path_forward(eeg, consts, cfg), env_path_forward(env, consts, cfg))
    return match_probability(s).data.mean(axis=-1)
