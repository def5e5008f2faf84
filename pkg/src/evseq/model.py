"""Recurrent next-step predictor: embedding, GRU cell, sigmoid output head.

Plain numpy, float64 throughout.  A model is a dict of named parameter
arrays plus per-parameter Adam moments; gradients mirror the parameter
dict.  Parameters are grouped (embedding / cell / output) so the optimizer
can update a subset while freezing the rest, which online adaptation
relies on: with only the output group selected, the hidden trajectory of
an adapted clone is identical to the source model's.

Conventions:
    v_t = W_emb @ y_t
    z_t = sigmoid(W_z [v_t; h_{t-1}] + b_z)
    r_t = sigmoid(W_r [v_t; h_{t-1}] + b_r)
    c_t = tanh(W_h [v_t; r_t * h_{t-1}] + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t
    yhat_{t+1} = sigmoid(W_o h_t + b_o)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NonFiniteError, TooShortError, VersionError
from .events import EventSequence

# Probability clamp for loss evaluation.
PROB_EPS = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PARAM_NAMES = ("w_emb", "w_z", "w_r", "w_h", "b_z", "b_r", "b_h", "w_o", "b_o")

PARAM_GROUPS = {
    "embedding": ("w_emb",),
    "cell": ("w_z", "w_r", "w_h", "b_z", "b_r", "b_h"),
    "output": ("w_o", "b_o"),
}

GROUP_ORDER = ("embedding", "cell", "output")

MODEL_MAGIC = b"EVSQMDL1"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    n_input: int
    n_target: int
    embed_dim: int = 16
    hidden_dim: int = 64
    learning_rate: float = 0.005
    l2_weight: float = 1e-5
    rng_seed: int = 0

    def validate(self) -> None:
        for name in ("n_input", "n_target", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")


class ModelState:
    """Parameters plus optimizer state.  Use init_model to construct."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.opt_m = {k: np.zeros_like(v) for k, v in params.items()}
        self.opt_v = {k: np.zeros_like(v) for k, v in params.items()}
        self.opt_steps = {g: 0 for g in GROUP_ORDER}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, h = config.embed_dim, config.hidden_dim
    cat = e + h
    return {
        "w_emb": (e, config.n_input),
        "w_z": (h, cat),
        "w_r": (h, cat),
        "w_h": (h, cat),
        "b_z": (h,),
        "b_r": (h,),
        "b_h": (h,),
        "w_o": (config.n_target, h),
        "b_o": (config.n_target,),
    }


def init_model(config: ModelConfig) -> ModelState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelState(config, params)


def zero_hidden(model: ModelState) -> np.ndarray:
    return np.zeros(model.config.hidden_dim)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def cell_step(model: ModelState, h_prev: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One recurrent step; returns the new hidden state."""
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("non-finite input vector")
    p = model.params
    v = p["w_emb"] @ y
    a = np.concatenate([v, h_prev])
    u_z = p["w_z"] @ a + p["b_z"]
    u_r = p["w_r"] @ a + p["b_r"]
    z = _sigmoid(u_z)
    r = _sigmoid(u_r)
    ar = np.concatenate([v, r * h_prev])
    u_h = p["w_h"] @ ar + p["b_h"]
    # Pre-activation checks: inf parameters would otherwise saturate
    # through tanh/sigmoid and slip by unnoticed.
    if not (
        np.all(np.isfinite(u_z))
        and np.all(np.isfinite(u_r))
        and np.all(np.isfinite(u_h))
    ):
        raise NonFiniteError("non-finite cell pre-activation (check parameters)")
    h = (1.0 - z) * h_prev + z * np.tanh(u_h)
    return h


def head_forward(model: ModelState, h: np.ndarray) -> np.ndarray:
    """Output probabilities from hidden state(s); h may be (H,) or (n, H)."""
    logits = h @ model.params["w_o"].T + model.params["b_o"]
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite output logits (check parameters)")
    return _sigmoid(logits)


def forward_step(
    model: ModelState, h_prev: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    h = cell_step(model, h_prev, y)
    return h, head_forward(model, h)


def unroll(model: ModelState, inputs: np.ndarray) -> np.ndarray:
    """Hidden states for every row of inputs, starting from zeros."""
    h = zero_hidden(model)
    states = np.empty((inputs.shape[0], model.config.hidden_dim))
    for t in range(inputs.shape[0]):
        h = cell_step(model, h, inputs[t])
        states[t] = h
    return states


def bce(y_true: np.ndarray, y_hat: np.ndarray) -> float:
    """Summed binary cross-entropy; probabilities clamped to
    [PROB_EPS, 1-PROB_EPS] before the logs."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_true.shape != y_hat.shape:
        raise ValueError("bce: shape mismatch")
    return float(np.sum(bce_components(y_true, y_hat)))


def bce_components(y_true: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    """Per-component binary cross-entropy terms."""
    p = np.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    return -(y_true * np.log(p) + (1.0 - y_true) * np.log(1.0 - p))


def sequence_loss(
    model: ModelState, seq: EventSequence, weights: np.ndarray | None = None
) -> float:
    """Sum over supervised steps of (optionally weighted) BCE."""
    preds, targets, w = _sequence_forward(model, seq, weights)
    per_step = np.array(
        [bce(targets[t], preds[t]) for t in range(targets.shape[0])]
    )
    return float(np.sum(w * per_step))


def _sequence_forward(model, seq, weights):
    n_sup = len(seq) - 1
    if n_sup < 1:
        raise TooShortError(
            f"patient {seq.patient_id}: need length >= 2, got {len(seq)}"
        )
    if weights is None:
        w = np.ones(n_sup)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n_sup,):
            raise ValueError(f"weights shape {w.shape} != ({n_sup},)")
    states = unroll(model, seq.inputs[:n_sup])
    preds = head_forward(model, states)
    return preds, seq.targets, w


def l2_penalty(model: ModelState, l2_weight: float) -> float:
    if l2_weight == 0.0:
        return 0.0
    return l2_weight * sum(float(np.sum(p * p)) for p in model.params.values())


def backward(
    model: ModelState,
    seq: EventSequence,
    weights: np.ndarray | None = None,
    l2_weight: float | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients of sequence_loss plus, when l2_weight > 0,
    the penalty l2 * sum(theta^2).  l2_weight defaults to the model config.

    The clamp in bce guards only the log evaluation; gradients use the
    exact sigmoid-BCE composite form (yhat - y) on the output logits.
    """
    if l2_weight is None:
        l2_weight = model.config.l2_weight
    p = model.params
    n_sup = len(seq) - 1
    if n_sup < 1:
        raise TooShortError(
            f"patient {seq.patient_id}: need length >= 2, got {len(seq)}"
        )
    if weights is None:
        w = np.ones(n_sup)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n_sup,):
            raise ValueError(f"weights shape {w.shape} != ({n_sup},)")

    e_dim = model.config.embed_dim
    # Forward pass, caching per-step intermediates.
    h_prev = zero_hidden(model)
    cache = []
    loss = 0.0
    for t in range(n_sup):
        x = seq.inputs[t]
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite input vector")
        v = p["w_emb"] @ x
        a = np.concatenate([v, h_prev])
        z = _sigmoid(p["w_z"] @ a + p["b_z"])
        r = _sigmoid(p["w_r"] @ a + p["b_r"])
        ar = np.concatenate([v, r * h_prev])
        c = np.tanh(p["w_h"] @ ar + p["b_h"])
        h = (1.0 - z) * h_prev + z * c
        yhat = _sigmoid(p["w_o"] @ h + p["b_o"])
        if not np.all(np.isfinite(h)):
            raise NonFiniteError("non-finite hidden state (check parameters)")
        loss += w[t] * bce(seq.targets[t], yhat)
        cache.append((x, h_prev, a, z, r, ar, c, h, yhat))
        h_prev = h

    grads = {k: np.zeros_like(v_) for k, v_ in p.items()}
    dh_next = np.zeros(model.config.hidden_dim)
    for t in range(n_sup - 1, -1, -1):
        x, h_prev, a, z, r, ar, c, h, yhat = cache[t]
        dlogit = w[t] * (yhat - seq.targets[t])
        grads["w_o"] += np.outer(dlogit, h)
        grads["b_o"] += dlogit
        dh = p["w_o"].T @ dlogit + dh_next

        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)

        du_h = dc * (1.0 - c * c)
        grads["w_h"] += np.outer(du_h, ar)
        grads["b_h"] += du_h
        dar = p["w_h"].T @ du_h
        dv = dar[:e_dim].copy()
        drh = dar[e_dim:]
        dr = drh * h_prev
        dh_prev += drh * r

        du_r = dr * r * (1.0 - r)
        grads["w_r"] += np.outer(du_r, a)
        grads["b_r"] += du_r
        du_z = dz * z * (1.0 - z)
        grads["w_z"] += np.outer(du_z, a)
        grads["b_z"] += du_z

        da = p["w_r"].T @ du_r + p["w_z"].T @ du_z
        dv += da[:e_dim]
        dh_prev += da[e_dim:]
        grads["w_emb"] += np.outer(dv, x)
        dh_next = dh_prev

    if l2_weight > 0.0:
        loss += l2_penalty(model, l2_weight)
        for name in PARAM_NAMES:
            grads[name] += 2.0 * l2_weight * p[name]
    return loss, grads


def head_backward(
    model: ModelState,
    hidden: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients of applying the output head directly to stored
    hidden states; only the output group receives non-zero gradients."""
    hidden = np.atleast_2d(hidden)
    targets = np.atleast_2d(targets)
    n = hidden.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    preds = head_forward(model, hidden)
    per_row = bce_components(targets, preds).sum(axis=1)
    loss = float(np.sum(w * per_row))
    dlogits = w[:, None] * (preds - targets)
    grads = {k: np.zeros_like(v_) for k, v_ in model.params.items()}
    grads["w_o"] = dlogits.T @ hidden
    grads["b_o"] = dlogits.sum(axis=0)
    return loss, grads


def add_grads(
    acc: dict[str, np.ndarray], other: dict[str, np.ndarray], coef: float = 1.0
) -> dict[str, np.ndarray]:
    for k in acc:
        acc[k] += coef * other[k]
    return acc


def grad_global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_global_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> dict[str, np.ndarray]:
    norm = grad_global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def optimizer_step(
    model: ModelState,
    grads: dict[str, np.ndarray],
    mask: frozenset[str] | set[str] | None = None,
    lr: float | None = None,
) -> None:
    """One Adam update over the selected parameter groups.

    Each group keeps its own step counter so bias correction stays exact
    when a group is updated only sometimes; unselected groups' parameters
    and moments are untouched.
    """
    groups = set(PARAM_GROUPS) if mask is None else set(mask)
    unknown = groups - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    if lr is None:
        lr = model.config.learning_rate
    for group in GROUP_ORDER:
        if group not in groups:
            continue
        model.opt_steps[group] += 1
        t = model.opt_steps[group]
        bc1 = 1.0 - ADAM_BETA1**t
        bc2 = 1.0 - ADAM_BETA2**t
        for name in PARAM_GROUPS[group]:
            g = grads[name]
            m = model.opt_m[name]
            v = model.opt_v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            model.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def reset_optimizer(model: ModelState) -> None:
    for name in PARAM_NAMES:
        model.opt_m[name][:] = 0.0
        model.opt_v[name][:] = 0.0
    model.opt_steps = {g: 0 for g in GROUP_ORDER}


def clone_model(model: ModelState) -> ModelState:
    """Deep copy sharing no mutable state with the source."""
    out = ModelState.__new__(ModelState)
    out.config = ModelConfig(**vars(model.config))
    out.params = {k: v.copy() for k, v in model.params.items()}
    out.opt_m = {k: v.copy() for k, v in model.opt_m.items()}
    out.opt_v = {k: v.copy() for k, v in model.opt_v.items()}
    out.opt_steps = dict(model.opt_steps)
    return out


def models_equal(a: ModelState, b: ModelState) -> bool:
    return all(np.array_equal(a.params[k], b.params[k]) for k in PARAM_NAMES)


# Binary container: magic, version, config block, then parameter tensors in
# PARAM_NAMES order followed by Adam moments and group step counters, all
# little-endian float64 / uint32.

_CONFIG_STRUCT = struct.Struct("<4I2dq")


def save_model(model: ModelState, path) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(
            _CONFIG_STRUCT.pack(
                cfg.n_input,
                cfg.n_target,
                cfg.embed_dim,
                cfg.hidden_dim,
                cfg.learning_rate,
                cfg.l2_weight,
                cfg.rng_seed,
            )
        )
        for name in PARAM_NAMES:
            fh.write(model.params[name].astype("<f8").tobytes())
        for bank in (model.opt_m, model.opt_v):
            for name in PARAM_NAMES:
                fh.write(bank[name].astype("<f8").tobytes())
        fh.write(struct.pack("<3Q", *(model.opt_steps[g] for g in GROUP_ORDER)))


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise VersionError(f"{path}: not a model file (bad magic)")
    off = len(MODEL_MAGIC)
    try:
        (version,) = struct.unpack_from("<I", raw, off)
        off += 4
        if version != MODEL_VERSION:
            raise VersionError(f"{path}: unsupported model format version {version}")
        n_input, n_target, e_dim, h_dim, lr, l2, seed = _CONFIG_STRUCT.unpack_from(
            raw, off
        )
        off += _CONFIG_STRUCT.size
        config = ModelConfig(n_input, n_target, e_dim, h_dim, lr, l2, seed)
        shapes = param_shapes(config)

        def take(shape):
            nonlocal off
            count = int(np.prod(shape))
            end = off + 8 * count
            if end > len(raw):
                raise FormatError(f"{path}: truncated model file")
            arr = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
            off = end
            return arr

        params = {name: take(shapes[name]) for name in PARAM_NAMES}
        model = ModelState(config, params)
        model.opt_m = {name: take(shapes[name]) for name in PARAM_NAMES}
        model.opt_v = {name: take(shapes[name]) for name in PARAM_NAMES}
        if off + 24 > len(raw):
            raise FormatError(f"{path}: truncated model file")
        steps = struct.unpack_from("<3Q", raw, off)
        off += 24
        model.opt_steps = dict(zip(GROUP_ORDER, (int(s) for s in steps)))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated model file") from exc
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in model file")
    for name in PARAM_NAMES:
        if not np.all(np.isfinite(model.params[name])):
            raise FormatError(f"{path}: non-finite parameter {name}")
    return model
