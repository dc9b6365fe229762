"""Small dense networks, Adam, PCA, and resumable checkpoints.

Everything here is plain numpy on purpose: the models are a few hundred
thousand parameters at most, full-batch training is deterministic, and a
checkpoint can be reloaded to continue bit-for-bit.  Hidden layers are tanh,
the output layer is linear, parameters are float32; verification oracles
should shadow in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .rotation import ROT6D_ORDER

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DAXM"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NeuralError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    """Loss or activations became non-finite during training."""


@dataclass
class MLP:
    weights: list
    biases: list

    @property
    def layer_sizes(self) -> list:
        sizes = [self.weights[0].shape[0]]
        sizes.extend(w.shape[1] for w in self.weights)
        return sizes

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(layer_sizes, rng, dtype=np.float32) -> MLP:
    """Xavier-uniform init, limit sqrt(6 / (fan_in + fan_out))."""
    if len(layer_sizes) < 2:
        raise NeuralError("need at least an input and an output layer")
    if any(int(s) < 1 for s in layer_sizes):
        raise NeuralError(f"layer sizes must be positive, got {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MLP(weights, biases)


def _check_input(net: MLP, x: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(x)
    want = net.weights[0].shape[0]
    if h.shape[1] != want:
        raise NeuralError(f"input width {h.shape[1]} does not match layer width {want}")
    if not np.isfinite(h).all():
        raise NeuralError("non-finite network input")
    return h


def forward(net: MLP, x: np.ndarray) -> np.ndarray:
    """Batch forward pass; accepts (D,) or (B, D)."""
    single = x.ndim == 1
    h = _check_input(net, np.asarray(x, dtype=net.weights[0].dtype))
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i != last:
            h = np.tanh(h)
    return h[0] if single else h


def _forward_cached(net: MLP, x: np.ndarray):
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i != last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def loss_and_grads(net: MLP, x: np.ndarray, y: np.ndarray):
    """Mean-squared error over every output element, with analytic gradients
    in the same order as ``net.parameters()``."""
    dtype = net.weights[0].dtype
    x = _check_input(net, np.asarray(x, dtype=dtype))
    y = np.atleast_2d(np.asarray(y, dtype=dtype))
    acts = _forward_cached(net, x)
    pred = acts[-1]
    diff = pred - y
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        for i, a in enumerate(acts[1:]):
            if not np.isfinite(a).all():
                raise DivergenceError(f"non-finite activations after layer {i}")
        raise DivergenceError("non-finite loss")
    # d(mean(diff^2)) / d(pred)
    delta = (2.0 / diff.size) * diff
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = acts[i]
        grads[2 * i] = a_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, grads


def mse(net: MLP, x: np.ndarray, y: np.ndarray) -> float:
    pred = forward(net, np.atleast_2d(x))
    diff = pred.astype(np.float64) - np.atleast_2d(y)
    return float(np.mean(diff ** 2))


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_net(cls, net: MLP) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.parameters()],
                   [np.zeros_like(p) for p in net.parameters()])


def adam_step(net: MLP, opt: AdamState, grads, lr: float) -> None:
    opt.step += 1
    t = opt.step
    params = net.parameters()
    dtype = params[0].dtype
    b1 = dtype.type(ADAM_BETA1)
    b2 = dtype.type(ADAM_BETA2)
    bias1 = dtype.type(1.0 - ADAM_BETA1 ** t)
    bias2 = dtype.type(1.0 - ADAM_BETA2 ** t)
    lr = dtype.type(lr)
    eps = dtype.type(ADAM_EPS)
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        g = g.astype(dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


# --- training --------------------------------------------------------------


@dataclass
class TrainState:
    net: MLP
    opt: AdamState
    rng: np.random.Generator
    lr: float
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_val: float = float("inf")


def make_train_state(layer_sizes, seed, lr: float = 1e-3) -> TrainState:
    rng = np.random.default_rng(seed)
    net = init_mlp(layer_sizes, rng)
    return TrainState(net, AdamState.for_net(net), rng, lr)


def train(state: TrainState, x: np.ndarray, y: np.ndarray, epochs: int,
          val=None, callback=None, log_every: int = 0) -> list:
    """Full-batch gradient descent with Adam.  Deterministic: same state and
    data give the same parameters bit for bit.  ``val`` is an optional
    (inputs, targets) pair evaluated each epoch.  ``callback(epoch, loss)``
    runs after each epoch and may return True to stop early.  Returns the
    loss values appended to the state's history."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    new_losses = []
    for _ in range(epochs):
        loss, grads = loss_and_grads(state.net, x, y)
        adam_step(state.net, state.opt, grads, state.lr)
        state.epoch += 1
        state.loss_history.append(loss)
        new_losses.append(loss)
        if val is not None:
            vloss = mse(state.net, val[0], val[1])
            state.val_history.append(vloss)
            state.best_val = min(state.best_val, vloss)
        if log_every and state.epoch % log_every == 0:
            logger.info("epoch %d loss %.6e", state.epoch, loss)
        if callback is not None and callback(state.epoch, loss):
            break
    return new_losses


def train_resumable(layer_sizes, x, y, epochs: int, lr: float, seed,
                    checkpoint_path=None, checkpoint_every: int = 0,
                    resume: bool = False, val=None) -> TrainState:
    """Train to a fixed epoch count with periodic checkpoints.

    With resume=True and an existing checkpoint, training continues from the
    saved state; because the loop is deterministic, the result is bitwise
    identical to an uninterrupted run.  On divergence the last checkpoint is
    left in place.
    """
    path = Path(checkpoint_path) if checkpoint_path else None
    state = None
    if resume and path is not None and path.exists():
        state = load_checkpoint(path)
        if state.net.layer_sizes != [int(s) for s in layer_sizes]:
            raise NeuralError(
                f"checkpoint {path} has layers {state.net.layer_sizes}, "
                f"expected {list(layer_sizes)}")
    if state is None:
        state = make_train_state(layer_sizes, seed, lr)
    while state.epoch < epochs:
        remaining = epochs - state.epoch
        chunk = min(remaining, checkpoint_every) if checkpoint_every else remaining
        train(state, x, y, chunk, val=val)
        if path is not None:
            save_checkpoint(state, path)
    if path is not None and not path.exists():
        save_checkpoint(state, path)
    return state


# --- checkpoints -----------------------------------------------------------


def _rng_state_to_meta(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise NeuralError(f"unsupported generator {st['bit_generator']!r}")
    return {
        "bit_generator": "PCG64",
        "state": format(st["state"]["state"], "x"),
        "inc": format(st["state"]["inc"], "x"),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_state_from_meta(meta: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["state"], 16), "inc": int(meta["inc"], 16)},
        "has_uint32": int(meta["has_uint32"]),
        "uinteger": int(meta["uinteger"]),
    }
    return rng


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "kind": "train-state",
        "layer_sizes": [int(s) for s in state.net.layer_sizes],
        "epoch": int(state.epoch),
        "adam_step": int(state.opt.step),
        "lr": float(state.lr),
        "best_val": float(state.best_val),
        "rot6d_order": ROT6D_ORDER,
        "rng": _rng_state_to_meta(state.rng),
    }
    arrays = {}
    for i, (w, b) in enumerate(zip(state.net.weights, state.net.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    for i, (m, v) in enumerate(zip(state.opt.m, state.opt.v)):
        arrays[f"adam_m{i}"] = m
        arrays[f"adam_v{i}"] = v
    arrays["loss_history"] = np.asarray(state.loss_history, dtype=np.float64)
    arrays["val_history"] = np.asarray(state.val_history, dtype=np.float64)
    write_container(path, CHECKPOINT_MAGIC, meta, arrays)


def load_checkpoint(path) -> TrainState:
    meta, arrays = read_container(path, CHECKPOINT_MAGIC)
    sizes = meta["layer_sizes"]
    n_layers = len(sizes) - 1
    weights = [arrays[f"w{i}"] for i in range(n_layers)]
    biases = [arrays[f"b{i}"] for i in range(n_layers)]
    net = MLP(weights, biases)
    opt = AdamState(
        [arrays[f"adam_m{i}"] for i in range(2 * n_layers)],
        [arrays[f"adam_v{i}"] for i in range(2 * n_layers)],
        step=int(meta["adam_step"]),
    )
    return TrainState(
        net, opt, _rng_state_from_meta(meta["rng"]), float(meta["lr"]),
        epoch=int(meta["epoch"]),
        loss_history=[float(v) for v in arrays["loss_history"]],
        val_history=[float(v) for v in arrays["val_history"]],
        best_val=float(meta["best_val"]),
    )


# --- principal components --------------------------------------------------


@dataclass
class PCABasis:
    mean: np.ndarray             # (D,)
    components: np.ndarray       # (k, D), orthonormal rows
    singular_values: np.ndarray  # (k,), decreasing

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(x: np.ndarray, variance: float = 0.999,
            max_components: int = 128) -> PCABasis:
    """Mean-centered SVD in float64.  Keeps the smallest component count
    whose cumulative squared singular values reach ``variance``, capped at
    ``max_components``; pass variance=1.0 with a cap for a fixed k.
    Component signs are fixed so the largest-magnitude entry of each
    direction is positive."""
    if not 0.0 < variance <= 1.0:
        raise NeuralError(f"variance fraction must be in (0, 1], got {variance}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise NeuralError(f"pca input must be 2d, got shape {x.shape}")
    if x.shape[0] < 2:
        raise NeuralError("pca needs at least 2 rows")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    power = s ** 2
    total = power.sum()
    if total <= 0.0:
        k = 0
    else:
        frac = np.cumsum(power) / total
        k = int(np.searchsorted(frac, variance - 1e-12) + 1)
        k = min(k, max_components, vt.shape[0])
    components = vt[:k].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    kept = float(power[:k].sum() / total) if total > 0 else 1.0
    logger.info("pca kept %d of %d components (%.4f%% variance)",
                k, vt.shape[0], 100.0 * kept)
    return PCABasis(mean, components, s[:k].copy())


def pca_project(basis: PCABasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    coeffs = (np.atleast_2d(x) - basis.mean) @ basis.components.T
    return coeffs[0] if single else coeffs


def pca_reconstruct(basis: PCABasis, coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    single = coeffs.ndim == 1
    out = np.atleast_2d(coeffs) @ basis.components + basis.mean
    return out[0] if single else out
