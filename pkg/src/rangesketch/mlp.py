"""Minimal fully-connected ReLU regressor with hand-rolled backprop and Adam.

Hidden layers use ReLU (subgradient 0 at exactly 0), the output layer is a
single linear unit.  Weights are float64 in memory; the serialized blob
stores float32, so models meant to round-trip exactly are quantized first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, TrainingError
from .queries import TrainingSet


class MLP:
    """Layer dims [d_in, w_1, ..., w_k, 1]; weights[l] has shape (out, in)."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be parallel, nonempty lists")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError("bias shape must match weight rows")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have exactly one unit")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def quantize(self) -> "MLP":
        """Round parameters through float32 so blob serialization is exact."""
        return MLP(
            [w.astype(np.float32).astype(np.float64) for w in self.weights],
            [b.astype(np.float32).astype(np.float64) for b in self.biases],
        )

    def forward(self, x: np.ndarray) -> float:
        """Single d-vector in, scalar out."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape != (self.input_dim,):
            raise ValueError(f"expected input of dim {self.input_dim}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w @ h + b
            if i != last:
                np.maximum(h, 0.0, out=h)
        return float(h[0])

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """(m, d) in, (m,) out."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i != last:
                np.maximum(h, 0.0, out=h)
        return h[:, 0]


def new_mlp(
    d: int,
    n_layers: int,
    first_width: int,
    rest_width: int,
    seed: int,
    zero_init: bool = False,
) -> MLP:
    """He-initialized network: [d, first, rest.., 1] with n_layers weight layers."""
    if n_layers < 2:
        raise ValueError("need at least 2 layers (one hidden, one output)")
    if first_width < 1 or rest_width < 1:
        raise ValueError("layer widths must be at least 1")
    dims = [d, first_width] + [rest_width] * (n_layers - 2) + [1]
    return mlp_from_dims(dims, seed, zero_init=zero_init)


def mlp_from_dims(dims: list[int], seed: int, zero_init: bool = False) -> MLP:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if zero_init:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def mse_loss(model: MLP, x: np.ndarray, y: np.ndarray) -> float:
    pred = model.forward_batch(x)
    return float(np.mean((pred - y) ** 2))


def backward(model: MLP, x: np.ndarray, y: np.ndarray):
    """Gradient of mean squared error over the batch w.r.t. all parameters.

    Returns (loss, weight_grads, bias_grads) with grads shaped like the model.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("batch must be nonempty")
    last = len(model.weights) - 1
    acts = [x]
    pre = []
    h = x
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i != last else z
        acts.append(h)
    resid = acts[-1][:, 0] - y
    loss = float(np.mean(resid**2))
    m = len(x)
    delta = (2.0 / m) * resid[:, None]
    w_grads = [None] * len(model.weights)
    b_grads = [None] * len(model.biases)
    for i in range(last, -1, -1):
        w_grads[i] = delta.T @ acts[i]
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (pre[i - 1] > 0.0)
    return loss, w_grads, b_grads


@dataclass
class TrainConfig:
    batch: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class AdamState:
    step: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)

    @staticmethod
    def for_model(model: MLP) -> "AdamState":
        return AdamState(
            step=0,
            m_w=[np.zeros_like(w) for w in model.weights],
            v_w=[np.zeros_like(w) for w in model.weights],
            m_b=[np.zeros_like(b) for b in model.biases],
            v_b=[np.zeros_like(b) for b in model.biases],
        )


def adam_step(model: MLP, state: AdamState, w_grads, b_grads, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for i in range(len(model.weights)):
        for param, grad, m, v in (
            (model.weights[i], w_grads[i], state.m_w[i], state.v_w[i]),
            (model.biases[i], b_grads[i], state.m_b[i], state.v_b[i]),
        ):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad**2
            param -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


def train_adam(
    model: MLP, ts: TrainingSet, cfg: TrainConfig | None = None
) -> tuple[MLP, list[tuple[float, float]]]:
    """Minibatch Adam on standardized labels with early stopping.

    Labels are standardized by the training set's (mean, std) before
    optimization; callers de-standardize predictions at inference.  A 10%
    holdout tracks validation MSE each epoch; training stops when the best
    validation MSE has not improved for `patience` epochs and the model at
    the best checkpoint is returned, along with the per-epoch
    (train_mse, val_mse) history.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    x = ts.queries
    y = (ts.answers - ts.label_mean) / ts.label_std
    m = len(y)
    order = rng.permutation(m)
    n_val = max(1, int(round(cfg.val_fraction * m))) if m > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if len(train_idx) == 0:
        train_idx = order
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]
    batch = min(cfg.batch, len(train_idx))

    model = model.copy()
    state = AdamState.for_model(model)
    best = model.copy()
    best_val = np.inf
    stall = 0
    history: list[tuple[float, float]] = []
    for _ in range(cfg.max_epochs):
        perm = rng.permutation(len(x_train))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), batch):
            idx = perm[start : start + batch]
            loss, w_grads, b_grads = backward(model, x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    "non-finite training loss; try a lower learning rate"
                )
            adam_step(model, state, w_grads, b_grads, cfg)
            epoch_loss += loss
            n_batches += 1
        val = mse_loss(model, x_val, y_val) if n_val else epoch_loss / n_batches
        if not np.isfinite(val):
            raise TrainingError("non-finite validation loss; try a lower learning rate")
        history.append((epoch_loss / n_batches, val))
        if val < best_val:
            best_val = val
            best = model.copy()
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    return best, history


# --- float32 weight blob ---------------------------------------------------

def write_blob(model: MLP) -> bytes:
    """Layer count u16, dims u16 each, then per layer weights row-major + biases, f32 LE."""
    dims = model.layer_dims
    parts = [struct.pack("<H", len(dims))]
    parts += [struct.pack("<H", d) for d in dims]
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


def read_blob(buf: bytes, offset: int = 0) -> tuple[MLP, int]:
    """Parse a blob written by write_blob; returns (model, next offset)."""
    try:
        (n_dims,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        dims = list(struct.unpack_from(f"<{n_dims}H", buf, offset))
        offset += 2 * n_dims
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(buf, dtype="<f4", count=fan_in * fan_out, offset=offset)
            offset += 4 * fan_in * fan_out
            b = np.frombuffer(buf, dtype="<f4", count=fan_out, offset=offset)
            offset += 4 * fan_out
            weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
            biases.append(b.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated or malformed model blob: {exc}") from None
    return MLP(weights, biases), offset
