"""Eviction-scoring network: a small fully connected net trained to predict
normalized next-use distances per expert from [recency || frequency] features.

Three weight matrices (2E -> hidden -> hidden -> E) with SiLU after each
hidden layer and a linear output. Forward, backward, and the AdamW optimizer
are implemented here directly in numpy (float64 throughout) so gradients can
be validated against finite differences.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

HIDDEN_SIZE = 128
NUM_LINEAR_LAYERS = 3
ACTIVATION = "silu"
CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"EVNET\n"

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


class NetError(Exception):
    pass


class ShapeMismatchError(NetError):
    pass


class EmptyDatasetError(NetError):
    pass


class NonFiniteLossError(NetError):
    pass


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(z: np.ndarray) -> np.ndarray:
    return z * _sigmoid(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


class EvictionNet:
    """Per-layer scorer. Input length 2E, output length E (one score per expert)."""

    def __init__(self, num_experts: int, hidden: int = HIDDEN_SIZE, seed: int = 0,
                 zero_init: bool = False):
        self.num_experts = num_experts
        self.hidden = hidden
        in_dim = 2 * num_experts
        if zero_init:
            def init(rows, cols):
                return np.zeros((rows, cols))
            def init_b(rows, cols):
                return np.zeros(rows)
        else:
            rng = np.random.default_rng(seed)
            def init(rows, cols):
                bound = 1.0 / np.sqrt(cols)
                return rng.uniform(-bound, bound, size=(rows, cols))
            def init_b(rows, cols):
                bound = 1.0 / np.sqrt(cols)
                return rng.uniform(-bound, bound, size=rows)
        self.params: dict[str, np.ndarray] = {
            "w1": init(hidden, in_dim), "b1": init_b(hidden, in_dim),
            "w2": init(hidden, hidden), "b2": init_b(hidden, hidden),
            "w3": init(num_experts, hidden), "b3": init_b(num_experts, hidden),
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != 2 * self.num_experts:
            raise ShapeMismatchError(
                f"feature length {x.shape[-1]} != 2*num_experts ({2 * self.num_experts})"
            )
        single = x.ndim == 1
        out = self._forward_cached(np.atleast_2d(x))[-1]
        return out[0] if single else out

    def _forward_cached(self, x: np.ndarray):
        p = self.params
        z1 = x @ p["w1"].T + p["b1"]
        h1 = silu(z1)
        z2 = h1 @ p["w2"].T + p["b2"]
        h2 = silu(z2)
        out = h2 @ p["w3"].T + p["b3"]
        return x, z1, h1, z2, h2, out

    def backward(self, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss wrt all parameters, given dLoss/dOutput."""
        x, z1, h1, z2, h2, _ = cache
        p = self.params
        grads = {
            "w3": d_out.T @ h2,
            "b3": d_out.sum(axis=0),
        }
        d_h2 = d_out @ p["w3"]
        d_z2 = d_h2 * silu_grad(z2)
        grads["w2"] = d_z2.T @ h1
        grads["b2"] = d_z2.sum(axis=0)
        d_h1 = d_z2 @ p["w2"]
        d_z1 = d_h1 * silu_grad(z1)
        grads["w1"] = d_z1.T @ x
        grads["b1"] = d_z1.sum(axis=0)
        return grads

    def clone(self) -> "EvictionNet":
        other = EvictionNet(self.num_experts, self.hidden, zero_init=True)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over masked positions only; 0.0 if nothing is masked."""
    m = mask.astype(np.float64)
    denom = m.sum()
    if denom == 0:
        return 0.0
    return float((m * (pred - target) ** 2).sum() / denom)


def masked_mse_grad(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = mask.astype(np.float64)
    denom = m.sum()
    if denom == 0:
        return np.zeros_like(pred)
    return 2.0 * m * (pred - target) / denom


class AdamW:
    """Decoupled-weight-decay Adam, applied to every parameter."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 weight_decay: float = 1e-2, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / b1c
            v_hat = self.v[k] / b2c
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 200
    patience: int = 10
    batch_size: int = 256
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class TrainResult:
    net: EvictionNet
    train_mse: list[float]
    val_mse: list[float]
    best_epoch: int
    stopped_epoch: int


def train_eviction_net(
    net: EvictionNet,
    features: np.ndarray,
    targets: np.ndarray,
    masks: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train in place against masked MSE; returns the best-validation checkpoint.

    The train/validation split is by sample (step) order: the last
    val_fraction of samples validate. Mini-batches are shuffled per epoch with
    a seeded RNG; early stopping monitors validation masked-MSE with the
    configured patience and restores the best epoch's parameters.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n = features.shape[0]
    if n == 0:
        raise EmptyDatasetError("training dataset is empty")
    if features.shape[1] != 2 * net.num_experts:
        raise ShapeMismatchError(
            f"feature length {features.shape[1]} != 2*num_experts ({2 * net.num_experts})"
        )

    n_val = int(round(n * cfg.val_fraction))
    n_train = n - n_val
    if n_train == 0:
        n_train, n_val = n, 0
    train_x, val_x = features[:n_train], features[n_train:]
    train_y, val_y = targets[:n_train], targets[n_train:]
    train_m, val_m = masks[:n_train], masks[n_train:]

    opt = AdamW(net.params, cfg.learning_rate, cfg.weight_decay, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)

    def evaluate(x, y, m) -> float:
        if x.shape[0] == 0:
            return 0.0
        return masked_mse(net.forward(x), y, m)

    train_hist: list[float] = []
    val_hist: list[float] = []
    best_val = np.inf
    best_params = {k: v.copy() for k, v in net.params.items()}
    best_epoch = 0
    since_best = 0
    stopped = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            cache = net._forward_cached(train_x[idx])
            pred = cache[-1]
            loss = masked_mse(pred, train_y[idx], train_m[idx])
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {start}"
                )
            grads = net.backward(cache, masked_mse_grad(pred, train_y[idx], train_m[idx]))
            opt.step(net.params, grads)

        train_hist.append(evaluate(train_x, train_y, train_m))
        # no held-out samples: monitor the training loss instead
        val_loss = evaluate(val_x, val_y, val_m) if n_val > 0 else train_hist[-1]
        val_hist.append(val_loss)
        stopped = epoch
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in net.params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    net.params = best_params
    return TrainResult(net, train_hist, val_hist, best_epoch, stopped)


# --- checkpoint container ---------------------------------------------------
#
# Single file: magic, one JSON header line (format version, shape, activation,
# dtype, parameter shapes in order), then raw little-endian float64 arrays,
# row-major, in header order. Plain enough to stay byte-stable across runs.


def save_net(net: EvictionNet, path) -> int:
    """Write a checkpoint; returns the serialized size in bytes."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "num_experts": net.num_experts,
        "hidden_size": net.hidden,
        "num_linear_layers": NUM_LINEAR_LAYERS,
        "activation": ACTIVATION,
        "dtype": "<f8",
        "params": [[name, list(net.params[name].shape)] for name in PARAM_NAMES],
    }
    blob = _MAGIC + (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")
    for name in PARAM_NAMES:
        blob += np.ascontiguousarray(net.params[name], dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_net(path, num_experts: Optional[int] = None) -> EvictionNet:
    """Load a checkpoint; raises ShapeMismatchError if num_experts disagrees."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise NetError(f"{path}: not an eviction-net checkpoint")
    header_end = blob.index(b"\n", len(_MAGIC))
    header = json.loads(blob[len(_MAGIC) : header_end].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise NetError(f"unsupported checkpoint format version {header.get('format_version')}")
    if num_experts is not None and header["num_experts"] != num_experts:
        raise ShapeMismatchError(
            f"checkpoint was trained for num_experts={header['num_experts']}, "
            f"expected {num_experts}"
        )
    net = EvictionNet(header["num_experts"], header["hidden_size"], zero_init=True)
    offset = header_end + 1
    for name, shape in header["params"]:
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob[offset : offset + size], dtype="<f8").reshape(shape)
        net.params[name] = arr.astype(np.float64).reshape(shape)
        offset += size
    if offset != len(blob):
        raise NetError(f"{path}: trailing bytes after parameter arrays")
    return net
