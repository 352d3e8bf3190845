"""Dense + LSTM network core with exact backpropagation (numpy, float64).

Batches are row-major: a dense input batch is (batch, width); sequences are (batch, time, width).
Every trainable model exposes `parameters()` (name -> live array) and
`loss_and_gradients(inputs, targets)`; the MSE loss is the mean over batch AND output components.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from .errors import NonFiniteError, TrainingDivergedError
from .matrix_io import read_manifest, read_matrix, read_vector, write_manifest, write_matrix, write_vector
from .models import TrainConfig

log = logging.getLogger(__name__)

ACTIVATION_KINDS = ("linear", "relu", "leaky_relu", "sigmoid", "tanh")


# ---------- activations ----------
@dataclass(frozen=True)
class Activation:
    kind: str = "linear"
    slope: float = 0.3  # only used by leaky_relu

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"Unknown activation '{self.kind}' (expected one of {ACTIVATION_KINDS})")
        if self.kind == "leaky_relu" and not (0.0 < self.slope < 1.0):
            raise ValueError(f"LeakyReLU slope must lie in (0, 1), got {self.slope}")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return z.copy()
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "leaky_relu":
            return np.where(z > 0.0, z, self.slope * z)
        if self.kind == "sigmoid":
            return expit(z)
        return np.tanh(z)

    def derivative(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """d a / d z, given pre-activation z and activation a."""
        if self.kind == "linear":
            return np.ones_like(z)
        if self.kind == "relu":
            return (z > 0.0).astype(float)
        if self.kind == "leaky_relu":
            return np.where(z > 0.0, 1.0, self.slope)
        if self.kind == "sigmoid":
            return a * (1.0 - a)
        return 1.0 - a * a

    def __str__(self) -> str:
        return f"leaky_relu:{self.slope!r}" if self.kind == "leaky_relu" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Activation":
        text = text.strip().lower()
        if text.startswith("leaky_relu"):
            _, _, slope = text.partition(":")
            return cls("leaky_relu", float(slope) if slope else 0.3)
        return cls(text)


LINEAR = Activation("linear")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# ---------- dense network ----------
@dataclass
class DenseLayer:
    weights: np.ndarray  # out x in
    bias: np.ndarray  # out
    activation: Activation = LINEAR

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class DenseNetwork:
    layers: List[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("DenseNetwork needs at least one layer")
        for i, layer in enumerate(self.layers):
            layer.weights = np.asarray(layer.weights, dtype=float)
            layer.bias = np.asarray(layer.bias, dtype=float).reshape(-1)
            if layer.bias.shape != (layer.out_dim,):
                raise ValueError(f"Layer {i}: bias width {layer.bias.size} != out width {layer.out_dim}")
            if i and layer.in_dim != self.layers[i - 1].out_dim:
                raise ValueError(
                    f"Layer {i}: input width {layer.in_dim} does not chain with "
                    f"previous output width {self.layers[i - 1].out_dim}"
                )
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"Layer {i}: non-finite parameters")

    @classmethod
    def init(cls, widths: Sequence[int], activations: Sequence[Activation], seed: int = 0) -> "DenseNetwork":
        if len(activations) != len(widths) - 1:
            raise ValueError(f"{len(widths) - 1} layers need {len(widths) - 1} activations, got {len(activations)}")
        rng = np.random.default_rng(seed)
        layers = [
            DenseLayer(glorot_uniform(rng, widths[k + 1], widths[k]), np.zeros(widths[k + 1]), activations[k])
            for k in range(len(widths) - 1)
        ]
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def parameters(self, prefix: str = "") -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            params[f"{prefix}layers.{i}.weights"] = layer.weights
            params[f"{prefix}layers.{i}.bias"] = layer.bias
        return params

    # forward ------------------------------------------------------------
    def forward_cache(self, x: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Returns [(input, None)] + [(z_k, a_k)] for every layer, on a 2-D batch."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"Input width {x.shape[-1]} does not match network input width {self.in_dim}")
        cache: List[Tuple[np.ndarray, np.ndarray]] = [(x, x)]
        a = x
        for i, layer in enumerate(self.layers):
            z = a @ layer.weights.T + layer.bias
            a = layer.activation(z)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(i)
            cache.append((z, a))
        return cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = self.forward_cache(x.reshape(1, -1) if single else x)[-1][1]
        return out[0] if single else out

    __call__ = forward

    # backward -----------------------------------------------------------
    def backward(self, cache, grad_out: np.ndarray, prefix: str = "") -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        da = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            z, a = cache[i + 1]
            a_prev = cache[i][1]
            dz = da * layer.activation.derivative(z, a)
            grads[f"{prefix}layers.{i}.weights"] = dz.T @ a_prev
            grads[f"{prefix}layers.{i}.bias"] = dz.sum(axis=0)
            da = dz @ layer.weights
            if not np.all(np.isfinite(da)):
                raise NonFiniteError(i, "backward")
        return grads, da

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        out = self.forward_cache(np.asarray(inputs, dtype=float))[-1][1]
        return float(np.mean((out - targets) ** 2))

    def loss_and_gradients(self, inputs: np.ndarray, targets: np.ndarray):
        cache = self.forward_cache(np.asarray(inputs, dtype=float))
        resid = cache[-1][1] - targets
        grads, _ = self.backward(cache, 2.0 * resid / resid.size)
        return float(np.mean(resid ** 2)), grads

    # persistence --------------------------------------------------------
    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        for i, layer in enumerate(self.layers):
            write_matrix(directory / f"layer_{i}_weights.txt", layer.weights)
            write_vector(directory / f"layer_{i}_bias.txt", layer.bias)
        write_manifest(directory, {
            "kind": "dense",
            "widths": self.widths,
            "activations": [str(layer.activation) for layer in self.layers],
        })
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "DenseNetwork":
        directory = Path(directory)
        man = read_manifest(directory)
        layers = [
            DenseLayer(
                read_matrix(directory / f"layer_{i}_weights.txt"),
                read_vector(directory / f"layer_{i}_bias.txt"),
                Activation.parse(act),
            )
            for i, act in enumerate(man["activations"])
        ]
        return cls(layers)


def dense_forward(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


@dataclass
class Autoencoder:
    """Encoder and decoder trained jointly on reconstruction MSE."""

    encoder: DenseNetwork
    decoder: DenseNetwork

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError(
                f"Encoder output width {self.encoder.out_dim} != decoder input width {self.decoder.in_dim}"
            )

    def parameters(self) -> Dict[str, np.ndarray]:
        return {**self.encoder.parameters("encoder."), **self.decoder.parameters("decoder.")}

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.decoder.forward(self.encoder.forward(x))

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean((self.forward(inputs) - targets) ** 2))

    def loss_and_gradients(self, inputs: np.ndarray, targets: np.ndarray):
        enc_cache = self.encoder.forward_cache(np.asarray(inputs, dtype=float))
        dec_cache = self.decoder.forward_cache(enc_cache[-1][1])
        resid = dec_cache[-1][1] - targets
        dec_grads, d_latent = self.decoder.backward(dec_cache, 2.0 * resid / resid.size, "decoder.")
        enc_grads, _ = self.encoder.backward(enc_cache, d_latent, "encoder.")
        return float(np.mean(resid ** 2)), {**enc_grads, **dec_grads}


# ---------- LSTM cell ----------
GATES = ("f", "i", "C", "o")


@dataclass
class LstmCell:
    """One LSTM cell; every gate acts on the concatenation [h_prev, x_t]."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_C: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_C: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.W_f)
        for g in GATES:
            w = np.asarray(getattr(self, f"W_{g}"), dtype=float)
            b = np.asarray(getattr(self, f"b_{g}"), dtype=float).reshape(-1)
            if w.shape != shape:
                raise ValueError(f"Gate {g}: weight shape {w.shape} != {shape}")
            if b.shape != (shape[0],):
                raise ValueError(f"Gate {g}: bias width {b.size} != hidden width {shape[0]}")
            setattr(self, f"W_{g}", w)
            setattr(self, f"b_{g}", b)
        if shape[1] <= shape[0]:
            raise ValueError(f"Gate width {shape[1]} must exceed hidden width {shape[0]} (hidden + input)")

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, seed: int = 0, forget_bias: float = 1.0) -> "LstmCell":
        rng = np.random.default_rng(seed)
        width = hidden_dim + input_dim
        ws = {f"W_{g}": glorot_uniform(rng, hidden_dim, width) for g in GATES}
        bs = {f"b_{g}": np.zeros(hidden_dim) for g in GATES}
        bs["b_f"] = np.full(hidden_dim, forget_bias)
        return cls(**ws, **bs)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmCell":
        width = hidden_dim + input_dim
        return cls(**{f"W_{g}": np.zeros((hidden_dim, width)) for g in GATES},
                   **{f"b_{g}": np.zeros(hidden_dim) for g in GATES})

    @property
    def hidden_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.hidden_dim

    def parameters(self, prefix: str = "") -> Dict[str, np.ndarray]:
        params = {f"{prefix}W_{g}": getattr(self, f"W_{g}") for g in GATES}
        params.update({f"{prefix}b_{g}": getattr(self, f"b_{g}") for g in GATES})
        return params

    def step(self, h_prev: np.ndarray, C_prev: np.ndarray, x_t: np.ndarray):
        """Batched step on (B, H), (B, H), (B, D). Returns h_t, C_t and the backward cache."""
        if h_prev.shape[-1] != self.hidden_dim or C_prev.shape[-1] != self.hidden_dim:
            raise ValueError(f"State width {h_prev.shape[-1]}/{C_prev.shape[-1]} != hidden width {self.hidden_dim}")
        if x_t.shape[-1] != self.input_dim:
            raise ValueError(f"Input width {x_t.shape[-1]} != cell input width {self.input_dim}")
        z = np.concatenate([h_prev, x_t], axis=-1)
        f = expit(z @ self.W_f.T + self.b_f)
        i = expit(z @ self.W_i.T + self.b_i)
        C_hat = np.tanh(z @ self.W_C.T + self.b_C)
        C_t = f * C_prev + i * C_hat
        o = expit(z @ self.W_o.T + self.b_o)
        tanh_C = np.tanh(C_t)
        h_t = o * tanh_C
        cache = (z, C_prev, f, i, C_hat, o, tanh_C)
        return h_t, C_t, cache

    def step_backward(self, cache, dh: np.ndarray, dC: np.ndarray, prefix: str = ""):
        """Returns (grads, dh_prev, dC_prev, dx) for one step."""
        z, C_prev, f, i, C_hat, o, tanh_C = cache
        dC_total = dC + dh * o * (1.0 - tanh_C ** 2)
        da = {
            "o": dh * tanh_C * o * (1.0 - o),
            "f": dC_total * C_prev * f * (1.0 - f),
            "i": dC_total * C_hat * i * (1.0 - i),
            "C": dC_total * i * (1.0 - C_hat ** 2),
        }
        grads: Dict[str, np.ndarray] = {}
        dz = np.zeros_like(z)
        for g in GATES:
            grads[f"{prefix}W_{g}"] = da[g].T @ z
            grads[f"{prefix}b_{g}"] = da[g].sum(axis=0)
            dz += da[g] @ getattr(self, f"W_{g}")
        H = self.hidden_dim
        return grads, dz[:, :H], dC_total * f, dz[:, H:]

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        for g in GATES:
            write_matrix(directory / f"W_{g}.txt", getattr(self, f"W_{g}"))
            write_vector(directory / f"b_{g}.txt", getattr(self, f"b_{g}"))
        write_manifest(directory, {"kind": "lstm_cell", "input_dim": self.input_dim, "hidden_dim": self.hidden_dim})
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "LstmCell":
        directory = Path(directory)
        return cls(**{f"W_{g}": read_matrix(directory / f"W_{g}.txt") for g in GATES},
                   **{f"b_{g}": read_vector(directory / f"b_{g}.txt") for g in GATES})


def lstm_cell_step(params: LstmCell, h_prev, C_prev, x_t) -> Tuple[np.ndarray, np.ndarray]:
    h_prev, C_prev, x_t = (np.asarray(v, dtype=float) for v in (h_prev, C_prev, x_t))
    single = x_t.ndim == 1
    if single:
        h_prev, C_prev, x_t = h_prev[None], C_prev[None], x_t[None]
    h_t, C_t, _ = params.step(h_prev, C_prev, x_t)
    return (h_t[0], C_t[0]) if single else (h_t, C_t)


# ---------- training ----------
class Trainable(Protocol):
    def parameters(self) -> Dict[str, np.ndarray]: ...

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float: ...

    def loss_and_gradients(self, inputs: np.ndarray, targets: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]: ...


def backprop_gradients(model: Trainable, inputs: np.ndarray, targets: np.ndarray) -> Dict[str, np.ndarray]:
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(inputs) == 0:
        raise ValueError("Empty batch")
    if len(inputs) != len(targets):
        raise ValueError(f"Batch size mismatch: {len(inputs)} inputs vs {len(targets)} targets")
    return model.loss_and_gradients(inputs, targets)[1]


def gradient_check(model: Trainable, inputs: np.ndarray, targets: np.ndarray, n_probe: int = 100,
                   step: float = 1e-5, seed: int = 0, floor: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients over random entries.

    The denominator is max(|analytic|, |numeric|, floor) so vanishing entries do not blow up.
    """
    rng = np.random.default_rng(seed)
    grads = backprop_gradients(model, inputs, targets)
    params = model.parameters()
    names = sorted(params)
    worst = 0.0
    for _ in range(n_probe):
        name = names[rng.integers(len(names))]
        arr = params[name]
        k = int(rng.integers(arr.size))
        orig = arr.flat[k]
        arr.flat[k] = orig + step
        up = model.loss(inputs, targets)
        arr.flat[k] = orig - step
        down = model.loss(inputs, targets)
        arr.flat[k] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grads[name].flat[k]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    return SGD(config.learning_rate)


def _clip(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainResult:
    model: Trainable
    history: List[float] = field(default_factory=list)


def train(model: Trainable, dataset: Tuple[np.ndarray, np.ndarray], config: TrainConfig,
          tag: str = "[NN]") -> TrainResult:
    """Mini-batch training on a copy of `model`; history holds the full-dataset loss after each epoch."""
    inputs = np.asarray(dataset[0], dtype=float)
    targets = np.asarray(dataset[1], dtype=float)
    if len(inputs) == 0:
        raise ValueError("Empty training dataset")
    if len(inputs) != len(targets):
        raise ValueError(f"Dataset size mismatch: {len(inputs)} inputs vs {len(targets)} targets")

    model = copy.deepcopy(model)
    params = model.parameters()
    opt = make_optimizer(config)
    rng = np.random.default_rng(config.seed)
    n = len(inputs)
    batch = min(config.batch_size, n)
    history: List[float] = []
    log.info(f"{tag} training: samples={n} batch={batch} epochs={config.epochs} "
             f"opt={config.optimizer} lr={config.learning_rate}")
    bar = tqdm(range(1, config.epochs + 1), desc=f"{tag} train", disable=not config.progress, leave=False)
    for epoch in bar:
        order = rng.permutation(n)
        try:
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                _, grads = model.loss_and_gradients(inputs[idx], targets[idx])
                opt.update(params, _clip(grads, config.clip_norm))
            loss = model.loss(inputs, targets)
        except NonFiniteError as e:
            raise TrainingDivergedError(epoch, float("nan")) from e
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        history.append(loss)
        if config.progress:
            bar.set_postfix(loss=f"{loss:.3e}")
        if epoch == 1 or epoch % max(1, config.epochs // 5) == 0 or epoch == config.epochs:
            log.debug(f"{tag} epoch {epoch}/{config.epochs} loss={loss:.6e}")
    log.info(f"{tag} done: final loss={history[-1]:.6e}")
    return TrainResult(model=model, history=history)
