"""Sequence-to-sequence incremental LSTM surrogate of the latent dynamics.

Wiring (repeat-then-unroll): an encoder LSTM reads the l_input latent states; its final hidden
state is repeated as the input of every decoder step; a time-distributed dense head maps each
decoder hidden state to a latent increment. Predicted increments are summed onto the last input
state. The network works on standardised inputs and scaled increments; the scalers are part of
the model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.preprocessing import StandardScaler

from .matrix_io import read_manifest, read_vector, write_manifest, write_vector
from .models import TrainConfig
from .neural import Activation, DenseNetwork, LstmCell, train

log = logging.getLogger(__name__)


# ---------- joint latent layout ----------
@dataclass(frozen=True)
class LatentLayout:
    names: Tuple[str, ...]
    dims: Tuple[int, ...]

    @property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.dims)[:-1]]))

    @property
    def total(self) -> int:
        return int(sum(self.dims))

    def block(self, name: str) -> slice:
        if name not in self.names:
            raise KeyError(f"No latent block named {name!r} (have {list(self.names)})")
        k = self.names.index(name)
        return slice(self.offsets[k], self.offsets[k] + self.dims[k])

    def to_dict(self) -> Dict[str, list]:
        return {"names": list(self.names), "dims": list(self.dims), "offsets": list(self.offsets)}


def concat_latents(parts: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, LatentLayout]:
    names = tuple(parts)
    arrays = [np.atleast_2d(np.asarray(parts[n], dtype=float)) for n in names]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"Latent trajectories have different lengths: {sorted(lengths)}")
    return np.concatenate(arrays, axis=1), LatentLayout(names, tuple(a.shape[1] for a in arrays))


def split_latents(joint: np.ndarray, layout: LatentLayout) -> Dict[str, np.ndarray]:
    if joint.shape[-1] != layout.total:
        raise ValueError(f"Joint latent width {joint.shape[-1]} != layout total {layout.total}")
    return {n: joint[..., o:o + d] for n, o, d in zip(layout.names, layout.offsets, layout.dims)}


# ---------- windows ----------
@dataclass
class WindowedDataset:
    inputs: np.ndarray  # N x l_input x d (absolute states)
    targets: np.ndarray  # N x l_output x d (increments)

    def __len__(self) -> int:
        return len(self.inputs)

    def true_states(self) -> np.ndarray:
        return self.inputs[:, -1:, :] + np.cumsum(self.targets, axis=1)


def make_windows(series: np.ndarray, l_input: int, l_output: int) -> WindowedDataset:
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if l_input < 1 or l_output < 1:
        raise ValueError(f"Window lengths must be >= 1, got {l_input}/{l_output}")
    n = x.shape[0] - l_input - l_output + 1
    if n < 1:
        raise ValueError(f"Series of length {x.shape[0]} too short for windows {l_input}->{l_output}")
    inc = np.diff(x, axis=0)  # inc[t] = x[t+1] - x[t]
    inputs = np.stack([x[k:k + l_input] for k in range(n)])
    targets = np.stack([inc[k + l_input - 1:k + l_input - 1 + l_output] for k in range(n)])
    return WindowedDataset(inputs, targets)


def split_windows(ds: WindowedDataset, test_every: int = 5) -> Tuple[WindowedDataset, WindowedDataset]:
    idx = np.arange(len(ds))
    test = idx % test_every == test_every - 1 if test_every >= 2 else np.zeros(len(ds), bool)
    return (WindowedDataset(ds.inputs[~test], ds.targets[~test]),
            WindowedDataset(ds.inputs[test], ds.targets[test]))


# ---------- model ----------
@dataclass
class Seq2SeqForecaster:
    encoder_cell: LstmCell
    decoder_cell: LstmCell
    head: DenseNetwork
    l_input: int
    l_output: int
    input_mean: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    increment_scale: Optional[np.ndarray] = None
    layout: Optional[LatentLayout] = None
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        d = self.head.out_dim
        if self.l_input < 1 or self.l_output < 1:
            raise ValueError(f"Window lengths must be >= 1, got {self.l_input}/{self.l_output}")
        if self.encoder_cell.input_dim != d:
            raise ValueError(f"Encoder input width {self.encoder_cell.input_dim} != head output width {d}")
        if self.decoder_cell.input_dim != self.encoder_cell.hidden_dim:
            raise ValueError("Decoder input width must equal encoder hidden width (repeated context)")
        if self.head.in_dim != self.decoder_cell.hidden_dim:
            raise ValueError(f"Head input width {self.head.in_dim} != decoder hidden width")
        self.input_mean = np.zeros(d) if self.input_mean is None else np.asarray(self.input_mean, float)
        self.input_scale = np.ones(d) if self.input_scale is None else np.asarray(self.input_scale, float)
        self.increment_scale = (np.ones(d) if self.increment_scale is None
                                else np.asarray(self.increment_scale, float))
        if self.layout is not None and self.layout.total != d:
            raise ValueError(f"Layout total {self.layout.total} != latent width {d}")

    @classmethod
    def init(cls, latent_dim: int, l_input: int, l_output: int, enc_hidden: int = 32,
             dec_hidden: int = 32, head_hidden: Optional[int] = 64, seed: int = 0) -> "Seq2SeqForecaster":
        enc = LstmCell.init(latent_dim, enc_hidden, seed=seed)
        dec = LstmCell.init(enc_hidden, dec_hidden, seed=seed + 1)
        if head_hidden:
            head = DenseNetwork.init([dec_hidden, head_hidden, latent_dim],
                                     [Activation("leaky_relu", 0.3), Activation("linear")], seed=seed + 2)
        else:
            head = DenseNetwork.init([dec_hidden, latent_dim], [Activation("linear")], seed=seed + 2)
        return cls(enc, dec, head, l_input, l_output)

    @property
    def latent_dim(self) -> int:
        return self.head.out_dim

    def parameters(self) -> Dict[str, np.ndarray]:
        return {**self.encoder_cell.parameters("encoder_cell."),
                **self.decoder_cell.parameters("decoder_cell."),
                **self.head.parameters("head.")}

    # scaled-space network ------------------------------------------------
    def _forward(self, u: np.ndarray):
        B = u.shape[0]
        if u.ndim != 3 or u.shape[1] != self.l_input or u.shape[2] != self.latent_dim:
            raise ValueError(f"Expected windows of shape (B, {self.l_input}, {self.latent_dim}), got {u.shape}")
        h = np.zeros((B, self.encoder_cell.hidden_dim))
        C = np.zeros_like(h)
        enc_caches = []
        for t in range(self.l_input):
            h, C, cache = self.encoder_cell.step(h, C, u[:, t])
            enc_caches.append(cache)
        context = h
        hd = np.zeros((B, self.decoder_cell.hidden_dim))
        Cd = np.zeros_like(hd)
        dec_caches, head_caches, outs = [], [], []
        for _ in range(self.l_output):
            hd, Cd, cache = self.decoder_cell.step(hd, Cd, context)
            hc = self.head.forward_cache(hd)
            dec_caches.append(cache)
            head_caches.append(hc)
            outs.append(hc[-1][1])
        return np.stack(outs, axis=1), (enc_caches, dec_caches, head_caches)

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        out, _ = self._forward(np.asarray(inputs, dtype=float))
        return float(np.mean((out - targets) ** 2))

    def loss_and_gradients(self, inputs: np.ndarray, targets: np.ndarray):
        out, (enc_caches, dec_caches, head_caches) = self._forward(np.asarray(inputs, dtype=float))
        resid = out - targets
        dout = 2.0 * resid / resid.size
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}

        def acc(part: Dict[str, np.ndarray]) -> None:
            for k, g in part.items():
                grads[k] += g

        B = out.shape[0]
        d_context = np.zeros((B, self.encoder_cell.hidden_dim))
        dh_next = np.zeros((B, self.decoder_cell.hidden_dim))
        dC_next = np.zeros_like(dh_next)
        for j in range(self.l_output - 1, -1, -1):
            g_head, dh_head = self.head.backward(head_caches[j], dout[:, j], "head.")
            acc(g_head)
            g_dec, dh_next, dC_next, dx = self.decoder_cell.step_backward(
                dec_caches[j], dh_head + dh_next, dC_next, "decoder_cell.")
            acc(g_dec)
            d_context += dx
        dh, dC = d_context, np.zeros_like(d_context)
        for t in range(self.l_input - 1, -1, -1):
            g_enc, dh, dC, _ = self.encoder_cell.step_backward(enc_caches[t], dh, dC, "encoder_cell.")
            acc(g_enc)
        return float(np.mean(resid ** 2)), grads

    # scaling ---------------------------------------------------------------
    def scale_inputs(self, windows: np.ndarray) -> np.ndarray:
        return (windows - self.input_mean) / self.input_scale

    def scale_increments(self, increments: np.ndarray) -> np.ndarray:
        return increments / self.increment_scale

    # persistence -----------------------------------------------------------
    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        self.encoder_cell.save(directory / "encoder_cell")
        self.decoder_cell.save(directory / "decoder_cell")
        self.head.save(directory / "head")
        write_vector(directory / "input_mean.txt", self.input_mean)
        write_vector(directory / "input_scale.txt", self.input_scale)
        write_vector(directory / "increment_scale.txt", self.increment_scale)
        if self.history:
            write_vector(directory / "history.txt", np.asarray(self.history))
        write_manifest(directory, {
            "kind": "seq2seq_lstm",
            "l_input": self.l_input,
            "l_output": self.l_output,
            "latent_dim": self.latent_dim,
            "layout": self.layout.to_dict() if self.layout else None,
        })
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "Seq2SeqForecaster":
        directory = Path(directory)
        man = read_manifest(directory)
        lay = man.get("layout")
        layout = LatentLayout(tuple(lay["names"]), tuple(int(d) for d in lay["dims"])) if lay else None
        hist = directory / "history.txt"
        return cls(
            LstmCell.load(directory / "encoder_cell"),
            LstmCell.load(directory / "decoder_cell"),
            DenseNetwork.load(directory / "head"),
            int(man["l_input"]), int(man["l_output"]),
            read_vector(directory / "input_mean.txt"),
            read_vector(directory / "input_scale.txt"),
            read_vector(directory / "increment_scale.txt"),
            layout,
            read_vector(hist).tolist() if hist.exists() else [],
        )


# ---------- prediction ----------
def predict_increments(model: Seq2SeqForecaster, windows: np.ndarray) -> np.ndarray:
    """Raw (unscaled) head increments for a batch of windows (B, l_input, d) or one window."""
    w = np.asarray(windows, dtype=float)
    single = w.ndim == 2
    if single:
        w = w[None]
    if w.shape[1] != model.l_input:
        raise ValueError(f"Window length {w.shape[1]} != l_input {model.l_input}")
    if w.shape[2] != model.latent_dim:
        raise ValueError(f"Latent width {w.shape[2]} != model latent width {model.latent_dim}")
    out, _ = model._forward(model.scale_inputs(w))
    inc = out * model.increment_scale
    return inc[0] if single else inc


def predict_window(model: Seq2SeqForecaster, window: np.ndarray) -> np.ndarray:
    w = np.asarray(window, dtype=float)
    inc = predict_increments(model, w)
    return w[..., -1:, :] + np.cumsum(inc, axis=-2)


def rollout(model: Seq2SeqForecaster, warmup: np.ndarray, horizon: int) -> np.ndarray:
    """Autoregressive continuation: chains windows fed with the model's own last l_input states."""
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    traj = np.asarray(warmup, dtype=float)
    if traj.ndim != 2 or traj.shape[0] < model.l_input:
        raise ValueError(f"Warmup needs at least l_input={model.l_input} states, got shape {traj.shape}")
    generated: List[np.ndarray] = []
    produced = 0
    while produced < horizon:
        pred = predict_window(model, traj[-model.l_input:])
        generated.append(pred)
        traj = np.concatenate([traj, pred], axis=0)
        produced += pred.shape[0]
    return np.concatenate(generated, axis=0)[:horizon]


def window_rmse(model: Seq2SeqForecaster, ds: WindowedDataset) -> float:
    pred = predict_window(model, ds.inputs)
    return float(np.sqrt(np.mean((pred - ds.true_states()) ** 2)))


def persistence_rmse(ds: WindowedDataset) -> float:
    truth = ds.true_states()
    return float(np.sqrt(np.mean((truth - ds.inputs[:, -1:, :]) ** 2)))


def fit_forecaster(series: np.ndarray, l_input: int, l_output: int, train_config: TrainConfig,
                   enc_hidden: int = 32, dec_hidden: int = 32, head_hidden: Optional[int] = 64,
                   test_every: int = 5, layout: Optional[LatentLayout] = None) -> Seq2SeqForecaster:
    """Window the latent series, fit scalers on the training windows, train the seq2seq model."""
    series = np.asarray(series, dtype=float)
    ds = make_windows(series, l_input, l_output)
    train_ds, test_ds = split_windows(ds, test_every)
    d = series.shape[1]
    log.info(f"[LSTM] windows: total={len(ds)} train={len(train_ds)} test={len(test_ds)} "
             f"l_input={l_input} l_output={l_output} latent={d}")

    in_scaler = StandardScaler().fit(train_ds.inputs.reshape(-1, d))
    inc_scaler = StandardScaler(with_mean=False).fit(train_ds.targets.reshape(-1, d))
    model = Seq2SeqForecaster.init(d, l_input, l_output, enc_hidden, dec_hidden, head_hidden,
                                   seed=train_config.seed)
    model.input_mean = in_scaler.mean_.copy()
    model.input_scale = in_scaler.scale_.copy()
    model.increment_scale = inc_scaler.scale_.copy()
    model.layout = layout

    result = train(model, (model.scale_inputs(train_ds.inputs), model.scale_increments(train_ds.targets)),
                   train_config, tag="[LSTM]")
    fitted: Seq2SeqForecaster = result.model
    fitted.history = result.history
    if len(test_ds):
        log.info(f"[LSTM] held-out window RMSE={window_rmse(fitted, test_ds):.4e} "
                 f"(persistence {persistence_rmse(test_ds):.4e})")
    return fitted
