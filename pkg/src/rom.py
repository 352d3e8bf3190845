"""Snapshot reduction: POD and the two-stage POD-AE.

Layout convention: full-space data is column-per-time (dof x T); latent trajectories are
row-per-time (T x d). Encoders accept a vector or a snapshot matrix; decoders accept a vector or
a latent trajectory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as la

from .matrix_io import read_manifest, read_matrix, read_vector, write_manifest, write_matrix, write_vector
from .models import TrainConfig
from .neural import Activation, Autoencoder, DenseNetwork, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SnapshotMatrix:
    data: np.ndarray  # dof x n_state

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"Snapshot matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 2:
            raise ValueError(f"Need at least 2 snapshots, got {arr.shape[1]}")
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise ValueError(f"Non-finite snapshot entry at (dof={bad[0]}, t={bad[1]})")
        object.__setattr__(self, "data", arr)

    @property
    def dof(self) -> int:
        return self.data.shape[0]

    @property
    def n_state(self) -> int:
        return self.data.shape[1]


def _as_matrix(snapshots) -> np.ndarray:
    if isinstance(snapshots, SnapshotMatrix):
        return snapshots.data
    return SnapshotMatrix(snapshots).data


def interleaved_split(n: int, test_every: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """Every `test_every`-th index goes to test; the ones in between are training."""
    idx = np.arange(n)
    if test_every < 2:
        return idx, idx[:0]
    test = idx % test_every == test_every - 1
    return idx[~test], idx[test]


# ---------- POD ----------
@dataclass
class PodBasis:
    modes: np.ndarray  # dof x q
    singular_values: np.ndarray  # length min(dof, n_state), non-increasing
    n_state: int
    mean: Optional[np.ndarray] = None

    @property
    def q(self) -> int:
        return self.modes.shape[1]

    @property
    def dof(self) -> int:
        return self.modes.shape[0]

    def truncate(self, q: int) -> "PodBasis":
        if not 1 <= q <= self.q:
            raise ValueError(f"Cannot truncate a {self.q}-mode basis to q={q}")
        return PodBasis(self.modes[:, :q].copy(), self.singular_values, self.n_state, self.mean)

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        write_matrix(directory / "modes.txt", self.modes)
        write_vector(directory / "spectrum.txt", self.singular_values)
        if self.mean is not None:
            write_vector(directory / "mean.txt", self.mean)
        write_manifest(directory, {"kind": "pod", "dof": self.dof, "q": self.q,
                                   "n_state": self.n_state, "centered": self.mean is not None})
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "PodBasis":
        directory = Path(directory)
        man = read_manifest(directory)
        mean = read_vector(directory / "mean.txt") if man.get("centered") else None
        return cls(read_matrix(directory / "modes.txt"), read_vector(directory / "spectrum.txt"),
                   int(man["n_state"]), mean)


def _fix_signs(modes: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every mode is made positive
    pivot = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[pivot, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    return modes * signs


def _svd_route(X: np.ndarray, q: int) -> Tuple[np.ndarray, np.ndarray]:
    U, s, _ = la.svd(X, full_matrices=False)
    return U[:, :q], s


def _snapshot_route(X: np.ndarray, q: int) -> Tuple[np.ndarray, np.ndarray] | None:
    w, V = la.eigh(X.T @ X)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    s = np.sqrt(np.clip(w, 0.0, None))
    if s[q - 1] <= 1e-8 * s[0]:
        return None
    modes = (X @ V[:, :q]) / s[:q]
    # one QR pass restores orthonormality lost to the squared condition number of X^T X
    Q, R = la.qr(modes, mode="economic")
    Q *= np.sign(np.diag(R))
    return Q, s


def fit_pod(snapshots, q: int, centered: bool = False, method: str = "auto") -> PodBasis:
    X = _as_matrix(snapshots)
    dof, n_state = X.shape
    rank_cap = min(dof, n_state)
    if not 1 <= q <= rank_cap:
        raise ValueError(f"q={q} outside [1, {rank_cap}] for a {dof}x{n_state} snapshot matrix")
    if not np.any(X):
        raise ValueError("Degenerate snapshot matrix: all entries are zero")
    mean = None
    if centered:
        mean = X.mean(axis=1)
        X = X - mean[:, None]
    if method == "auto":
        method = "snapshots" if dof > 2 * n_state else "svd"
    if method not in ("svd", "snapshots"):
        raise ValueError(f"Unknown POD method {method!r}")

    result = _snapshot_route(X, q) if method == "snapshots" else None
    if method == "snapshots" and result is None:
        log.warning(f"[ROM][WARN] Gram route rank-deficient at q={q}; falling back to direct SVD")
    if result is None:
        result = _svd_route(X, q)
    modes, s = result
    basis = PodBasis(_fix_signs(modes), s[:rank_cap], n_state, mean)
    gamma, rho = compression_metrics(basis.singular_values, q, n_state)
    log.info(f"[ROM] POD ({method}): dof={dof} n_state={n_state} q={q} gamma={gamma:.6f} rho={rho:.3e}")
    return basis


def _check_width(x: np.ndarray, width: int, what: str) -> None:
    if x.shape[0] != width:
        raise ValueError(f"{what} has {x.shape[0]} entries, expected {width}")


def pod_encode(basis: PodBasis, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_width(x, basis.dof, "Full-space input")
    if basis.mean is not None:
        x = x - (basis.mean if x.ndim == 1 else basis.mean[:, None])
    coeffs = basis.modes.T @ x
    return coeffs if x.ndim == 1 else coeffs.T


def pod_decode(basis: PodBasis, x_tilde: np.ndarray) -> np.ndarray:
    x_tilde = np.asarray(x_tilde, dtype=float)
    if x_tilde.shape[-1] != basis.q:
        raise ValueError(f"Latent input has {x_tilde.shape[-1]} entries, expected {basis.q}")
    full = basis.modes @ x_tilde.T if x_tilde.ndim == 2 else basis.modes @ x_tilde
    if basis.mean is not None:
        full = full + (basis.mean if full.ndim == 1 else basis.mean[:, None])
    return full


def compression_metrics(singular_values, q: int, n_state: Optional[int] = None) -> Tuple[float, float]:
    """(gamma, rho) from POD singular values sigma.

    gamma sums lambda^2 with lambda = sigma^2 over the first q modes; rho = q / n_state.
    """
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0:
        raise ValueError("Empty singular value spectrum")
    if not 1 <= q <= s.size:
        raise ValueError(f"q={q} outside [1, {s.size}]")
    lam_sq = (s ** 2) ** 2
    total = lam_sq.sum()
    if total == 0:
        raise ValueError("All-zero spectrum")
    n = n_state if n_state is not None else s.size
    return float(lam_sq[:q].sum() / total), q / n


def reconstruction_error(basis: PodBasis, snapshots) -> float:
    X = _as_matrix(snapshots)
    return float(np.linalg.norm(X - pod_decode(basis, pod_encode(basis, X)), "fro"))


# ---------- POD-AE ----------
@dataclass
class PodAeModel:
    basis: PodBasis  # truncated at q'
    encoder: DenseNetwork
    decoder: DenseNetwork
    history: List[float] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        qp = self.basis.q
        if self.encoder.in_dim != qp:
            raise ValueError(f"Encoder input width {self.encoder.in_dim} != q'={qp}")
        if self.decoder.out_dim != qp:
            raise ValueError(f"Decoder output width {self.decoder.out_dim} != q'={qp}")
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValueError(f"Encoder output {self.encoder.out_dim} != decoder input {self.decoder.in_dim}")

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def q_prime(self) -> int:
        return self.basis.q

    @property
    def dof(self) -> int:
        return self.basis.dof

    def coefficients(self, x: np.ndarray) -> np.ndarray:
        """POD coefficients L^T x (rows per time step for a snapshot matrix)."""
        return pod_encode(self.basis, x)

    def decode_coefficients(self, x_tilde: np.ndarray) -> np.ndarray:
        """D'(x_tilde): reconstructed POD coefficients."""
        x_tilde = np.asarray(x_tilde, dtype=float)
        if x_tilde.shape[-1] != self.latent_dim:
            raise ValueError(f"Latent input has {x_tilde.shape[-1]} entries, expected {self.latent_dim}")
        return self.decoder.forward(x_tilde)

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward(self.coefficients(x))

    def decode(self, x_tilde: np.ndarray) -> np.ndarray:
        return pod_decode(self.basis, self.decode_coefficients(x_tilde))

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        self.basis.save(directory / "basis")
        self.encoder.save(directory / "encoder")
        self.decoder.save(directory / "decoder")
        if self.history:
            write_vector(directory / "history.txt", np.asarray(self.history))
        write_manifest(directory, {"kind": "pod_ae", "dof": self.dof, "q_prime": self.q_prime,
                                   "latent_dim": self.latent_dim, "seed": self.seed,
                                   "encoder_activations": [str(l.activation) for l in self.encoder.layers],
                                   "decoder_activations": [str(l.activation) for l in self.decoder.layers]})
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "PodAeModel":
        directory = Path(directory)
        man = read_manifest(directory)
        hist_path = directory / "history.txt"
        history = read_vector(hist_path).tolist() if hist_path.exists() else []
        return cls(PodBasis.load(directory / "basis"), DenseNetwork.load(directory / "encoder"),
                   DenseNetwork.load(directory / "decoder"), history, int(man.get("seed", 0)))


def pod_ae_encode(model: PodAeModel, x: np.ndarray) -> np.ndarray:
    return model.encode(x)


def pod_ae_decode(model: PodAeModel, x_tilde: np.ndarray) -> np.ndarray:
    return model.decode(x_tilde)


def fit_pod_ae(snapshots, q_prime: Optional[int], latent_dim: int, train_config: TrainConfig,
               hidden: Optional[int] = 128, activation: Activation = Activation("leaky_relu", 0.3),
               tag: str = "[ROM]") -> PodAeModel:
    """POD truncation at q' followed by a dense autoencoder trained on the POD coefficients.

    Default architecture q' -> hidden -> latent -> hidden -> q', every layer with `activation`.
    `hidden=None` gives single-layer encoder/decoder.
    """
    X = _as_matrix(snapshots)
    cap = min(X.shape)
    q_prime = cap if q_prime is None else q_prime
    if not 1 <= q_prime <= cap:
        raise ValueError(f"q'={q_prime} outside [1, {cap}]")
    if not 1 <= latent_dim <= q_prime:
        raise ValueError(f"latent_dim={latent_dim} must lie in [1, q'={q_prime}]")

    basis = fit_pod(X, q_prime)
    coeffs = pod_encode(basis, X)  # n_state x q'
    enc_widths = [q_prime, latent_dim] if hidden is None else [q_prime, hidden, latent_dim]
    dec_widths = enc_widths[::-1]
    n_layers = len(enc_widths) - 1
    encoder = DenseNetwork.init(enc_widths, [activation] * n_layers, seed=train_config.seed)
    decoder = DenseNetwork.init(dec_widths, [activation] * n_layers, seed=train_config.seed + 1)
    log.info(f"{tag} POD-AE: {' -> '.join(map(str, enc_widths + dec_widths[1:]))} ({activation})")

    result = train(Autoencoder(encoder, decoder), (coeffs, coeffs), train_config, tag=tag)
    ae = result.model
    return PodAeModel(basis, ae.encoder, ae.decoder, result.history, train_config.seed)
