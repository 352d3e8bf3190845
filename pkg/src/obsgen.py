"""Synthetic nonlinear observation operators and the cross-latent map H~ = E_y . H . f . D_x."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import ObservationSingularityError
from .matrix_io import read_selection, write_selection

log = logging.getLogger(__name__)

SINGULAR_TOL = 1e-9


@dataclass(frozen=True)
class SelectionMatrix:
    """Binary m x n selection operator stored as one sorted index list per observation row."""

    m: int
    n: int
    rows: Tuple[np.ndarray, ...]
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.rows) != self.m:
            raise ValueError(f"SelectionMatrix has {len(self.rows)} rows, expected m={self.m}")
        rows = []
        for j, r in enumerate(self.rows):
            r = np.unique(np.asarray(r, dtype=np.int64))
            if r.size and (r[0] < 0 or r[-1] >= self.n):
                raise ValueError(f"Row {j} selects index outside [0, {self.n})")
            rows.append(r)
        object.__setattr__(self, "rows", tuple(rows))

    @property
    def row_sizes(self) -> np.ndarray:
        return np.array([r.size for r in self.rows], dtype=np.int64)

    @property
    def selected(self) -> np.ndarray:
        """Every state index used by at least one row."""
        if not self.m:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self.rows))

    def to_sparse(self) -> sp.csr_matrix:
        indptr = np.concatenate([[0], np.cumsum(self.row_sizes)])
        indices = np.concatenate(self.rows) if self.m else np.zeros(0, dtype=np.int64)
        return sp.csr_matrix((np.ones(indices.size), indices, indptr), shape=(self.m, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def save(self, path: Path | str) -> Path:
        return write_selection(path, self.m, self.n, self.p, self.seed, self.rows)

    @classmethod
    def load(cls, path: Path | str) -> "SelectionMatrix":
        m, n, p, seed, rows = read_selection(path)
        return cls(m, n, tuple(rows), p, seed)


def sample_selection_matrix(m: int, n: int, p: float, seed: int) -> SelectionMatrix:
    """Each (row, state) pair is selected independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Selection probability must lie in [0, 1], got {p}")
    if m < 1 or n < 1:
        raise ValueError(f"m and n must be >= 1, got m={m} n={n}")
    rng = np.random.default_rng(seed)
    rows = tuple(np.flatnonzero(rng.random(n) < p) for _ in range(m))
    H = SelectionMatrix(m, n, rows, p, seed)
    sizes = H.row_sizes
    log.info(f"[OBS] selection m={m} n={n} P={p}: row sizes mean={sizes.mean():.2f} "
             f"(expected {n * p:.2f}) empty rows={int(np.sum(sizes == 0))}")
    return H


@dataclass(frozen=True)
class MarginalFn:
    kind: str = "quadratic"  # quadratic|reciprocal
    offset: float = 0.5

    def __post_init__(self):
        if self.kind not in ("quadratic", "reciprocal"):
            raise ValueError(f"Unknown marginal {self.kind!r}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            return x * x
        return 1.0 / (x + self.offset)

    def check(self, x: np.ndarray, indices: np.ndarray) -> None:
        if self.kind != "reciprocal" or indices.size == 0:
            return
        vals = x[indices]
        near = np.abs(vals + self.offset) < SINGULAR_TOL
        if np.any(near):
            pos = np.argwhere(near)[0]
            raise ObservationSingularityError(int(indices[pos[0]]), float(vals[tuple(pos)]))


def apply_full_observation(H: SelectionMatrix, f: MarginalFn, x: np.ndarray) -> np.ndarray:
    """y(j) = sum over selected i of f(x(i)); works on a state vector or an n x T snapshot matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != H.n:
        raise ValueError(f"State has {x.shape[0]} entries, selection expects n={H.n}")
    sel = H.selected
    f.check(x, sel)
    fx = np.zeros_like(x)
    fx[sel] = f(x[sel])
    return H.to_sparse() @ fx


def observe_trajectory(H: SelectionMatrix, f: MarginalFn, snapshots: np.ndarray,
                       noise_std: float = 0.0, seed: int = 0) -> np.ndarray:
    y = apply_full_observation(H, f, snapshots)
    if noise_std > 0:
        y = y + np.random.default_rng(seed).normal(0.0, noise_std, size=y.shape)
    log.info(f"[OBS] observation stream {y.shape[0]}x{y.shape[1]} ({f.kind}, noise_std={noise_std})")
    return y


# ---------- cross-latent operator ----------
class LatentEncoder(Protocol):
    dof: int
    latent_dim: int

    def encode(self, x: np.ndarray) -> np.ndarray: ...


class LatentDecoder(Protocol):
    dof: int
    latent_dim: int

    def decode(self, x_tilde: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class LatentObsOperator:
    y_encoder: LatentEncoder
    H: SelectionMatrix
    f: MarginalFn
    x_decoder: LatentDecoder

    @property
    def input_dim(self) -> int:
        return self.x_decoder.latent_dim

    @property
    def output_dim(self) -> int:
        return self.y_encoder.latent_dim

    def __call__(self, x_tilde: np.ndarray) -> np.ndarray:
        x_tilde = np.asarray(x_tilde, dtype=float)
        if x_tilde.ndim == 2:
            return self.evaluate_batch(x_tilde)
        full = self.x_decoder.decode(x_tilde)
        return self.y_encoder.encode(apply_full_observation(self.H, self.f, full))

    def evaluate_batch(self, samples: np.ndarray) -> np.ndarray:
        """H~ on every row of `samples` (N x latent) -> N x latent_obs."""
        samples = np.asarray(samples, dtype=float)
        full = self.x_decoder.decode(samples)  # dof x N
        return self.y_encoder.encode(apply_full_observation(self.H, self.f, full))


def build_latent_obs_operator(y_encoder: LatentEncoder, H: SelectionMatrix, f: MarginalFn,
                              x_decoder: LatentDecoder) -> LatentObsOperator:
    if x_decoder.dof != H.n:
        raise ValueError(f"State decoder output width {x_decoder.dof} != selection n={H.n}")
    if y_encoder.dof != H.m:
        raise ValueError(f"Observation encoder input width {y_encoder.dof} != selection m={H.m}")
    op = LatentObsOperator(y_encoder, H, f, x_decoder)
    log.info(f"[OBS] H~: latent {op.input_dim} -> dof {H.n} -> obs {H.m} -> latent obs {op.output_dim}")
    return op
