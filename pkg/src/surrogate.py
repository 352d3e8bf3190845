"""Local polynomial surrogates of H~ fitted on Latin Hypercube designs around a background state."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as la
from scipy.special import comb
from scipy.stats import qmc
from sklearn.preprocessing import PolynomialFeatures
from tqdm import tqdm

from .matrix_io import read_manifest, read_matrix, read_vector, write_manifest, write_matrix, write_vector

log = logging.getLogger(__name__)

S_FLOOR = 1e-3


# ---------- Latin Hypercube designs ----------
@dataclass(frozen=True)
class LhsDesign:
    center: np.ndarray
    r_s: float
    n_s: int
    seed: int = 0
    s_floor: float = S_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(-1))
        if not self.r_s > 0:
            raise ValueError(f"LHS range r_s must be > 0, got {self.r_s}")
        if self.n_s < 1:
            raise ValueError(f"LHS sample count must be >= 1, got {self.n_s}")

    @property
    def half_width(self) -> np.ndarray:
        return self.r_s * np.maximum(np.abs(self.center), self.s_floor)

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width


def lhs_sample(design: LhsDesign) -> np.ndarray:
    """n_s x dim samples, one per equal-width stratum in every dimension."""
    dim = design.center.size
    engine = qmc.LatinHypercube(d=dim, seed=np.random.default_rng(design.seed))
    u = engine.random(design.n_s)
    return design.center + design.half_width * (2.0 * u - 1.0)


# ---------- monomials ----------
@lru_cache(maxsize=64)
def _poly(dim: int, degree: int) -> PolynomialFeatures:
    return PolynomialFeatures(degree=degree).fit(np.zeros((1, dim)))


def exponent_table(dim: int, degree: int) -> np.ndarray:
    """Multi-indices with total degree <= degree, graded lexicographic order (constant first)."""
    if degree < 1:
        raise ValueError(f"Polynomial degree must be >= 1, got {degree}")
    return _poly(dim, degree).powers_.copy()


def n_monomials(dim: int, degree: int) -> int:
    return int(comb(dim + degree, degree, exact=True))


def monomial_features(x: np.ndarray, d_p: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d_p < 1:
        raise ValueError(f"Polynomial degree must be >= 1, got {d_p}")
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    F = _poly(X.shape[1], d_p).transform(X)
    return F[0] if single else F


# ---------- surrogate ----------
@dataclass
class PolynomialSurrogate:
    degree: int
    exponents: np.ndarray  # n_monomials x input_dim
    coefficients: np.ndarray  # output_dim x n_monomials
    center: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    train_residual: float = float("nan")

    def __post_init__(self):
        self.exponents = np.asarray(self.exponents, dtype=np.int64)
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        d = self.exponents.shape[1]
        if self.exponents.shape[0] != n_monomials(d, self.degree):
            raise ValueError(f"Exponent table has {self.exponents.shape[0]} rows, "
                             f"expected C({d}+{self.degree},{self.degree})")
        if self.coefficients.shape[1] != self.exponents.shape[0]:
            raise ValueError(f"Coefficient matrix has {self.coefficients.shape[1]} columns, "
                             f"expected {self.exponents.shape[0]}")
        self.center = np.zeros(d) if self.center is None else np.asarray(self.center, float).reshape(-1)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, float).reshape(-1)

    @property
    def input_dim(self) -> int:
        return self.exponents.shape[1]

    @property
    def output_dim(self) -> int:
        return self.coefficients.shape[0]

    def _normalise(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"Input has {x.shape[-1]} entries, surrogate expects {self.input_dim}")
        return (x - self.center) / self.scale

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = self._normalise(np.asarray(x, dtype=float))
        return monomial_features(z, self.degree) @ self.coefficients.T

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """output_dim x input_dim matrix of exact partial derivatives at a single point."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("jacobian expects a single point")
        z = self._normalise(x)
        P = self.exponents
        dfeat = np.zeros((P.shape[0], self.input_dim))
        for k in range(self.input_dim):
            active = P[:, k] > 0
            Pk = P[active].copy()
            Pk[:, k] -= 1
            dfeat[active, k] = P[active, k] * np.prod(z ** Pk, axis=1)
        return (self.coefficients @ dfeat) / self.scale

    def save(self, directory: Path | str) -> Path:
        directory = Path(directory)
        write_matrix(directory / "exponents.txt", self.exponents)
        write_matrix(directory / "coefficients.txt", self.coefficients)
        write_vector(directory / "center.txt", self.center)
        write_vector(directory / "scale.txt", self.scale)
        write_manifest(directory, {"kind": "polynomial", "degree": self.degree,
                                   "input_dim": self.input_dim, "output_dim": self.output_dim,
                                   "train_residual": float(self.train_residual)})
        return directory

    @classmethod
    def load(cls, directory: Path | str) -> "PolynomialSurrogate":
        directory = Path(directory)
        man = read_manifest(directory)
        return cls(int(man["degree"]), read_matrix(directory / "exponents.txt").astype(np.int64),
                   read_matrix(directory / "coefficients.txt"), read_vector(directory / "center.txt"),
                   read_vector(directory / "scale.txt"), float(man.get("train_residual", "nan")))


def eval_surrogate(s: PolynomialSurrogate, x_tilde: np.ndarray) -> np.ndarray:
    return s(x_tilde)


def surrogate_jacobian(s: PolynomialSurrogate, x_tilde: np.ndarray) -> np.ndarray:
    return s.jacobian(x_tilde)


def fit_local_polynomial(samples: np.ndarray, targets: np.ndarray, d_p: int,
                         center: Optional[np.ndarray] = None,
                         scale: Optional[np.ndarray] = None) -> PolynomialSurrogate:
    """Least-squares fit per output; minimum-norm coefficients when the design is rank deficient.

    With `center`/`scale` the polynomial is fitted in (x - center) / scale coordinates.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 2:
        raise ValueError(f"Need at least 2 samples to fit a surrogate, got {X.shape[0]}")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} samples but {Y.shape[0]} targets")
    dim = X.shape[1]
    proto = PolynomialSurrogate(d_p, exponent_table(dim, d_p), np.zeros((Y.shape[1], n_monomials(dim, d_p))),
                                center, scale)
    F = monomial_features(proto._normalise(X), d_p)
    if F.shape[0] < F.shape[1]:
        log.debug(f"[PR] underdetermined fit: {F.shape[0]} samples < {F.shape[1]} monomials (min-norm)")
    coef, _, rank, _ = la.lstsq(F, Y, lapack_driver="gelsd")
    resid = float(np.linalg.norm(F @ coef - Y))
    proto.coefficients = coef.T
    proto.train_residual = resid
    log.debug(f"[PR] fit d_p={d_p} samples={X.shape[0]} monomials={F.shape[1]} rank={rank} resid={resid:.3e}")
    return proto


def validate_surrogate(s: PolynomialSurrogate, reference: Callable[[np.ndarray], np.ndarray],
                       test_samples: np.ndarray) -> float:
    """Relative RMSE sqrt(mean ||H~(x) - H~p(x)||^2 / ||H~(x)||^2); zero-norm references are skipped."""
    X = np.atleast_2d(np.asarray(test_samples, dtype=float))
    ref = np.atleast_2d(np.asarray(reference(X), dtype=float))
    pred = np.atleast_2d(s(X))
    num = np.sum((ref - pred) ** 2, axis=1)
    den = np.sum(ref ** 2, axis=1)
    keep = den > 0
    if not np.all(keep):
        log.warning(f"[PR][WARN] excluded {int(np.sum(~keep))} test sample(s) with ||H~(x)|| = 0")
    if not np.any(keep):
        return float("nan")
    return float(np.sqrt(np.mean(num[keep] / den[keep])))


def fit_around(h_tilde: Callable[[np.ndarray], np.ndarray], center: np.ndarray, d_p: int, r_s: float,
               n_s: int, seed: int, s_floor: float = S_FLOOR) -> PolynomialSurrogate:
    """LHS around `center`, evaluate H~ on every sample, fit in normalised coordinates."""
    design = LhsDesign(center, r_s, n_s, seed, s_floor)
    samples = lhs_sample(design)
    targets = h_tilde(samples)
    return fit_local_polynomial(samples, targets, d_p, center=design.center, scale=design.half_width)


def hyperparameter_sweep(h_tilde: Callable[[np.ndarray], np.ndarray], center: np.ndarray,
                         degrees: Sequence[int], ranges: Sequence[float], n_s: int, seed: int = 0,
                         s_floor: float = S_FLOOR, progress: bool = False) -> pd.DataFrame:
    """Fit on one LHS ensemble and score on an independent one, for every (degree, range)."""
    rows = []
    grid = [(r, d) for r in ranges for d in degrees]
    cache = {}
    for r_s, d_p in tqdm(grid, desc="[PR] sweep", disable=not progress, leave=False):
        if r_s not in cache:
            train = LhsDesign(center, r_s, n_s, seed, s_floor)
            test = LhsDesign(center, r_s, n_s, seed + 10_000, s_floor)
            xs_tr, xs_te = lhs_sample(train), lhs_sample(test)
            cache[r_s] = (train, xs_tr, h_tilde(xs_tr), xs_te)
        design, xs_tr, ys_tr, xs_te = cache[r_s]
        t0 = time.perf_counter()
        s = fit_local_polynomial(xs_tr, ys_tr, d_p, center=design.center, scale=design.half_width)
        dt = time.perf_counter() - t0
        rows.append({
            "degree": d_p,
            "r_s": r_s,
            "train_residual": s.train_residual,
            "train_rrmse": validate_surrogate(s, lambda _x, y=ys_tr: y, xs_tr),
            "test_rrmse": validate_surrogate(s, h_tilde, xs_te),
            "fit_seconds": dt,
        })
        log.info(f"[PR] d_p={d_p} r_s={r_s}: test r-rmse={rows[-1]['test_rrmse']:.4e} ({dt:.2f}s)")
    return pd.DataFrame(rows)
