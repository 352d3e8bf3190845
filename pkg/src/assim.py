"""Latent 3D-Var: cost, analytic gradient through the surrogate, BFGS, and the GLA time loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as la
from tqdm import tqdm

from .forecast import Seq2SeqForecaster, predict_window
from .metrics import REPORT_COLUMNS, compute_relative_errors
from .models import GlaConfig
from .obsgen import LatentObsOperator
from .surrogate import LhsDesign, PolynomialSurrogate, fit_around, lhs_sample, validate_surrogate

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
SHRINK = 0.5
MAX_HALVINGS = 50
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class Covariance:
    matrix: np.ndarray
    _factor: Tuple[np.ndarray, bool] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"Covariance must be square, got {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("Covariance contains non-finite entries")
        asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
        if asym > SYMMETRY_TOL:
            raise ValueError(f"Covariance is not symmetric (max |A - A^T| = {asym:.3e})")
        try:
            factor = la.cho_factor(A, lower=True)
        except la.LinAlgError as e:
            raise ValueError(f"Covariance is not positive definite: {e}") from e
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "_factor", factor)

    @classmethod
    def scaled_identity(cls, dim: int, scale: float = 1.0) -> "Covariance":
        return cls(scale * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def cholesky(self) -> np.ndarray:
        return np.tril(self._factor[0])

    def solve(self, v: np.ndarray) -> np.ndarray:
        return la.cho_solve(self._factor, v)

    def mahalanobis(self, v: np.ndarray) -> float:
        return float(v @ self.solve(v))


class LatentOperator(Protocol):
    input_dim: int
    output_dim: int

    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...


@dataclass
class AssimProblem:
    background: np.ndarray
    observation: np.ndarray
    B: Covariance
    R: Covariance
    operator: LatentOperator

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=float).reshape(-1)
        self.observation = np.asarray(self.observation, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(self.background)) and np.all(np.isfinite(self.observation))):
            raise ValueError("Background and observation must be finite")
        if self.operator.input_dim != self.background.size:
            raise ValueError(f"Operator input dim {self.operator.input_dim} != background dim {self.background.size}")
        if self.operator.output_dim != self.observation.size:
            raise ValueError(f"Operator output dim {self.operator.output_dim} != observation dim "
                             f"{self.observation.size}")
        if self.B.dim != self.background.size:
            raise ValueError(f"B is {self.B.dim}x{self.B.dim}, background has {self.background.size} entries")
        if self.R.dim != self.observation.size:
            raise ValueError(f"R is {self.R.dim}x{self.R.dim}, observation has {self.observation.size} entries")


def _check_point(problem: AssimProblem, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != problem.background.size:
        raise ValueError(f"State has {x.size} entries, expected {problem.background.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("Cost evaluated at a non-finite state")
    return x


def _cost(problem: AssimProblem, x: np.ndarray) -> float:
    db = x - problem.background
    dy = problem.observation - problem.operator(x)
    return 0.5 * problem.B.mahalanobis(db) + 0.5 * problem.R.mahalanobis(dy)


def cost(problem: AssimProblem, x_tilde: np.ndarray) -> float:
    """J = 1/2 |x - x_b|^2_B^-1 + 1/2 |y - H(x)|^2_R^-1."""
    return _cost(problem, _check_point(problem, x_tilde))


def cost_gradient(problem: AssimProblem, x_tilde: np.ndarray) -> np.ndarray:
    x = _check_point(problem, x_tilde)
    dy = problem.observation - problem.operator(x)
    J = problem.operator.jacobian(x)
    return problem.B.solve(x - problem.background) - J.T @ problem.R.solve(dy)


@dataclass
class MinimizeResult:
    x: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    trace: List[float]
    converged: bool
    warning: Optional[str] = None


def minimize(problem: AssimProblem, k_max: int = 50, grad_tol: float = 0.01,
             initial: Optional[np.ndarray] = None) -> MinimizeResult:
    """BFGS on the inverse Hessian with an Armijo backtracking line search."""
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if not grad_tol > 0:
        raise ValueError(f"grad_tol must be > 0, got {grad_tol}")
    x = _check_point(problem, problem.background if initial is None else initial).copy()
    n = x.size
    f = _cost(problem, x)
    g = cost_gradient(problem, x)
    Hinv = np.eye(n)
    trace = [f]
    warning = None
    it = 0
    while it < k_max and np.linalg.norm(g) > grad_tol:
        p = -Hinv @ g
        slope = float(g @ p)
        if not slope < 0:
            Hinv = np.eye(n)
            p = -g
            slope = float(g @ p)
        alpha = 1.0
        halvings = 0
        while True:
            x_try = x + alpha * p
            f_try = _cost(problem, x_try)
            if f_try <= f + ARMIJO_C * alpha * slope:
                break
            halvings += 1
            if halvings > MAX_HALVINGS:
                break
            alpha *= SHRINK
        if halvings > MAX_HALVINGS:
            warning = f"line search failed after {MAX_HALVINGS} halvings at iteration {it}"
            log.warning(f"[DA][WARN] {warning}")
            break
        g_new = cost_gradient(problem, x_try)
        s, y = x_try - x, g_new - g
        sy = float(s @ y)
        if sy > 0:
            if it == 0:
                Hinv = (sy / float(y @ y)) * np.eye(n)
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = x_try, f_try, g_new
        trace.append(f)
        it += 1
    gnorm = float(np.linalg.norm(g))
    converged = gnorm <= grad_tol
    log.debug(f"[DA] BFGS iters={it} J={f:.6e} |grad|={gnorm:.3e} converged={converged}")
    return MinimizeResult(x, f, gnorm, it, trace, converged, warning)


@dataclass(frozen=True)
class ExpectationCheck:
    mean: float
    std_error: float
    expected: float

    def within(self, n_se: float = 3.0) -> bool:
        return abs(self.mean - self.expected) <= n_se * self.std_error


def expected_cost_check(dim_x: int, dim_y: int, n_mc: int = 100_000, seed: int = 0,
                        b_scale: float = 1.0, r_scale: float = 1.0) -> ExpectationCheck:
    """Monte Carlo mean of J at the truth when background and observation errors follow B and R.

    With the 1/2 convention the expected value is (dim_x + dim_y) / 2.
    """
    if n_mc < 1000:
        raise ValueError(f"n_mc must be >= 1000, got {n_mc}")
    rng = np.random.default_rng(seed)
    B = Covariance.scaled_identity(dim_x, b_scale)
    R = Covariance.scaled_identity(dim_y, r_scale)
    eb = rng.standard_normal((n_mc, dim_x)) @ B.cholesky.T
    er = rng.standard_normal((n_mc, dim_y)) @ R.cholesky.T
    J = 0.5 * np.sum(eb * B.solve(eb.T).T, axis=1) + 0.5 * np.sum(er * R.solve(er.T).T, axis=1)
    out = ExpectationCheck(float(J.mean()), float(J.std(ddof=1) / np.sqrt(n_mc)), 0.5 * (dim_x + dim_y))
    log.info(f"[DA] E[J(x_true)] dim_x={dim_x} dim_y={dim_y}: {out.mean:.4f} +- {out.std_error:.4f} "
             f"(expected {out.expected})")
    return out


def make_schedule(start: int, burst_length: int, period: int, n_bursts: int) -> Tuple[int, ...]:
    """Relative step indices of `n_bursts` consecutive bursts, one every `period` steps."""
    if start < 0 or burst_length < 1 or n_bursts < 0:
        raise ValueError(f"Invalid schedule start={start} burst_length={burst_length} n_bursts={n_bursts}")
    if n_bursts > 1 and period < burst_length:
        raise ValueError(f"Burst period {period} shorter than burst length {burst_length}")
    return tuple(start + b * period + k for b in range(n_bursts) for k in range(burst_length))


# ---------- GLA loop ----------
@dataclass
class GlaResult:
    trajectory: np.ndarray  # horizon x latent
    report: pd.DataFrame
    warnings: List[str]


def _observed_block(forecaster: Seq2SeqForecaster, field_name: Optional[str]) -> slice:
    if field_name is None:
        return slice(0, forecaster.latent_dim)
    if forecaster.layout is None:
        raise ValueError(f"Observed field {field_name!r} requested but the forecaster has no joint layout")
    return forecaster.layout.block(field_name)


def _check_components(forecaster: Seq2SeqForecaster, obs_operator: LatentObsOperator, warmup: np.ndarray,
                      observations: np.ndarray, horizon: int, schedule: Sequence[int],
                      truth: Optional[np.ndarray], state_model, block: slice) -> None:
    d = forecaster.latent_dim
    if warmup.ndim != 2 or warmup.shape[1] != d or warmup.shape[0] < forecaster.l_input:
        raise ValueError(f"Warmup must be (>= {forecaster.l_input}) x {d}, got {warmup.shape}")
    d_obs = block.stop - block.start
    if obs_operator.input_dim != d_obs:
        raise ValueError(f"Observation operator expects latent {obs_operator.input_dim}, "
                         f"observed block has {d_obs}")
    if schedule:
        if observations is None or observations.shape[0] != obs_operator.H.m:
            raise ValueError(f"Observation stream must have {obs_operator.H.m} rows")
        if observations.shape[1] < horizon:
            raise ValueError(f"Observation stream covers {observations.shape[1]} steps, horizon is {horizon}")
        if max(schedule) >= horizon:
            raise ValueError(f"Schedule step {max(schedule)} outside horizon {horizon}")
    if truth is not None:
        if state_model is None:
            raise ValueError("A state model is required to score against the truth")
        if truth.shape[1] < horizon or truth.shape[0] != state_model.dof:
            raise ValueError(f"Truth must be {state_model.dof} x (>= {horizon}), got {truth.shape}")


def run_gla(forecaster: Seq2SeqForecaster, obs_operator: LatentObsOperator, warmup: np.ndarray,
            observations: Optional[np.ndarray], config: GlaConfig, horizon: Optional[int] = None,
            truth: Optional[np.ndarray] = None, state_model=None) -> GlaResult:
    """Forecast in latent space and replace the background by a 3D-Var analysis at scheduled steps.

    `observations` (m x T) and `truth` (dof x T) are aligned with the forecast steps, column t
    being the state the forecaster predicts at step t. After an analysis the remaining window
    predictions are dropped and the next window is seeded with the corrected history. With
    `config.observed_field` set, only that block of a joint latent state is analysed (B is block
    diagonal and the observations see nothing else); the other blocks keep their background.
    """
    warmup = np.asarray(warmup, dtype=float)
    if horizon is None:
        if observations is None:
            raise ValueError("horizon is required without an observation stream")
        horizon = observations.shape[1]
    if horizon < 1:
        raise ValueError(f"horizon must be positive, got {horizon}")
    schedule = set(config.schedule)
    block = _observed_block(forecaster, config.observed_field)
    _check_components(forecaster, obs_operator, warmup, observations, horizon, config.schedule, truth,
                      state_model, block)

    B = Covariance.scaled_identity(block.stop - block.start, config.b_scale)
    R = Covariance.scaled_identity(obs_operator.output_dim, config.r_scale)

    history = warmup.copy()
    pending: List[np.ndarray] = []
    states: List[np.ndarray] = []
    rows = []
    warnings: List[str] = []
    surrogate: Optional[PolynomialSurrogate] = None
    for t in tqdm(range(horizon), desc="[GLA] steps", disable=not config.progress, leave=False):
        if not pending:
            pending = list(predict_window(forecaster, history[-forecaster.l_input:]))
        x_b = pending.pop(0)
        row = {"step": t, "assimilated_flag": 0, "cost_before": np.nan, "cost_after": np.nan,
               "optimizer_iters": 0, "trace_monotone": np.nan}
        x = x_b
        if t in schedule:
            y_t = obs_operator.y_encoder.encode(observations[:, t])
            reuse = config.refit == "per_burst" and surrogate is not None and (t - 1) in schedule
            x = x_b.copy()
            x[block], row, surrogate = _assimilate(obs_operator, x_b[block], y_t, B, R, config, t,
                                                   surrogate if reuse else None, row, warnings)
            pending.clear()
        states.append(x)
        history = np.vstack([history, x[None]])
        rows.append(row)

    trajectory = np.asarray(states)
    report = pd.DataFrame(rows)
    if truth is not None:
        errs = compute_relative_errors(truth[:, :horizon], trajectory[:, block], state_model)
        report = report.merge(errs, on="step", how="left")
    else:
        report["latent_rel_err"] = np.nan
        report["full_rel_err"] = np.nan
    extra = [c for c in report.columns if c not in REPORT_COLUMNS]
    report = report[list(REPORT_COLUMNS) + extra]
    n_assim = int(report["assimilated_flag"].sum())
    log.info(f"[GLA] horizon={horizon} assimilated steps={n_assim} warnings={len(warnings)}")
    return GlaResult(trajectory, report, warnings)


def _assimilate(obs_operator: LatentObsOperator, x_b: np.ndarray, y_t: np.ndarray, B: Covariance,
                R: Covariance, config: GlaConfig, t: int, surrogate: Optional[PolynomialSurrogate],
                row: dict, warnings: List[str]):
    """Fit (or reuse) the surrogate, minimise, and repeat around the analysis for outer loops.

    Outer loops refit the surrogate around the current analysis and restart BFGS from it when it
    still beats the background under the refitted cost.
    """
    center = x_b
    x_a = x_b
    res = None
    problem = None
    monotone = True
    for outer in range(config.n_outer):
        if surrogate is None or outer > 0:
            surrogate = fit_around(obs_operator, center, config.d_p, config.r_s, config.n_s,
                                   seed=config.seed + t, s_floor=config.s_floor)
        problem = AssimProblem(x_b, y_t, B, R, surrogate)
        start = x_a if outer > 0 and _cost(problem, x_a) <= _cost(problem, x_b) else x_b
        res = minimize(problem, config.k_max, config.grad_tol, initial=start)
        monotone = monotone and bool(np.all(np.diff(res.trace) <= 0.0))
        if res.warning:
            warnings.append(f"step {t}: {res.warning}")
        change = np.linalg.norm(res.x - x_a) / max(np.linalg.norm(x_a), 1e-12)
        x_a = res.x
        if outer > 0 and change <= config.outer_tol:
            break
        center = x_a
    row.update({"assimilated_flag": 1, "cost_before": _cost(problem, x_b), "cost_after": res.cost,
                "optimizer_iters": res.iterations, "trace_monotone": int(monotone)})
    if config.validate_surrogate:
        design = LhsDesign(x_a, config.r_s, max(config.n_s // 10, 2), config.seed + t + 1, config.s_floor)
        row["surrogate_rrmse"] = validate_surrogate(surrogate, obs_operator, lhs_sample(design))
    log.debug(f"[GLA] step {t}: J {row['cost_before']:.4e} -> {row['cost_after']:.4e} "
              f"in {res.iterations} iters")
    return x_a, row, surrogate
