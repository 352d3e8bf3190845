"""Desk-scale stand-in dynamics: 1D viscous Burgers on a periodic grid, optionally carrying a
passive tracer c_t + (u c)_x = nu c_xx advected by the velocity."""
import logging
from typing import Callable, Dict

import numpy as np
from tqdm import tqdm

from .errors import SimulationUnstableError
from .models import BurgersSpec
from .rom import SnapshotMatrix

log = logging.getLogger(__name__)


def _rhs(u: np.ndarray, dx: float, nu: float) -> np.ndarray:
    # Rusanov flux at face i+1/2 between u_i and u_{i+1}
    ur = np.roll(u, -1)
    a = np.maximum(np.abs(u), np.abs(ur))
    flux = 0.25 * (u * u + ur * ur) - 0.5 * a * (ur - u)
    adv = -(flux - np.roll(flux, 1)) / dx
    if nu == 0.0:
        return adv
    return adv + nu * (ur - 2.0 * u + np.roll(u, 1)) / (dx * dx)


def _tracer_rhs(c: np.ndarray, u: np.ndarray, dx: float, kappa: float) -> np.ndarray:
    # upwind flux with the face velocity averaged from both neighbours
    cr = np.roll(c, -1)
    a = 0.5 * (u + np.roll(u, -1))
    flux = np.maximum(a, 0.0) * c + np.minimum(a, 0.0) * cr
    adv = -(flux - np.roll(flux, 1)) / dx
    if kappa == 0.0:
        return adv
    return adv + kappa * (cr - 2.0 * c + np.roll(c, 1)) / (dx * dx)


def _ssp_rk3(w: np.ndarray, dt: float, rhs: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    w1 = w + dt * rhs(w)
    w2 = 0.75 * w + 0.25 * (w1 + dt * rhs(w1))
    return w / 3.0 + 2.0 / 3.0 * (w2 + dt * rhs(w2))


def ssp_rk3_step(u: np.ndarray, dt: float, dx: float, nu: float) -> np.ndarray:
    return _ssp_rk3(u, dt, lambda v: _rhs(v, dx, nu))


def joint_rk3_step(u: np.ndarray, c: np.ndarray, dt: float, dx: float, nu: float):
    """Advance velocity and tracer together; the tracer diffuses with the same coefficient."""
    def rhs(w):
        return np.stack([_rhs(w[0], dx, nu), _tracer_rhs(w[1], w[0], dx, nu)])
    w = _ssp_rk3(np.stack([u, c]), dt, rhs)
    return w[0], w[1]


def _integrate(spec: BurgersSpec, with_tracer: bool, progress: bool) -> Dict[str, np.ndarray]:
    u = spec.initial_condition()
    c = spec.tracer_initial_condition() if with_tracer else None
    out = {"u": np.empty((spec.n, spec.n_snapshots))}
    out["u"][:, 0] = u
    if with_tracer:
        out["c"] = np.empty((spec.n, spec.n_snapshots))
        out["c"][:, 0] = c
    step = 0
    for k in tqdm(range(1, spec.n_snapshots), desc="[SIM] burgers", disable=not progress, leave=False):
        for _ in range(spec.output_stride):
            if with_tracer:
                u, c = joint_rk3_step(u, c, spec.dt, spec.dx, spec.viscosity)
            else:
                u = ssp_rk3_step(u, spec.dt, spec.dx, spec.viscosity)
            step += 1
            if not (np.all(np.isfinite(u)) and (c is None or np.all(np.isfinite(c)))):
                raise SimulationUnstableError(step)
        out["u"][:, k] = u
        if with_tracer:
            out["c"][:, k] = c
    for name, X in out.items():
        drift = abs(X[:, -1].sum() - X[:, 0].sum()) * spec.dx
        log.info(f"[SIM] field '{name}' n={spec.n} nu={spec.viscosity} dt={spec.dt:.3e} steps={step} "
                 f"snapshots={spec.n_snapshots} mass drift={drift:.2e}")
    return out


def generate_synthetic_snapshots(spec: BurgersSpec, progress: bool = False) -> SnapshotMatrix:
    """Integrate from the initial condition; column k is the state after k * output_stride steps."""
    return SnapshotMatrix(_integrate(spec, with_tracer=False, progress=progress)["u"])


def generate_joint_snapshots(spec: BurgersSpec, progress: bool = False) -> Dict[str, SnapshotMatrix]:
    """Velocity 'u' and passive tracer 'c' sampled on the same output steps."""
    fields = _integrate(spec, with_tracer=True, progress=progress)
    return {name: SnapshotMatrix(X) for name, X in fields.items()}
