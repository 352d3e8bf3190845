from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import yaml

MARGINAL_KINDS = ("quadratic", "reciprocal")
REFIT_POLICIES = ("per_step", "per_burst")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"  # adam|sgd
    seed: int = 0
    clip_norm: Optional[float] = None
    progress: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class BurgersSpec:
    """1D viscous Burgers on the periodic unit interval, Gaussian-bump initial condition."""

    n: int = 256
    viscosity: float = 0.01
    dt: Optional[float] = None  # None -> half the stability bound
    n_snapshots: int = 1000
    output_stride: int = 5
    ic_base: float = 0.2
    ic_amplitude: float = 0.8
    ic_center: float = 0.3
    ic_width: float = 0.06
    tracer_base: float = 0.1
    tracer_center: float = 0.7
    tracer_width: float = 0.08

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"Need at least 4 grid points, got {self.n}")
        if self.viscosity < 0:
            raise ValueError(f"viscosity must be >= 0, got {self.viscosity}")
        if self.n_snapshots < 2:
            raise ValueError(f"n_snapshots must be >= 2, got {self.n_snapshots}")
        if self.output_stride < 1:
            raise ValueError(f"output_stride must be >= 1, got {self.output_stride}")
        bound = self.stability_bound()
        if self.dt is None:
            self.dt = bound
        elif not (0 < self.dt <= bound * (1 + 1e-12)):
            raise ValueError(f"dt={self.dt} violates the stability bound {bound:.3e}")

    @property
    def dx(self) -> float:
        return 1.0 / self.n

    @property
    def grid(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.dx

    def initial_condition(self) -> np.ndarray:
        x = self.grid
        # periodic distance to the bump center
        d = (x - self.ic_center + 0.5) % 1.0 - 0.5
        return self.ic_base + self.ic_amplitude * np.exp(-0.5 * (d / self.ic_width) ** 2)

    def tracer_initial_condition(self) -> np.ndarray:
        d = (self.grid - self.tracer_center + 0.5) % 1.0 - 0.5
        return self.tracer_base + np.exp(-0.5 * (d / self.tracer_width) ** 2)

    def stability_bound(self) -> float:
        u_max = float(np.max(np.abs(self.initial_condition())))
        limits = []
        if u_max > 0:
            limits.append(self.dx / u_max)
        if self.viscosity > 0:
            limits.append(self.dx ** 2 / (2.0 * self.viscosity))
        return 0.5 * min(limits) if limits else 0.5 * self.dx


@dataclass
class GlaConfig:
    d_p: int = 4
    r_s: float = 0.3
    n_s: int = 1000
    k_max: int = 50
    grad_tol: float = 0.01
    schedule: Tuple[int, ...] = ()
    outer_tol: float = 0.05
    n_outer: int = 1
    refit: str = "per_step"
    b_scale: float = 1.0
    r_scale: float = 0.1
    s_floor: float = 1e-3
    validate_surrogate: bool = False
    observed_field: Optional[str] = None  # joint latent block seen by the observations
    seed: int = 0
    progress: bool = False

    def __post_init__(self):
        self.schedule = tuple(sorted(set(int(s) for s in self.schedule)))
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if not self.grad_tol > 0:
            raise ValueError(f"grad_tol must be > 0, got {self.grad_tol}")
        if self.d_p < 1:
            raise ValueError(f"d_p must be >= 1, got {self.d_p}")
        if not self.r_s > 0:
            raise ValueError(f"r_s must be > 0, got {self.r_s}")
        if self.n_s < 2:
            raise ValueError(f"n_s must be >= 2, got {self.n_s}")
        if self.n_outer < 1:
            raise ValueError(f"n_outer must be >= 1, got {self.n_outer}")
        if self.refit not in REFIT_POLICIES:
            raise ValueError(f"refit must be one of {REFIT_POLICIES}, got {self.refit!r}")
        if self.schedule and self.schedule[0] < 0:
            raise ValueError(f"schedule contains negative step {self.schedule[0]}")


def _opt(kind: type, help_: str = "") -> Any:
    return field(default=None, metadata={"type": kind, "help": help_})


@dataclass
class ExperimentConfig:
    # paths
    out_dir: Path = Path("data/outputs")
    snapshots: Optional[Path] = _opt(Path, "external snapshot matrix (skips the Burgers run)")

    # synthetic dynamics
    grid_n: int = 256
    viscosity: float = 0.01
    dt: Optional[float] = _opt(float, "integration step (default: half the stability bound)")
    n_snapshots: int = 1000
    output_stride: int = 5
    joint_fields: bool = False  # also carry a passive tracer through ROM and forecaster

    # reduced-order model
    q: int = 8
    q_prime: Optional[int] = _opt(int, "prior POD truncation (default: all PCs of the train split)")
    latent_dim: int = 8
    ae_hidden: int = 128
    ae_slope: float = 0.3
    ae_learning_rate: float = 1e-3
    ae_epochs: int = 300
    ae_batch_size: int = 32
    test_every: int = 5

    # forecaster
    l_input: int = 10
    l_output: int = 10
    enc_hidden: int = 32
    dec_hidden: int = 32
    head_hidden: int = 64
    lstm_learning_rate: float = 2e-3
    lstm_epochs: int = 200
    lstm_batch_size: int = 32
    clip_norm: float = 1.0
    lstm_train_end: Optional[int] = _opt(int, "record steps the forecaster trains on (default: start_step)")

    # observations
    obs_m: int = 200
    obs_p: float = 0.05
    marginal: str = "quadratic"
    obs_q_prime: Optional[int] = _opt(int, "prior POD truncation of observations")
    obs_latent_dim: int = 8
    noise_std: float = 0.0

    # assimilation
    start_step: int = 300
    warmup: Optional[int] = _opt(int, "exact encoded states fed before forecasting (default: l_input)")
    horizon: Optional[int] = field(
        default=400, metadata={"type": int, "help": "forecast steps (null: to the end of the record)"})
    assim_start: int = 100
    burst_length: Optional[int] = _opt(int, "steps per assimilation burst (default: l_output)")
    burst_period: int = 100
    n_bursts: int = 3
    d_p: int = 4
    r_s: float = 0.3
    n_s: int = 1000
    k_max: int = 50
    grad_tol: float = 0.01
    outer_tol: float = 0.05
    n_outer: int = 3
    refit: str = "per_step"
    b_scale: float = 1.0
    r_scale: float = 0.1
    s_floor: float = 1e-3
    validate_surrogate: bool = False

    # surrogate sweep
    sweep_degrees: str = "1,2,3,4,5"
    sweep_ranges: str = "0.1,0.3,0.5,0.7,0.9"
    sweep_step: Optional[int] = _opt(int, "time index of the sweep center (default: start_step)")

    seed: int = 0
    progress: bool = True

    # per-stage seed offsets; every random draw derives from `seed`
    STAGE_OFFSETS = {"ae": 1, "obs_ae": 2, "lstm": 3, "selection": 4, "noise": 5, "gla": 6, "sweep": 7}

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.snapshots is not None:
            self.snapshots = Path(self.snapshots)
        if self.marginal not in MARGINAL_KINDS:
            raise ValueError(f"marginal must be one of {MARGINAL_KINDS}, got {self.marginal!r}")
        if self.refit not in REFIT_POLICIES:
            raise ValueError(f"refit must be one of {REFIT_POLICIES}, got {self.refit!r}")
        if not (0.0 <= self.obs_p <= 1.0):
            raise ValueError(f"obs_p must lie in [0, 1], got {self.obs_p}")
        for name in ("q", "latent_dim", "l_input", "l_output", "obs_m", "obs_latent_dim", "n_bursts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")

    # ---- derived ----
    def stage_seed(self, stage: str) -> int:
        return self.seed + self.STAGE_OFFSETS[stage]

    @property
    def warmup_len(self) -> int:
        return self.warmup if self.warmup is not None else self.l_input

    @property
    def burst_len(self) -> int:
        return self.burst_length if self.burst_length is not None else self.l_output

    @property
    def forecast_train_end(self) -> int:
        return self.lstm_train_end if self.lstm_train_end is not None else self.start_step

    def burgers_spec(self) -> BurgersSpec:
        return BurgersSpec(n=self.grid_n, viscosity=self.viscosity, dt=self.dt,
                           n_snapshots=self.n_snapshots, output_stride=self.output_stride)

    def ae_train_config(self, seed_stage: str = "ae") -> TrainConfig:
        return TrainConfig(learning_rate=self.ae_learning_rate, epochs=self.ae_epochs,
                           batch_size=self.ae_batch_size, seed=self.stage_seed(seed_stage),
                           progress=self.progress)

    def lstm_train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.lstm_learning_rate, epochs=self.lstm_epochs,
                           batch_size=self.lstm_batch_size, seed=self.stage_seed("lstm"),
                           clip_norm=self.clip_norm, progress=self.progress)

    def gla_config(self, schedule: Tuple[int, ...]) -> GlaConfig:
        return GlaConfig(d_p=self.d_p, r_s=self.r_s, n_s=self.n_s, k_max=self.k_max,
                         grad_tol=self.grad_tol, schedule=schedule, outer_tol=self.outer_tol,
                         n_outer=self.n_outer, refit=self.refit, b_scale=self.b_scale, r_scale=self.r_scale,
                         s_floor=self.s_floor, validate_surrogate=self.validate_surrogate,
                         observed_field="u" if self.joint_fields else None,
                         seed=self.stage_seed("gla"), progress=self.progress)

    # ---- (de)serialisation ----
    @classmethod
    def keys(cls) -> Dict[str, Any]:
        return {f.name: f for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = cls.keys()
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"Unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: Path | str, overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat key-value mapping")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ValueError(f"{path}: nested values are not allowed (keys {nested})")
        data.update(overrides or {})
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for name in self.keys():
            v = getattr(self, name)
            out[name] = str(v) if isinstance(v, Path) else v
        return out
