from __future__ import annotations

import functools
import logging
import time
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from .assim import make_schedule, run_gla
from .errors import StageError
from .forecast import Seq2SeqForecaster, concat_latents, fit_forecaster
from .matrix_io import read_connectivity, read_matrix, write_connectivity, write_matrix, write_permutation
from .mesh import (bandwidth, build_adjacency, periodic_grid_connectivity, reorder_snapshots,
                   reverse_cuthill_mckee)
from .metrics import compare_runs
from .models import ExperimentConfig
from .neural import Activation
from .obsgen import (MarginalFn, SelectionMatrix, build_latent_obs_operator, observe_trajectory,
                     sample_selection_matrix)
from .rom import (PodAeModel, PodBasis, compression_metrics, fit_pod, fit_pod_ae, interleaved_split,
                  reconstruction_error)
from .simulate import generate_joint_snapshots, generate_synthetic_snapshots
from .surrogate import hyperparameter_sweep

log = logging.getLogger(__name__)


# ---------- artifact layout ----------
def _paths(cfg: ExperimentConfig) -> Dict[str, Path]:
    root = cfg.out_dir
    return {
        "snapshots": root / "snapshots.txt",
        "tracer": root / "tracer.txt",
        "mesh": root / "mesh",
        "pod": root / "pod",
        "rom": root / "rom",
        "rom_tracer": root / "rom_tracer",
        "obs_rom": root / "obs_rom",
        "forecaster": root / "forecaster",
        "selection": root / "obs" / "selection.txt",
        "observations": root / "obs" / "observations.txt",
        "gla": root / "gla",
        "sweep": root / "sweep",
        "summary_yaml": root / "summary.yaml",
        "summary_csv": root / "summary.csv",
    }


def stage(name: str) -> Callable:
    """Wrap a stage so any failure surfaces as StageError carrying the stage name."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(cfg: ExperimentConfig, *args, **kwargs):
            t0 = time.perf_counter()
            log.info(f"[RUN] stage '{name}' starting (out_dir={cfg.out_dir})")
            try:
                out = fn(cfg, *args, **kwargs)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e
            log.info(f"[RUN] stage '{name}' done in {time.perf_counter() - t0:.1f}s")
            return out
        return wrapper
    return deco


def _load_snapshots(cfg: ExperimentConfig) -> np.ndarray:
    path = _paths(cfg)["snapshots"]
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run the 'simulate' stage first")
    return read_matrix(path)


def _load_tracer(cfg: ExperimentConfig) -> np.ndarray:
    path = _paths(cfg)["tracer"]
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run 'simulate' with joint_fields enabled")
    return read_matrix(path)


def _encode_state(cfg: ExperimentConfig, X: np.ndarray, C: Optional[np.ndarray], cols: slice):
    """T x d latent series of the record columns `cols`, joint with the tracer when enabled."""
    p = _paths(cfg)
    latent = PodAeModel.load(p["rom"]).encode(X[:, cols])
    if C is None:
        return latent, None
    tracer = PodAeModel.load(p["rom_tracer"]).encode(C[:, cols])
    return concat_latents({"u": latent, "c": tracer})


def _train_columns(cfg: ExperimentConfig, n: int) -> np.ndarray:
    train_idx, _ = interleaved_split(n, cfg.test_every)
    return train_idx


# ---------- stages ----------
@stage("simulate")
def simulate(cfg: ExperimentConfig) -> Path:
    out = _paths(cfg)["snapshots"]
    if cfg.snapshots is not None:
        if cfg.joint_fields:
            raise ValueError("joint_fields needs the synthetic run; external snapshots carry one field")
        X = read_matrix(cfg.snapshots)
        log.info(f"[IO] using external snapshots {cfg.snapshots} ({X.shape[0]}x{X.shape[1]})")
    elif cfg.joint_fields:
        fields = generate_joint_snapshots(cfg.burgers_spec(), progress=cfg.progress)
        X = fields["u"].data
        write_matrix(_paths(cfg)["tracer"], fields["c"].data)
    else:
        X = generate_synthetic_snapshots(cfg.burgers_spec(), progress=cfg.progress).data
    write_matrix(out, X)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    log.info(f"[IO] wrote {out}")
    return out


@stage("reorder-mesh")
def reorder_mesh(cfg: ExperimentConfig, connectivity: Optional[Path] = None) -> Path:
    p = _paths(cfg)
    snapshots = read_matrix(p["snapshots"]) if p["snapshots"].exists() else None
    if connectivity is not None:
        elements = read_connectivity(connectivity)
        n = snapshots.shape[0] if snapshots is not None else None
    else:
        n = snapshots.shape[0] if snapshots is not None else cfg.grid_n
        elements = periodic_grid_connectivity(n)
    adj = build_adjacency(elements, n)
    perm = reverse_cuthill_mckee(adj)
    before = bandwidth(adj, np.arange(adj.n))
    after = bandwidth(adj, perm)
    log.info(f"[MESH] nodes={adj.n} edges={len(adj.edges)} bandwidth {before} -> {after}")
    write_connectivity(p["mesh"] / "connectivity.txt", elements)
    write_permutation(p["mesh"] / "permutation.txt", perm)
    if snapshots is not None and snapshots.shape[0] == adj.n:
        write_matrix(p["mesh"] / "snapshots_reordered.txt", reorder_snapshots(snapshots, perm))
    return p["mesh"] / "permutation.txt"


def _fit_field_rom(cfg: ExperimentConfig, X: np.ndarray, out: Path, tag: str) -> PodAeModel:
    train_idx, test_idx = interleaved_split(X.shape[1], cfg.test_every)
    Xtr, Xte = X[:, train_idx], X[:, test_idx]
    model = fit_pod_ae(Xtr, cfg.q_prime, cfg.latent_dim, cfg.ae_train_config("ae"), hidden=cfg.ae_hidden,
                       activation=Activation("leaky_relu", cfg.ae_slope), tag=tag)
    model.save(out)
    if len(test_idx):
        rel = np.linalg.norm(Xte - model.decode(model.encode(Xte))) / np.linalg.norm(Xte)
        log.info(f"{tag} POD-AE held-out relative reconstruction error={rel:.4e}")
    return model


@stage("train-rom")
def train_rom(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg)
    X = _load_snapshots(cfg)
    train_idx, test_idx = interleaved_split(X.shape[1], cfg.test_every)
    Xtr, Xte = X[:, train_idx], X[:, test_idx]
    log.info(f"[ROM] snapshots {X.shape[0]}x{X.shape[1]}: train={len(train_idx)} test={len(test_idx)}")

    pod = fit_pod(Xtr, min(cfg.q, *Xtr.shape))
    pod.save(p["pod"])
    if len(test_idx):
        rel = reconstruction_error(pod, Xte) / np.linalg.norm(Xte)
        log.info(f"[ROM] POD q={pod.q} held-out relative reconstruction error={rel:.4e}")

    _fit_field_rom(cfg, X, p["rom"], "[ROM]")
    if cfg.joint_fields:
        _fit_field_rom(cfg, _load_tracer(cfg), p["rom_tracer"], "[ROM] tracer")
    return p["rom"]


@stage("train-forecaster")
def train_forecaster(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg)
    X = _load_snapshots(cfg)
    C = _load_tracer(cfg) if cfg.joint_fields else None
    end = cfg.forecast_train_end
    if not cfg.l_input + cfg.l_output <= end <= X.shape[1]:
        raise ValueError(f"lstm_train_end={end} must lie in [{cfg.l_input + cfg.l_output}, {X.shape[1]}]")
    # only the record before `end`; forecasts past it are out of sample
    series, layout = _encode_state(cfg, X, C, slice(0, end))
    log.info(f"[LSTM] training on record steps [0, {end}) of {X.shape[1]}")
    model = fit_forecaster(series, cfg.l_input, cfg.l_output, cfg.lstm_train_config(),
                           enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden, head_hidden=cfg.head_hidden,
                           test_every=cfg.test_every, layout=layout)
    model.save(p["forecaster"])
    return p["forecaster"]


@stage("gen-obs")
def gen_obs(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg)
    X = _load_snapshots(cfg)
    H = sample_selection_matrix(cfg.obs_m, X.shape[0], cfg.obs_p, cfg.stage_seed("selection"))
    H.save(p["selection"])
    Y = observe_trajectory(H, MarginalFn(cfg.marginal), X, cfg.noise_std, cfg.stage_seed("noise"))
    write_matrix(p["observations"], Y)
    obs_rom = fit_pod_ae(Y[:, _train_columns(cfg, Y.shape[1])], cfg.obs_q_prime, cfg.obs_latent_dim,
                         cfg.ae_train_config("obs_ae"), hidden=cfg.ae_hidden,
                         activation=Activation("leaky_relu", cfg.ae_slope), tag="[OBS]")
    obs_rom.save(p["obs_rom"])
    return p["observations"]


def _experiment_window(cfg: ExperimentConfig, n_steps: int) -> Tuple[int, int]:
    if cfg.start_step < cfg.warmup_len:
        raise ValueError(f"start_step={cfg.start_step} leaves no room for a warmup of {cfg.warmup_len}")
    horizon = cfg.horizon if cfg.horizon is not None else n_steps - cfg.start_step
    if horizon < 1 or cfg.start_step + horizon > n_steps:
        raise ValueError(f"Horizon {horizon} from step {cfg.start_step} exceeds the {n_steps}-step record")
    return cfg.start_step, horizon


@stage("run-gla")
def run_gla_stage(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg)
    X = _load_snapshots(cfg)
    Y = read_matrix(p["observations"])
    rom = PodAeModel.load(p["rom"])
    obs_rom = PodAeModel.load(p["obs_rom"])
    forecaster = Seq2SeqForecaster.load(p["forecaster"])
    H = SelectionMatrix.load(p["selection"])
    operator = build_latent_obs_operator(obs_rom, H, MarginalFn(cfg.marginal), rom)

    start, horizon = _experiment_window(cfg, X.shape[1])
    C = _load_tracer(cfg) if cfg.joint_fields else None
    warmup, _ = _encode_state(cfg, X, C, slice(start - cfg.warmup_len, start))
    truth = X[:, start:start + horizon]
    obs = Y[:, start:start + horizon]
    schedule = make_schedule(cfg.assim_start, cfg.burst_len, cfg.burst_period, cfg.n_bursts)
    kept = tuple(s for s in schedule if s < horizon)
    if len(kept) < len(schedule):
        log.warning(f"[GLA][WARN] {len(schedule) - len(kept)} scheduled step(s) fall beyond horizon {horizon}")

    free = run_gla(forecaster, operator, warmup, obs, cfg.gla_config(()), horizon, truth, rom)
    gla = run_gla(forecaster, operator, warmup, obs, cfg.gla_config(kept), horizon, truth, rom)
    for w in gla.warnings:
        log.warning(f"[GLA][WARN] {w}")

    out = p["gla"]
    out.mkdir(parents=True, exist_ok=True)
    free.report.to_csv(out / "report_free.csv", index=False)
    gla.report.to_csv(out / "report_gla.csv", index=False)
    write_matrix(out / "trajectory_free.txt", free.trajectory)
    write_matrix(out / "trajectory_gla.txt", gla.trajectory)
    log.info(f"[IO] wrote reports to {out}")
    return out / "report_gla.csv"


@stage("report")
def report(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg)
    free = pd.read_csv(p["gla"] / "report_free.csv")
    gla = pd.read_csv(p["gla"] / "report_gla.csv")
    summary = compare_runs(free, gla)
    pod = PodBasis.load(p["pod"])
    gamma, rho = compression_metrics(pod.singular_values, pod.q, pod.n_state)
    summary.update({"q": pod.q, "gamma": gamma, "rho": rho, "marginal": cfg.marginal, "seed": cfg.seed})
    with open(p["summary_yaml"], "w") as fh:
        yaml.safe_dump(summary, fh, sort_keys=False)
    pd.DataFrame([summary]).to_csv(p["summary_csv"], index=False)
    log.info(f"[IO] wrote {p['summary_yaml']} and {p['summary_csv']}")
    return p["summary_yaml"]


@stage("sweep-surrogate")
def sweep_surrogate(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg)
    X = _load_snapshots(cfg)
    rom = PodAeModel.load(p["rom"])
    obs_rom = PodAeModel.load(p["obs_rom"])
    H = SelectionMatrix.load(p["selection"])
    operator = build_latent_obs_operator(obs_rom, H, MarginalFn(cfg.marginal), rom)
    step = cfg.sweep_step if cfg.sweep_step is not None else cfg.start_step
    if not 0 <= step < X.shape[1]:
        raise ValueError(f"sweep_step={step} outside the {X.shape[1]}-step record")
    center = rom.encode(X[:, step])
    degrees = [int(v) for v in cfg.sweep_degrees.split(",") if v.strip()]
    ranges = [float(v) for v in cfg.sweep_ranges.split(",") if v.strip()]
    df = hyperparameter_sweep(operator, center, degrees, ranges, cfg.n_s, seed=cfg.stage_seed("sweep"),
                              progress=cfg.progress)
    p["sweep"].mkdir(parents=True, exist_ok=True)
    out = p["sweep"] / "surrogate_sweep.csv"
    df.to_csv(out, index=False)
    log.info(f"[IO] wrote {out}")
    return out


def run_experiment(cfg: ExperimentConfig) -> Path:
    simulate(cfg)
    reorder_mesh(cfg)
    train_rom(cfg)
    train_forecaster(cfg)
    gen_obs(cfg)
    run_gla_stage(cfg)
    return report(cfg)


STAGES: Dict[str, Callable[[ExperimentConfig], Path]] = {
    "simulate": simulate,
    "train-rom": train_rom,
    "train-forecaster": train_forecaster,
    "gen-obs": gen_obs,
    "run-gla": run_gla_stage,
    "report": report,
    "run": run_experiment,
    "sweep-surrogate": sweep_surrogate,
    "reorder-mesh": reorder_mesh,
}
