import logging
from typing import Dict, Optional

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("step", "latent_rel_err", "full_rel_err", "assimilated_flag",
                  "cost_before", "cost_after", "optimizer_iters", "trace_monotone")


def _rel(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def compute_relative_errors(truth: np.ndarray, predicted: np.ndarray, model) -> pd.DataFrame:
    """Per-step relative L2 errors of a latent trajectory against full-space truth.

    latent: |L^T x - D'(x~)| / |L^T x|, full: |x - L D'(x~)| / |x|.
    """
    truth = np.asarray(truth, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if truth.shape[1] != predicted.shape[0]:
        raise ValueError(f"Truth has {truth.shape[1]} steps, prediction has {predicted.shape[0]}")
    coef_true = model.coefficients(truth)  # T x q'
    coef_pred = model.decode_coefficients(predicted)  # T x q'
    full_pred = model.decode(predicted)  # dof x T
    latent = _rel(np.linalg.norm(coef_true - coef_pred, axis=1), np.linalg.norm(coef_true, axis=1))
    full = _rel(np.linalg.norm(truth - full_pred, axis=0), np.linalg.norm(truth, axis=0))
    bad = np.flatnonzero(np.isnan(full) | np.isnan(latent))
    if bad.size:
        log.warning(f"[GLA][WARN] zero-norm truth at {bad.size} step(s) (first {int(bad[0])}); errors set to NaN")
    return pd.DataFrame({"step": np.arange(truth.shape[1]), "latent_rel_err": latent, "full_rel_err": full})


def first_assimilation(report: pd.DataFrame) -> Optional[int]:
    hits = report.loc[report["assimilated_flag"] == 1, "step"]
    return int(hits.iloc[0]) if len(hits) else None


def time_averaged_errors(report: pd.DataFrame, from_step: int = 0) -> Dict[str, float]:
    tail = report[report["step"] >= from_step]
    return {"latent_rel_err": float(tail["latent_rel_err"].mean()),
            "full_rel_err": float(tail["full_rel_err"].mean())}


def compare_runs(free: pd.DataFrame, gla: pd.DataFrame) -> Dict[str, float]:
    """Time-averaged errors of both runs over the horizon after the first assimilation."""
    start = first_assimilation(gla)
    start = 0 if start is None else start
    f = time_averaged_errors(free, start)
    g = time_averaged_errors(gla, start)
    improvement = 1.0 - g["full_rel_err"] / f["full_rel_err"] if f["full_rel_err"] > 0 else float("nan")
    assimilated = gla[gla["assimilated_flag"] == 1]
    out = {
        "from_step": start,
        "free_latent_rel_err": f["latent_rel_err"],
        "free_full_rel_err": f["full_rel_err"],
        "gla_latent_rel_err": g["latent_rel_err"],
        "gla_full_rel_err": g["full_rel_err"],
        "full_error_reduction": improvement,
        "assimilated_steps": int(len(assimilated)),
        "cost_never_increased": bool((assimilated["cost_after"] <= assimilated["cost_before"]).all()),
        "trace_monotone": bool((assimilated["trace_monotone"] == 1).all()),
        "mean_optimizer_iters": float(assimilated["optimizer_iters"].mean()) if len(assimilated) else 0.0,
    }
    log.info(f"[GLA] full-space error free={out['free_full_rel_err']:.4e} gla={out['gla_full_rel_err']:.4e} "
             f"reduction={improvement:.1%}")
    return out
