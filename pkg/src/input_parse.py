import argparse
import logging
from dataclasses import MISSING
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .models import ExperimentConfig, MARGINAL_KINDS, REFIT_POLICIES

log = logging.getLogger(__name__)

COMMANDS = {
    "simulate": "Integrate the Burgers stand-in and write the snapshot matrix.",
    "train-rom": "Fit the state POD and POD-AE reduced-order model.",
    "train-forecaster": "Train the incremental seq2seq LSTM on the encoded record before the forecast start.",
    "gen-obs": "Sample H, write the observation stream, fit the observation POD-AE.",
    "run-gla": "Free-running and assimilated forecasts over the test horizon.",
    "report": "Time-averaged errors and compression metrics from the run reports.",
    "run": "Every stage in order.",
    "sweep-surrogate": "Polynomial degree x LHS range study around one background state.",
    "reorder-mesh": "Reverse Cuthill-McKee ordering of a mesh connectivity file.",
}

# ----- flag groups (everything else lands under "general") -----
_GROUPS: Dict[str, Tuple[str, ...]] = {
    "paths": ("out_dir", "snapshots"),
    "dynamics": ("grid_n", "viscosity", "dt", "n_snapshots", "output_stride", "joint_fields"),
    "reduced-order model": ("q", "q_prime", "latent_dim", "ae_hidden", "ae_slope", "ae_learning_rate",
                            "ae_epochs", "ae_batch_size", "test_every"),
    "forecaster": ("l_input", "l_output", "enc_hidden", "dec_hidden", "head_hidden", "lstm_learning_rate",
                   "lstm_epochs", "lstm_batch_size", "clip_norm", "lstm_train_end"),
    "observations": ("obs_m", "obs_p", "marginal", "obs_q_prime", "obs_latent_dim", "noise_std"),
    "assimilation": ("start_step", "warmup", "horizon", "assim_start", "burst_length", "burst_period",
                     "n_bursts", "d_p", "r_s", "n_s", "k_max", "grad_tol", "outer_tol", "n_outer", "refit",
                     "b_scale", "r_scale", "s_floor", "validate_surrogate"),
    "surrogate sweep": ("sweep_degrees", "sweep_ranges", "sweep_step"),
}
_CHOICES = {"marginal": MARGINAL_KINDS, "refit": REFIT_POLICIES}


# -q is taken by --quiet
_FLAG_NAMES = {"q": "pod-q"}


def _flag(name: str) -> str:
    return "--" + _FLAG_NAMES.get(name, name.replace("_", "-"))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    fields = ExperimentConfig.keys()
    placed = set()
    for title, names in list(_GROUPS.items()) + [("general", tuple(fields))]:
        group = p.add_argument_group(title)
        for name in names:
            if name in placed:
                continue
            placed.add(name)
            f = fields[name]
            kind = f.metadata.get("type") or type(f.default)
            default = None if f.default is MISSING else f.default
            help_ = f.metadata.get("help") or f"default: {default}"
            # SUPPRESS keeps unset flags out of the namespace so YAML values survive
            if kind is bool:
                group.add_argument(_flag(name), dest=name, action=argparse.BooleanOptionalAction,
                                   default=argparse.SUPPRESS, help=help_)
            else:
                group.add_argument(_flag(name), dest=name, type=kind, choices=_CHOICES.get(name),
                                   default=argparse.SUPPRESS, help=help_)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gla",
        description="Generalised latent assimilation: reduced-order forecasting corrected by "
                    "3D-Var with heterogeneous latent spaces."
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for cmd, text in COMMANDS.items():
        sp = sub.add_parser(cmd, help=text, description=text)
        sp.add_argument("--config", type=Path, help="Flat YAML file of config keys (CLI flags win).")
        verb = sp.add_mutually_exclusive_group()
        verb.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
        verb.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")
        if cmd == "reorder-mesh":
            sp.add_argument("--connectivity", type=Path,
                            help="Element file, one element per line (default: periodic grid of the state).")
        _add_config_flags(sp)
    return p


def _overrides(ns: argparse.Namespace) -> Dict[str, Any]:
    keys = ExperimentConfig.keys()
    return {k: v for k, v in vars(ns).items() if k in keys}


def parse_args(argv: Optional[List[str]] = None) -> Tuple[str, ExperimentConfig, argparse.Namespace]:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = _overrides(args)
    try:
        if args.config is not None:
            cfg = ExperimentConfig.from_yaml(args.config, overrides)
        else:
            cfg = ExperimentConfig.from_dict(overrides)
    except (OSError, ValueError, TypeError) as e:
        parser.error(str(e))
    return args.command, cfg, args
