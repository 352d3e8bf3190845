"""Plain-text artifact formats shared by every module.

Matrix files: line 1 is "rows cols", then one row per line, whitespace separated.
Values are written with 17 significant digits so a read gives back the exact doubles.
Manifests are flat YAML documents next to the matrix files of a saved model.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import yaml

log = logging.getLogger(__name__)

_FMT = "%.17g"
MANIFEST_NAME = "manifest.yaml"


# ---------- matrices ----------
def write_matrix(path: Path | str, matrix: np.ndarray) -> Path:
    path = Path(path)
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"write_matrix expects a 2-D array, got shape {arr.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, arr, fmt=_FMT, header=f"{arr.shape[0]} {arr.shape[1]}", comments="")
    log.debug(f"[IO] wrote {arr.shape[0]}x{arr.shape[1]} matrix -> {path}")
    return path


def read_matrix(path: Path | str) -> np.ndarray:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: header must be 'rows cols', got {header!r}")
        rows, cols = int(header[0]), int(header[1])
    if rows * cols == 0:
        return np.zeros((rows, cols))
    values = np.loadtxt(path, skiprows=1, ndmin=2)
    if values.size != rows * cols:
        raise ValueError(f"{path}: header says {rows}x{cols} but found {values.size} values")
    return values.reshape(rows, cols)


def write_vector(path: Path | str, vec: np.ndarray) -> Path:
    return write_matrix(path, np.asarray(vec, dtype=float).reshape(-1, 1))


def read_vector(path: Path | str) -> np.ndarray:
    return read_matrix(path).reshape(-1)


# ---------- manifests ----------
def write_manifest(directory: Path | str, data: Dict[str, Any]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_NAME
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
    return path


def read_manifest(directory: Path | str) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise ValueError(f"No manifest at {path}")
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


# ---------- mesh files ----------
def read_connectivity(path: Path | str) -> List[Tuple[int, ...]]:
    elements: List[Tuple[int, ...]] = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                elements.append(tuple(int(p) for p in parts))
    log.info(f"[IO] read {len(elements)} elements from {path}")
    return elements


def write_connectivity(path: Path | str, elements: Sequence[Sequence[int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for el in elements:
            fh.write(" ".join(str(int(i)) for i in el) + "\n")
    return path


def write_permutation(path: Path | str, perm: Sequence[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i in perm:
            fh.write(f"{int(i)}\n")
    return path


def read_permutation(path: Path | str) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


# ---------- selection matrices ----------
def write_selection(path: Path | str, m: int, n: int, p: float, seed: int,
                    rows: Sequence[Sequence[int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"{m} {n} {_FMT % p} {seed}\n")
        for r in rows:
            fh.write(" ".join(str(int(i)) for i in r) + "\n")
    return path


def read_selection(path: Path | str) -> Tuple[int, int, float, int, List[np.ndarray]]:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise ValueError(f"{path}: header must be 'm n P seed', got {header!r}")
        m, n, p, seed = int(header[0]), int(header[1]), float(header[2]), int(header[3])
        rows = [np.array([int(v) for v in line.split()], dtype=np.int64)
                for line in fh.read().split("\n")[:m]]
    if len(rows) != m:
        raise ValueError(f"{path}: expected {m} rows, found {len(rows)}")
    return m, n, p, seed, rows
