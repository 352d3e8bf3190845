"""Node adjacency from mesh connectivity and bandwidth-reducing node orderings."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, List, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdjacencyMatrix:
    """Symmetric 0/1 node adjacency stored as CSR (sorted neighbour list per node)."""

    n: int
    csr: sp.csr_matrix

    def neighbors(self, i: int) -> np.ndarray:
        return self.csr.indices[self.csr.indptr[i]:self.csr.indptr[i + 1]]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    @property
    def edges(self) -> Set[Tuple[int, int]]:
        upper = sp.triu(self.csr, k=1).tocoo()
        return {(int(i), int(j)) for i, j in zip(upper.row, upper.col)}

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray().astype(np.int8)


def _from_pairs(n: int, rows: Iterable[int], cols: Iterable[int]) -> AdjacencyMatrix:
    r = np.fromiter(rows, dtype=np.int64)
    c = np.fromiter(cols, dtype=np.int64)
    data = np.ones(2 * r.size, dtype=np.int8)
    mat = sp.coo_matrix((data, (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n))
    csr = mat.tocsr()
    csr.sum_duplicates()
    csr.data[:] = 1
    csr.sort_indices()
    return AdjacencyMatrix(n=n, csr=csr)


def build_adjacency(connectivity: Sequence[Sequence[int]], n: int | None = None) -> AdjacencyMatrix:
    """Edge (i, j) iff nodes i and j co-occur in some element.

    `n` defaults to 1 + the largest index seen.
    """
    if n is None:
        n = 1 + max((max(el) for el in connectivity if len(el)), default=-1)
    rows: List[int] = []
    cols: List[int] = []
    for eid, el in enumerate(connectivity):
        if len(el) < 2:
            raise ValueError(f"Element {eid} has {len(el)} node(s); need at least 2")
        for node in el:
            if node < 0 or node >= n:
                raise ValueError(f"Element {eid} references node {node} outside [0, {n})")
        for i, j in combinations(sorted(set(int(v) for v in el)), 2):
            rows.append(i)
            cols.append(j)
    adj = _from_pairs(n, rows, cols)
    log.debug(f"[MESH] adjacency: n={n} elements={len(connectivity)} edges={adj.csr.nnz // 2}")
    return adj


def periodic_grid_connectivity(n: int) -> List[Tuple[int, int]]:
    if n < 2:
        raise ValueError(f"Periodic grid needs n >= 2, got {n}")
    if n == 2:
        return [(0, 1)]
    return [(i, (i + 1) % n) for i in range(n)]


def _validate_perm(perm: Sequence[int], n: int) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    if p.shape != (n,):
        raise ValueError(f"Permutation length {p.size} does not match node count {n}")
    if n and not np.array_equal(np.sort(p), np.arange(n)):
        raise ValueError("Permutation is not a bijection on 0..n-1")
    return p


def bandwidth(adj: AdjacencyMatrix, perm: Sequence[int]) -> int:
    """max over edges of |pos(i) - pos(j)|, where perm maps new position -> original node."""
    p = _validate_perm(perm, adj.n)
    if adj.csr.nnz == 0:
        return 0
    pos = np.empty(adj.n, dtype=np.int64)
    pos[p] = np.arange(adj.n)
    coo = adj.csr.tocoo()
    return int(np.max(np.abs(pos[coo.row] - pos[coo.col])))


def _cuthill_mckee(adj: AdjacencyMatrix) -> np.ndarray:
    deg = adj.degrees
    # lowest degree first, smallest index on ties
    by_degree = np.lexsort((np.arange(adj.n), deg))
    visited = np.zeros(adj.n, dtype=bool)
    order: List[int] = []
    for start in by_degree:
        if visited[start]:
            continue
        visited[start] = True
        queue = deque([int(start)])
        while queue:
            node = queue.popleft()
            order.append(node)
            nbrs = [int(v) for v in adj.neighbors(node) if not visited[v]]
            nbrs.sort(key=lambda v: (deg[v], v))
            for v in nbrs:
                visited[v] = True
                queue.append(v)
    return np.array(order, dtype=np.int64)


def reverse_cuthill_mckee(adj: AdjacencyMatrix) -> np.ndarray:
    """Reverse Cuthill-McKee ordering; falls back to identity if that is narrower."""
    identity = np.arange(adj.n, dtype=np.int64)
    if adj.n == 0:
        return identity
    perm = _cuthill_mckee(adj)[::-1].copy()
    bw_rcm, bw_id = bandwidth(adj, perm), bandwidth(adj, identity)
    log.debug(f"[MESH] RCM bandwidth {bw_rcm} (identity {bw_id})")
    if bw_rcm > bw_id:
        return identity
    return perm


def reorder_snapshots(snapshots: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    p = _validate_perm(perm, snapshots.shape[0])
    return snapshots[p]


def restore_order(reordered: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    p = _validate_perm(perm, reordered.shape[0])
    out = np.empty_like(reordered)
    out[p] = reordered
    return out
