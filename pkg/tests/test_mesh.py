from itertools import combinations, permutations

import numpy as np
import pytest

from src.matrix_io import read_matrix, read_permutation, write_matrix, write_permutation
from src.mesh import (bandwidth, build_adjacency, periodic_grid_connectivity, reorder_snapshots,
                      restore_order, reverse_cuthill_mckee)


def _random_graph(rng, n, density):
    pairs = [(i, j) for i, j in combinations(range(n), 2) if rng.random() < density]
    return build_adjacency(pairs, n)


def _min_bandwidth(adj):
    return min(bandwidth(adj, p) for p in permutations(range(adj.n)))


def test_chain_edges():
    adj = build_adjacency([(0, 1), (1, 2)])
    assert adj.edges == {(0, 1), (1, 2)}


def test_triangle_element_is_a_clique():
    adj = build_adjacency([(0, 1, 2)])
    assert adj.edges == {(0, 1), (0, 2), (1, 2)}


def test_adjacency_matches_pairwise_scan(rng):
    n = 8
    elements = [tuple(rng.choice(n, size=rng.integers(2, 4), replace=False)) for _ in range(6)]
    adj = build_adjacency(elements, n)
    dense = adj.to_dense()
    for i in range(n):
        for j in range(n):
            shared = i != j and any(i in el and j in el for el in elements)
            assert bool(dense[i, j]) == shared


def test_bad_element_names_the_element():
    with pytest.raises(ValueError, match="Element 1"):
        build_adjacency([(0, 1), (1, 7)], n=4)


def test_bandwidth_examples():
    assert bandwidth(build_adjacency([], n=5), np.arange(5)) == 0
    path = build_adjacency([(0, 1), (1, 2), (2, 3)])
    assert bandwidth(path, np.arange(4)) == 1
    k4 = build_adjacency([(0, 1, 2, 3)])
    assert bandwidth(k4, [2, 0, 3, 1]) == 3


def test_bandwidth_rejects_non_bijection():
    adj = build_adjacency([(0, 1), (1, 2)])
    with pytest.raises(ValueError):
        bandwidth(adj, [0, 0, 1])
    with pytest.raises(ValueError):
        bandwidth(adj, [0, 1])


def test_rcm_keeps_path_optimal():
    path = build_adjacency([(0, 1), (1, 2), (2, 3)])
    assert bandwidth(path, reverse_cuthill_mckee(path)) == 1


def test_rcm_on_star():
    # brute-force minimum for K_{1,4} is 2; breadth-first orderings place the hub at an end
    star = build_adjacency([(0, k) for k in range(1, 5)])
    perm = reverse_cuthill_mckee(star)
    assert sorted(perm) == list(range(5))
    assert bandwidth(star, perm) <= 2 * _min_bandwidth(star)
    assert bandwidth(star, perm) <= bandwidth(star, np.arange(5))


def test_periodic_grid_bandwidth_drops_to_two():
    n = 64
    adj = build_adjacency(periodic_grid_connectivity(n))
    assert bandwidth(adj, np.arange(n)) == n - 1
    assert bandwidth(adj, reverse_cuthill_mckee(adj)) == 2


def test_rcm_never_widens_random_graphs(rng):
    for _ in range(100):
        n = int(rng.integers(2, 65))
        adj = _random_graph(rng, n, density=min(1.0, 3.0 / n))
        perm = reverse_cuthill_mckee(adj)
        assert sorted(perm) == list(range(n))
        assert bandwidth(adj, perm) <= bandwidth(adj, np.arange(n))


def test_rcm_within_twice_minimum_on_small_graphs(rng):
    for _ in range(15):
        n = int(rng.integers(3, 8))
        adj = _random_graph(rng, n, density=0.4)
        assert bandwidth(adj, reverse_cuthill_mckee(adj)) <= 2 * _min_bandwidth(adj)


def test_reorder_and_restore(rng, tmp_path):
    adj = build_adjacency(periodic_grid_connectivity(10))
    perm = reverse_cuthill_mckee(adj)
    X = rng.standard_normal((10, 4))
    Y = reorder_snapshots(X, perm)
    assert np.array_equal(Y[0], X[perm[0]])
    assert np.array_equal(restore_order(Y, perm), X)
    write_permutation(tmp_path / "perm.txt", perm)
    assert np.array_equal(read_permutation(tmp_path / "perm.txt"), perm)


def test_bandwidth_unchanged_by_reversal(rng):
    for _ in range(10):
        adj = _random_graph(rng, 9, density=0.3)
        perm = rng.permutation(9)
        assert bandwidth(adj, perm[::-1]) == bandwidth(adj, perm)


def test_duplicated_elements_give_same_adjacency(rng):
    elements = [tuple(rng.choice(7, size=3, replace=False)) for _ in range(5)]
    once = build_adjacency(elements, 7)
    twice = build_adjacency(elements + elements[::-1], 7)
    assert twice.edges == once.edges


def test_matrix_file_layout(rng, tmp_path):
    A = rng.standard_normal((3, 4))
    path = write_matrix(tmp_path / "a.txt", A)
    lines = path.read_text().splitlines()
    assert lines[0] == "3 4"
    assert len(lines) == 4
    assert np.array_equal(read_matrix(path), A)


def test_single_row_and_empty_matrices(tmp_path):
    row = np.array([[1.0, 2.5, -3.0]])
    assert np.array_equal(read_matrix(write_matrix(tmp_path / "row.txt", row)), row)
    assert read_matrix(write_matrix(tmp_path / "empty.txt", np.zeros((0, 3)))).shape == (0, 3)


def test_matrix_header_mismatch_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 3\n1 2 3\n")
    with pytest.raises(ValueError):
        read_matrix(path)
