import networkx as nx
import numpy as np
import pytest

from manifold.blockmat import BlockSpec, SymBlockMatrix
from problems.maxcut import (
    InvalidGraph,
    adjacency_from_graph,
    brute_force_maxcut,
    cut_bound,
    cut_value,
    gen_maxcut,
    hyperplane_rounding,
    maxcut_from_graph,
    random_graph,
    total_weight,
)
from solver.rtr import RtrOptions
from solver.staircase import StaircaseOptions, solve

TEST_SEED = 1337


def adjacency(dense):
    dense = np.asarray(dense, dtype=float)
    return SymBlockMatrix.from_dense(BlockSpec(len(dense), 1), dense)


def test_single_edge():
    A = adjacency([[0, 1], [1, 0]])
    report = solve(gen_maxcut(A), StaircaseOptions(seed=TEST_SEED))
    assert report.kkt
    assert report.cost == pytest.approx(-0.5, abs=1e-8)
    assert np.allclose(report.Y.X(), [[1, -1], [-1, 1]], atol=1e-5)
    assert cut_bound(A, report.bounds.lower) == pytest.approx(1.0, abs=1e-8)
    assert brute_force_maxcut(A)[0] == 1.0
    assert hyperplane_rounding(report.Y, A, trials=5, seed=TEST_SEED)[0] == 1.0


def test_bipartite_cycle_is_tight():
    A, _ = adjacency_from_graph(nx.cycle_graph(4))
    report = solve(gen_maxcut(A), StaircaseOptions(seed=TEST_SEED, rtr=RtrOptions(grad_tol=1e-12)))
    assert report.kkt
    assert report.numerical_rank == 1
    assert cut_bound(A, report.cost) == pytest.approx(4.0, abs=1e-8)
    best, _ = brute_force_maxcut(A)
    assert best == 4.0
    value, x = hyperplane_rounding(report.Y, A, trials=10, seed=TEST_SEED)
    assert value == 4.0
    assert set(np.unique(x)) <= {-1.0, 1.0}


def test_triangle_relaxation_is_not_tight():
    A = adjacency(np.ones((3, 3)) - np.eye(3))
    report = solve(gen_maxcut(A), StaircaseOptions(seed=TEST_SEED))
    assert report.kkt
    # Three unit vectors at 120°
    assert report.cost == pytest.approx(-0.75, abs=1e-8)
    best, _ = brute_force_maxcut(A)
    assert best == 2.0
    assert report.cost < total_weight(A) / 2 - best
    assert cut_bound(A, report.bounds.lower) >= best


@pytest.mark.parametrize("n", [6, 10, 14])
@pytest.mark.parametrize("seed", range(3))
def test_lower_bound_never_beats_brute_force(n, seed):
    G = random_graph(n, 0.5, seed=seed, weighted=True)
    cost, _ = maxcut_from_graph(G)
    A = cost.C.scaled(4.0)
    report = solve(cost, StaircaseOptions(seed=seed))
    best, x = brute_force_maxcut(A)
    assert cut_value(A, x) == pytest.approx(best)
    assert cut_bound(A, report.bounds.lower) >= best - 1e-9, f"n={n} seed={seed}"


def test_cut_value_counts_crossing_edges():
    A = adjacency([[0, 2, 0], [2, 0, 3], [0, 3, 0]])
    assert total_weight(A) == 5.0
    assert cut_value(A, [1, -1, 1]) == 5.0
    assert cut_value(A, [1, 1, -1]) == 3.0
    assert cut_value(A, [1, 1, 1]) == 0.0


def test_graph_node_order_is_returned():
    G = nx.Graph()
    G.add_edge("b", "a", weight=2.0)
    G.add_edge("a", "c")
    cost, nodes = maxcut_from_graph(G)
    assert nodes == ["b", "a", "c"]
    assert cost.C.block(0, 1)[0, 0] == 0.5
    assert cost.C.block(1, 2)[0, 0] == 0.25


def test_nonzero_diagonal_is_rejected():
    with pytest.raises(InvalidGraph):
        gen_maxcut(adjacency([[1, 1], [1, 0]]))


def test_negative_weights_are_rejected():
    with pytest.raises(InvalidGraph):
        gen_maxcut(adjacency([[0, -1], [-1, 0]]))


def test_self_loops_are_rejected():
    G = nx.path_graph(3)
    G.add_edge(1, 1)
    with pytest.raises(InvalidGraph):
        maxcut_from_graph(G)


def test_brute_force_size_limit():
    with pytest.raises(InvalidGraph):
        brute_force_maxcut(SymBlockMatrix.zeros(BlockSpec(21, 1)))
