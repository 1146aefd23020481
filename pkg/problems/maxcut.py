"""Max-Cut as a d = 1 instance: minimize ⟨A/4, X⟩ over the elliptope.

For x ∈ {±1}ⁿ, ⟨A/4, xxᵀ⟩ = W/2 − cut(x) where W is the total edge weight,
so the SDP value v gives the cut upper bound W/2 − v.
"""
from __future__ import annotations

from typing import Hashable, List, Optional, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp

from logger import logger
from manifold.blockmat import BlockSpec, SymBlockMatrix
from manifold.stiefel_product import StiefelPoint
from modeling.cost_models.linear import LinearCost
from utils import BdsdpError, SeedLike, make_rng

BRUTE_FORCE_MAX_N = 20
# Sign vectors evaluated per batch in brute_force_maxcut
BRUTE_FORCE_CHUNK = 1 << 15


class InvalidGraph(BdsdpError, ValueError):
    pass


def _check_adjacency(A: SymBlockMatrix) -> None:
    if A.spec.d != 1:
        raise InvalidGraph(f"Max-Cut needs scalar blocks, got d = {A.spec.d}")
    diagonal = A.diagonal_blocks().ravel()
    if np.any(diagonal != 0):
        raise InvalidGraph(f"Adjacency has a nonzero diagonal entry at node {int(np.flatnonzero(diagonal)[0]) + 1}")
    if A.tocsr().min() < 0:
        raise InvalidGraph("Max-Cut edge weights must be non-negative")


def gen_maxcut(A: SymBlockMatrix) -> LinearCost:
    _check_adjacency(A)
    return LinearCost(A.scaled(0.25))


def adjacency_from_graph(G: nx.Graph, weight: Optional[str] = "weight") -> Tuple[SymBlockMatrix, List[Hashable]]:
    nodes = list(G.nodes())
    if nx.number_of_selfloops(G):
        raise InvalidGraph("Max-Cut graphs cannot have self-loops")
    A = nx.to_scipy_sparse_array(G, nodelist=nodes, weight=weight, dtype=float, format="csr")
    return SymBlockMatrix.from_dense(BlockSpec(len(nodes), 1), sp.csr_matrix(A)), nodes


def maxcut_from_graph(G: nx.Graph, weight: Optional[str] = "weight") -> Tuple[LinearCost, List[Hashable]]:
    """Cost for a networkx graph, with the node order used for the rows."""
    A, nodes = adjacency_from_graph(G, weight)
    return gen_maxcut(A), nodes


def random_graph(n: int, edge_probability: float, seed: SeedLike = None, weighted: bool = False) -> nx.Graph:
    rng = make_rng(seed)
    G = nx.gnp_random_graph(n, edge_probability, seed=int(rng.integers(2 ** 31)))
    for u, v in G.edges():
        G[u][v]["weight"] = float(rng.uniform(0.5, 1.5)) if weighted else 1.0
    return G


def total_weight(A: SymBlockMatrix) -> float:
    return float(A.tocsr().sum()) / 2


def cut_value(A: SymBlockMatrix, x: np.ndarray) -> float:
    """W/2 − ⟨A/4, xxᵀ⟩: the weight of edges whose endpoints have opposite signs."""
    x = np.asarray(x, dtype=float).ravel()
    return total_weight(A) / 2 - 0.25 * float(x @ (A @ x.reshape(-1, 1)).ravel())


def cut_bound(A: SymBlockMatrix, sdp_value: float) -> float:
    """Upper bound on the maximum cut from a lower bound on the SDP value."""
    return total_weight(A) / 2 - sdp_value


def brute_force_maxcut(A: SymBlockMatrix) -> Tuple[float, np.ndarray]:
    """Exhaustive search over sign vectors with x_1 = +1."""
    _check_adjacency(A)
    n = A.spec.n
    if n > BRUTE_FORCE_MAX_N:
        raise InvalidGraph(f"Brute force is limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    dense = A.todense()
    W = total_weight(A)
    shifts = np.arange(n - 1)
    best_value, best_x = -np.inf, np.ones(n)
    for start in range(0, 1 << (n - 1), BRUTE_FORCE_CHUNK):
        codes = np.arange(start, min(start + BRUTE_FORCE_CHUNK, 1 << (n - 1)))
        bits = (codes[:, None] >> shifts) & 1
        signs = np.hstack([np.ones((len(codes), 1)), 1.0 - 2.0 * bits])
        values = W / 2 - 0.25 * np.einsum("ki,ij,kj->k", signs, dense, signs)
        k = int(np.argmax(values))
        if values[k] > best_value:
            best_value, best_x = float(values[k]), signs[k]
    return best_value, best_x


def hyperplane_rounding(
    Y: StiefelPoint, A: SymBlockMatrix, trials: int = 100, seed: SeedLike = None
) -> Tuple[float, np.ndarray]:
    """Best of `trials` cuts x = sign(Y r) for Gaussian r."""
    _check_adjacency(A)
    rng = make_rng(seed)
    best_value, best_x = -np.inf, None
    for _ in range(trials):
        x = np.sign(Y.Y @ rng.standard_normal(Y.p))
        x[x == 0] = 1.0
        value = cut_value(A, x)
        if value > best_value:
            best_value, best_x = value, x
    logger.debug(f"Hyperplane rounding: best cut {best_value:.6g} of {trials} trials")
    return best_value, best_x
