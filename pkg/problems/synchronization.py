"""Synchronization instances: noisy rotations and permutations with outliers,
the spectral (EIG) baseline, permutation rounding and recovery metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import eigsh

from logger import logger
from manifold.blockmat import DENSE_MAX_N, BlockSpec, DimensionMismatch, SymBlockMatrix, block_products
from manifold.stiefel_product import ManifoldSpec, StiefelPoint, polar_factor, random_point
from modeling.cost_models.linear import LinearCost
from modeling.cost_models.pseudo_huber import PseudoHuberCost
from modeling.cost_models.smoothed_lud import SmoothedLUDCost
from utils import SeedLike, make_rng

PERFECT_MSE = 1e-6
# Assignment values closer than this count as a tie
TIE_TOL = 1e-12


@dataclass
class SyncInstance:
    spec: BlockSpec
    ground_truth: StiefelPoint
    H: SymBlockMatrix
    kind: str
    # σ for rotations, outlier fraction for permutations
    noise: float
    seed: SeedLike = None

    @property
    def C(self) -> LinearCost:
        """C = −H/(nm), normalized so that the noiseless optimum is −1."""
        return LinearCost(self.H.scaled(-1.0 / (self.spec.n * self.spec.m)))


@dataclass
class RecoveryMetrics:
    block_mse: float

    @property
    def perfect(self) -> bool:
        return self.block_mse < PERFECT_MSE


def _assemble(truth: StiefelPoint, upper_blocks: np.ndarray, pairs: Tuple[np.ndarray, np.ndarray]) -> SymBlockMatrix:
    """H with the given blocks above the diagonal, their transposes below and I_d on it."""
    m, d = truth.spec.m, truth.spec.d
    blocks = np.zeros((m, m, d, d))
    rows, cols = pairs
    blocks[rows, cols] = upper_blocks
    blocks[cols, rows] = upper_blocks.transpose(0, 2, 1)
    blocks[np.arange(m), np.arange(m)] = np.eye(d)
    return SymBlockMatrix.from_blocks(blocks)


def gen_rotation_sync(m: int, d: int, sigma: float, seed: SeedLike = None) -> SyncInstance:
    """H_ij = Q_iQ_jᵀ + σN_ij for i < j, with Haar-distributed Q_i ∈ O(d)."""
    if m < 2 or d < 1:
        raise ValueError(f"Need m >= 2 and d >= 1, got m={m}, d={d}")
    if sigma < 0:
        raise ValueError(f"Noise level must be non-negative, got {sigma}")
    rng = make_rng(seed)
    spec = BlockSpec(m, d)
    truth = random_point(ManifoldSpec(spec, d), rng)
    pairs = np.triu_indices(m, 1)
    exact = block_products(truth.Y, truth.Y, spec)[pairs]
    noise = rng.standard_normal(exact.shape)
    H = _assemble(truth, exact + sigma * noise, pairs)
    logger.debug(f"Rotation synchronization: m={m}, d={d}, σ={sigma}")
    return SyncInstance(spec=spec, ground_truth=truth, H=H, kind="rotsync", noise=float(sigma), seed=seed)


def random_permutation_matrices(count: int, d: int, rng: np.random.Generator) -> np.ndarray:
    eye = np.eye(d)
    return np.stack([eye[rng.permutation(d)] for _ in range(count)]) if count else np.zeros((0, d, d))


def gen_permutation_sync(m: int, d: int, outlier_fraction: float, seed: SeedLike = None) -> SyncInstance:
    """Exact relative permutations, except on a random subset of pairs where
    the measurement is a uniformly random permutation."""
    if m < 2 or d < 1:
        raise ValueError(f"Need m >= 2 and d >= 1, got m={m}, d={d}")
    if not 0 <= outlier_fraction <= 1:
        raise ValueError(f"Outlier fraction must lie in [0, 1], got {outlier_fraction}")
    rng = make_rng(seed)
    spec = BlockSpec(m, d)
    truth = StiefelPoint(ManifoldSpec(spec, d), random_permutation_matrices(m, d, rng).reshape(spec.n, d))
    pairs = np.triu_indices(m, 1)
    blocks = block_products(truth.Y, truth.Y, spec)[pairs]
    n_pairs = len(pairs[0])
    n_outliers = int(round(outlier_fraction * n_pairs))
    chosen = rng.choice(n_pairs, size=n_outliers, replace=False)
    blocks[chosen] = random_permutation_matrices(n_outliers, d, rng)
    H = _assemble(truth, blocks, pairs)
    logger.debug(f"Permutation synchronization: m={m}, d={d}, {n_outliers}/{n_pairs} outlier pairs")
    return SyncInstance(
        spec=spec, ground_truth=truth, H=H, kind="permsync", noise=float(outlier_fraction), seed=seed
    )


def linear_cost(instance: SyncInstance) -> LinearCost:
    return instance.C


def pseudo_huber_cost(instance: SyncInstance, eps: float) -> PseudoHuberCost:
    return PseudoHuberCost(instance.H, eps)


def smoothed_lud_cost(instance: SyncInstance, eps: float) -> SmoothedLUDCost:
    return SmoothedLUDCost(instance.H, eps)


#==================================================================#
#  Estimators
#==================================================================#
def eig_baseline(H: SymBlockMatrix, d: int, seed: SeedLike = 0) -> StiefelPoint:
    """Top-d eigenvectors of H with every d×d slice projected to O(d)."""
    spec = H.spec
    if spec.d != d:
        raise DimensionMismatch(f"Blocks of H are {spec.d}×{spec.d}, asked for d = {d}")
    if spec.n <= DENSE_MAX_N:
        _, V = scipy.linalg.eigh(H.todense(), subset_by_index=[spec.n - d, spec.n - 1])
    else:
        rng = make_rng(seed)
        _, V = eigsh(H.tocsr(), k=d, which="LA", v0=rng.standard_normal(spec.n))
    stacked = V.reshape(spec.m, d, d)
    return StiefelPoint(ManifoldSpec(spec, d), polar_factor(stacked).reshape(spec.n, d))


def _assignment_is_tied(R: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> bool:
    best = R[rows, cols].sum()
    for r, c in zip(rows, cols):
        blocked = R.copy()
        blocked[r, c] = -np.inf if R.shape[0] == 1 else R.min() - 1.0 - abs(best)
        r2, c2 = linear_sum_assignment(blocked, maximize=True)
        if abs(blocked[r2, c2].sum() - best) <= TIE_TOL * max(1.0, abs(best)):
            return True
    return False


def round_to_permutations(Y: StiefelPoint) -> StiefelPoint:
    """Rounds each relative block Y_iY_1ᵀ to the permutation P maximizing
    ⟨P, Y_iY_1ᵀ⟩; slice 1 is anchored at the identity."""
    spec = Y.spec
    d = spec.d
    slices = Y.slices
    out = np.zeros((spec.m, d, d))
    ties = 0
    for i in range(spec.m):
        R = slices[i] @ slices[0].T
        rows, cols = linear_sum_assignment(R, maximize=True)
        out[i, rows, cols] = 1.0
        if d > 1 and _assignment_is_tied(R, rows, cols):
            ties += 1
    if ties:
        logger.warning(f"Permutation rounding: {ties} of {spec.m} slices had tied assignments (lowest index kept)")
    return StiefelPoint(ManifoldSpec(spec, d), out.reshape(spec.n, d))


def recovery_metrics(estimate: StiefelPoint, truth: StiefelPoint) -> RecoveryMetrics:
    """(1/m²)·Σ_ij ‖X̂_ij − Q_iQ_jᵀ‖_F², blind to the global action on either factor."""
    if estimate.spec != truth.spec:
        raise DimensionMismatch(f"Estimate has blocks {estimate.spec}, ground truth {truth.spec}")
    spec = truth.spec
    diff = block_products(estimate.Y, estimate.Y, spec) - block_products(truth.Y, truth.Y, spec)
    return RecoveryMetrics(block_mse=float(np.sum(diff * diff)) / spec.m ** 2)
