"""Faces of the block spectrahedron at X = YYᵀ.

With Y of full column rank p, the face of X is parametrized by the
symmetric p×p matrices A with Y_i A Y_iᵀ = 0 for every slice. The map
ℒ_X(A) = (Y_1AY_1ᵀ, …, Y_mAY_mᵀ) and its Gram operator
ℋ(A) = ℒ_X*ℒ_X(A) = Yᵀ·symblockdiag(YAYᵀ)·Y live on the p(p+1)/2-dimensional
space of symmetric matrices, coordinatized with √2-weighted off-diagonals.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from logger import logger
from manifold.stiefel_product import (
    ManifoldSpec,
    StiefelPoint,
    polar_factor,
    random_point,
    rank_deficiency,
)
from manifold.blockmat import BlockSpec
from modeling.cost_model import CostModel
from utils import BdsdpError, SeedLike, trial_seed

# ℋ is factored densely up to this rank, matrix-free beyond
DENSE_MAX_P = 80
KERNEL_RTOL = 1e-10


class FaceError(BdsdpError):
    pass


@dataclass
class FaceReport:
    m: int
    d: int
    p: int
    delta: int
    dim_face: int
    p_star: float
    upper_bound: float

    @property
    def is_extreme(self) -> bool:
        return self.dim_face == 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["is_extreme"] = self.is_extreme
        return out


def p_star(m: int, d: int) -> float:
    """Largest rank an extreme point can have: solves p(p+1)/2 = m·d(d+1)/2."""
    return (np.sqrt(1 + 4 * m * d * (d + 1)) - 1) / 2


def delta(m: int, d: int, p: int) -> int:
    return p * (p + 1) // 2 - m * d * (d + 1) // 2


def face_upper_bound(d: int, p: int) -> float:
    return p * (p + 1) / 2 - p * (d + 1) / 2


def hessian_flop_count(m: int, d: int, p: int) -> int:
    """Multiply-adds for one application of ℋ: per slice, Y_iAY_iᵀ then Y_iᵀ(·)Y_i."""
    return m * (4 * d * p * p + 4 * d * d * p)


#==================================================================#
#  Symmetric matrix coordinates
#==================================================================#
def _sym_weights(p: int) -> Tuple[Tuple[np.ndarray, np.ndarray], np.ndarray]:
    rows, cols = np.triu_indices(p)
    weights = np.where(rows == cols, 1.0, np.sqrt(2.0))
    return (rows, cols), weights


def sym_to_vec(A: np.ndarray) -> np.ndarray:
    """Coordinates of symmetric A (or a stack of them) in the orthonormal basis."""
    p = A.shape[-1]
    (rows, cols), weights = _sym_weights(p)
    return A[..., rows, cols] * weights


def vec_to_sym(v: np.ndarray, p: int) -> np.ndarray:
    (rows, cols), weights = _sym_weights(p)
    A = np.zeros((p, p))
    values = np.asarray(v, dtype=float) / weights
    A[rows, cols] = values
    A[cols, rows] = values
    return A


def symmetric_basis(p: int) -> np.ndarray:
    """(p(p+1)/2, p, p) stack of E_ii and (E_ij + E_ji)/√2, in triu order."""
    (rows, cols), weights = _sym_weights(p)
    basis = np.zeros((len(rows), p, p))
    k = np.arange(len(rows))
    basis[k, rows, cols] = 1.0 / weights
    basis[k, cols, rows] = 1.0 / weights
    return basis


#==================================================================#
#  ℒ_X and ℋ
#==================================================================#
def face_constraint_matrix(Y: StiefelPoint) -> np.ndarray:
    """ℒ_X in coordinates: rows index the m·d(d+1)/2 output coordinates."""
    basis = symmetric_basis(Y.p)
    images = np.einsum("iap,kpq,ibq->kiab", Y.slices, basis, Y.slices, optimize=True)
    return sym_to_vec(images).reshape(len(basis), -1).T


def face_operator_apply(Y: StiefelPoint, A: np.ndarray) -> np.ndarray:
    """ℋ(A) = Σ_i Y_iᵀY_i A Y_iᵀY_i."""
    grams = np.einsum("iap,iaq->ipq", Y.slices, Y.slices)
    return np.einsum("ipq,qr,irs->ps", grams, A, grams, optimize=True)


def face_operator_matrix(Y: StiefelPoint) -> np.ndarray:
    L = face_constraint_matrix(Y)
    return L.T @ L


def _dense_face_spectrum(Y: StiefelPoint):
    values, vectors = scipy.linalg.eigh(face_operator_matrix(Y))
    return values, vectors, float(values[-1])


def _lanczos_face_spectrum(Y: StiefelPoint, rtol: float, seed: SeedLike = 0):
    """Smallest eigenpairs of ℋ, enough of them to cover its numerical kernel."""
    p = Y.p
    K = p * (p + 1) // 2
    rng = np.random.default_rng(seed)

    def matvec(v):
        return sym_to_vec(face_operator_apply(Y, vec_to_sym(np.ravel(v), p)))

    operator = LinearOperator((K, K), matvec=matvec, dtype=float)
    try:
        lam_max = float(eigsh(operator, k=1, which="LA", v0=rng.standard_normal(K), tol=1e-6,
                              return_eigenvectors=False)[0])
    except ArpackNoConvergence as err:
        lam_max = float(np.max(err.eigenvalues)) if len(err.eigenvalues) else 1.0
    k = min(K - 1, max(delta(Y.spec.m, Y.spec.d, p), 0) + 8)
    while True:
        values, vectors = eigsh(operator, k=k, which="SA", v0=rng.standard_normal(K), tol=1e-12)
        order = np.argsort(values)
        values, vectors = values[order], vectors[:, order]
        if np.count_nonzero(values <= rtol * lam_max) < k or k == K - 1:
            return values, vectors, lam_max
        k = min(2 * k, K - 1)


def face_spectrum(Y: StiefelPoint, rtol: float = KERNEL_RTOL, seed: SeedLike = 0):
    """(ascending eigenvalues, eigenvectors, λ_max) of ℋ. Beyond DENSE_MAX_P only
    the bottom of the spectrum is returned."""
    if Y.p <= DENSE_MAX_P:
        return _dense_face_spectrum(Y)
    return _lanczos_face_spectrum(Y, rtol, seed)


def _require_full_rank(Y: StiefelPoint) -> None:
    report = rank_deficiency(Y)
    if report.deficient:
        raise FaceError(
            f"Face computations need a full-rank factor; rank {report.numerical_rank} < p = {Y.p} "
            f"(cond {report.cond:.2e})"
        )


def face_dimension(Y: StiefelPoint, tol: float = KERNEL_RTOL) -> FaceReport:
    _require_full_rank(Y)
    values, _, lam_max = face_spectrum(Y, tol)
    dim_face = int(np.count_nonzero(values <= tol * lam_max))
    m, d, p = Y.spec.m, Y.spec.d, Y.p
    report = FaceReport(
        m=m,
        d=d,
        p=p,
        delta=delta(m, d, p),
        dim_face=dim_face,
        p_star=p_star(m, d),
        upper_bound=face_upper_bound(d, p),
    )
    logger.debug(f"Face at p = {p}: dim {dim_face}, Δ = {report.delta}, p* = {report.p_star:.3f}")
    return report


def negative_eigenvalue_budget(report: FaceReport) -> int:
    """⌊(dim ℱ_X − Δ)/p⌋, the most negative eigenvalues S can have at a
    second-order critical point of a concave cost."""
    return max(0, (report.dim_face - report.delta) // report.p)


def in_face_rank_reduction(
    Y: StiefelPoint,
    tol: float = KERNEL_RTOL,
    model: Optional[CostModel] = None,
) -> Optional[StiefelPoint]:
    """Moves X = YYᵀ to the boundary of its face along a kernel direction A of ℋ.

    Returns a factor of X′ = Y(I − A/λ_min(A))Yᵀ, which has rank at most
    p − 1, zero-padded back to p columns; None if ℋ has no kernel. With a
    model, the sign of A is chosen so that f does not increase to first order.
    """
    _require_full_rank(Y)
    values, vectors, lam_max = face_spectrum(Y, tol)
    if values[0] > tol * lam_max:
        return None
    A = vec_to_sym(vectors[:, 0], Y.p)
    if model is not None and np.sum(A * (Y.Y.T @ model.egrad_times_Y(Y.Y))) > 0:
        A = -A
    a_values = np.linalg.eigvalsh(A)
    # Y_iAY_iᵀ = 0 for all i gives trace(A·YᵀY) = 0, so A is indefinite when YᵀY ≻ 0
    if a_values[0] >= 0:
        raise FaceError(f"Kernel direction of the face map is semidefinite (λ_min = {a_values[0]:.3e})")
    middle = np.eye(Y.p) - A / a_values[0]
    w, V = np.linalg.eigh((middle + middle.T) / 2)
    keep = w > 1e-12 * w[-1]
    factor = V[:, keep] * np.sqrt(w[keep])
    reduced = (Y.Y @ factor).reshape(Y.spec.m, Y.spec.d, -1)
    rank = factor.shape[1]
    if rank < Y.spec.d:
        raise FaceError(f"In-face step collapsed the factor to rank {rank} < d = {Y.spec.d}")
    padded = np.zeros((Y.spec.n, Y.p))
    padded[:, :rank] = polar_factor(reduced).reshape(Y.spec.n, rank)
    logger.debug(f"In-face rank reduction: p = {Y.p} -> rank {rank}")
    return StiefelPoint(Y.manifold, padded)


def generic_face_dimension_trial(m: int, p: int, trials: int, seed: int = 0, d: int = 1) -> float:
    """Fraction of random full-rank factors whose face has dimension max(0, Δ)."""
    if d != 1:
        logger.warning(f"Generic face dimension is only established for d = 1; sampling d = {d}")
    manifold = ManifoldSpec(BlockSpec(m, d), p)
    expected = max(0, delta(m, d, p))
    hits = 0
    for k in range(trials):
        Y = random_point(manifold, trial_seed(seed, k))
        if face_dimension(Y).dim_face == expected:
            hits += 1
    return hits / trials
