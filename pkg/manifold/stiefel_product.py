"""Geometry of the product Stiefel manifold St(d,p)^m.

A point is an n×p matrix Y made of m stacked d×p slices with orthonormal
rows. The manifold is a Riemannian submanifold of ℝ^{n×p} with the trace
inner product; tangent vectors share the layout of Y.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from manifold.blockmat import (
    BlockSpec,
    DimensionMismatch,
    blockdiag_apply,
    diag_block_products,
    sym,
)
from utils import BdsdpError, SeedLike, make_rng

# Singular values below this make the polar retraction ill-defined
RETRACTION_SIGMA_MIN = 1e-12
DEFAULT_COND_THRESHOLD = 1e10


class RetractionError(BdsdpError):
    pass


class NotOnManifold(BdsdpError, ValueError):
    def __init__(self, violation: float, tol: float) -> None:
        self.violation = violation
        self.tol = tol
        super().__init__(f"Point is off the manifold: ‖symblockdiag(YYᵀ) − I‖_F = {violation:.3e} > {tol:.3e}")


@dataclass(frozen=True)
class ManifoldSpec:
    spec: BlockSpec
    p: int

    def __post_init__(self) -> None:
        if not (self.spec.d <= self.p <= self.spec.n):
            raise DimensionMismatch(
                f"Relaxation rank p={self.p} must satisfy d={self.spec.d} <= p <= n={self.spec.n}"
            )

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def dim(self) -> int:
        return self.n * self.p - self.m * self.d * (self.d + 1) // 2


class StiefelPoint:
    """A point Y of St(d,p)^m. The array is read-only once wrapped."""

    def __init__(self, manifold: ManifoldSpec, Y: np.ndarray) -> None:
        Y = np.array(Y, dtype=float)
        if Y.shape != (manifold.n, manifold.p):
            raise DimensionMismatch(f"Y has shape {Y.shape}, expected ({manifold.n}, {manifold.p})")
        Y.flags.writeable = False
        self.manifold = manifold
        self.Y = Y

    @classmethod
    def from_array(cls, Y: np.ndarray, d: int) -> StiefelPoint:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] % d:
            raise DimensionMismatch(f"Cannot split an array of shape {Y.shape} into slices of {d} rows")
        return cls(ManifoldSpec(BlockSpec(Y.shape[0] // d, d), Y.shape[1]), Y)

    @property
    def spec(self) -> BlockSpec:
        return self.manifold.spec

    @property
    def p(self) -> int:
        return self.manifold.p

    @property
    def slices(self) -> np.ndarray:
        return self.Y.reshape(self.spec.m, self.spec.d, self.p)

    def gram(self) -> np.ndarray:
        return self.Y.T @ self.Y

    def X(self) -> np.ndarray:
        """Dense YYᵀ; only for small n."""
        return self.Y @ self.Y.T

    def __repr__(self) -> str:
        return f"StiefelPoint(m={self.spec.m}, d={self.spec.d}, p={self.p})"


@dataclass
class TangentVector:
    base: StiefelPoint
    V: np.ndarray

    def __post_init__(self) -> None:
        self.V = np.asarray(self.V, dtype=float)
        if self.V.shape != self.base.Y.shape:
            raise DimensionMismatch(f"Tangent array has shape {self.V.shape}, base has {self.base.Y.shape}")

    def _same_base(self, other: TangentVector) -> None:
        if other.base is not self.base and not np.array_equal(other.base.Y, self.base.Y):
            raise DimensionMismatch("Tangent vectors live at different base points")

    def __add__(self, other: TangentVector) -> TangentVector:
        self._same_base(other)
        return TangentVector(self.base, self.V + other.V)

    def __sub__(self, other: TangentVector) -> TangentVector:
        self._same_base(other)
        return TangentVector(self.base, self.V - other.V)

    def __mul__(self, alpha: float) -> TangentVector:
        return TangentVector(self.base, alpha * self.V)

    __rmul__ = __mul__

    def __neg__(self) -> TangentVector:
        return TangentVector(self.base, -self.V)

    def __truediv__(self, alpha: float) -> TangentVector:
        return TangentVector(self.base, self.V / alpha)


@dataclass
class RankReport:
    deficient: bool
    numerical_rank: int
    cond: float
    # Gram eigenvalues ascending, and orthonormal kernel directions (p × k), smallest first
    eigenvalues: np.ndarray = field(repr=False)
    kernel: np.ndarray = field(repr=False)


def polar_factor(M: np.ndarray, return_singular_values: bool = False):
    """Nearest matrix with orthonormal rows, for a single matrix or an (m, d, p) stack."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    Q = U @ Vt
    if return_singular_values:
        return Q, s
    return Q


def random_point(manifold: ManifoldSpec, seed: SeedLike = None) -> StiefelPoint:
    rng = make_rng(seed)
    G = rng.standard_normal((manifold.m, manifold.d, manifold.p))
    return StiefelPoint(manifold, polar_factor(G).reshape(manifold.n, manifold.p))


def project_tangent(Y: StiefelPoint, Z: np.ndarray) -> TangentVector:
    Z = np.asarray(Z, dtype=float)
    if Z.shape != Y.Y.shape:
        raise DimensionMismatch(f"Cannot project shape {Z.shape} at a point of shape {Y.Y.shape}")
    correction = blockdiag_apply(sym(diag_block_products(Z, Y.Y, Y.spec)), Y.Y, Y.spec)
    return TangentVector(Y, Z - correction)


def retract(Y: StiefelPoint, Ydot: TangentVector) -> StiefelPoint:
    """Slice-wise polar retraction, the nearest point of the manifold to Y + Ẏ."""
    if Ydot.V.shape != Y.Y.shape:
        raise DimensionMismatch("Tangent vector does not match the base point")
    stacked = (Y.Y + Ydot.V).reshape(Y.spec.m, Y.spec.d, Y.p)
    Q, s = polar_factor(stacked, return_singular_values=True)
    smallest = float(s.min())
    if smallest < RETRACTION_SIGMA_MIN:
        raise RetractionError(f"Retraction hit a rank-deficient slice (σ_min = {smallest:.3e})")
    return StiefelPoint(Y.manifold, Q.reshape(Y.Y.shape))


def inner(U: TangentVector, V: TangentVector) -> float:
    U._same_base(V)
    return float(np.sum(U.V * V.V))


def norm(U: TangentVector) -> float:
    return float(np.linalg.norm(U.V))


def random_tangent(Y: StiefelPoint, seed: SeedLike = None) -> TangentVector:
    """Unit-norm tangent vector with a rotation-invariant direction."""
    rng = make_rng(seed)
    U = project_tangent(Y, rng.standard_normal(Y.Y.shape))
    size = norm(U)
    # d = p = 1 has a zero-dimensional tangent space
    return U / size if size > 0 else U


def rank_deficiency(Y: StiefelPoint, cond_threshold: float = DEFAULT_COND_THRESHOLD) -> RankReport:
    eigenvalues, vectors = np.linalg.eigh(Y.gram())
    lmax = float(eigenvalues[-1])
    lmin = float(eigenvalues[0])
    cond = lmax / lmin if lmin > 0 else np.inf
    cutoff = lmax / cond_threshold
    null = eigenvalues <= cutoff
    return RankReport(
        deficient=bool(cond > cond_threshold),
        numerical_rank=int(np.count_nonzero(~null)),
        cond=float(cond),
        eigenvalues=eigenvalues,
        kernel=vectors[:, null],
    )


def append_zero_columns(Y: StiefelPoint, p_plus: int) -> StiefelPoint:
    if p_plus <= Y.p:
        raise DimensionMismatch(f"Target rank {p_plus} must exceed the current rank {Y.p}")
    padded = np.zeros((Y.spec.n, p_plus))
    padded[:, : Y.p] = Y.Y
    return StiefelPoint(ManifoldSpec(Y.spec, p_plus), padded)


def feasibility_violation(Y: np.ndarray, spec: BlockSpec) -> float:
    grams = diag_block_products(Y, Y, spec)
    return float(np.linalg.norm(grams - np.eye(spec.d)))


def check_feasibility(Y: StiefelPoint, tol: Optional[float] = None) -> float:
    tol = 1e-10 * np.sqrt(Y.spec.n) if tol is None else tol
    violation = feasibility_violation(Y.Y, Y.spec)
    if violation > tol:
        raise NotOnManifold(violation, tol)
    return violation


def compact_factor(Y: StiefelPoint, cond_threshold: float = DEFAULT_COND_THRESHOLD) -> StiefelPoint:
    """Drops numerically null column directions of Y. The result has
    p = numerical rank of Y and the same product YYᵀ up to the discarded part."""
    U, s, _ = np.linalg.svd(Y.Y, full_matrices=False)
    r = int(np.count_nonzero(s ** 2 > s[0] ** 2 / cond_threshold))
    r = max(r, Y.spec.d)
    reduced = (U[:, :r] * s[:r]).reshape(Y.spec.m, Y.spec.d, r)
    return StiefelPoint(ManifoldSpec(Y.spec, r), polar_factor(reduced).reshape(Y.spec.n, r))


def projector_matrix(Y: StiefelPoint) -> np.ndarray:
    """Matrix of the tangent projector on vec(ℝ^{n×p}) (row-major vec). Small sizes only."""
    size = Y.Y.size
    P = np.empty((size, size))
    for k in range(size):
        E = np.zeros(size)
        E[k] = 1.0
        P[:, k] = project_tangent(Y, E.reshape(Y.Y.shape)).V.ravel()
    return (P + P.T) / 2


def tangent_basis(Y: StiefelPoint) -> np.ndarray:
    """Orthonormal basis of the tangent space as columns of a (np × dim) matrix."""
    eigenvalues, vectors = np.linalg.eigh(projector_matrix(Y))
    return vectors[:, eigenvalues > 0.5]
