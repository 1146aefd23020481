from __future__ import annotations

from enum import Enum

import numpy as np

from logger import logger
from manifold.blockmat import BlockSpec, DimensionMismatch, blockdiag_apply, diag_block_products, sym
from manifold.stiefel_product import StiefelPoint, TangentVector, project_tangent
from utils import BdsdpError

# Step of the central difference used when a model opts into FD Hessians
FD_HESSIAN_STEP = 1e-6


class ConvexityClass(str, Enum):
    LINEAR = "linear"
    CONCAVE = "concave"
    STRONGLY_CONCAVE = "strongly_concave"
    CONVEX = "convex"
    GENERAL = "general"


class CostEvaluationError(BdsdpError):
    pass


class InvalidMeasurements(BdsdpError, ValueError):
    pass


class CostModel:
    """Root class for all cost models f over the block spectrahedron.

    Models work at the factor level: every callback receives the n×p factor
    Y of X = YYᵀ and returns products with Y-shaped matrices, so X itself is
    never formed unless a dense diagnostic asks for it.
    """

    convexity_class = ConvexityClass.GENERAL
    kind = "general"

    def __init__(self, spec: BlockSpec, fd_hessian: bool = False) -> None:
        self.spec = spec
        self.fd_hessian = fd_hessian

    def f_of_Y(self, Y: np.ndarray) -> float:
        """f(YYᵀ)."""
        raise NotImplementedError

    def f_of_X(self, X: np.ndarray) -> float:
        """f on a dense symmetric n×n matrix. Optional; small n only."""
        raise NotImplementedError

    def egrad_apply(self, Y: np.ndarray, V: np.ndarray) -> np.ndarray:
        """∇f(YYᵀ)·V for any n×k matrix V."""
        raise NotImplementedError

    def egrad_times_Y(self, Y: np.ndarray) -> np.ndarray:
        return self.egrad_apply(Y, Y)

    def ehess_term(self, Y: np.ndarray, Ydot: np.ndarray) -> np.ndarray:
        """∇²f(X)[Ẋ]·Y with Ẋ = ẎYᵀ + YẎᵀ."""
        raise NotImplementedError

    def egrad_dense(self, Y: np.ndarray) -> np.ndarray:
        """Dense ∇f(YYᵀ); used by certificates for n up to a few thousand."""
        return self.egrad_apply(Y, np.eye(self.spec.n))

    def egrad_norm(self, Y: np.ndarray) -> float:
        """‖∇f(YYᵀ)‖_F."""
        return float(np.linalg.norm(self.egrad_dense(Y)))

    def with_epsilon(self, eps: float) -> CostModel:
        raise NotImplementedError(f"{type(self).__name__} has no smoothing parameter")

    def hessian_term(self, Y: np.ndarray, Ydot: np.ndarray) -> np.ndarray:
        if self.fd_hessian:
            return self._ehess_term_fd(Y, Ydot)
        return self.ehess_term(Y, Ydot)

    def _ehess_term_fd(self, Y: np.ndarray, Ydot: np.ndarray) -> np.ndarray:
        t = FD_HESSIAN_STEP
        ahead = self.egrad_apply(Y + t * Ydot, Y)
        behind = self.egrad_apply(Y - t * Ydot, Y)
        return (ahead - behind) / (2 * t)

    def check_point(self, Y: np.ndarray) -> None:
        if Y.ndim != 2 or Y.shape[0] != self.spec.n:
            raise DimensionMismatch(f"Factor of shape {Y.shape} does not match n = {self.spec.n}")


def _finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise CostEvaluationError(f"Cost model produced a non-finite {what}")
    return value


def g(model: CostModel, Y: StiefelPoint) -> float:
    """g(Y) = f(YYᵀ)."""
    model.check_point(Y.Y)
    return float(_finite(model.f_of_Y(Y.Y), "cost"))


def euclidean_gradient(model: CostModel, Y: StiefelPoint) -> np.ndarray:
    """∇g(Y) = 2∇f(YYᵀ)Y in the embedding space."""
    model.check_point(Y.Y)
    return 2 * _finite(model.egrad_times_Y(Y.Y), "gradient")


def riemannian_gradient(model: CostModel, Y: StiefelPoint) -> TangentVector:
    return project_tangent(Y, euclidean_gradient(model, Y))


def riemannian_hessian(
    model: CostModel,
    Y: StiefelPoint,
    Ydot: TangentVector,
    egrad: np.ndarray = None,
) -> TangentVector:
    """Hess g(Y)[Ẏ]. Pass `egrad` (the Euclidean gradient at Y) to skip recomputing it."""
    if egrad is None:
        egrad = euclidean_gradient(model, Y)
    V = Ydot.V
    second = 2 * (model.hessian_term(Y.Y, V) + model.egrad_apply(Y.Y, V))
    curvature = blockdiag_apply(sym(diag_block_products(egrad, Y.Y, Y.spec)), V, Y.spec)
    return project_tangent(Y, _finite(second - curvature, "Hessian product"))


def check_measurements(H, what: str = "measurement matrix") -> None:
    """Measurement costs need identity diagonal blocks."""
    diag = H.diagonal_blocks()
    eye = np.eye(H.spec.d)
    worst = float(np.abs(diag - eye).max())
    if worst > 1e-12:
        raise InvalidMeasurements(f"{what} has diagonal blocks off the identity by {worst:.3e}")
    logger.debug(f"{what}: m={H.spec.m}, d={H.spec.d}, diagonal blocks are identity")
