from __future__ import annotations

from typing import Union

import numpy as np

from manifold.blockmat import SymBlockMatrix, block_products, block_weighted_apply
from modeling.cost_model import ConvexityClass, CostModel, check_measurements


def pseudo_huber_gradient_blocks(
    H: SymBlockMatrix, eps: float, X: Union[SymBlockMatrix, np.ndarray]
) -> SymBlockMatrix:
    """Blocks of ∇f(X): −H_ij / √(‖H_ij‖² + d − 2⟨H_ij, X_ij⟩ + ε²) for every (i, j)."""
    if eps <= 0:
        raise ValueError(f"Smoothing parameter must be positive, got {eps}")
    Hb = H.to_blocks()
    if isinstance(X, SymBlockMatrix):
        Xb = X.to_blocks()
    else:
        m, d = H.spec.m, H.spec.d
        Xb = np.asarray(X, dtype=float).reshape(m, d, m, d).transpose(0, 2, 1, 3)
    radicand = np.einsum("ijab,ijab->ij", Hb, Hb) + H.spec.d - 2 * np.einsum("ijab,ijab->ij", Hb, Xb) + eps ** 2
    return SymBlockMatrix.from_blocks(-Hb / np.sqrt(radicand)[:, :, None, None])


class PseudoHuberCost(CostModel):
    """Robust, concave synchronization cost Σ_ij √(‖H_ij‖² + d − 2⟨H_ij, X_ij⟩ + ε²) − ε.

    Diagonal terms equal zero on the feasible set. They count towards f but are
    left out of every derivative, which changes nothing on the manifold.
    """

    convexity_class = ConvexityClass.STRONGLY_CONCAVE
    kind = "pseudo-huber"

    def __init__(self, H: SymBlockMatrix, eps: float, fd_hessian: bool = False) -> None:
        super().__init__(H.spec, fd_hessian=fd_hessian)
        if eps <= 0:
            raise ValueError(f"Smoothing parameter must be positive, got {eps}")
        check_measurements(H)
        self.H = H
        self.eps = float(eps)
        self._Hb = H.to_blocks()
        self._offdiag = 1.0 - np.eye(H.spec.m)
        self._base = np.einsum("ijab,ijab->ij", self._Hb, self._Hb) + H.spec.d + self.eps ** 2

    def _radius(self, Xb: np.ndarray) -> np.ndarray:
        radicand = self._base - 2 * np.einsum("ijab,ijab->ij", self._Hb, Xb)
        return np.sqrt(np.maximum(radicand, 0.0))

    def f_of_Y(self, Y: np.ndarray) -> float:
        rho = self._radius(block_products(Y, Y, self.spec))
        return float(np.sum(rho - self.eps))

    def f_of_X(self, X: np.ndarray) -> float:
        m, d = self.spec.m, self.spec.d
        Xb = np.asarray(X, dtype=float).reshape(m, d, m, d).transpose(0, 2, 1, 3)
        return float(np.sum(self._radius(Xb) - self.eps))

    def _weights(self, Y: np.ndarray) -> np.ndarray:
        return self._offdiag / self._radius(block_products(Y, Y, self.spec))

    def egrad_apply(self, Y: np.ndarray, V: np.ndarray) -> np.ndarray:
        return block_weighted_apply(-self._weights(Y), self._Hb, V, self.spec)

    def ehess_term(self, Y: np.ndarray, Ydot: np.ndarray) -> np.ndarray:
        rho = self._radius(block_products(Y, Y, self.spec))
        Xdot = block_products(Ydot, Y, self.spec)
        Xdot = Xdot + Xdot.transpose(1, 0, 3, 2)
        coef = -self._offdiag * np.einsum("ijab,ijab->ij", self._Hb, Xdot) / rho ** 3
        return block_weighted_apply(coef, self._Hb, Y, self.spec)

    def egrad_dense(self, Y: np.ndarray) -> np.ndarray:
        n = self.spec.n
        blocks = -self._weights(Y)[:, :, None, None] * self._Hb
        return blocks.transpose(0, 2, 1, 3).reshape(n, n)

    def with_epsilon(self, eps: float) -> PseudoHuberCost:
        return PseudoHuberCost(self.H, eps, fd_hessian=self.fd_hessian)
