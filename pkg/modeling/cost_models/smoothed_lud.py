from __future__ import annotations

import numpy as np

from manifold.blockmat import SymBlockMatrix, block_products, block_weighted_apply, slices
from modeling.cost_model import ConvexityClass, CostModel, check_measurements


class SmoothedLUDCost(CostModel):
    """Σ_{i≠j} ℓ_ε(‖X_ij − H_ij‖_F) with ℓ_ε(r) = √(r² + ε²) − ε.

    Convex in X. Gradient block (i, j) is w_ij (X_ij − H_ij) with
    w_ij = 1/√(r² + ε²), finite at r = 0.
    """

    convexity_class = ConvexityClass.CONVEX
    kind = "smoothed-lud"

    def __init__(self, H: SymBlockMatrix, eps: float, fd_hessian: bool = False) -> None:
        super().__init__(H.spec, fd_hessian=fd_hessian)
        if eps <= 0:
            raise ValueError(f"Smoothing parameter must be positive, got {eps}")
        check_measurements(H)
        self.H = H
        self.eps = float(eps)
        self._Hb = H.to_blocks()
        self._offdiag = 1.0 - np.eye(H.spec.m)

    def _residual(self, Xb: np.ndarray):
        R = Xb - self._Hb
        s = np.sqrt(np.einsum("ijab,ijab->ij", R, R) + self.eps ** 2)
        return R, s

    def f_of_Y(self, Y: np.ndarray) -> float:
        _, s = self._residual(block_products(Y, Y, self.spec))
        return float(np.sum(self._offdiag * (s - self.eps)))

    def f_of_X(self, X: np.ndarray) -> float:
        m, d = self.spec.m, self.spec.d
        Xb = np.asarray(X, dtype=float).reshape(m, d, m, d).transpose(0, 2, 1, 3)
        _, s = self._residual(Xb)
        return float(np.sum(self._offdiag * (s - self.eps)))

    def egrad_apply(self, Y: np.ndarray, V: np.ndarray) -> np.ndarray:
        R, s = self._residual(block_products(Y, Y, self.spec))
        return block_weighted_apply(self._offdiag / s, R, V, self.spec)

    def ehess_term(self, Y: np.ndarray, Ydot: np.ndarray) -> np.ndarray:
        R, s = self._residual(block_products(Y, Y, self.spec))
        w = self._offdiag / s
        Xdot = block_products(Ydot, Y, self.spec)
        Xdot = Xdot + Xdot.transpose(1, 0, 3, 2)
        along = np.einsum("ijab,ijab->ij", R, Xdot)
        out = np.einsum("ij,ijab,jbp->iap", w, Xdot, slices(Y, self.spec), optimize=True).reshape(Y.shape)
        return out - block_weighted_apply(w ** 3 * along, R, Y, self.spec)

    def egrad_dense(self, Y: np.ndarray) -> np.ndarray:
        n = self.spec.n
        R, s = self._residual(block_products(Y, Y, self.spec))
        blocks = (self._offdiag / s)[:, :, None, None] * R
        return blocks.transpose(0, 2, 1, 3).reshape(n, n)

    def with_epsilon(self, eps: float) -> SmoothedLUDCost:
        return SmoothedLUDCost(self.H, eps, fd_hessian=self.fd_hessian)
