from __future__ import annotations

import numpy as np

from manifold.blockmat import SymBlockMatrix, apply_sym
from modeling.cost_model import ConvexityClass, CostModel


class LinearCost(CostModel):
    """f(X) = ⟨C, X⟩: constant gradient C, zero Hessian."""

    convexity_class = ConvexityClass.LINEAR
    kind = "linear"

    def __init__(self, C: SymBlockMatrix, fd_hessian: bool = False) -> None:
        super().__init__(C.spec, fd_hessian=fd_hessian)
        self.C = C

    def f_of_Y(self, Y: np.ndarray) -> float:
        return float(np.sum(Y * apply_sym(self.C, Y)))

    def f_of_X(self, X: np.ndarray) -> float:
        return self.C.inner(X)

    def egrad_apply(self, Y: np.ndarray, V: np.ndarray) -> np.ndarray:
        return apply_sym(self.C, V)

    def ehess_term(self, Y: np.ndarray, Ydot: np.ndarray) -> np.ndarray:
        return np.zeros_like(Y)

    def egrad_dense(self, Y: np.ndarray) -> np.ndarray:
        return self.C.todense()
