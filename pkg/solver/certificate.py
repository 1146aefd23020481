"""Dual certificates for min f(X) over the block spectrahedron.

For X = YYᵀ the certificate is S(X) = ∇f(X) − symblockdiag(∇f(X)X). X is
KKT iff S(X) ⪰ 0; when it is not, the eigenvector of the smallest
eigenvalue gives a second-order descent direction from a lifted copy of Y.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from logger import logger
from manifold.blockmat import (
    SymBlockMatrix,
    apply_sym,
    blockdiag_apply,
    diag_block_products,
    slices,
    sym,
)
from manifold.stiefel_product import (
    DEFAULT_COND_THRESHOLD,
    RetractionError,
    StiefelPoint,
    TangentVector,
    append_zero_columns,
    inner,
    norm,
    project_tangent,
    rank_deficiency,
    retract,
)
from modeling.cost_model import ConvexityClass, CostModel, g, riemannian_gradient, riemannian_hessian
from modeling.cost_models.linear import LinearCost
from utils import BdsdpError, SeedLike, make_rng

# Sufficient-decrease constant of the escape line search
ARMIJO_C = 1e-4
MIN_ESCAPE_STEP = 1e-10
# Escapes that lower g by less than this (relative to max(1, |g|)) count as stalled
ESCAPE_DECREASE_RTOL = 1e-12


class CertificateError(BdsdpError):
    pass


@dataclass
class CertificateOptions:
    kkt_tol: float = 1e-8
    dense_max_n: int = 2000
    lanczos_tol: float = 1e-10
    lanczos_maxiter: Optional[int] = None
    seed: SeedLike = 0
    # Eigenvalues of S above rank_tol·scale count towards rank(S)
    rank_tol: float = 1e-6

    def validate(self) -> None:
        if not self.kkt_tol > 0:
            raise CertificateError(f"kkt_tol must be positive, got {self.kkt_tol}")
        if self.dense_max_n < 0:
            raise CertificateError(f"dense_max_n must be non-negative, got {self.dense_max_n}")
        if not self.rank_tol > 0:
            raise CertificateError(f"rank_tol must be positive, got {self.rank_tol}")


@dataclass
class StrictComplementarity:
    rank_X: int
    rank_S: int
    n: int

    @property
    def holds(self) -> bool:
        return self.rank_X + self.rank_S == self.n


@dataclass
class Certificate:
    """Immutable snapshot of S(YYᵀ) and its smallest eigenpair.

    `lam_blocks` are the diagonal blocks of Λ̂ = −symblockdiag(∇f(X)X), so
    that S = ∇f(X) + Λ̂. The dense spectrum is kept when S was factored
    densely (n up to `CertificateOptions.dense_max_n`).
    """

    model: CostModel = field(repr=False)
    Y: StiefelPoint = field(repr=False)
    lam_blocks: np.ndarray = field(repr=False)
    lambda_min: float
    u_min: np.ndarray = field(repr=False)
    kkt: bool
    tol: float
    scale: float
    grad_f_norm: float
    converged: bool = True
    rank_tol: float = 1e-6
    spectrum: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.Y.spec.n

    def apply(self, v: np.ndarray) -> np.ndarray:
        """S·v for an n-vector or an n×k matrix, without forming S."""
        v = np.asarray(v, dtype=float)
        V = v.reshape(self.n, -1)
        out = self.model.egrad_apply(self.Y.Y, V) + blockdiag_apply(self.lam_blocks, V, self.Y.spec)
        return out.reshape(v.shape)

    def operator(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), matvec=self.apply, matmat=self.apply, dtype=float)

    def todense(self) -> np.ndarray:
        S = self.model.egrad_dense(self.Y.Y) + SymBlockMatrix.block_diagonal(self.lam_blocks).todense()
        return (S + S.T) / 2

    def lambda_hat(self) -> SymBlockMatrix:
        return SymBlockMatrix.block_diagonal(self.lam_blocks)

    def trace_SX(self) -> float:
        """trace(S·YYᵀ); zero on the whole feasible set."""
        return float(np.sum(self.Y.Y * self.apply(self.Y.Y)))

    @property
    def rank_S(self) -> Optional[int]:
        if self.spectrum is None:
            return None
        return int(np.count_nonzero(self.spectrum > self.rank_tol * self.scale))

    def strict_complementarity(self, rank_X: int) -> Optional[StrictComplementarity]:
        if self.rank_S is None:
            return None
        return StrictComplementarity(rank_X=rank_X, rank_S=self.rank_S, n=self.n)


@dataclass
class SdpBounds:
    upper: float
    lower: float
    gap: float
    lambda_min: float


@dataclass
class EscapeDirection:
    Ydot: TangentVector
    mode: str
    base: StiefelPoint
    u: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    # ⟨Ẏ, Hess g(base)[Ẏ]⟩ = 2·uᵀSu
    curvature: float = 0.0


@dataclass
class EscapeStep:
    t: float
    Y: StiefelPoint
    cost: float
    start_cost: float

    @property
    def decrease(self) -> float:
        return self.start_cost - self.cost

    @property
    def accepted(self) -> bool:
        return self.t > 0 and self.decrease >= ESCAPE_DECREASE_RTOL * max(1.0, abs(self.start_cost))


def _lambda_hat_blocks(model: CostModel, Y: StiefelPoint) -> np.ndarray:
    G = model.egrad_times_Y(Y.Y)
    return -sym(diag_block_products(G, Y.Y, Y.spec))


def _smallest_eigenpair(apply: Callable, n: int, opts: CertificateOptions) -> Tuple[float, np.ndarray, bool]:
    rng = make_rng(opts.seed)
    operator = LinearOperator((n, n), matvec=apply, dtype=float)
    estimate, vector = None, None
    try:
        values, vectors = eigsh(operator, k=1, which="SA", v0=rng.standard_normal(n),
                                tol=opts.lanczos_tol, maxiter=opts.lanczos_maxiter)
        return float(values[0]), vectors[:, 0], True
    except ArpackNoConvergence as err:
        if len(err.eigenvalues):
            estimate, vector = float(err.eigenvalues[0]), err.eigenvectors[:, 0]
        logger.debug(f"Lanczos on S did not converge (estimate {estimate}); restarting shifted")

    try:
        spread = float(abs(eigsh(operator, k=1, which="LM", v0=rng.standard_normal(n), tol=1e-3,
                                 maxiter=opts.lanczos_maxiter, return_eigenvectors=False)[0]))
    except ArpackNoConvergence as err:
        spread = float(np.max(np.abs(err.eigenvalues))) if len(err.eigenvalues) else abs(estimate or 1.0)
    sigma = 2 * max(spread, abs(estimate or 0.0), np.finfo(float).tiny)
    flipped = LinearOperator((n, n), matvec=lambda v: sigma * v - apply(v), dtype=float)
    try:
        values, vectors = eigsh(flipped, k=1, which="LA", v0=rng.standard_normal(n),
                                tol=opts.lanczos_tol, maxiter=opts.lanczos_maxiter)
        return float(sigma - values[0]), vectors[:, 0], True
    except ArpackNoConvergence as err:
        if len(err.eigenvalues):
            estimate, vector = float(sigma - err.eigenvalues[0]), err.eigenvectors[:, 0]
    if vector is None:
        vector = np.zeros(n)
        estimate = np.nan
    logger.warning(f"Smallest eigenvalue of S not converged; best estimate {estimate:.3e}")
    return estimate, vector, False


def build_certificate(
    model: CostModel,
    Y: StiefelPoint,
    tol: Optional[float] = None,
    opts: Optional[CertificateOptions] = None,
) -> Certificate:
    opts = opts or CertificateOptions()
    opts.validate()
    tol = opts.kkt_tol if tol is None else tol
    model.check_point(Y.Y)
    spec = Y.spec
    lam_blocks = _lambda_hat_blocks(model, Y)
    grad_f_norm = model.egrad_norm(Y.Y)
    scale = max(1.0, grad_f_norm / np.sqrt(spec.n))

    cert = Certificate(
        model=model,
        Y=Y,
        lam_blocks=lam_blocks,
        lambda_min=np.nan,
        u_min=np.zeros(spec.n),
        kkt=False,
        tol=tol,
        scale=scale,
        grad_f_norm=grad_f_norm,
        rank_tol=opts.rank_tol,
    )
    if spec.n <= opts.dense_max_n:
        spectrum, vectors = scipy.linalg.eigh(cert.todense())
        cert.spectrum = spectrum
        cert.lambda_min, cert.u_min = float(spectrum[0]), vectors[:, 0]
    else:
        cert.lambda_min, cert.u_min, cert.converged = _smallest_eigenpair(cert.apply, spec.n, opts)
    cert.kkt = bool(cert.lambda_min >= -tol * scale)

    logger.certificate(
        f"λ_min(S) = {cert.lambda_min:+.6e} (threshold {-tol * scale:.1e}): "
        f"{'KKT' if cert.kkt else 'not KKT'}{'' if cert.converged else ' [eigensolver not converged]'}"
    )
    return cert


def critical_point_residual(model: CostModel, Y: StiefelPoint) -> float:
    """‖S·Y‖_F, zero exactly at first-order critical points."""
    G = model.egrad_times_Y(Y.Y)
    SY = G - blockdiag_apply(sym(diag_block_products(G, Y.Y, Y.spec)), Y.Y, Y.spec)
    residual = float(np.linalg.norm(SY))
    logger.debug(f"‖SY‖_F = {residual:.3e}, ‖grad g‖/2 = {norm(riemannian_gradient(model, Y)) / 2:.3e}")
    return residual


def sdp_bounds(model: CostModel, Y: StiefelPoint, cert: Optional[Certificate] = None) -> SdpBounds:
    """f(X) + n·λ_min(S) ≤ optimal value ≤ f(X), for linear costs."""
    if model.convexity_class is not ConvexityClass.LINEAR:
        raise CertificateError(f"SDP value bounds need a linear cost, got {model.kind}")
    cert = cert or build_certificate(model, Y)
    upper = g(model, Y)
    lower = upper + Y.spec.n * min(cert.lambda_min, 0.0)
    return SdpBounds(upper=upper, lower=lower, gap=upper - lower, lambda_min=cert.lambda_min)


#==================================================================#
#  Saddle escape
#==================================================================#
def escape_direction(
    model: CostModel,
    Y: StiefelPoint,
    cert: Certificate,
    cond_threshold: float = DEFAULT_COND_THRESHOLD,
    p_plus: Optional[int] = None,
) -> EscapeDirection:
    """Ẏ = u zᵀ with u the bottom eigenvector of S and z a kernel direction of Y.

    When Y has full column rank it is first padded with zero columns (to
    `p_plus`, default p + 1) and z = e_{p+1}; the returned `base` is the
    point Ẏ is tangent at.
    """
    if not cert.lambda_min < 0:
        raise CertificateError(f"No escape direction: λ_min(S) = {cert.lambda_min:.3e} is not negative")
    u = cert.u_min / np.linalg.norm(cert.u_min)
    report = rank_deficiency(Y, cond_threshold)
    if report.deficient:
        base, z, mode = Y, report.kernel[:, 0], "rank_deficient"
    else:
        p_plus = Y.p + 1 if p_plus is None else p_plus
        if p_plus > Y.spec.n:
            raise CertificateError(f"Cannot lift a full-rank factor beyond p = n = {Y.spec.n}")
        base = append_zero_columns(Y, p_plus)
        z = np.zeros(p_plus)
        z[Y.p] = 1.0
        mode = "augmented"
    Ydot = project_tangent(base, np.outer(u, z))
    curvature = 2 * float(u @ cert.apply(u))
    logger.debug(f"Escape direction ({mode}) at p = {base.p}: curvature {curvature:.3e}")
    return EscapeDirection(Ydot=Ydot, mode=mode, base=base, u=u, z=z, curvature=curvature)


def quartic_coefficient(model: LinearCost, Y: StiefelPoint, u: np.ndarray) -> float:
    """Coefficient L of t⁴ in g(R_Y(t·u zᵀ)) for a linear cost, with z ⟂ rows of Y.

    L = ¼[⟨C, AXA⟩ + uᵀD(3·symblockdiag(CX) − 4C)u] where A = symblockdiag(uuᵀ)
    and D = diag(‖u_i‖²) ⊗ I_d.
    """
    spec = Y.spec
    C = model.C
    us = slices(np.asarray(u, dtype=float).reshape(spec.n, 1), spec)[:, :, 0]
    A_blocks = np.einsum("ia,ib->iab", us, us)
    AY = blockdiag_apply(A_blocks, Y.Y, spec)
    first = float(np.sum(AY * apply_sym(C, AY)))

    weights = np.einsum("ia,ia->i", us, us)
    cx_blocks = sym(diag_block_products(apply_sym(C, Y.Y), Y.Y, spec))
    second = 3 * float(np.einsum("i,ia,iab,ib->", weights, us, cx_blocks, us))
    Du = (weights[:, None] * us).ravel()
    third = 4 * float(Du @ apply_sym(C, us.ravel()))
    return 0.25 * (first + second - third)


def _curvature_term(model: LinearCost, Y: StiefelPoint, u: np.ndarray) -> float:
    """uᵀS(YYᵀ)u for a linear cost."""
    spec = Y.spec
    us = slices(u.reshape(spec.n, 1), spec)[:, :, 0]
    cx_blocks = sym(diag_block_products(apply_sym(model.C, Y.Y), Y.Y, spec))
    return float(u @ apply_sym(model.C, u)) - float(np.einsum("ia,iab,ib->", us, cx_blocks, us))


def escape_line_search(
    model: CostModel,
    Y: StiefelPoint,
    Ydot: TangentVector,
    curvature: Optional[float] = None,
    t0: float = 1.0,
    min_step: float = MIN_ESCAPE_STEP,
) -> EscapeStep:
    """Backtracks t from t0 until g(R_Y(tẎ)) ≤ g(Y) + c·½t²·⟨Ẏ, Hess Ẏ⟩.

    Returns t = 0 (and Y itself) if no step down to `min_step` qualifies.
    """
    f0 = g(model, Y)
    if curvature is None:
        curvature = inner(Ydot, riemannian_hessian(model, Y, Ydot))
    t = t0
    while t >= min_step:
        try:
            candidate = retract(Y, Ydot * t)
            value = g(model, candidate)
        except RetractionError:
            value = np.inf
        if value < f0 and value <= f0 + ARMIJO_C * 0.5 * curvature * t ** 2:
            return EscapeStep(t=t, Y=candidate, cost=value, start_cost=f0)
        t /= 2
    logger.debug(f"Escape line search found no decrease down to t = {min_step:.1e}")
    return EscapeStep(t=0.0, Y=Y, cost=f0, start_cost=f0)


def escape_step_size(model: LinearCost, Y: StiefelPoint, u: np.ndarray, z: np.ndarray) -> float:
    """Step along u zᵀ from Y minimizing the quartic model g(Y) + (uᵀSu)t² + Lt⁴.

    Falls back to backtracking when L ≤ 0 or the quartic step does not lower g.
    """
    u = np.asarray(u, dtype=float)
    Ydot = project_tangent(Y, np.outer(u, z))
    a = _curvature_term(model, Y, u)
    L = quartic_coefficient(model, Y, u)
    if a < 0 and L > 0:
        t = float(np.sqrt(-a / (2 * L)))
        f0 = g(model, Y)
        try:
            if g(model, retract(Y, Ydot * t)) < f0:
                logger.debug(f"Quartic escape step t = {t:.4e} (uᵀSu = {a:.3e}, L = {L:.3e})")
                return t
        except RetractionError:
            pass
    return escape_line_search(model, Y, Ydot, curvature=2 * a * float(z @ z)).t


def escape(
    model: CostModel,
    Y: StiefelPoint,
    cert: Certificate,
    cond_threshold: float = DEFAULT_COND_THRESHOLD,
    p_plus: Optional[int] = None,
) -> Tuple[EscapeDirection, EscapeStep]:
    """Computes the escape direction from Y and steps along it."""
    direction = escape_direction(model, Y, cert, cond_threshold=cond_threshold, p_plus=p_plus)
    base = direction.base
    if model.convexity_class is ConvexityClass.LINEAR and isinstance(model, LinearCost):
        t = escape_step_size(model, base, direction.u, direction.z)
        f0 = g(model, base)
        if t > 0:
            moved = retract(base, direction.Ydot * t)
            step = EscapeStep(t=t, Y=moved, cost=g(model, moved), start_cost=f0)
        else:
            step = EscapeStep(t=0.0, Y=base, cost=f0, start_cost=f0)
    else:
        step = escape_line_search(model, base, direction.Ydot, curvature=direction.curvature)
    logger.debug(f"Escape step t = {step.t:.3e} lowers g by {step.decrease:.3e}")
    return direction, step
