"""Riemannian trust-region method with a truncated conjugate-gradient inner
solver (Steihaug-Toint, unpreconditioned), plus a smallest-eigenvalue estimate
for the Riemannian Hessian.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from logger import logger
from manifold.stiefel_product import (
    RetractionError,
    StiefelPoint,
    TangentVector,
    inner,
    norm,
    project_tangent,
    retract,
    tangent_basis,
)
from modeling.cost_model import (
    CostEvaluationError,
    CostModel,
    euclidean_gradient,
    g,
    riemannian_hessian,
)
from utils import SeedLike, make_rng

# Relative cost increase tolerated on an accepted step
MONOTONE_SLACK = 1e-15


class NonFiniteError(CostEvaluationError):
    pass


class TcgReason(str, Enum):
    NEG_CURVATURE = "neg_curvature"
    BOUNDARY = "boundary"
    KAPPA_TOL = "κ_tol"
    THETA_TOL = "θ_tol"
    MAX_INNER = "max_inner"
    MODEL_INCREASED = "model_increased"


@dataclass
class RtrOptions:
    grad_tol: float = 1e-6
    # Compare ‖grad‖ against grad_tol directly instead of grad_tol·max(1, ‖grad(Y0)‖)
    absolute_grad_tol: bool = False
    max_outer: int = 1000
    max_radius: Optional[float] = None
    initial_radius: Optional[float] = None
    min_radius: Optional[float] = None
    rho_prime: float = 0.1
    kappa: float = 0.1
    theta: float = 1.0
    max_inner: Optional[int] = None
    rho_regularization: float = 1e3

    def validate(self) -> None:
        positives = {
            "grad_tol": self.grad_tol,
            "max_outer": self.max_outer,
            "kappa": self.kappa,
            "theta": self.theta,
        }
        for optional in ("max_radius", "initial_radius", "min_radius", "max_inner"):
            if getattr(self, optional) is not None:
                positives[optional] = getattr(self, optional)
        for name, value in positives.items():
            if not value > 0:
                raise ValueError(f"RtrOptions.{name} must be positive, got {value}")
        if not 0 < self.rho_prime <= 0.25:
            raise ValueError(f"RtrOptions.rho_prime must lie in (0, 1/4], got {self.rho_prime}")


@dataclass
class IterationRecord:
    iteration: int
    p: int
    cost: float
    grad_norm: float
    radius: float
    time: float
    accepted: bool
    tcg_reason: Optional[str] = None
    inner_iterations: int = 0


@dataclass
class RtrResult:
    Y: StiefelPoint
    cost: float
    grad_norm: float
    iterations: int
    status: str
    threshold: float = 0.0
    cost_trace: List[float] = field(default_factory=list)
    inner_reasons: Dict[str, int] = field(default_factory=dict)


@dataclass
class TcgResult:
    step: TangentVector
    Hstep: TangentVector
    reason: TcgReason
    iterations: int


@dataclass
class HessianEigen:
    value: float
    vector: TangentVector
    residual: float
    converged: bool


def _model_value(grad: TangentVector, eta: TangentVector, Heta: TangentVector) -> float:
    return inner(eta, grad) + 0.5 * inner(eta, Heta)


def truncated_cg(
    model: CostModel,
    Y: StiefelPoint,
    grad: TangentVector,
    radius: float,
    kappa: float = 0.1,
    theta: float = 1.0,
    max_inner: Optional[int] = None,
    egrad: Optional[np.ndarray] = None,
) -> TcgResult:
    """Approximately minimizes ⟨grad, η⟩ + ½⟨η, Hess η⟩ over ‖η‖ ≤ radius."""
    if egrad is None:
        egrad = euclidean_gradient(model, Y)
    max_inner = Y.manifold.dim if max_inner is None else max_inner

    def hess(U: TangentVector) -> TangentVector:
        return riemannian_hessian(model, Y, U, egrad=egrad)

    zero = TangentVector(Y, np.zeros_like(Y.Y))
    eta, Heta = zero, zero
    r = grad
    r_r = inner(r, r)
    norm_r0 = np.sqrt(r_r)
    if norm_r0 == 0.0:
        return TcgResult(eta, Heta, TcgReason.KAPPA_TOL, 0)

    delta = -r
    e_e, e_d, d_d = 0.0, 0.0, r_r
    model_value = 0.0
    reason = TcgReason.MAX_INNER
    j = 0
    for j in range(1, max_inner + 1):
        Hdelta = hess(delta)
        d_Hd = inner(delta, Hdelta)
        alpha = r_r / d_Hd if d_Hd != 0 else np.inf
        e_e_new = e_e + 2 * alpha * e_d + alpha ** 2 * d_d

        if d_Hd <= 0 or e_e_new >= radius ** 2:
            # Step to the boundary along delta
            tau = (-e_d + np.sqrt(e_d ** 2 + d_d * (radius ** 2 - e_e))) / d_d
            eta = eta + tau * delta
            Heta = Heta + tau * Hdelta
            reason = TcgReason.NEG_CURVATURE if d_Hd <= 0 else TcgReason.BOUNDARY
            break

        new_eta = eta + alpha * delta
        new_Heta = Heta + alpha * Hdelta
        new_value = _model_value(grad, new_eta, new_Heta)
        if new_value >= model_value:
            reason = TcgReason.MODEL_INCREASED
            break
        eta, Heta, model_value = new_eta, new_Heta, new_value
        e_e = e_e_new

        r = r + alpha * Hdelta
        r_r_new = inner(r, r)
        norm_r = np.sqrt(r_r_new)
        if norm_r <= norm_r0 * min(norm_r0 ** theta, kappa):
            reason = TcgReason.KAPPA_TOL if kappa < norm_r0 ** theta else TcgReason.THETA_TOL
            break

        beta = r_r_new / r_r
        r_r = r_r_new
        delta = -r + beta * delta
        e_d = beta * (e_d + alpha * d_d)
        d_d = r_r + beta ** 2 * d_d

    if _model_value(grad, eta, Heta) >= 0:
        eta, Heta = _cauchy_step(grad, hess(grad), radius)
    return TcgResult(eta, Heta, reason, j)


def _cauchy_step(grad: TangentVector, Hgrad: TangentVector, radius: float):
    g_norm = norm(grad)
    g_Hg = inner(grad, Hgrad)
    tau = 1.0 if g_Hg <= 0 else min(g_norm ** 3 / (radius * g_Hg), 1.0)
    scale = -tau * radius / g_norm
    return scale * grad, scale * Hgrad


def _guarded(fn, *args):
    try:
        return fn(*args)
    except CostEvaluationError as err:
        raise NonFiniteError(str(err)) from err


def minimize(
    model: CostModel,
    Y0: StiefelPoint,
    opts: Optional[RtrOptions] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
) -> RtrResult:
    """Runs RTR from Y0 until ‖grad‖ falls below the (relative) tolerance."""
    opts = opts or RtrOptions()
    opts.validate()
    dim = Y0.manifold.dim
    max_radius = opts.max_radius or np.sqrt(max(dim, 1))
    radius = opts.initial_radius or max_radius / 8
    min_radius = opts.min_radius or 1e-12 * max_radius
    max_inner = opts.max_inner or max(dim, 1)
    start = time.perf_counter()

    Y = Y0
    fx = _guarded(g, model, Y)
    egrad = _guarded(euclidean_gradient, model, Y)
    grad = project_tangent(Y, egrad)
    grad_norm = norm(grad)
    threshold = opts.grad_tol if opts.absolute_grad_tol else opts.grad_tol * max(1.0, grad_norm)
    cost_trace = [fx]
    reasons = Counter()
    status = "max_iter"
    iterations = opts.max_outer

    for k in range(1, opts.max_outer + 1):
        if grad_norm <= threshold or dim == 0:
            status, iterations = "converged", k
            break
        if radius < min_radius:
            status, iterations = "stalled", k
            logger.warning(f"Trust region collapsed to {radius:.3e} at ‖grad‖ = {grad_norm:.3e}")
            break

        tcg = truncated_cg(model, Y, grad, radius, opts.kappa, opts.theta, max_inner, egrad=egrad)
        reasons[tcg.reason.value] += 1
        try:
            proposal = retract(Y, tcg.step)
            f_prop = _guarded(g, model, proposal)
        except RetractionError as err:
            logger.debug(f"Rejecting step: {err}")
            proposal, f_prop = None, np.inf

        rhonum = fx - f_prop
        rhoden = -inner(grad, tcg.step) - 0.5 * inner(tcg.step, tcg.Hstep)
        rho_reg = max(1.0, abs(fx)) * np.spacing(1) * opts.rho_regularization
        rhonum += rho_reg
        rhoden += rho_reg
        model_decreased = rhoden >= 0
        rho = rhonum / rhoden if rhoden != 0 else np.nan

        if not model_decreased or np.isnan(rho) or rho < 0.25:
            radius /= 4
        elif rho > 0.75 and tcg.reason in (TcgReason.NEG_CURVATURE, TcgReason.BOUNDARY):
            radius = min(2 * radius, max_radius)

        # Near convergence f changes below its rounding error; allow that much
        accepted = model_decreased and rho > opts.rho_prime and f_prop <= fx + MONOTONE_SLACK * max(1.0, abs(fx))
        if accepted:
            Y, fx = proposal, f_prop
            egrad = _guarded(euclidean_gradient, model, Y)
            grad = project_tangent(Y, egrad)
            grad_norm = norm(grad)
            cost_trace.append(fx)

        record = IterationRecord(
            iteration=k,
            p=Y.p,
            cost=fx,
            grad_norm=grad_norm,
            radius=radius,
            time=time.perf_counter() - start,
            accepted=accepted,
            tcg_reason=tcg.reason.value,
            inner_iterations=tcg.iterations,
        )
        logger.iteration(
            f"{'acc' if accepted else 'REJ'} k={k:5d} f={fx:+.12e} ‖grad‖={grad_norm:.3e} "
            f"Δ={radius:.3e} inner={tcg.iterations} ({tcg.reason.value})"
        )
        if callback is not None:
            callback(record)
    else:
        if grad_norm <= threshold:
            status = "converged"

    return RtrResult(
        Y=Y,
        cost=fx,
        grad_norm=grad_norm,
        iterations=iterations,
        status=status,
        threshold=threshold,
        cost_trace=cost_trace,
        inner_reasons=dict(reasons),
    )


def hessian_matrix(model: CostModel, Y: StiefelPoint, basis: Optional[np.ndarray] = None) -> np.ndarray:
    """Riemannian Hessian in an orthonormal tangent basis (small problems only)."""
    basis = tangent_basis(Y) if basis is None else basis
    egrad = euclidean_gradient(model, Y)
    columns = [
        riemannian_hessian(model, Y, TangentVector(Y, b.reshape(Y.Y.shape)), egrad=egrad).V.ravel()
        for b in basis.T
    ]
    Hb = basis.T @ np.array(columns).T if columns else np.zeros((0, 0))
    return (Hb + Hb.T) / 2


def min_eig_hessian(
    model: CostModel,
    Y: StiefelPoint,
    tol: float = 1e-8,
    seed: SeedLike = 0,
    dense_max: int = 400,
    maxiter: Optional[int] = None,
) -> HessianEigen:
    """Smallest eigenpair of Hess g(Y) on the tangent space."""
    shape = Y.Y.shape
    if Y.manifold.dim == 0:
        return HessianEigen(0.0, TangentVector(Y, np.zeros(shape)), 0.0, True)

    egrad = euclidean_gradient(model, Y)

    def hess(U: TangentVector) -> TangentVector:
        return riemannian_hessian(model, Y, U, egrad=egrad)

    if Y.Y.size <= dense_max:
        basis = tangent_basis(Y)
        values, vectors = np.linalg.eigh(hessian_matrix(model, Y, basis))
        v = TangentVector(Y, (basis @ vectors[:, 0]).reshape(shape))
        value, converged, scale = float(values[0]), True, float(np.abs(values).max())
    else:
        def apply_projected(x):
            U = project_tangent(Y, np.asarray(x).reshape(shape))
            return hess(U).V.ravel(), U.V.ravel()

        size = Y.Y.size
        rng = make_rng(seed)
        top = LinearOperator((size, size), matvec=lambda x: apply_projected(x)[0], dtype=float)
        try:
            spread = float(abs(eigsh(top, k=1, which="LM", v0=rng.standard_normal(size),
                                     tol=1e-3, maxiter=maxiter, return_eigenvectors=False)[0]))
        except ArpackNoConvergence as err:
            spread = float(np.max(np.abs(err.eigenvalues))) if len(err.eigenvalues) else 1.0
        shift = 1.01 * spread + 1.0

        def flipped(x):
            x = np.asarray(x).ravel()
            Hx, Px = apply_projected(x)
            # Normal directions map to 0; tangent eigenvalue λ maps to shift − λ
            return shift * Px - Hx

        operator = LinearOperator((size, size), matvec=flipped, dtype=float)
        converged = True
        try:
            values, vectors = eigsh(operator, k=1, which="LA", v0=rng.standard_normal(size),
                                    tol=tol, maxiter=maxiter)
        except ArpackNoConvergence as err:
            converged = False
            values, vectors = err.eigenvalues, err.eigenvectors
            if len(values) == 0:
                logger.warning("Hessian eigensolver returned no estimate")
                return HessianEigen(np.nan, TangentVector(Y, np.zeros(shape)), np.inf, False)
        value = float(shift - values[0])
        v = project_tangent(Y, vectors[:, 0].reshape(shape))
        v = v / max(norm(v), np.finfo(float).tiny)
        # ARPACK's tolerance is relative to the shifted operator
        scale = 2 * shift

    residual = norm(hess(v) - value * v)
    if residual > tol * max(1.0, abs(value), scale):
        converged = False
    if not converged:
        logger.warning(f"Hessian eigenpair not converged: λ≈{value:.3e}, residual {residual:.3e}")
    return HessianEigen(value, v, residual, converged)
