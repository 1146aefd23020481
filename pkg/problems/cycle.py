"""Synchronization on a single cycle, which has a closed-form solution.

With measurements H_{1,2}, …, H_{m,1} ∈ O(d) and P = H_{1,2}⋯H_{m,1}, the
recurrence Q_m = H_{m,1}, Q_i = H_{i,i+1}Q_{i+1} spreads the inconsistency
P evenly over the edges: X_ij = Q_i P^{(i−j)/m} Q_jᵀ. This needs a principal
root of P, hence no eigenvalue −1. The certificate S(X) then block-diagonalizes
into one m×m Hermitian block per eigenphase θ_k of P.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
import scipy.linalg

from logger import logger
from manifold.blockmat import BlockSpec, SymBlockMatrix
from manifold.stiefel_product import ManifoldSpec, StiefelPoint, polar_factor
from modeling.cost_model import InvalidMeasurements
from modeling.cost_models.linear import LinearCost
from solver.certificate import CertificateOptions, build_certificate
from utils import BdsdpError, SeedLike, make_rng

# Eigenphases closer than this to π count as the eigenvalue −1
PHASE_GATE = 1e-8
ORTHOGONALITY_TOL = 1e-12
KERNEL_TOL = 1e-9


class Unsolvable(BdsdpError):
    pass


@dataclass
class CycleInstance:
    # H[i] is the measurement on edge (i, i+1), H[m-1] the closing edge (m, 1)
    H: np.ndarray

    def __post_init__(self) -> None:
        self.H = np.asarray(self.H, dtype=float)
        if self.H.ndim != 3 or self.H.shape[1] != self.H.shape[2]:
            raise InvalidMeasurements(f"Cycle measurements must be an (m, d, d) stack, got {self.H.shape}")
        if self.m < 3:
            raise InvalidMeasurements(f"A cycle needs m >= 3 measurements, got {self.m}")
        eye = np.eye(self.d)
        worst = float(np.abs(np.einsum("iab,icb->iac", self.H, self.H) - eye).max())
        if worst > ORTHOGONALITY_TOL:
            raise InvalidMeasurements(f"Cycle measurements are not orthogonal (error {worst:.2e})")

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    @property
    def spec(self) -> BlockSpec:
        return BlockSpec(self.m, self.d)

    @property
    def P(self) -> np.ndarray:
        return np.linalg.multi_dot(list(self.H))

    @property
    def eigenphases(self) -> np.ndarray:
        return eigenphases(self.P)


@dataclass
class CycleSolution:
    # Recurrence matrices, Q_1 = P
    Q: np.ndarray
    root: np.ndarray
    Y: StiefelPoint

    def X(self) -> np.ndarray:
        return self.Y.X()


@dataclass
class CycleSpectrum:
    numeric: np.ndarray
    analytic: np.ndarray
    phases: np.ndarray
    # Smallest eigenvalue over all tridiagonal T_k: the floor of the nonzero spectrum
    interlacing_floor: float
    kernel_dim: int
    d: int
    toeplitz: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def lambda_min(self) -> float:
        return float(self.numeric[0])

    @property
    def rank_S(self) -> int:
        return len(self.numeric) - self.kernel_dim

    @property
    def holds(self) -> bool:
        nonzero = self.numeric[self.kernel_dim:]
        return bool(
            self.lambda_min >= -KERNEL_TOL
            and self.kernel_dim == self.d
            and np.all(nonzero >= self.interlacing_floor - KERNEL_TOL)
            and np.allclose(self.numeric, self.analytic, atol=KERNEL_TOL)
        )


#==================================================================#
#  Real normal form of orthogonal matrices
#==================================================================#
def _normal_form(P: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, int, float]]]:
    """Real Schur form of orthogonal P as (Z, [(start, size, angle)]) with
    1×1 blocks at angle 0 or π and 2×2 rotation blocks at angle in (−π, π)."""
    T, Z = scipy.linalg.schur(np.asarray(P, dtype=float), output="real")
    d = T.shape[0]
    blocks = []
    k = 0
    while k < d:
        if k + 1 < d and abs(T[k + 1, k]) > 1e-14:
            angle = float(np.arctan2((T[k + 1, k] - T[k, k + 1]) / 2, (T[k, k] + T[k + 1, k + 1]) / 2))
            blocks.append((k, 2, angle))
            k += 2
        else:
            blocks.append((k, 1, 0.0 if T[k, k] > 0 else np.pi))
            k += 1
    return Z, blocks


def eigenphases(P: np.ndarray) -> np.ndarray:
    _, blocks = _normal_form(P)
    phases = []
    for _, size, angle in blocks:
        phases.extend([angle, -angle] if size == 2 else [angle])
    return np.array(sorted(phases))


def _require_principal(angle: float) -> None:
    if np.pi - abs(angle) <= PHASE_GATE:
        raise Unsolvable(f"P has eigenvalue −1 (phase {angle:+.10f}); no principal root exists")


def check_solvable(P: np.ndarray) -> None:
    for _, _, angle in _normal_form(P)[1]:
        _require_principal(angle)


def fractional_power(P: np.ndarray, alpha: float) -> np.ndarray:
    """Principal P^α of an orthogonal P without eigenvalue −1: every rotation
    block of angle θ becomes a rotation by αθ."""
    Z, blocks = _normal_form(P)
    d = Z.shape[0]
    R = np.zeros((d, d))
    for start, size, angle in blocks:
        _require_principal(angle)
        if size == 1:
            R[start, start] = 1.0
        else:
            c, s = np.cos(alpha * angle), np.sin(alpha * angle)
            R[start:start + 2, start:start + 2] = [[c, -s], [s, c]]
    return Z @ R @ Z.T


def matrix_root(P: np.ndarray, m: int) -> np.ndarray:
    return fractional_power(P, 1.0 / m)


#==================================================================#
#  Instances, cost and closed form
#==================================================================#
def gen_cycle(m: int, d: int, seed: SeedLike = None, orthogonal: bool = False) -> CycleInstance:
    """Random measurements: Haar rotations, or all of O(d) with `orthogonal`."""
    rng = make_rng(seed)
    H = polar_factor(rng.standard_normal((m, d, d)))
    if not orthogonal:
        flip = np.linalg.det(H) < 0
        H[flip, 0, :] *= -1
    return CycleInstance(H)


def cycle_cost(inst: CycleInstance) -> LinearCost:
    """C with −H_{i,i+1} in block (i, i+1) and −H_{m,1} in block (m, 1)."""
    m, d = inst.m, inst.d
    blocks = np.zeros((m, m, d, d))
    for i in range(m):
        j = (i + 1) % m
        blocks[i, j] = -inst.H[i]
        blocks[j, i] = -inst.H[i].T
    return LinearCost(SymBlockMatrix.from_blocks(blocks))


def squared_cycle_residual(inst: CycleInstance, Y: StiefelPoint) -> float:
    """Σ_i ‖Y_iY_{i+1}ᵀ − H_{i,i+1}‖²_F, with Y_{m+1} = Y_1."""
    S = Y.slices
    following = np.roll(S, -1, axis=0)
    residual = np.einsum("iap,ibp->iab", S, following) - inst.H
    return float(np.sum(residual * residual))


def closed_form_solution(inst: CycleInstance) -> CycleSolution:
    m, d = inst.m, inst.d
    Q = np.zeros((m, d, d))
    Q[m - 1] = inst.H[m - 1]
    for i in range(m - 2, -1, -1):
        Q[i] = inst.H[i] @ Q[i + 1]
    root = matrix_root(Q[0], m)
    # Y_i = Q_i R^i gives Y_iY_jᵀ = Q_i R^{i−j} Q_jᵀ
    slices = np.empty_like(Q)
    power = np.eye(d)
    for i in range(m):
        power = power @ root
        slices[i] = Q[i] @ power
    Y = StiefelPoint(ManifoldSpec(inst.spec, d), slices.reshape(m * d, d))
    logger.debug(f"Closed-form cycle solution: m={m}, d={d}, phases {np.round(inst.eigenphases, 6)}")
    return CycleSolution(Q=Q, root=root, Y=Y)


def phase_block(theta: float, m: int) -> np.ndarray:
    """The m×m Hermitian block of S(X) for eigenphase θ."""
    A = np.zeros((m, m), dtype=complex)
    idx = np.arange(m)
    A[idx, idx] = 2 * np.cos(theta / m)
    A[idx[:-1], idx[1:]] = -1.0
    A[idx[1:], idx[:-1]] = -1.0
    A[0, m - 1] = -np.exp(-1j * theta)
    A[m - 1, 0] = -np.exp(1j * theta)
    return A


def toeplitz_eigenvalues(theta: float, m: int) -> np.ndarray:
    j = np.arange(1, m)
    return 2 * (np.cos(theta / m) - np.cos(j * np.pi / m))


def certificate_spectrum(inst: CycleInstance, sol: CycleSolution) -> CycleSpectrum:
    """Spectrum of S(X) for the cycle cost, next to the one predicted by the
    per-phase blocks."""
    model = cycle_cost(inst)
    cert = build_certificate(model, sol.Y, opts=CertificateOptions(dense_max_n=max(2000, inst.spec.n)))
    numeric = np.sort(cert.spectrum)
    phases = inst.eigenphases
    analytic = np.sort(np.concatenate([np.linalg.eigvalsh(phase_block(theta, inst.m)) for theta in phases]))
    toeplitz = [toeplitz_eigenvalues(theta, inst.m) for theta in phases]
    spectrum = CycleSpectrum(
        numeric=numeric,
        analytic=analytic,
        phases=phases,
        interlacing_floor=float(min(t.min() for t in toeplitz)),
        kernel_dim=int(np.count_nonzero(np.abs(numeric) <= KERNEL_TOL)),
        d=inst.d,
        toeplitz=toeplitz,
    )
    logger.certificate(
        f"Cycle certificate: λ_min(S) = {spectrum.lambda_min:+.3e}, kernel {spectrum.kernel_dim} (d = {inst.d}), "
        f"floor {spectrum.interlacing_floor:.3e}"
    )
    return spectrum
