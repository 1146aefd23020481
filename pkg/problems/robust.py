"""Robust synchronization drivers: ε continuation for smoothed costs and the
rank check for least unsquared deviations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from logger import logger
from manifold.blockmat import SymBlockMatrix
from manifold.stiefel_product import StiefelPoint
from modeling.cost_model import CostModel
from modeling.cost_models.smoothed_lud import SmoothedLUDCost
from problems.synchronization import RecoveryMetrics, recovery_metrics
from solver.rtr import IterationRecord
from solver.staircase import SolveReport, StaircaseOptions, solve

DEFAULT_EPS_SCHEDULE = (1.0, 1e-1, 1e-2, 1e-3)
DEFAULT_LUD_EPS = 1e-2


@dataclass
class ContinuationStep:
    eps: float
    report: SolveReport
    metrics: Optional[RecoveryMetrics] = None


@dataclass
class ContinuationReport:
    steps: List[ContinuationStep] = field(default_factory=list)

    @property
    def final(self) -> SolveReport:
        return self.steps[-1].report

    @property
    def block_mse(self) -> List[float]:
        return [step.metrics.block_mse for step in self.steps if step.metrics is not None]


@dataclass
class RankSuppressionReport:
    rank: int
    kkt: bool
    d: int
    report: SolveReport = field(repr=False)

    @property
    def holds(self) -> bool:
        # An inconsistent H admits no KKT point of rank d
        return not self.kkt or self.rank > self.d


def check_eps_schedule(schedule: Sequence[float]) -> List[float]:
    schedule = [float(eps) for eps in schedule]
    if not schedule:
        raise ValueError("ε schedule is empty")
    if any(not eps > 0 for eps in schedule):
        raise ValueError(f"ε values must be positive, got {schedule}")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"ε schedule must be strictly decreasing, got {schedule}")
    return schedule


def epsilon_continuation(
    model: CostModel,
    schedule: Sequence[float] = DEFAULT_EPS_SCHEDULE,
    opts: Optional[StaircaseOptions] = None,
    truth: Optional[StiefelPoint] = None,
    Y0: Optional[StiefelPoint] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
) -> ContinuationReport:
    """Solves `model` at each ε of a decreasing schedule, warm-starting every
    solve at the previous final factor."""
    schedule = check_eps_schedule(schedule)
    out = ContinuationReport()
    Y = Y0
    for eps in schedule:
        report = solve(model.with_epsilon(eps), opts, Y0=Y, callback=callback)
        metrics = recovery_metrics(report.Y, truth) if truth is not None else None
        out.steps.append(ContinuationStep(eps=eps, report=report, metrics=metrics))
        mse = "" if metrics is None else f", block_mse {metrics.block_mse:.3e}"
        logger.info(f"ε = {eps:.1e}: {report.status} at p = {report.p}, f = {report.cost:+.10e}{mse}")
        Y = report.Y
    return out


def clip_operator_norm(H: SymBlockMatrix) -> SymBlockMatrix:
    """Caps the singular values of every off-diagonal block at 1."""
    blocks = H.to_blocks()
    U, s, Vt = np.linalg.svd(blocks)
    clipped = (U * np.minimum(s, 1.0)[..., None, :]) @ Vt
    m = H.spec.m
    clipped[np.arange(m), np.arange(m)] = blocks[np.arange(m), np.arange(m)]
    return SymBlockMatrix.from_blocks(clipped)


def lud_rank_suppression_check(
    H: SymBlockMatrix, eps: float = DEFAULT_LUD_EPS, opts: Optional[StaircaseOptions] = None
) -> RankSuppressionReport:
    """Solves the smoothed LUD problem for H, whose off-diagonal blocks must
    have operator norm at most 1, and reports the rank of the KKT point."""
    norms = np.linalg.norm(H.to_blocks(), ord=2, axis=(2, 3))
    np.fill_diagonal(norms, 0.0)
    if norms.max() > 1 + 1e-12:
        raise ValueError(f"Off-diagonal blocks need ‖H_ij‖_op <= 1, largest is {norms.max():.6f}")
    report = solve(SmoothedLUDCost(H, eps), opts)
    check = RankSuppressionReport(rank=report.numerical_rank, kkt=report.kkt, d=H.spec.d, report=report)
    if check.holds:
        logger.info(f"LUD solution has rank {check.rank} > d = {check.d} (KKT: {check.kkt})")
    else:
        logger.warning(f"LUD returned a KKT point of rank {check.rank} = d; H appears consistent")
    return check
