"""The Riemannian Staircase.

RTR solves g(Y) = f(YYᵀ) over St(d,p)^m for increasing p. After each stage
the dual certificate S(YYᵀ) decides: PSD means X = YYᵀ is KKT for the
relaxation and the solve stops; otherwise the factor is padded with zero
columns and pushed off the saddle along u·e_{p+1}ᵀ, with u the bottom
eigenvector of S. The largest rank visited is capped by what the cost's
convexity class guarantees to be enough.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from logger import logger
from manifold.stiefel_product import (
    DEFAULT_COND_THRESHOLD,
    ManifoldSpec,
    StiefelPoint,
    append_zero_columns,
    check_feasibility,
    compact_factor,
    polar_factor,
    random_point,
    rank_deficiency,
)
from manifold.blockmat import DimensionMismatch
from modeling.cost_model import ConvexityClass, CostModel, g
from solver.certificate import (
    Certificate,
    CertificateOptions,
    SdpBounds,
    StrictComplementarity,
    build_certificate,
    escape,
    sdp_bounds,
)
from solver.faces import FaceError, FaceReport, face_dimension, in_face_rank_reduction
from solver.rtr import IterationRecord, RtrOptions, RtrResult, min_eig_hessian, minimize
from utils import BdsdpError

CONCAVE_CLASSES = (ConvexityClass.LINEAR, ConvexityClass.CONCAVE, ConvexityClass.STRONGLY_CONCAVE)
# concave_postprocess gives up after this many steps per column of Y
POSTPROCESS_STEPS_PER_RANK = 50
ROUNDING_SIGMA_MIN = 1e-12
# Status of a run whose last escape could not lower g: S is PSD up to rounding
NUMERICALLY_KKT = "numerically_kkt"


class ScheduleError(BdsdpError, ValueError):
    pass


class RoundingError(BdsdpError):
    pass


@dataclass
class StaircaseOptions:
    # Explicit ranks p₁ < p₂ < …; default is d+1, d+2, … up to the cap
    rank_schedule: Optional[List[int]] = None
    p_max: Optional[int] = None
    cond_threshold: float = DEFAULT_COND_THRESHOLD
    kkt_tol: float = 1e-8
    rtr: RtrOptions = field(default_factory=RtrOptions)
    certificate: CertificateOptions = field(default_factory=CertificateOptions)
    seed: int = 0
    check_second_order: bool = True
    concave_postprocess: bool = False
    # Absolute ‖grad‖ target, relative to max(1, ‖∇g‖), of the re-run made
    # when a stage's certificate fails on a merely approximate critical point
    polish_grad_tol: float = 1e-12
    polish_max_outer: int = 200
    # Escapes are only attempted once ‖grad‖ is within this factor of the RTR threshold
    escape_grad_factor: float = 10.0
    # Escapes from rank-deficient, non-KKT points before the solve gives up
    max_rank_deficient_escapes: int = 3

    def validate(self) -> None:
        self.rtr.validate()
        self.certificate.validate()
        if self.rank_schedule is not None:
            schedule = list(self.rank_schedule)
            if not schedule:
                raise ScheduleError("rank_schedule is empty")
            if any(int(p) != p or p < 1 for p in schedule):
                raise ScheduleError(f"rank_schedule must hold positive integers, got {schedule}")
            if any(b <= a for a, b in zip(schedule, schedule[1:])):
                raise ScheduleError(f"rank_schedule must be strictly increasing, got {schedule}")
        if self.p_max is not None and self.p_max < 1:
            raise ScheduleError(f"p_max must be positive, got {self.p_max}")
        if not self.cond_threshold > 1:
            raise ValueError(f"cond_threshold must exceed 1, got {self.cond_threshold}")
        if not self.kkt_tol > 0:
            raise ValueError(f"kkt_tol must be positive, got {self.kkt_tol}")
        if not self.polish_grad_tol > 0 or self.polish_max_outer < 1:
            raise ValueError("polish_grad_tol and polish_max_outer must be positive")
        if self.escape_grad_factor < 1:
            raise ValueError(f"escape_grad_factor must be at least 1, got {self.escape_grad_factor}")


@dataclass
class StageRecord:
    p: int
    iterations: int
    cost: float
    grad_norm: float
    rtr_status: str
    lambda_min_S: float
    kkt: bool
    cond: float
    numerical_rank: int
    lambda_min_hess: Optional[float] = None
    polished: bool = False
    escape: Optional[str] = None
    escape_t: float = 0.0
    escape_decrease: float = 0.0
    time: float = 0.0


@dataclass
class EscapeStall:
    """Where an escape failed to lower g by the acceptance margin."""

    p: int
    lambda_min: float
    t: float
    decrease: float


@dataclass
class PostprocessReport:
    Y: StiefelPoint
    cost: float
    kkt: bool
    status: str
    iterations: int
    lambda_min: float
    # Numerical rank after every step
    ranks: List[int] = field(default_factory=list)
    certificate: Optional[Certificate] = field(default=None, repr=False)
    stall: Optional[EscapeStall] = None


@dataclass
class SolveReport:
    Y: StiefelPoint
    p: int
    cost: float
    kkt: bool
    status: str
    lambda_min: float
    numerical_rank: int
    stages: List[StageRecord]
    schedule: List[int]
    seed: int
    wall_time: float = 0.0
    bounds: Optional[SdpBounds] = None
    face: Optional[FaceReport] = None
    strict_complementarity: Optional[StrictComplementarity] = None
    postprocess: Optional[PostprocessReport] = None
    certificate: Optional[Certificate] = field(default=None, repr=False)
    stall: Optional[EscapeStall] = None

    @property
    def total_iterations(self) -> int:
        return sum(stage.iterations for stage in self.stages)

    @property
    def escapes(self) -> int:
        return sum(stage.escape is not None for stage in self.stages)


#==================================================================#
#  Rank schedule
#==================================================================#
def rank_cap(convexity_class: ConvexityClass, m: int, d: int) -> int:
    """Largest rank the staircase needs for a cost of this class."""
    n = m * d
    if convexity_class is ConvexityClass.STRONGLY_CONCAVE:
        # ⌊p*⌋ + 1 with p* = (√(1 + 4md(d+1)) − 1)/2, in exact integer arithmetic
        cap = (math.isqrt(1 + 4 * m * d * (d + 1)) - 1) // 2 + 1
    elif convexity_class in (ConvexityClass.CONCAVE, ConvexityClass.LINEAR):
        cap = (d + 1) * n // (d + 3) + 1
    else:
        cap = n
    return min(cap, n)


def resolve_schedule(model: CostModel, opts: Optional[StaircaseOptions] = None) -> List[int]:
    opts = opts or StaircaseOptions()
    spec = model.spec
    d = spec.d
    cap = rank_cap(model.convexity_class, spec.m, d)
    if opts.p_max is not None:
        cap = min(cap, opts.p_max)
    if cap < d + 1:
        raise ScheduleError(
            f"No rank above d = {d} is allowed (cap {cap}, n = {spec.n}); the staircase needs p ≥ d + 1"
        )
    if opts.rank_schedule is None:
        return list(range(d + 1, cap + 1))

    schedule = [int(p) for p in opts.rank_schedule]
    if schedule[0] < d + 1:
        raise ScheduleError(f"rank_schedule starts at {schedule[0]}, below d + 1 = {d + 1}")
    kept = [p for p in schedule if p <= cap]
    if not kept:
        raise ScheduleError(f"Every entry of rank_schedule {schedule} exceeds the cap {cap}")
    if len(kept) < len(schedule):
        logger.warning(f"Dropping ranks {schedule[len(kept):]} above the cap {cap} for a {model.kind} cost")
    return kept


def _warm_start(Y0: StiefelPoint, model: CostModel, schedule: List[int]):
    if Y0.spec != model.spec:
        raise DimensionMismatch(f"Warm start has blocks {Y0.spec}, the cost has {model.spec}")
    check_feasibility(Y0)
    if Y0.p > schedule[-1]:
        raise ScheduleError(f"Warm start rank {Y0.p} exceeds the largest allowed rank {schedule[-1]}")
    remaining = [p for p in schedule if p >= Y0.p]
    Y = Y0 if remaining[0] == Y0.p else append_zero_columns(Y0, remaining[0])
    return Y, remaining


#==================================================================#
#  Stages
#==================================================================#
def _polish(model: CostModel, Y: StiefelPoint, opts: StaircaseOptions, callback) -> RtrResult:
    rtr = replace(
        opts.rtr,
        grad_tol=opts.polish_grad_tol * max(1.0, 2 * model.egrad_norm(Y.Y)),
        absolute_grad_tol=True,
        max_outer=opts.polish_max_outer,
    )
    return minimize(model, Y, rtr, callback)


def _run_stage(model: CostModel, Y: StiefelPoint, opts: StaircaseOptions, callback):
    start = time.perf_counter()
    result = minimize(model, Y, opts.rtr, callback)
    cert = build_certificate(model, result.Y, opts.kkt_tol, opts.certificate)
    polished = False
    if not cert.kkt:
        retry = _polish(model, result.Y, opts, callback)
        if retry.cost <= result.cost:
            retry_cert = build_certificate(model, retry.Y, opts.kkt_tol, opts.certificate)
            logger.debug(f"Polished stage: ‖grad‖ {result.grad_norm:.2e} -> {retry.grad_norm:.2e}")
            # Keep the stage's RTR threshold for the escape test
            result = replace(retry, iterations=result.iterations + retry.iterations, threshold=result.threshold)
            cert, polished = retry_cert, True
    rank = rank_deficiency(result.Y, opts.cond_threshold)
    record = StageRecord(
        p=result.Y.p,
        iterations=result.iterations,
        cost=result.cost,
        grad_norm=result.grad_norm,
        rtr_status=result.status,
        lambda_min_S=cert.lambda_min,
        kkt=cert.kkt,
        cond=rank.cond,
        numerical_rank=rank.numerical_rank,
        polished=polished,
    )
    if opts.check_second_order:
        record.lambda_min_hess = min_eig_hessian(model, result.Y, seed=opts.seed).value
    record.time = time.perf_counter() - start
    return result, cert, rank, record


def _log_stage(record: StageRecord) -> None:
    hess = "" if record.lambda_min_hess is None else f" λ_min(Hess)={record.lambda_min_hess:+.2e}"
    logger.stage(
        f"p={record.p:3d} iters={record.iterations:5d} f={record.cost:+.10e} ‖grad‖={record.grad_norm:.2e} "
        f"λ_min(S)={record.lambda_min_S:+.2e}{hess} rank={record.numerical_rank}/{record.p}"
        f"{' escape=' + record.escape if record.escape else ''}"
    )


def _final_report(
    model: CostModel,
    Y: StiefelPoint,
    cert: Certificate,
    status: str,
    stages: List[StageRecord],
    schedule: List[int],
    opts: StaircaseOptions,
    start: float,
    postprocess: Optional[PostprocessReport] = None,
    stall: Optional[EscapeStall] = None,
) -> SolveReport:
    rank = rank_deficiency(Y, opts.cond_threshold)
    bounds = sdp_bounds(model, Y, cert) if model.convexity_class is ConvexityClass.LINEAR else None
    try:
        face = face_dimension(compact_factor(Y, opts.cond_threshold))
    except FaceError as err:
        logger.debug(f"No face report: {err}")
        face = None
    report = SolveReport(
        Y=Y,
        p=Y.p,
        cost=g(model, Y),
        kkt=cert.kkt or status == NUMERICALLY_KKT,
        status=status,
        lambda_min=cert.lambda_min,
        numerical_rank=rank.numerical_rank,
        stages=stages,
        schedule=schedule,
        seed=opts.seed,
        wall_time=time.perf_counter() - start,
        bounds=bounds,
        face=face,
        strict_complementarity=cert.strict_complementarity(rank.numerical_rank),
        postprocess=postprocess,
        certificate=cert,
        stall=stall,
    )
    if report.status == "certified":
        verdict = "certified KKT"
    elif report.kkt:
        verdict = f"numerically KKT (λ_min(S) = {report.lambda_min:+.2e})"
    else:
        verdict = f"NOT certified ({status})"
    gap = "" if bounds is None else f", gap {bounds.gap:.2e}"
    logger.certificate(
        f"Staircase {verdict} at p = {report.p}, rank {report.numerical_rank}, f = {report.cost:+.12e}{gap}"
    )
    return report


def solve(
    model: CostModel,
    opts: Optional[StaircaseOptions] = None,
    Y0: Optional[StiefelPoint] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
) -> SolveReport:
    """Climbs the rank schedule until the certificate at the stage's
    minimizer is PSD, the factor turns rank-deficient, or the cap is reached.

    `callback` receives every RTR iteration of every stage.
    """
    opts = opts or StaircaseOptions()
    opts.validate()
    start = time.perf_counter()
    schedule = resolve_schedule(model, opts)
    if Y0 is None:
        Y = random_point(ManifoldSpec(model.spec, schedule[0]), opts.seed)
        remaining = schedule
    else:
        Y, remaining = _warm_start(Y0, model, schedule)
    logger.info(
        f"Staircase for a {model.kind} cost: m = {model.spec.m}, d = {model.spec.d}, ranks {remaining}"
    )

    stages: List[StageRecord] = []
    status = "schedule_exhausted"
    postprocess = None
    stall = None
    deficient_escapes = 0
    i = 0
    while True:
        result, cert, rank, record = _run_stage(model, Y, opts, callback)
        stages.append(record)
        Y = result.Y
        last = i == len(remaining) - 1

        if cert.kkt:
            _log_stage(record)
            status = "certified"
            break

        if result.grad_norm > opts.escape_grad_factor * result.threshold:
            # Curvature information is meaningless away from a critical point
            _log_stage(record)
            logger.warning(
                f"RTR stopped at ‖grad‖ = {result.grad_norm:.2e} ({result.status}); no escape attempted at p = {Y.p}"
            )
            if last:
                break
            i += 1
            Y = append_zero_columns(Y, remaining[i])
            continue

        if rank.deficient:
            if deficient_escapes >= opts.max_rank_deficient_escapes:
                _log_stage(record)
                status = "escape_stalled"
                break
            direction, step = escape(model, Y, cert, opts.cond_threshold)
            deficient_escapes += 1
        elif last:
            _log_stage(record)
            if opts.concave_postprocess and model.convexity_class in CONCAVE_CLASSES:
                postprocess = concave_postprocess(model, Y, opts, cert)
                Y, cert, status = postprocess.Y, postprocess.certificate, postprocess.status
                stall = postprocess.stall
            break
        else:
            i += 1
            direction, step = escape(model, Y, cert, opts.cond_threshold, p_plus=remaining[i])

        record.escape = direction.mode
        record.escape_t = step.t
        record.escape_decrease = step.decrease
        _log_stage(record)
        if not step.accepted:
            stall = EscapeStall(p=record.p, lambda_min=cert.lambda_min, t=step.t, decrease=step.decrease)
            logger.warning(
                f"Escape from p = {record.p} lowered g by only {step.decrease:.2e}; "
                f"λ_min(S) = {cert.lambda_min:.2e} is treated as numerically PSD"
            )
            status = NUMERICALLY_KKT
            break
        Y = step.Y

    return _final_report(model, Y, cert, status, stages, remaining, opts, start, postprocess, stall)


#==================================================================#
#  Below the cap: in-face reduction
#==================================================================#
def concave_postprocess(
    model: CostModel,
    Y: StiefelPoint,
    opts: Optional[StaircaseOptions] = None,
    cert: Optional[Certificate] = None,
) -> PostprocessReport:
    """Lowers a concave cost without raising the rank, alternating in-face
    rank reduction (full-rank Y) with escape plus RTR (rank-deficient Y)."""
    opts = opts or StaircaseOptions()
    if model.convexity_class not in CONCAVE_CLASSES:
        raise ValueError(f"In-face reduction needs a concave cost, got {model.kind}")
    cert = cert or build_certificate(model, Y, opts.kkt_tol, opts.certificate)
    cap = POSTPROCESS_STEPS_PER_RANK * Y.p
    ranks: List[int] = []
    status = "postprocess_cap"
    stall = None
    steps = 0
    while steps < cap:
        if cert.kkt:
            status = "certified"
            break
        steps += 1
        rank = rank_deficiency(Y, opts.cond_threshold)
        if not rank.deficient:
            try:
                reduced = in_face_rank_reduction(Y, model=model)
            except FaceError as err:
                logger.warning(f"In-face step failed: {err}")
                reduced = None
            if reduced is None:
                logger.warning(f"Full-rank point at p = {Y.p} with a trivial face; in-face reduction stalls")
                status = "escape_stalled"
                break
            Y = reduced
        else:
            _, step = escape(model, Y, cert, opts.cond_threshold)
            if not step.accepted:
                stall = EscapeStall(p=Y.p, lambda_min=cert.lambda_min, t=step.t, decrease=step.decrease)
                logger.warning(
                    f"Postprocess escape lowered g by only {step.decrease:.2e}; "
                    f"λ_min(S) = {cert.lambda_min:.2e} is treated as numerically PSD"
                )
                status = NUMERICALLY_KKT
                break
            Y = minimize(model, step.Y, opts.rtr).Y
        check_feasibility(Y)
        ranks.append(rank_deficiency(Y, opts.cond_threshold).numerical_rank)
        cert = build_certificate(model, Y, opts.kkt_tol, opts.certificate)
        logger.debug(f"Postprocess step {steps}: f = {g(model, Y):+.12e}, rank {ranks[-1]}")
    if status == "postprocess_cap":
        logger.warning(f"In-face reduction hit its cap of {cap} steps without a certificate")
    return PostprocessReport(
        Y=Y,
        cost=g(model, Y),
        kkt=cert.kkt or status == NUMERICALLY_KKT,
        status=status,
        iterations=steps,
        lambda_min=cert.lambda_min,
        ranks=ranks,
        certificate=cert,
        stall=stall,
    )


#==================================================================#
#  Rounding to a given rank
#==================================================================#
def truncate_factor(Y: StiefelPoint, q: int) -> StiefelPoint:
    """Leading q columns of UΣ from the thin SVD of Y, slice-wise orthonormalized."""
    spec = Y.spec
    if q < spec.d:
        raise ScheduleError(f"Cannot round to q = {q} below d = {spec.d}")
    if q > spec.n:
        raise ScheduleError(f"Cannot round to q = {q} above n = {spec.n}")
    U, s, _ = np.linalg.svd(Y.Y, full_matrices=False)
    kept = min(q, len(s))
    lead = np.zeros((spec.n, q))
    lead[:, :kept] = U[:, :kept] * s[:kept]
    stacked = lead.reshape(spec.m, spec.d, q)
    sigma = np.linalg.svd(stacked, compute_uv=False)
    worst = int(np.argmin(sigma[:, -1]))
    if sigma[worst, -1] < ROUNDING_SIGMA_MIN * max(1.0, float(sigma.max())):
        raise RoundingError(f"Slice {worst} is rank-deficient after truncation to q = {q}")
    return StiefelPoint(ManifoldSpec(spec, q), polar_factor(stacked).reshape(spec.n, q))


def round_to_rank(
    model: CostModel,
    Y: StiefelPoint,
    q: int,
    rtr: Optional[RtrOptions] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
) -> StiefelPoint:
    start = truncate_factor(Y, q)
    result = minimize(model, start, rtr, callback)
    logger.info(
        f"Rounded p = {Y.p} to q = {q}: f {g(model, start):+.10e} -> {result.cost:+.10e} in {result.iterations} iterations"
    )
    return result.Y
