"""Problem, factor, report and trace files.

Problem file::

    bdsdp 1
    m d
    linear | pseudo-huber ε | smoothed-lud ε
    row col value      (1-based, upper triangle, one entry per line)

Measurement costs (pseudo-huber, smoothed-lud) may omit the diagonal blocks,
which are I_d. Blank lines and lines starting with '#' are skipped.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from marshmallow import EXCLUDE, Schema, fields, validate
from marshmallow.exceptions import ValidationError

from logger import logger
from manifold.blockmat import BlockSpec, DimensionMismatch, SymBlockMatrix
from manifold.stiefel_product import StiefelPoint
from modeling.cost_model import CostModel
from modeling.cost_models.linear import LinearCost
from modeling.cost_models.pseudo_huber import PseudoHuberCost
from modeling.cost_models.smoothed_lud import SmoothedLUDCost
from solver.rtr import IterationRecord
from solver.staircase import SolveReport
from utils import VERSION, BdsdpError

PROBLEM_TAG = "bdsdp 1"
FACTOR_TAG = "bdsdp-factor 1"
TRUTH_SUFFIX = ".truth"
COST_KINDS = ("linear", "pseudo-huber", "smoothed-lud")
MEASUREMENT_KINDS = ("pseudo-huber", "smoothed-lud")
TRACE_HEADER = ["iter", "p", "cost", "grad_norm", "delta", "time"]


class ProblemFileError(BdsdpError):
    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None) -> None:
        self.line_number = line_number
        self.path = path
        where = path or "<input>"
        if line_number is not None:
            where = f"{where}:{line_number}"
        super().__init__(f"{where}: {message}")


@dataclass
class ProblemFile:
    spec: BlockSpec
    kind: str
    matrix: SymBlockMatrix
    eps: Optional[float] = None

    def to_model(self) -> CostModel:
        if self.kind == "linear":
            return LinearCost(self.matrix)
        if self.kind == "pseudo-huber":
            return PseudoHuberCost(self.matrix, self.eps)
        return SmoothedLUDCost(self.matrix, self.eps)


#==================================================================#
#  Problem files
#==================================================================#
def _content_lines(lines: Iterable[str]):
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield number, line


def _fill_identity_blocks(spec: BlockSpec, matrix: SymBlockMatrix) -> SymBlockMatrix:
    diagonal = matrix.diagonal_blocks()
    missing = np.all(diagonal == 0, axis=(1, 2))
    if not missing.any():
        return matrix
    fill = np.zeros_like(diagonal)
    fill[missing] = np.eye(spec.d)
    return matrix + SymBlockMatrix.block_diagonal(fill, storage="sparse" if matrix.is_sparse else "dense")


def parse_problem(lines: Iterable[str], path: Optional[str] = None) -> ProblemFile:
    content = _content_lines(lines)

    def header(what: str) -> Tuple[int, List[str]]:
        try:
            number, line = next(content)
        except StopIteration:
            raise ProblemFileError(f"File ends before the {what} line", None, path)
        return number, line.split()

    number, tag = header("format")
    if " ".join(tag) != PROBLEM_TAG:
        raise ProblemFileError(f"Expected format tag {PROBLEM_TAG!r}, got {' '.join(tag)!r}", number, path)

    number, dims = header("dimension")
    try:
        m, d = (int(v) for v in dims)
        spec = BlockSpec(m, d)
    except (ValueError, DimensionMismatch):
        raise ProblemFileError(f"Expected 'm d' with positive integers, got {' '.join(dims)!r}", number, path)

    number, kind_line = header("cost kind")
    kind, eps = kind_line[0], None
    if kind not in COST_KINDS:
        raise ProblemFileError(f"Unknown cost kind {kind!r}; expected one of {', '.join(COST_KINDS)}", number, path)
    if kind in MEASUREMENT_KINDS:
        try:
            (eps,) = (float(v) for v in kind_line[1:])
        except ValueError:
            raise ProblemFileError(f"Cost kind {kind} needs exactly one ε value", number, path)
        if not eps > 0:
            raise ProblemFileError(f"ε must be positive, got {eps}", number, path)
    elif len(kind_line) != 1:
        raise ProblemFileError("The linear cost takes no parameters", number, path)

    rows, cols, values = [], [], []
    seen = {}
    for number, line in content:
        parts = line.split()
        try:
            row, col, value = int(parts[0]), int(parts[1]), float(parts[2])
            if len(parts) != 3:
                raise ValueError
        except (ValueError, IndexError):
            raise ProblemFileError(f"Expected 'row col value', got {line!r}", number, path)
        if not (1 <= row <= spec.n and 1 <= col <= spec.n):
            raise ProblemFileError(f"Index ({row}, {col}) outside [1, {spec.n}]", number, path)
        if row > col:
            raise ProblemFileError(f"Entry ({row}, {col}) lies below the diagonal; list the upper triangle only", number, path)
        if not np.isfinite(value):
            raise ProblemFileError(f"Entry ({row}, {col}) is not finite", number, path)
        if (row, col) in seen:
            raise ProblemFileError(f"Entry ({row}, {col}) repeats line {seen[row, col]}", number, path)
        seen[row, col] = number
        rows.append(row)
        cols.append(col)
        values.append(value)

    matrix = SymBlockMatrix.from_triplets(spec, rows, cols, values)
    if kind in MEASUREMENT_KINDS:
        matrix = _fill_identity_blocks(spec, matrix)
    return ProblemFile(spec=spec, kind=kind, matrix=matrix, eps=eps)


def read_problem(path: str) -> ProblemFile:
    try:
        with open(path, "r") as f:
            problem = parse_problem(f, path)
    except OSError as err:
        raise ProblemFileError(f"Cannot read problem file: {err.strerror}", None, path)
    logger.debug(f"Read {problem.kind} problem {path}: m = {problem.spec.m}, d = {problem.spec.d}")
    return problem


def format_problem(problem: ProblemFile) -> str:
    spec = problem.spec
    kind = problem.kind if problem.eps is None else f"{problem.kind} {problem.eps!r}"
    out = [PROBLEM_TAG, f"{spec.m} {spec.d}", kind]
    for row, col, value in problem.matrix.upper_triplets():
        # Diagonal blocks of measurement matrices are implied
        if problem.kind in MEASUREMENT_KINDS and (row - 1) // spec.d == (col - 1) // spec.d:
            continue
        out.append(f"{row} {col} {value!r}")
    return "\n".join(out) + "\n"


def write_problem(path: str, problem: ProblemFile) -> None:
    with open(path, "w") as f:
        f.write(format_problem(problem))


#==================================================================#
#  Factor files (solutions and ground-truth sidecars)
#==================================================================#
def format_factor(Y: StiefelPoint) -> str:
    out = [FACTOR_TAG, f"{Y.spec.m} {Y.spec.d} {Y.p}"]
    out.extend(" ".join(repr(float(v)) for v in row) for row in Y.Y)
    return "\n".join(out) + "\n"


def write_factor(path: str, Y: StiefelPoint) -> None:
    with open(path, "w") as f:
        f.write(format_factor(Y))


def parse_factor(lines: Iterable[str], path: Optional[str] = None) -> StiefelPoint:
    content = list(_content_lines(lines))
    if not content or content[0][1] != FACTOR_TAG:
        raise ProblemFileError(f"Expected format tag {FACTOR_TAG!r}", content[0][0] if content else None, path)
    if len(content) < 2:
        raise ProblemFileError("Factor file ends before the dimension line", None, path)
    number, dims = content[1]
    try:
        m, d, p = (int(v) for v in dims.split())
        spec = BlockSpec(m, d)
        if p < 1:
            raise ValueError
    except (ValueError, DimensionMismatch):
        raise ProblemFileError(f"Expected 'm d p' with positive integers, got {dims!r}", number, path)
    rows = content[2:]
    if len(rows) != spec.n:
        raise ProblemFileError(f"Expected {spec.n} rows, found {len(rows)}", rows[-1][0] if rows else number, path)
    Y = np.empty((spec.n, p))
    for k, (number, line) in enumerate(rows):
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise ProblemFileError(f"Row {k + 1} holds a non-number", number, path)
        if len(values) != p:
            raise ProblemFileError(f"Row {k + 1} has {len(values)} entries, expected {p}", number, path)
        Y[k] = values
    return StiefelPoint.from_array(Y, d)


def read_factor(path: str) -> StiefelPoint:
    try:
        with open(path, "r") as f:
            return parse_factor(f, path)
    except OSError as err:
        raise ProblemFileError(f"Cannot read factor file: {err.strerror}", None, path)


def truth_path(problem_path: str) -> str:
    return problem_path + TRUTH_SUFFIX


def read_truth(problem_path: str) -> Optional[StiefelPoint]:
    sidecar = truth_path(problem_path)
    if not os.path.exists(sidecar):
        return None
    return read_factor(sidecar)


#==================================================================#
#  JSON reports
#==================================================================#
REPORT_STATUSES = ["certified", "numerically_kkt", "schedule_exhausted", "escape_stalled", "postprocess_cap"]


class BdsdpSchema(Schema):
    class Meta:
        unknown = EXCLUDE


class StageSchema(BdsdpSchema):
    p: int = fields.Integer(required=True, validate=validate.Range(min=1))
    iterations: int = fields.Integer(required=True, validate=validate.Range(min=0))
    cost: float = fields.Float(required=True)
    grad_norm: float = fields.Float(required=True, validate=validate.Range(min=0))
    rtr_status: str = fields.String(required=True)
    lambda_min_S: float = fields.Float(required=True, allow_nan=True)
    kkt: bool = fields.Boolean(required=True)
    cond: float = fields.Float(required=True, allow_nan=True)
    numerical_rank: int = fields.Integer(required=True, validate=validate.Range(min=0))
    lambda_min_hess: Optional[float] = fields.Float(allow_none=True, allow_nan=True)
    polished: bool = fields.Boolean(load_default=False)
    escape: Optional[str] = fields.String(allow_none=True, validate=validate.OneOf(["augmented", "rank_deficient"]))
    escape_t: float = fields.Float(load_default=0.0)
    escape_decrease: float = fields.Float(load_default=0.0)
    time: float = fields.Float(load_default=0.0)


class BoundsSchema(BdsdpSchema):
    upper: float = fields.Float(required=True)
    lower: float = fields.Float(required=True)
    gap: float = fields.Float(required=True)
    lambda_min: float = fields.Float(required=True, allow_nan=True)


class FaceSchema(BdsdpSchema):
    m: int = fields.Integer(required=True)
    d: int = fields.Integer(required=True)
    p: int = fields.Integer(required=True)
    delta: int = fields.Integer(required=True)
    dim_face: int = fields.Integer(required=True, validate=validate.Range(min=0))
    p_star: float = fields.Float(required=True)
    upper_bound: float = fields.Float(required=True)
    is_extreme: bool = fields.Boolean(required=True)


class StrictComplementaritySchema(BdsdpSchema):
    rank_X: int = fields.Integer(required=True)
    rank_S: int = fields.Integer(required=True)
    n: int = fields.Integer(required=True)
    holds: bool = fields.Boolean(required=True)


class StallSchema(BdsdpSchema):
    p: int = fields.Integer(required=True, validate=validate.Range(min=1))
    lambda_min: float = fields.Float(required=True, allow_nan=True)
    t: float = fields.Float(required=True, validate=validate.Range(min=0))
    decrease: float = fields.Float(required=True)


class PostprocessSchema(BdsdpSchema):
    cost: float = fields.Float(required=True)
    kkt: bool = fields.Boolean(required=True)
    status: str = fields.String(required=True)
    iterations: int = fields.Integer(required=True)
    lambda_min: float = fields.Float(required=True, allow_nan=True)
    ranks: List[int] = fields.List(fields.Integer(), required=True)


class EnvironmentSchema(BdsdpSchema):
    version: str = fields.String(required=True)
    seed: int = fields.Integer(required=True)
    problem: Optional[str] = fields.String(allow_none=True)
    options: Dict[str, Any] = fields.Dict(keys=fields.String(), load_default=dict)


class ReportSchema(BdsdpSchema):
    status: str = fields.String(
        required=True,
        validate=validate.OneOf(REPORT_STATUSES),
    )
    kkt: bool = fields.Boolean(required=True)
    p: int = fields.Integer(required=True, validate=validate.Range(min=1))
    cost: float = fields.Float(required=True)
    lambda_min: float = fields.Float(required=True, allow_nan=True)
    numerical_rank: int = fields.Integer(required=True)
    schedule: List[int] = fields.List(fields.Integer(), required=True)
    total_iterations: int = fields.Integer(required=True)
    wall_time: float = fields.Float(required=True)
    stages: List[dict] = fields.List(fields.Nested(StageSchema), required=True)
    bounds: Optional[dict] = fields.Nested(BoundsSchema, allow_none=True)
    face: Optional[dict] = fields.Nested(FaceSchema, allow_none=True)
    strict_complementarity: Optional[dict] = fields.Nested(StrictComplementaritySchema, allow_none=True)
    postprocess: Optional[dict] = fields.Nested(PostprocessSchema, allow_none=True)
    stall: Optional[dict] = fields.Nested(StallSchema, allow_none=True)
    rounding: Optional[dict] = fields.Dict(keys=fields.String(), allow_none=True)
    continuation: Optional[list] = fields.List(fields.Dict(keys=fields.String()), allow_none=True)
    metrics: Optional[dict] = fields.Dict(keys=fields.String(), values=fields.Float(), allow_none=True)
    environment: dict = fields.Nested(EnvironmentSchema, required=True)


def report_to_dict(
    report: SolveReport,
    problem_path: Optional[str] = None,
    options: Optional[Dict[str, Any]] = None,
    **extra: Any,
) -> Dict[str, Any]:
    out = {
        "status": report.status,
        "kkt": report.kkt,
        "p": report.p,
        "cost": report.cost,
        "lambda_min": report.lambda_min,
        "numerical_rank": report.numerical_rank,
        "schedule": list(report.schedule),
        "total_iterations": report.total_iterations,
        "wall_time": report.wall_time,
        "stages": [asdict(stage) for stage in report.stages],
        "bounds": asdict(report.bounds) if report.bounds is not None else None,
        "face": report.face.to_dict() if report.face is not None else None,
        "strict_complementarity": None,
        "postprocess": None,
        "stall": asdict(report.stall) if report.stall is not None else None,
        "environment": {"version": VERSION, "seed": report.seed, "problem": problem_path, "options": options or {}},
    }
    if report.strict_complementarity is not None:
        sc = report.strict_complementarity
        out["strict_complementarity"] = {**asdict(sc), "holds": sc.holds}
    if report.postprocess is not None:
        post = report.postprocess
        out["postprocess"] = {
            "cost": post.cost,
            "kkt": post.kkt,
            "status": post.status,
            "iterations": post.iterations,
            "lambda_min": post.lambda_min,
            "ranks": list(post.ranks),
        }
    out.update(extra)
    return ReportSchema().dump(out)


def write_report(path: str, report: Dict[str, Any]) -> None:
    errors = ReportSchema().validate(report)
    if errors:
        raise ProblemFileError(f"Report does not match the schema: {errors}", None, path)
    with open(path, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    logger.debug(f"Wrote report {path}")


def load_report(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            raw = json.load(f)
        return ReportSchema().load(raw)
    except OSError as err:
        raise ProblemFileError(f"Cannot read report: {err.strerror}", None, path)
    except json.JSONDecodeError as err:
        raise ProblemFileError(f"Report is not JSON: {err.msg}", err.lineno, path)
    except ValidationError as err:
        raise ProblemFileError(f"Report does not match the schema: {err.messages}", None, path)


#==================================================================#
#  CSV output
#==================================================================#
class TraceWriter:
    """RTR callback appending one CSV row per iteration. Iteration numbers
    keep counting across stages."""

    def __init__(self, path: str) -> None:
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(TRACE_HEADER)
        self.rows = 0

    def __call__(self, record: IterationRecord) -> None:
        self.rows += 1
        self._writer.writerow(
            [self.rows, record.p, repr(record.cost), repr(record.grad_norm), repr(record.radius), f"{record.time:.6f}"]
        )

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> TraceWriter:
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback) -> None:
        self.close()


def write_rows(path: str, header: Sequence[str], rows: Iterable[Dict[str, Any]]) -> int:
    count = 0
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(header), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
            count += 1
    return count
