#!/usr/bin/python3
"""bdsdp command line: solve, synth, bench, certify and cycle.

Exit codes: 0 when the run is certified (or every bench row succeeded),
1 when a certificate or check fails, 2 for unreadable input, invalid
parameters or an infeasible factor.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

from utils import BdsdpError, apply_thread_cap

# BDSDP_THREADS must reach the BLAS variables before numpy is imported
try:
    THREADS = apply_thread_cap()
    THREAD_ERROR = None
except BdsdpError as err:
    THREADS, THREAD_ERROR = None, err

import numpy as np  # noqa: E402
from tqdm.auto import tqdm  # noqa: E402

from fileops import (  # noqa: E402
    MEASUREMENT_KINDS,
    ProblemFile,
    ProblemFileError,
    TraceWriter,
    read_factor,
    read_problem,
    read_truth,
    report_to_dict,
    truth_path,
    write_factor,
    write_problem,
    write_report,
    write_rows,
)
from logger import logger, quiesce_logger, set_logger_verbosity  # noqa: E402
from manifold.blockmat import DimensionMismatch, SymBlockMatrix  # noqa: E402
from manifold.stiefel_product import StiefelPoint, check_feasibility, compact_factor  # noqa: E402
from modeling.cost_model import ConvexityClass, g  # noqa: E402
from problems.cycle import Unsolvable, certificate_spectrum, closed_form_solution, cycle_cost, gen_cycle  # noqa: E402
from problems.maxcut import (  # noqa: E402
    BRUTE_FORCE_MAX_N,
    brute_force_maxcut,
    cut_bound,
    hyperplane_rounding,
    maxcut_from_graph,
    random_graph,
)
from problems.robust import DEFAULT_EPS_SCHEDULE, DEFAULT_LUD_EPS, check_eps_schedule, epsilon_continuation  # noqa: E402
from problems.synchronization import eig_baseline, gen_permutation_sync, gen_rotation_sync, recovery_metrics  # noqa: E402
from solver.certificate import build_certificate, sdp_bounds  # noqa: E402
from solver.faces import FaceError, face_dimension  # noqa: E402
from solver.rtr import RtrOptions  # noqa: E402
from solver.staircase import ScheduleError, StaircaseOptions, rank_cap, round_to_rank, solve  # noqa: E402
from utils import VERSION, Stopwatch, parse_sweep, trial_seed  # noqa: E402

EXIT_OK = 0
EXIT_NOT_CERTIFIED = 1
EXIT_BAD_INPUT = 2

SYNTH_KINDS = ("rotsync", "permsync", "maxcut", "cycle")
SYNC_KINDS = ("rotsync", "permsync")
# Feasibility demanded of a factor handed to `certify`
CERTIFY_FEASIBILITY_TOL = 1e-8
# Staircase against closed form in `cycle --staircase`
CYCLE_MATCH_TOL = 1e-6
CYCLE_GRAD_TOL = 1e-10
INT_PARAMS = ("m", "d", "n")
SWEEP_PARAMS = {
    "rotsync": ("m", "d", "sigma"),
    "permsync": ("m", "d", "fraction"),
    "maxcut": ("n", "edge_prob"),
    "cycle": ("m", "d"),
}
BENCH_HEADER = [
    "kind", "m", "d", "sigma", "fraction", "n", "edge_prob", "trial", "seed",
    "wall_time", "cost", "gap", "block_mse", "eig_block_mse", "cut", "cut_bound", "rank", "p", "kkt", "status", "error",
]


#==================================================================#
#  Synthetic instances
#==================================================================#
@dataclass
class Synthesized:
    problem: ProblemFile
    # Ground truth for sync kinds, closed form for cycles, best cut for small graphs
    truth: Optional[StiefelPoint] = None
    measurements: Optional[SymBlockMatrix] = None
    adjacency: Optional[SymBlockMatrix] = None


def default_eps(cost: str) -> float:
    return DEFAULT_EPS_SCHEDULE[0] if cost == "pseudo-huber" else DEFAULT_LUD_EPS


def build_instance(kind: str, params: Dict[str, Any], seed: int) -> Synthesized:
    m, d = int(params["m"]), int(params["d"])
    if kind in SYNC_KINDS:
        if kind == "rotsync":
            inst = gen_rotation_sync(m, d, float(params["sigma"]), seed)
        else:
            inst = gen_permutation_sync(m, d, float(params["fraction"]), seed)
        cost = params.get("cost") or ("linear" if kind == "rotsync" else "pseudo-huber")
        if cost == "linear":
            problem = ProblemFile(inst.spec, "linear", inst.C.C)
        else:
            eps = params.get("eps") or default_eps(cost)
            problem = ProblemFile(inst.spec, cost, inst.H, eps=float(eps))
        return Synthesized(problem, inst.ground_truth, measurements=inst.H)
    if kind == "maxcut":
        n = int(params["n"])
        G = random_graph(n, float(params["edge_prob"]), seed, weighted=bool(params.get("weighted")))
        model, _ = maxcut_from_graph(G)
        A = model.C.scaled(4.0)
        truth = None
        if n <= BRUTE_FORCE_MAX_N:
            _, x = brute_force_maxcut(A)
            truth = StiefelPoint.from_array(x.reshape(-1, 1), 1)
        return Synthesized(ProblemFile(model.spec, "linear", model.C), truth, adjacency=A)
    if kind == "cycle":
        inst = gen_cycle(m, d, seed, orthogonal=bool(params.get("orthogonal")))
        model = cycle_cost(inst)
        try:
            truth = closed_form_solution(inst).Y
        except Unsolvable as err:
            logger.warning(f"No closed form for this cycle: {err}")
            truth = None
        return Synthesized(ProblemFile(model.spec, "linear", model.C), truth)
    raise ValueError(f"Unknown instance kind {kind!r}")


#==================================================================#
#  Shared option handling
#==================================================================#
def staircase_options(args: argparse.Namespace, model) -> StaircaseOptions:
    rtr = RtrOptions() if args.grad_tol is None else RtrOptions(grad_tol=args.grad_tol)
    schedule = None
    if getattr(args, "p1", None) is not None:
        cap = rank_cap(model.convexity_class, model.spec.m, model.spec.d)
        if args.pmax is not None:
            cap = min(cap, args.pmax)
        schedule = list(range(args.p1, max(args.p1, cap) + 1))
    return StaircaseOptions(
        rank_schedule=schedule,
        p_max=args.pmax,
        kkt_tol=args.kkt_tol,
        rtr=rtr,
        seed=args.seed,
        concave_postprocess=bool(getattr(args, "postprocess", False)),
    )


def parse_eps_schedule(raw: Optional[str]) -> Optional[List[float]]:
    if raw is None:
        return None
    if raw == "default":
        return list(DEFAULT_EPS_SCHEDULE)
    try:
        values = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--eps-schedule must be a comma separated list of numbers, got {raw!r}")
    return check_eps_schedule(values)


def _options_dict(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command", "commands") and v is not None}


#==================================================================#
#  solve
#==================================================================#
def cmd_solve(args: argparse.Namespace) -> int:
    logger.init("Problem file", status="Reading")
    problem = read_problem(args.problem)
    model = problem.to_model()
    logger.init_ok(f"{problem.kind} cost, m = {problem.spec.m}, d = {problem.spec.d}", status="Loaded")
    opts = staircase_options(args, model)
    schedule = parse_eps_schedule(args.eps_schedule)
    if schedule is not None and problem.kind not in MEASUREMENT_KINDS:
        raise ValueError(f"--eps-schedule needs a pseudo-huber or smoothed-lud problem, got {problem.kind}")
    truth = read_truth(args.problem)
    if truth is not None and (truth.spec != problem.spec):
        logger.warning(f"Ignoring truth sidecar with blocks {truth.spec}, the problem has {problem.spec}")
        truth = None

    extra: Dict[str, Any] = {}
    trace = TraceWriter(args.trace) if args.trace else None
    try:
        if schedule is not None:
            chain = epsilon_continuation(model, schedule, opts, truth=truth, callback=trace)
            report = chain.final
            extra["continuation"] = [
                {
                    "eps": step.eps,
                    "status": step.report.status,
                    "p": step.report.p,
                    "cost": step.report.cost,
                    "kkt": step.report.kkt,
                    **({"block_mse": step.metrics.block_mse} if step.metrics is not None else {}),
                }
                for step in chain.steps
            ]
        else:
            report = solve(model, opts, callback=trace)
    finally:
        if trace is not None:
            trace.close()

    Y = report.Y
    if args.round is not None:
        Y = round_to_rank(model, report.Y, args.round, opts.rtr)
        cert = build_certificate(model, Y, opts.kkt_tol, opts.certificate)
        extra["rounding"] = {"q": args.round, "cost": g(model, Y), "kkt": cert.kkt, "lambda_min": cert.lambda_min}
        logger.message(f"Rounded to q = {args.round}: KKT {cert.kkt}, λ_min(S) = {cert.lambda_min:+.3e}")
    if truth is not None:
        metrics = recovery_metrics(report.Y, truth)
        extra["metrics"] = {"block_mse": metrics.block_mse}
        logger.message(f"block_mse against the truth sidecar: {metrics.block_mse:.3e}")

    if args.factor:
        write_factor(args.factor, Y)
    if args.report:
        write_report(args.report, report_to_dict(report, args.problem, _options_dict(args), **extra))

    summary = f"{report.status}: f = {report.cost:+.12e} at p = {report.p}, rank {report.numerical_rank}"
    if report.bounds is not None:
        summary += f", gap {report.bounds.gap:.3e}"
    if report.stall is not None and report.kkt:
        logger.message(
            f"Numerically KKT {summary}; last escape at p = {report.stall.p} lowered g by {report.stall.decrease:.2e}"
        )
        return EXIT_OK
    if report.kkt:
        logger.message(f"Certified {summary}")
        return EXIT_OK
    logger.message(f"Not certified, λ_min(S) = {report.lambda_min:+.3e} ({summary})")
    return EXIT_NOT_CERTIFIED


#==================================================================#
#  synth
#==================================================================#
def synth_params(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "m": args.m,
        "d": args.d,
        "sigma": args.sigma,
        "fraction": args.fraction,
        "n": args.n,
        "edge_prob": args.edge_prob,
        "weighted": args.weighted,
        "orthogonal": args.orthogonal,
        "cost": args.cost,
        "eps": args.eps,
    }


def cmd_synth(args: argparse.Namespace) -> int:
    made = build_instance(args.kind, synth_params(args), args.seed)
    write_problem(args.output, made.problem)
    logger.message(f"Wrote {args.kind} problem ({made.problem.kind}, m = {made.problem.spec.m}) to {args.output}")
    if made.truth is not None:
        write_factor(truth_path(args.output), made.truth)
        logger.message(f"Wrote truth sidecar {truth_path(args.output)}")
    return EXIT_OK


#==================================================================#
#  bench
#==================================================================#
def _bench_trial(task: Dict[str, Any]) -> Dict[str, Any]:
    """One (sweep point, trial) of a benchmark. Runs in a worker process."""
    params = task["params"]
    row: Dict[str, Any] = {key: params[key] for key in SWEEP_PARAMS[task["kind"]]}
    row.update(kind=task["kind"], trial=task["trial"], seed=task["seed"], kkt=False, status="failed", error="")
    try:
        made = build_instance(task["kind"], params, task["seed"])
        model = made.problem.to_model()
        opts = StaircaseOptions(kkt_tol=task["kkt_tol"], rtr=task["rtr"], seed=task["seed"])
        with Stopwatch() as watch:
            if task["eps_schedule"] and made.problem.kind in MEASUREMENT_KINDS:
                report = epsilon_continuation(model, task["eps_schedule"], opts).final
            else:
                report = solve(model, opts)
        row.update(
            wall_time=watch.elapsed,
            cost=report.cost,
            gap=report.bounds.gap if report.bounds is not None else math.nan,
            rank=report.numerical_rank,
            p=report.p,
            kkt=report.kkt,
            status=report.status,
        )
        if made.adjacency is not None:
            row["cut"] = hyperplane_rounding(report.Y, made.adjacency, seed=task["seed"])[0]
            row["cut_bound"] = cut_bound(made.adjacency, report.bounds.lower)
        elif made.truth is not None:
            row["block_mse"] = recovery_metrics(report.Y, made.truth).block_mse
        if made.measurements is not None:
            eig = eig_baseline(made.measurements, made.problem.spec.d)
            row["eig_block_mse"] = recovery_metrics(eig, made.truth).block_mse
    except (BdsdpError, ValueError, np.linalg.LinAlgError) as err:
        row["error"] = f"{type(err).__name__}: {err}"
    return row


def bench_tasks(args: argparse.Namespace) -> List[Dict[str, Any]]:
    base = synth_params(args)
    if args.sweep is None:
        points = [base]
    else:
        try:
            name, values = parse_sweep(args.sweep)
        except BdsdpError as err:
            raise ValueError(str(err))
        if name not in SWEEP_PARAMS[args.kind]:
            raise ValueError(f"Cannot sweep {name!r} for {args.kind}; choose from {SWEEP_PARAMS[args.kind]}")
        points = [{**base, name: int(v) if name in INT_PARAMS else v} for v in values]
    if args.trials < 1:
        raise ValueError(f"--trials must be at least 1, got {args.trials}")
    schedule = parse_eps_schedule(args.eps_schedule)
    rtr = RtrOptions() if args.grad_tol is None else RtrOptions(grad_tol=args.grad_tol)
    tasks = []
    for i, params in enumerate(points):
        for trial in range(args.trials):
            index = i * args.trials + trial
            tasks.append(
                {
                    "kind": args.kind,
                    "params": params,
                    "trial": trial,
                    "index": index,
                    "seed": trial_seed(args.seed, index),
                    "kkt_tol": args.kkt_tol,
                    "rtr": rtr,
                    "eps_schedule": schedule,
                }
            )
    return tasks


def cmd_bench(args: argparse.Namespace) -> int:
    tasks = bench_tasks(args)
    jobs = max(1, args.jobs)
    if THREADS is not None and jobs > THREADS:
        logger.info(f"BDSDP_THREADS = {THREADS} caps --jobs {jobs}")
        jobs = THREADS
    logger.init(f"{len(tasks)} {args.kind} trials on {jobs} worker(s)", status="Starting")
    rows: List[Optional[Dict[str, Any]]] = [None] * len(tasks)
    with tqdm(total=len(tasks), desc=f"bench {args.kind}", disable=args.quiesce > 0) as bar:
        if jobs == 1:
            for task in tasks:
                rows[task["index"]] = _bench_trial(task)
                bar.update(1)
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(_bench_trial, task): task["index"] for task in tasks}
                for future in as_completed(futures):
                    rows[futures[future]] = future.result()
                    bar.update(1)
    failed = sum(1 for row in rows if row["error"] or not row["kkt"])
    write_rows(args.output, BENCH_HEADER, rows)
    if failed:
        logger.init_warn(f"{failed} of {len(rows)} rows failed", status="Done")
    else:
        logger.init_ok(f"{len(rows)} rows", status="Done")
    logger.message(f"Wrote {len(rows)} rows to {args.output}")
    return EXIT_NOT_CERTIFIED if failed else EXIT_OK


#==================================================================#
#  certify
#==================================================================#
def cmd_certify(args: argparse.Namespace) -> int:
    problem = read_problem(args.problem)
    model = problem.to_model()
    Y = read_factor(args.factor)
    if Y.spec != problem.spec:
        raise DimensionMismatch(f"Factor has blocks {Y.spec}, the problem has {problem.spec}")
    check_feasibility(Y, CERTIFY_FEASIBILITY_TOL)
    cert = build_certificate(model, Y, args.kkt_tol)
    logger.message(f"λ_min(S) = {cert.lambda_min:+.6e} (tolerance {cert.tol:.1e}), KKT: {cert.kkt}")
    if model.convexity_class is ConvexityClass.LINEAR:
        bounds = sdp_bounds(model, Y, cert)
        logger.message(f"Bounds: {bounds.lower:+.12e} <= optimum <= {bounds.upper:+.12e} (gap {bounds.gap:.3e})")
    try:
        face = face_dimension(compact_factor(Y))
        logger.message(
            f"Face: dim {face.dim_face} (Δ = {face.delta}, upper bound {face.upper_bound:g}), extreme: {face.is_extreme}"
        )
    except FaceError as err:
        logger.info(f"No face report: {err}")
    return EXIT_OK if cert.kkt else EXIT_NOT_CERTIFIED


#==================================================================#
#  cycle
#==================================================================#
def cmd_cycle(args: argparse.Namespace) -> int:
    inst = gen_cycle(args.m, args.d, args.seed, orthogonal=args.orthogonal)
    try:
        sol = closed_form_solution(inst)
    except Unsolvable as err:
        logger.message(f"Cycle is not solvable in closed form: {err}")
        return EXIT_NOT_CERTIFIED
    spectrum = certificate_spectrum(inst, sol)
    phases = ", ".join(f"{theta:+.4f}" for theta in spectrum.phases)
    logger.message(f"Eigenphases of P: {phases}")
    logger.message(
        f"λ_min(S) = {spectrum.lambda_min:+.3e}, rank(S) = {spectrum.rank_S} of {inst.spec.n}, "
        f"nonzero spectrum floor {spectrum.interlacing_floor:.6e}: {'ok' if spectrum.holds else 'FAILED'}"
    )
    ok = spectrum.holds
    if args.staircase:
        opts = StaircaseOptions(seed=args.seed, rtr=RtrOptions(grad_tol=CYCLE_GRAD_TOL))
        report = solve(cycle_cost(inst), opts)
        gap = float(np.linalg.norm(report.Y.X() - sol.X()))
        match = report.kkt and gap <= CYCLE_MATCH_TOL
        logger.message(f"Staircase: KKT {report.kkt}, ‖X − X_closed‖_F = {gap:.3e}: {'ok' if match else 'FAILED'}")
        ok = ok and match
    return EXIT_OK if ok else EXIT_NOT_CERTIFIED


#==================================================================#
#  Argument parsing
#==================================================================#
def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="Seed for the random start and Lanczos vectors")
    parser.add_argument("--kkt-tol", type=float, default=1e-8, help="Relative tolerance on λ_min(S) for a KKT verdict")
    parser.add_argument("--grad-tol", type=float, help="RTR gradient tolerance (defaults to the solver's)")


def _add_instance_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("kind", choices=SYNTH_KINDS, help="Instance family")
    parser.add_argument("--m", type=int, default=10, help="Number of nodes (rotsync, permsync, cycle)")
    parser.add_argument("--d", type=int, default=3, help="Block size (rotsync, permsync, cycle)")
    parser.add_argument("--sigma", type=float, default=0.1, help="Gaussian noise level (rotsync)")
    parser.add_argument("--fraction", type=float, default=0.25, help="Outlier fraction (permsync)")
    parser.add_argument("--n", type=int, default=10, help="Number of vertices (maxcut)")
    parser.add_argument("--edge-prob", type=float, default=0.5, help="Edge probability (maxcut)")
    parser.add_argument("--weighted", action="store_true", help="Random edge weights in [0.5, 1.5] (maxcut)")
    parser.add_argument("--orthogonal", action="store_true", help="Draw cycle measurements from O(d) instead of SO(d)")
    parser.add_argument(
        "--cost", choices=("linear",) + MEASUREMENT_KINDS, help="Cost for sync kinds (rotsync: linear, permsync: pseudo-huber)"
    )
    parser.add_argument("--eps", type=float, help="Smoothing ε for measurement costs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdsdp", description="Riemannian Staircase solver for block-diagonal SDPs")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("-v", "--verbosity", action="count", default=0, help="Show more logging; -v adds RTR iterations, -vv debug")
    parser.add_argument("-q", "--quiesce", action="count", default=0, help="Show less logging")
    parser.add_argument(
        "--customsettings",
        help="JSON preset of flag values; see customsettings_template.json. Null entries and flags given explicitly are left alone",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    parser.set_defaults(commands=sub.choices)

    p = sub.add_parser("solve", help="Solve a problem file with the staircase")
    p.add_argument("problem", help="Problem file")
    p.add_argument("--p1", type=int, help="First rank of the schedule (default d + 1)")
    p.add_argument("--pmax", type=int, help="Largest rank the staircase may reach")
    _add_solver_flags(p)
    p.add_argument("--report", help="Write a JSON report here")
    p.add_argument("--trace", help="Write the per-iteration CSV trace here")
    p.add_argument("--factor", help="Write the final factor here")
    p.add_argument("--round", type=int, metavar="Q", help="Round the solution to rank Q and re-optimize")
    p.add_argument("--postprocess", action="store_true", help="In-face rank reduction for concave costs at the cap")
    p.add_argument("--eps-schedule", help="Decreasing ε list such as 1,0.1,0.01, or 'default'")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synth", help="Write a synthetic problem file and its truth sidecar")
    _add_instance_flags(p)
    p.add_argument("--seed", type=int, default=0, help="Instance seed")
    p.add_argument("-o", "--output", required=True, help="Problem file to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="Run a parameter sweep and write one CSV row per trial")
    _add_instance_flags(p)
    p.add_argument("--sweep", help="Swept parameter, e.g. m=10,20,40 or fraction=0,0.25,0.5")
    p.add_argument("--trials", type=int, default=1, help="Trials per sweep point")
    p.add_argument("--jobs", type=int, default=1, help="Worker processes (capped by BDSDP_THREADS)")
    p.add_argument("--eps-schedule", help="ε continuation for measurement costs, or 'default'")
    _add_solver_flags(p)
    p.add_argument("-o", "--output", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("certify", help="Check the dual certificate of a given factor")
    p.add_argument("problem", help="Problem file")
    p.add_argument("factor", help="Factor file")
    p.add_argument("--kkt-tol", type=float, default=1e-8, help="Relative tolerance on λ_min(S) for a KKT verdict")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("cycle", help="Closed-form certificate check on a random cycle")
    p.add_argument("--m", type=int, default=5, help="Cycle length")
    p.add_argument("--d", type=int, default=2, help="Block size")
    p.add_argument("--seed", type=int, default=0, help="Instance seed")
    p.add_argument("--orthogonal", action="store_true", help="Draw measurements from O(d) instead of SO(d)")
    p.add_argument("--staircase", action="store_true", help="Cross-check the closed form with a staircase solve")
    p.set_defaults(func=cmd_cycle)
    return parser


def apply_customsettings(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    with open(args.customsettings) as f:
        imported = json.load(f)
    command = args.commands[args.command]
    for key, value in imported.items():
        if value is None or not hasattr(args, key):
            continue
        default = command.get_default(key)
        if default is None:
            default = parser.get_default(key)
        if getattr(args, key) == default:
            logger.debug(f"Setting {key} from {args.customsettings}")
            setattr(args, key, value)


def general_startup(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if os.environ.get("BDSDP_ARGS"):
        logger.info(f"Prepending arguments from BDSDP_ARGS: {os.environ['BDSDP_ARGS']}")
        argv = shlex.split(os.environ["BDSDP_ARGS"]) + argv
    args = parser.parse_args(argv)
    if args.customsettings:
        try:
            apply_customsettings(parser, args)
        except (OSError, json.JSONDecodeError) as err:
            raise ProblemFileError(f"Cannot load custom settings: {err}", None, args.customsettings)
    set_logger_verbosity(args.verbosity)
    quiesce_logger(args.quiesce)
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        if THREAD_ERROR is not None:
            logger.error(str(THREAD_ERROR))
            return EXIT_BAD_INPUT
        args = general_startup(argv)
        return args.func(args)
    except SystemExit as err:
        # argparse usage errors and --help
        return err.code if isinstance(err.code, int) else EXIT_BAD_INPUT
    except (ProblemFileError, ScheduleError, DimensionMismatch, ValueError) as err:
        logger.error(str(err))
        return EXIT_BAD_INPUT
    except BdsdpError as err:
        logger.error(f"{type(err).__name__}: {err}")
        return EXIT_NOT_CERTIFIED
    except OSError as err:
        logger.error(f"{err.filename}: {err.strerror}")
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
