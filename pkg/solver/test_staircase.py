import numpy as np
import pytest

import solver.staircase as staircase
from fileops import load_report, report_to_dict, write_report
from manifold.blockmat import BlockSpec, SymBlockMatrix
from manifold.stiefel_product import ManifoldSpec, StiefelPoint, append_zero_columns, random_point
from modeling.cost_model import ConvexityClass, g
from modeling.cost_models.linear import LinearCost
from modeling.cost_models.pseudo_huber import PseudoHuberCost
from modeling.cost_models.smoothed_lud import SmoothedLUDCost
from solver.certificate import EscapeStep, escape_direction
from solver.rtr import RtrOptions
from solver.staircase import (
    RoundingError,
    ScheduleError,
    StaircaseOptions,
    concave_postprocess,
    rank_cap,
    resolve_schedule,
    round_to_rank,
    solve,
    truncate_factor,
)

TEST_SEED = 1337
STATUSES = {"certified", "numerically_kkt", "schedule_exhausted", "escape_stalled", "postprocess_cap"}


def noiseless_sync(m, d, seed=TEST_SEED):
    spec = BlockSpec(m, d)
    truth = random_point(ManifoldSpec(spec, d), seed)
    return truth, LinearCost(SymBlockMatrix.from_dense(spec, -truth.X() / (spec.n * m)))


def noisy_linear(m, d, sigma, seed=TEST_SEED):
    spec = BlockSpec(m, d)
    truth = random_point(ManifoldSpec(spec, d), seed)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((spec.n, spec.n))
    return LinearCost(SymBlockMatrix.from_dense(spec, -(truth.X() + sigma * (noise + noise.T))))


def random_orthogonal(p, seed):
    Q, R = np.linalg.qr(np.random.default_rng(seed).standard_normal((p, p)))
    return Q * np.sign(np.diag(R))


def stage_costs_non_increasing(report):
    costs = np.array([stage.cost for stage in report.stages] + [report.cost])
    return np.all(np.diff(costs) <= 1e-14 * np.maximum(1.0, np.abs(costs[:-1])))


class GeneralLinearCost(LinearCost):
    # Same cost, no rank guarantee: the schedule runs up to n
    convexity_class = ConvexityClass.GENERAL
    kind = "general"


#==================================================================#
#  Schedule
#==================================================================#
def test_rank_caps():
    assert rank_cap(ConvexityClass.LINEAR, 10, 3) == 21
    assert rank_cap(ConvexityClass.CONCAVE, 10, 3) == 21
    assert rank_cap(ConvexityClass.STRONGLY_CONCAVE, 10, 3) == 11
    assert rank_cap(ConvexityClass.CONVEX, 10, 3) == 30
    assert rank_cap(ConvexityClass.GENERAL, 4, 1) == 4
    # Max-Cut: ⌊n/2⌋ + 1
    assert rank_cap(ConvexityClass.LINEAR, 9, 1) == 5
    # Never above n
    assert rank_cap(ConvexityClass.STRONGLY_CONCAVE, 2, 1) == 2


def test_default_schedule_climbs_by_one():
    _, model = noiseless_sync(10, 3)
    assert resolve_schedule(model) == list(range(4, 22))
    assert resolve_schedule(model, StaircaseOptions(p_max=6)) == [4, 5, 6]


def test_schedule_is_capped():
    _, model = noiseless_sync(10, 3)
    assert resolve_schedule(model, StaircaseOptions(rank_schedule=[4, 8, 30])) == [4, 8]


@pytest.mark.parametrize(
    "opts",
    [
        StaircaseOptions(p_max=3),
        StaircaseOptions(rank_schedule=[2, 5]),
        StaircaseOptions(rank_schedule=[25, 26]),
    ],
)
def test_invalid_schedules(opts):
    _, model = noiseless_sync(10, 3)
    with pytest.raises(ScheduleError):
        resolve_schedule(model, opts)


@pytest.mark.parametrize("schedule", [[5, 4], [4, 4], [], [4.5]])
def test_schedule_validation(schedule):
    with pytest.raises(ScheduleError):
        StaircaseOptions(rank_schedule=schedule).validate()


def test_single_block_has_no_staircase():
    model = LinearCost(SymBlockMatrix.zeros(BlockSpec(1, 2)))
    with pytest.raises(ScheduleError):
        solve(model)


#==================================================================#
#  solve
#==================================================================#
def test_noiseless_sync_certifies_at_first_rank():
    _, model = noiseless_sync(10, 3)
    report = solve(model, StaircaseOptions(seed=TEST_SEED, rtr=RtrOptions(grad_tol=1e-12)))
    assert report.status == "certified"
    assert report.kkt
    assert report.p == 4
    assert report.numerical_rank == 3
    assert abs(report.cost + 1.0) <= 1e-8
    assert report.bounds.gap <= 1e-8
    assert report.lambda_min >= -1e-8
    assert report.face is not None and report.face.p == 3
    assert report.strict_complementarity.holds


def test_certified_gap_within_bound():
    _, model = noiseless_sync(10, 3)
    opts = StaircaseOptions(seed=TEST_SEED)
    report = solve(model, opts)
    assert report.kkt
    scale = report.certificate.scale
    assert report.bounds.gap <= 10 * opts.kkt_tol * model.spec.n * scale


def test_zero_cost_returns_at_once():
    model = LinearCost(SymBlockMatrix.zeros(BlockSpec(5, 2)))
    report = solve(model)
    assert report.kkt
    assert report.status == "certified"
    assert report.p == 3
    assert len(report.stages) == 1
    assert report.stages[0].iterations == 1
    assert report.escapes == 0


def test_second_order_check_recorded():
    _, model = noiseless_sync(6, 2)
    report = solve(model, StaircaseOptions(seed=TEST_SEED, rtr=RtrOptions(grad_tol=1e-10)))
    assert all(stage.lambda_min_hess is not None for stage in report.stages)
    assert report.stages[-1].lambda_min_hess >= -1e-8
    skipped = solve(model, StaircaseOptions(seed=TEST_SEED, check_second_order=False))
    assert all(stage.lambda_min_hess is None for stage in skipped.stages)


def test_escape_from_rank_deficient_saddle(saddle_cost_matrix):
    model = LinearCost(saddle_cost_matrix)
    critical = StiefelPoint(ManifoldSpec(model.spec, 1), np.array([[1.0], [-1.0]]))
    report = solve(model, StaircaseOptions(seed=TEST_SEED), Y0=critical)
    assert report.schedule == [2]
    assert report.stages[0].escape == "rank_deficient"
    assert report.stages[0].escape_decrease > 0
    assert report.kkt
    assert abs(report.cost + 2.0) <= 1e-8
    assert stage_costs_non_increasing(report)


def triangle_saddle():
    # Three unit vectors at 120° are critical for −⟨A, X⟩ but far from the all-ones optimum
    C = SymBlockMatrix.from_dense(BlockSpec(3, 1), -(np.ones((3, 3)) - np.eye(3)))
    angles = 2 * np.pi * np.arange(3) / 3
    Y = StiefelPoint(ManifoldSpec(C.spec, 2), np.column_stack([np.cos(angles), np.sin(angles)]))
    return C, Y


def test_augmented_escape_climbs_the_staircase():
    C, Y0 = triangle_saddle()
    report = solve(GeneralLinearCost(C), StaircaseOptions(seed=TEST_SEED), Y0=Y0)
    assert report.schedule == [2, 3]
    assert report.stages[0].escape == "augmented"
    assert report.stages[0].lambda_min_S == pytest.approx(-3.0, abs=1e-8)
    assert report.kkt
    assert abs(report.cost + 6.0) <= 1e-8
    assert np.linalg.matrix_rank(report.Y.X(), tol=1e-6) == 1
    assert stage_costs_non_increasing(report)


def test_exhausted_schedule_is_not_certified():
    C, Y0 = triangle_saddle()
    # The linear cap stops at p = 2, where the saddle cannot be left
    report = solve(LinearCost(C), StaircaseOptions(seed=TEST_SEED), Y0=Y0)
    assert report.schedule == [2]
    assert not report.kkt
    assert report.status == "schedule_exhausted"
    assert report.lambda_min < 0


def test_flat_escape_is_numerically_kkt(monkeypatch, tmp_path):
    C, Y0 = triangle_saddle()

    def flat_escape(model, Y, cert, cond_threshold, p_plus=None):
        direction = escape_direction(model, Y, cert, cond_threshold, p_plus=p_plus)
        f0 = g(model, direction.base)
        return direction, EscapeStep(t=3e-5, Y=direction.base, cost=f0 - 1e-15, start_cost=f0)

    monkeypatch.setattr(staircase, "escape", flat_escape)
    report = solve(GeneralLinearCost(C), StaircaseOptions(seed=TEST_SEED), Y0=Y0)
    assert report.status == "numerically_kkt"
    assert report.kkt
    assert len(report.stages) == 1 and report.stages[0].escape == "augmented"
    assert report.stall.p == 2
    assert report.stall.lambda_min == pytest.approx(-3.0, abs=1e-8)
    assert report.stall.t == 3e-5
    assert 0 < report.stall.decrease < 1e-12

    path = str(tmp_path / "report.json")
    write_report(path, report_to_dict(report))
    data = load_report(path)
    assert data["status"] == "numerically_kkt" and data["kkt"]
    assert data["stall"]["lambda_min"] == report.stall.lambda_min


def test_certified_run_has_no_stall():
    _, model = noiseless_sync(6, 2)
    report = solve(model, StaircaseOptions(seed=TEST_SEED))
    assert report.status == "certified"
    assert report.stall is None


def test_warm_start_below_first_rank_is_padded():
    truth, model = noiseless_sync(8, 3)
    report = solve(model, StaircaseOptions(seed=TEST_SEED), Y0=truth)
    assert report.stages[0].p == 4
    assert report.kkt
    assert report.numerical_rank == 3


def test_warm_start_drops_lower_ranks():
    _, model = noiseless_sync(8, 3)
    Y0 = random_point(ManifoldSpec(model.spec, 6), TEST_SEED)
    report = solve(model, StaircaseOptions(seed=TEST_SEED), Y0=Y0)
    assert report.schedule[0] == 6
    assert report.p >= 6


def test_warm_start_above_cap_rejected():
    _, model = noiseless_sync(8, 3)
    Y0 = random_point(ManifoldSpec(model.spec, 7), TEST_SEED)
    with pytest.raises(ScheduleError):
        solve(model, StaircaseOptions(p_max=5), Y0=Y0)


def test_solution_invariant_under_right_rotation():
    model = noisy_linear(8, 2, 0.1)
    Y0 = random_point(ManifoldSpec(model.spec, 3), TEST_SEED)
    rotated = StiefelPoint(Y0.manifold, Y0.Y @ random_orthogonal(3, TEST_SEED))
    first = solve(model, StaircaseOptions(seed=TEST_SEED), Y0=Y0)
    second = solve(model, StaircaseOptions(seed=TEST_SEED), Y0=rotated)
    assert first.kkt and second.kkt
    assert abs(first.cost - second.cost) <= 1e-8 * max(1.0, abs(first.cost))


def test_solve_is_deterministic():
    model = noisy_linear(6, 2, 0.3)
    first = solve(model, StaircaseOptions(seed=TEST_SEED))
    second = solve(model, StaircaseOptions(seed=TEST_SEED))
    assert np.array_equal(first.Y.Y, second.Y.Y)
    assert [s.cost for s in first.stages] == [s.cost for s in second.stages]


def test_callback_sees_every_stage():
    model = noisy_linear(6, 2, 0.3)
    records = []
    report = solve(model, StaircaseOptions(seed=TEST_SEED), callback=records.append)
    assert {r.p for r in records} <= set(report.schedule)
    assert all(np.isfinite(r.cost) for r in records)


def test_robust_cost_respects_cap():
    truth, _ = noiseless_sync(5, 2)
    model = PseudoHuberCost(SymBlockMatrix.from_dense(truth.spec, truth.X()), 0.1)
    report = solve(model, StaircaseOptions(seed=TEST_SEED))
    assert report.status in STATUSES
    assert report.p <= rank_cap(model.convexity_class, 5, 2) == 6
    assert stage_costs_non_increasing(report)


#==================================================================#
#  concave_postprocess
#==================================================================#
def flat_face_instance():
    # Rows e1, e2, e1; C is constant on the face through X but S = C has eigenvalues ±√2
    Y = StiefelPoint(ManifoldSpec(BlockSpec(3, 1), 2), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    C = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, 0.0]])
    return LinearCost(SymBlockMatrix.from_dense(Y.spec, C)), Y


def test_postprocess_reduces_rank_inside_face():
    model, Y = flat_face_instance()
    result = concave_postprocess(model, Y, StaircaseOptions(seed=TEST_SEED))
    assert result.ranks[0] <= 1
    assert result.iterations >= 1
    assert result.cost <= g(model, Y) + 1e-12
    assert result.status in STATUSES


def test_postprocess_returns_kkt_input_unchanged():
    model = LinearCost(SymBlockMatrix.zeros(BlockSpec(4, 1)))
    Y = random_point(ManifoldSpec(model.spec, 2), TEST_SEED)
    result = concave_postprocess(model, Y)
    assert result.Y is Y
    assert result.kkt
    assert result.iterations == 0


def test_postprocess_needs_concave_cost():
    truth, _ = noiseless_sync(4, 1)
    model = SmoothedLUDCost(SymBlockMatrix.from_dense(truth.spec, truth.X()), 0.1)
    with pytest.raises(ValueError):
        concave_postprocess(model, random_point(ManifoldSpec(model.spec, 2), TEST_SEED))


#==================================================================#
#  round_to_rank
#==================================================================#
def test_rounding_keeps_rank_q_factor():
    truth, model = noiseless_sync(6, 3)
    padded = append_zero_columns(truth, 5)
    Y = StiefelPoint(padded.manifold, padded.Y @ random_orthogonal(5, TEST_SEED))
    out = round_to_rank(model, Y, 3)
    assert out.p == 3
    assert np.linalg.norm(out.X() - Y.X()) <= 1e-8


def test_rounding_to_d_gives_orthogonal_blocks():
    _, model = noiseless_sync(6, 3)
    report = solve(model, StaircaseOptions(seed=TEST_SEED, rtr=RtrOptions(grad_tol=1e-12)))
    assert report.kkt
    out = round_to_rank(model, report.Y, 3)
    X = out.X().reshape(6, 3, 6, 3).transpose(0, 2, 1, 3)
    sigma = np.linalg.svd(X, compute_uv=False)
    assert np.abs(sigma - 1.0).max() <= 1e-8


def test_rounding_never_raises_cost():
    model = noisy_linear(6, 2, 0.5)
    Y = random_point(ManifoldSpec(model.spec, 5), TEST_SEED)
    start = truncate_factor(Y, 3)
    out = round_to_rank(model, Y, 3)
    assert g(model, out) <= g(model, start)


def test_rounding_below_d_rejected():
    truth, model = noiseless_sync(4, 2)
    with pytest.raises(ScheduleError):
        round_to_rank(model, append_zero_columns(truth, 3), 1)


def test_rounding_detects_collapsed_slice():
    model = LinearCost(SymBlockMatrix.zeros(BlockSpec(2, 1)))
    Y = StiefelPoint(ManifoldSpec(model.spec, 2), np.eye(2))
    with pytest.raises(RoundingError):
        round_to_rank(model, Y, 1)
