import numpy as np
import pytest

from modeling.cost_models.pseudo_huber import PseudoHuberCost
from modeling.cost_models.smoothed_lud import SmoothedLUDCost
from problems.robust import (
    check_eps_schedule,
    clip_operator_norm,
    epsilon_continuation,
    lud_rank_suppression_check,
)
from problems.synchronization import gen_permutation_sync, gen_rotation_sync, recovery_metrics
from solver.certificate import build_certificate
from solver.staircase import StaircaseOptions, solve

TEST_SEED = 1337
LUD_EPS = 1e-2


def inconsistent_measurements(seed=TEST_SEED):
    inst = gen_rotation_sync(5, 2, 0.1, seed)
    return inst, clip_operator_norm(inst.H)


@pytest.mark.parametrize("schedule", [[], [1.0, 1.0], [1e-2, 1e-1], [1.0, -1e-1]])
def test_bad_eps_schedules(schedule):
    with pytest.raises(ValueError):
        check_eps_schedule(schedule)


def test_single_eps_is_a_single_solve():
    inst = gen_permutation_sync(6, 3, 0.2, TEST_SEED)
    opts = StaircaseOptions(seed=TEST_SEED)
    chain = epsilon_continuation(PseudoHuberCost(inst.H, 1.0), [0.1], opts, truth=inst.ground_truth)
    assert len(chain.steps) == 1
    direct = solve(PseudoHuberCost(inst.H, 0.1), opts)
    assert chain.final.cost == direct.cost
    assert chain.steps[0].metrics.block_mse == recovery_metrics(direct.Y, inst.ground_truth).block_mse


def test_continuation_warm_starts():
    inst = gen_permutation_sync(6, 3, 0.2, TEST_SEED)
    chain = epsilon_continuation(PseudoHuberCost(inst.H, 1.0), [1.0, 0.1], StaircaseOptions(seed=TEST_SEED))
    assert [step.eps for step in chain.steps] == [1.0, 0.1]
    assert chain.steps[1].report.stages[0].p == chain.steps[0].report.p
    assert chain.block_mse == []


def test_clip_operator_norm():
    inst, H = inconsistent_measurements()
    blocks = H.to_blocks()
    norms = np.linalg.norm(blocks, ord=2, axis=(2, 3))
    assert norms.max() <= 1 + 1e-12
    assert np.allclose(blocks[np.arange(5), np.arange(5)], np.eye(2))
    exact = gen_rotation_sync(5, 2, 0.0, TEST_SEED).H
    assert np.allclose(clip_operator_norm(exact).todense(), exact.todense(), atol=1e-12)


def test_rank_check_needs_bounded_blocks():
    inst = gen_rotation_sync(5, 2, 0.5, TEST_SEED)
    with pytest.raises(ValueError):
        lud_rank_suppression_check(inst.H, LUD_EPS)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_lud_suppresses_rank_d_solutions(seed):
    _, H = inconsistent_measurements(seed)
    check = lud_rank_suppression_check(H, LUD_EPS, StaircaseOptions(seed=seed))
    assert check.holds
    assert check.rank >= 3, f"LUD returned rank {check.rank}"


def test_lud_escape_below_rounding_is_kkt():
    # Seed 0 ends on an escape whose decrease is below the acceptance margin
    _, H = inconsistent_measurements(0)
    check = lud_rank_suppression_check(H, LUD_EPS, StaircaseOptions(seed=0))
    report = check.report
    assert check.kkt
    assert check.rank >= 3
    assert report.status in ("certified", "numerically_kkt")
    assert (report.stall is None) == (report.status == "certified")
    if report.stall is not None:
        assert report.stall.lambda_min < 0
        assert report.stall.decrease < 1e-12 * max(1.0, abs(report.cost))


def test_pseudo_huber_keeps_rank_d():
    _, H = inconsistent_measurements()
    report = solve(PseudoHuberCost(H, LUD_EPS), StaircaseOptions(seed=TEST_SEED))
    assert report.kkt
    X = report.Y.X()
    m, d = H.spec.m, H.spec.d
    # ‖X‖² reaches m²d only at rank d
    assert np.sum(X * X) >= m ** 2 * d - 1e-4


def test_consistent_measurements_are_kkt_under_lud():
    inst = gen_rotation_sync(5, 2, 0.0, TEST_SEED)
    model = SmoothedLUDCost(inst.H, LUD_EPS)
    assert build_certificate(model, inst.ground_truth).kkt
    check = lud_rank_suppression_check(inst.H, LUD_EPS, StaircaseOptions(seed=TEST_SEED))
    assert check.kkt
    assert check.report.cost <= 1e-6


@pytest.mark.slow
@pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5])
def test_continuation_recovers_permutations(fraction):
    perfect, monotone = 0, 0
    finals = []
    for seed in range(10):
        inst = gen_permutation_sync(30, 4, fraction, seed)
        chain = epsilon_continuation(
            PseudoHuberCost(inst.H, 1.0), opts=StaircaseOptions(seed=seed), truth=inst.ground_truth
        )
        mse = chain.block_mse
        assert len(mse) == 4
        finals.append(mse[-1])
        perfect += chain.steps[-1].metrics.perfect
        monotone += all(b <= a + 1e-8 for a, b in zip(mse, mse[1:]))
    assert perfect >= 9, f"final block_mse per seed: {finals}"
    assert monotone >= 9
