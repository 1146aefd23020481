import numpy as np
import pytest

from manifold.blockmat import BlockSpec, block_products
from manifold.stiefel_product import ManifoldSpec, check_feasibility, random_point
from modeling.cost_model import InvalidMeasurements, g
from problems.cycle import (
    CycleInstance,
    Unsolvable,
    certificate_spectrum,
    check_solvable,
    closed_form_solution,
    cycle_cost,
    eigenphases,
    fractional_power,
    gen_cycle,
    matrix_root,
    squared_cycle_residual,
    toeplitz_eigenvalues,
)
from solver.certificate import build_certificate
from solver.rtr import RtrOptions
from solver.staircase import StaircaseOptions, solve

TEST_SEED = 1337
CYCLE_SHAPES = [(3, 1), (4, 2), (5, 3), (7, 2), (10, 3)]


def rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def consistent_cycle(m, d, seed):
    truth = random_point(ManifoldSpec(BlockSpec(m, d), d), seed).slices
    following = np.roll(truth, -1, axis=0)
    return CycleInstance(np.einsum("iab,icb->iac", truth, following)), truth


#==================================================================#
#  Principal roots
#==================================================================#
def test_root_of_identity():
    assert np.allclose(matrix_root(np.eye(3), 5), np.eye(3), atol=1e-14)


def test_root_of_planar_rotation():
    alpha = 2.0
    assert np.allclose(matrix_root(rotation(alpha), 3), rotation(alpha / 3), atol=1e-12)


def test_fractional_power_generalizes_root():
    P = rotation(1.2)
    assert np.allclose(fractional_power(P, 0.25), rotation(0.3), atol=1e-12)
    assert np.allclose(fractional_power(P, 1.0), P, atol=1e-12)


def test_scalar_minus_one_is_unsolvable():
    inst = CycleInstance(np.array([[[1.0]], [[1.0]], [[-1.0]]]))
    assert np.array_equal(inst.P, [[-1.0]])
    with pytest.raises(Unsolvable):
        check_solvable(inst.P)
    with pytest.raises(Unsolvable):
        closed_form_solution(inst)


def test_half_turn_rotation_is_unsolvable():
    with pytest.raises(Unsolvable):
        matrix_root(rotation(np.pi), 4)


def test_random_roots_reproduce_P(rng):
    for trial in range(100):
        d = 2 + trial % 3
        P = gen_cycle(3, d, seed=rng).P
        R = matrix_root(P, 5)
        assert np.allclose(R @ R.T, np.eye(d), atol=1e-12)
        assert np.allclose(np.linalg.matrix_power(R, 5), P, atol=1e-10), f"trial {trial}"


def test_eigenphases_of_a_rotation():
    P = np.eye(3)
    P[1:, 1:] = rotation(0.7)
    assert np.allclose(eigenphases(P), [-0.7, 0.0, 0.7], atol=1e-12)


#==================================================================#
#  Instances and closed form
#==================================================================#
def test_gen_cycle_measurements():
    inst = gen_cycle(6, 3, seed=TEST_SEED)
    assert np.allclose(np.linalg.det(inst.H), 1.0)
    mixed = gen_cycle(40, 3, seed=TEST_SEED, orthogonal=True)
    assert np.any(np.linalg.det(mixed.H) < 0)


def test_cycle_instance_validation():
    with pytest.raises(InvalidMeasurements):
        CycleInstance(np.ones((3, 2, 2)))
    with pytest.raises(InvalidMeasurements):
        CycleInstance(np.stack([np.eye(2)] * 2))


def test_all_plus_one_cycle():
    inst = CycleInstance(np.ones((3, 1, 1)))
    sol = closed_form_solution(inst)
    assert np.allclose(sol.X(), np.ones((3, 3)), atol=1e-14)


def test_consistent_cycle_is_reproduced():
    inst, truth = consistent_cycle(6, 3, TEST_SEED)
    assert np.allclose(inst.P, np.eye(3), atol=1e-12)
    sol = closed_form_solution(inst)
    expected = np.einsum("iap,jbp->ijab", truth, truth)
    assert np.allclose(block_products(sol.Y.Y, sol.Y.Y, inst.spec), expected, atol=1e-10)
    assert squared_cycle_residual(inst, sol.Y) <= 1e-20
    assert g(cycle_cost(inst), sol.Y) == pytest.approx(-2 * inst.m * inst.d, abs=1e-10)


@pytest.mark.parametrize("m, d", CYCLE_SHAPES)
def test_closed_form_is_feasible_rank_d(m, d):
    inst = gen_cycle(m, d, seed=TEST_SEED + m)
    sol = closed_form_solution(inst)
    check_feasibility(sol.Y)
    assert sol.Y.p == d
    assert np.allclose(np.linalg.matrix_power(sol.root, m), inst.P, atol=1e-10)
    # Each edge carries the same share of the inconsistency
    blocks = block_products(sol.Y.Y, sol.Y.Y, inst.spec)
    for i in range(m - 1):
        corrected = inst.H[i] @ sol.Q[i + 1] @ sol.root.T @ sol.Q[i + 1].T
        assert np.allclose(blocks[i, i + 1], corrected, atol=1e-10)


#==================================================================#
#  Certificate spectrum
#==================================================================#
@pytest.mark.parametrize("m, d", CYCLE_SHAPES)
def test_spectrum_matches_phase_blocks(m, d):
    inst = gen_cycle(m, d, seed=TEST_SEED + 10 * m + d)
    spectrum = certificate_spectrum(inst, closed_form_solution(inst))
    assert spectrum.holds, f"m={m} d={d}: λ_min={spectrum.lambda_min:.3e}, kernel {spectrum.kernel_dim}"
    assert spectrum.kernel_dim == d
    assert np.allclose(spectrum.numeric, spectrum.analytic, atol=1e-9)
    assert np.all(spectrum.numeric[d:] >= spectrum.interlacing_floor - 1e-9)
    assert spectrum.interlacing_floor > 0


def test_consistent_cycle_spectrum_is_the_laplacian():
    m, d = 6, 2
    inst, _ = consistent_cycle(m, d, TEST_SEED)
    spectrum = certificate_spectrum(inst, closed_form_solution(inst))
    laplacian = 2 - 2 * np.cos(2 * np.pi * np.arange(m) / m)
    assert np.allclose(spectrum.numeric, np.sort(np.repeat(laplacian, d)), atol=1e-10)
    assert spectrum.lambda_min == pytest.approx(0.0, abs=1e-10)
    assert spectrum.rank_S == (m - 1) * d


@pytest.mark.parametrize("m, d", CYCLE_SHAPES)
def test_strict_complementarity_on_cycles(m, d):
    inst = gen_cycle(m, d, seed=TEST_SEED + m)
    sol = closed_form_solution(inst)
    cert = build_certificate(cycle_cost(inst), sol.Y)
    assert cert.kkt
    assert cert.strict_complementarity(d).holds


def test_toeplitz_eigenvalues_quarter_turn():
    values = toeplitz_eigenvalues(np.pi / 2, 4)
    expected = 2 * (np.cos(np.pi / 8) - np.cos(np.arange(1, 4) * np.pi / 4))
    assert np.allclose(values, expected)
    assert np.all(values > 0)


#==================================================================#
#  Staircase against the closed form
#==================================================================#
# Holonomies with a phase this close to π have a nearly singular certificate
PHASE_MARGIN = 0.05


def random_solvable_cycle(index):
    """Cycle with m in 3..10, d in 1..3, rotations or all of O(d), redrawn
    until its holonomy has a principal root."""
    rng = np.random.default_rng(TEST_SEED + index)
    while True:
        m, d = int(rng.integers(3, 11)), int(rng.integers(1, 4))
        inst = gen_cycle(m, d, seed=rng, orthogonal=bool(rng.integers(2)))
        if np.all(np.abs(inst.eigenphases) < np.pi - PHASE_MARGIN):
            return inst


def test_random_cycles_include_reflections():
    assert any(np.any(np.linalg.det(random_solvable_cycle(k).H) < 0) for k in range(50))


@pytest.mark.parametrize("index", range(50))
def test_staircase_matches_closed_form(index):
    inst = random_solvable_cycle(index)
    m, d = inst.m, inst.d
    sol = closed_form_solution(inst)
    report = solve(cycle_cost(inst), StaircaseOptions(seed=TEST_SEED, rtr=RtrOptions(grad_tol=1e-10)))
    assert report.kkt
    gap = np.linalg.norm(report.Y.X() - sol.X())
    assert gap <= 1e-6, f"m={m} d={d}: ‖ΔX‖_F = {gap:.3e}"
    spectrum = certificate_spectrum(inst, sol)
    assert spectrum.kernel_dim == d
    assert np.all(np.abs(spectrum.numeric[:d]) <= 1e-9)
    assert np.all(spectrum.numeric[d:] >= spectrum.interlacing_floor - 1e-9)
