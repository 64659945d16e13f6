import itertools
import math

import numpy as np
import pytest

from esunetpp.crf import (CrfParams, CrfProblem, crf_refine, crf_refine_capped, exhaustive_map, gibbs_energy,
                          kernel_matrix, mean_field, mean_field_step, pairwise_kernel, unary_from_probs)
from esunetpp.errors import ContractError, ParameterError, ShapeError, SizeLimitError

from crf_suites import confident_problems, denoising_suite
from oracles import gibbs_energy_direct


def problem(p, img):
    return CrfProblem.from_image(np.asarray(p, float), np.asarray(img, float))


def test_kernel_identical_pixels_is_sum_of_weights():
    pr = CrfProblem(np.zeros((2, 2)), [[1, 1], [1, 1]], [0.4, 0.4])
    assert pairwise_kernel(0, 1, pr, CrfParams(w_appearance=2.0, w_smoothness=0.5)) == 2.5


def test_kernel_hand_case_one_over_e():
    # |dp|^2 = 2 θα^2 = 2 θγ^2 and equal intensities
    prm = CrfParams(w_appearance=1.5, w_smoothness=0.7, theta_alpha=1.0, theta_gamma=1.0)
    pr = CrfProblem(np.zeros((2, 2)), [[0, 0], [1, 1]], [0.2, 0.2])
    assert abs(pairwise_kernel(0, 1, pr, prm) - (1.5 + 0.7) / math.e) < 1e-15


def test_kernel_vanishes_with_distance():
    pr = CrfProblem(np.zeros((2, 2)), [[0, 0], [1e4, 0]], [0.0, 0.0])
    assert pairwise_kernel(0, 1, pr, CrfParams()) == 0.0


def test_kernel_matrix_matches_pairwise_and_cap():
    rng = np.random.default_rng(0)
    pr = problem(rng.random((3, 4)), rng.random((3, 4)))
    prm = CrfParams()
    K = kernel_matrix(pr, prm)
    assert np.all(np.diag(K) == 0)
    for i, j in itertools.permutations(range(pr.n), 2):
        assert abs(K[i, j] - pairwise_kernel(i, j, pr, prm)) < 1e-12
    with pytest.raises(SizeLimitError):
        kernel_matrix(pr, CrfParams(max_pixels=5))


def test_unary_from_probs():
    u = unary_from_probs(np.array([0.5, 0.9]))
    assert np.allclose(u[0], [math.log(2)] * 2)
    assert np.allclose(u[1], [-math.log(0.1), -math.log(0.9)])
    assert np.all(np.isfinite(unary_from_probs(np.array([0.0, 1.0]))))


def test_problem_validation():
    with pytest.raises(ShapeError):
        CrfProblem(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ContractError):
        CrfProblem(np.array([[np.inf, 0.0]]), [[0, 0]], [0.0])
    with pytest.raises(ShapeError):
        CrfProblem.from_image(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ParameterError):
        CrfParams(theta_beta=0)
    with pytest.raises(ParameterError):
        CrfParams(iterations=0)
    assert CrfParams.from_dict(CrfParams(iterations=3).to_dict()) == CrfParams(iterations=3)


def test_three_pixel_single_step_by_hand():
    p = np.array([[0.9, 0.2, 0.6]])
    img = np.array([[0.1, 0.5, 0.3]])
    pr = problem(p, img)
    prm = CrfParams()
    Q = np.stack([1 - p.ravel(), p.ravel()], axis=1)
    got = mean_field_step(Q, pr, prm)
    want = np.zeros((3, 2))
    for i in range(3):
        e = []
        for lab in (0, 1):
            m = sum(pairwise_kernel(i, j, pr, prm) * Q[j, 1 - lab] for j in range(3) if j != i)
            e.append(pr.unary[i, lab] + m)
        z = np.exp(-np.array(e))
        want[i] = z / z.sum()
    assert np.max(np.abs(got - want)) < 1e-12


def test_mean_field_step_checks_q():
    pr = problem([[0.5, 0.5]], [[0, 0]])
    with pytest.raises(ShapeError):
        mean_field_step(np.ones((3, 2)) / 2, pr, CrfParams())
    with pytest.raises(ContractError):
        mean_field_step(np.ones((2, 2)), pr, CrfParams())


def test_q_stays_on_simplex():
    rng = np.random.default_rng(1)
    pr = problem(rng.random((4, 4)), rng.random((4, 4)))
    Q = mean_field(pr, CrfParams(iterations=7))
    assert np.all(Q >= 0) and np.max(np.abs(Q.sum(axis=1) - 1)) <= 1e-12


def test_zero_weights_threshold_probabilities():
    rng = np.random.default_rng(2)
    p = rng.random((5, 5))
    out = crf_refine(p, rng.random((5, 5)), CrfParams(w_appearance=0.0, w_smoothness=0.0))
    assert np.array_equal(out, p > 0.5)


def test_isolated_flip_is_restored_with_strong_smoothness():
    shape = np.zeros((8, 8), bool)
    shape[:, 4:] = True
    noisy = shape.copy()
    noisy[2, 6] = False
    p = np.where(noisy, 0.8, 0.2)
    img = np.where(shape, 0.7, 0.3)
    prm = CrfParams(w_smoothness=1.0, theta_gamma=1.0, w_appearance=1.0, theta_alpha=2.0)
    out = crf_refine(p, img, prm)
    pr = problem(p, img)
    assert out[2, 6]
    assert gibbs_energy(out, pr, prm) < gibbs_energy(noisy, pr, prm)


def test_gibbs_energy_two_pixel_hand_values():
    pr = problem([[0.7, 0.4]], [[0.2, 0.5]])
    prm = CrfParams()
    k = pairwise_kernel(0, 1, pr, prm)
    u = pr.unary
    for a, b in itertools.product((0, 1), repeat=2):
        want = u[0, a] + u[1, b] + (k if a != b else 0.0)
        assert abs(gibbs_energy([a, b], pr, prm) - want) < 1e-12


def test_gibbs_energy_matches_direct_sum():
    rng = np.random.default_rng(3)
    prm = CrfParams(w_appearance=0.7, w_smoothness=1.3, theta_alpha=2.0, theta_beta=0.3, theta_gamma=1.5)
    pr = problem(rng.random((3, 3)), rng.random((3, 3)))
    for _ in range(10):
        x = rng.integers(0, 2, 9)
        want = gibbs_energy_direct(x, pr.unary, pr.positions, pr.intensities, 0.7, 1.3, 2.0, 0.3, 1.5)
        assert abs(gibbs_energy(x, pr, prm) - want) < 1e-10
    assert abs(gibbs_energy(np.ones(9), pr, prm) - pr.unary[:, 1].sum()) < 1e-12


def test_exhaustive_map_is_global_minimum_and_lexicographic():
    rng = np.random.default_rng(4)
    pr = problem(rng.random((2, 3)), rng.random((2, 3)))
    prm = CrfParams()
    best = exhaustive_map(pr, prm)
    e = gibbs_energy(best, pr, prm)
    assert all(e <= gibbs_energy(x, pr, prm) + 1e-12 for x in itertools.product((0, 1), repeat=6))
    flat = CrfProblem(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))
    assert np.array_equal(exhaustive_map(flat, CrfParams(w_appearance=0, w_smoothness=0)), [0, 0, 0])


def test_exhaustive_map_unary_only_and_limit():
    rng = np.random.default_rng(5)
    p = rng.random((1, 7))
    prm = CrfParams(w_appearance=0.0, w_smoothness=0.0)
    assert np.array_equal(exhaustive_map(problem(p, p), prm), (p.ravel() > 0.5).astype(int))
    with pytest.raises(SizeLimitError):
        exhaustive_map(problem(np.zeros((3, 7)), np.zeros((3, 7))), prm)


def test_refine_matches_exhaustive_in_the_weak_kernel_regime():
    # kernel mass small next to the ln 9 unary gap: the mean-field fixed
    # point reached from the network probabilities is the global MAP
    prm = CrfParams(w_appearance=0.2, w_smoothness=0.2)
    for p, img in confident_problems(100, seed=99):
        got = crf_refine(p, img, prm).ravel().astype(int)
        assert np.array_equal(got, exhaustive_map(problem(p, img), prm))


def test_refine_never_raises_energy_on_denoising_suite():
    prm = CrfParams()
    for name, p, img, _ in denoising_suite():
        pr = problem(p, img)
        assert gibbs_energy(crf_refine(p, img, prm), pr, prm) <= gibbs_energy(p > 0.5, pr, prm), name


def test_refine_capped_downscales_large_maps():
    rng = np.random.default_rng(6)
    p = np.zeros((40, 40))
    p[10:30, 10:30] = 0.95
    p = np.clip(p + rng.uniform(0, 0.04, p.shape), 0, 1)
    prm = CrfParams(max_pixels=400)
    with pytest.raises(SizeLimitError):
        crf_refine(p, p, prm)
    out = crf_refine_capped(p, p, prm)
    assert out.shape == (40, 40) and out.dtype == bool
    assert out[20, 20] and not out[2, 2]
    small = rng.random((4, 4))
    assert np.array_equal(crf_refine_capped(small, small, prm), crf_refine(small, small, prm))
