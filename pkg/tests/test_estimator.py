from fractions import Fraction
from math import factorial

import numpy as np
import pytest

from afem.assembly import CoefficientField, assemble_pencil, solve_linear
from afem.bench import registry_get
from afem.eigen import orthonormalize_c1, solve_adjoint_cluster, solve_cluster
from afem.estimator import (
    IndicatorField, cluster_estimator, compute_indicators, local_indicators, oscillation,
    source_solutions,
)
from afem.mesh import bisect, build_initial_mesh, from_arrays, uniform_refine
from afem.space import build_space, interpolate, triangle_rule

LAPLACE = CoefficientField.constant([0])


def kellogg_setup(rounds=3, p=1, N=4):
    prob = registry_get("kellogg")
    space = build_space(uniform_refine(prob.initial_mesh(), rounds), p)
    P = assemble_pencil(space, prob.coeffs)
    c = solve_adjoint_cluster(P, solve_cluster(P, 0, N))
    return P, c


def test_source_solutions_are_scaled_eigenvectors():
    P, c = kellogg_setup(4, 2)
    W, Ws = source_solutions(P, c)
    np.testing.assert_allclose(W, c.U / c.lam[None, :], atol=1e-8 * np.abs(c.U).max())
    np.testing.assert_allclose(Ws, c.U_star / np.conj(c.lam_star)[None, :],
                               atol=1e-8 * np.abs(c.U_star).max())


def test_source_solutions_zero_input():
    P, c = kellogg_setup(2)
    z = c.__class__(**{**c.__dict__, "U": np.zeros_like(c.U), "U_star": np.zeros_like(c.U_star)})
    W, Ws = source_solutions(P, z)
    assert not W.any() and not Ws.any()


def test_source_solutions_symmetric_case():
    space = build_space(uniform_refine(build_initial_mesh("kellogg"), 3), 1)
    P = assemble_pencil(space, CoefficientField.constant([1, 2, 3, 4]))
    c = solve_cluster(P, 0, 3)
    c = c.__class__(**{**c.__dict__, "U_star": c.U})
    W, Ws = source_solutions(P, c)
    np.testing.assert_allclose(Ws, W, atol=1e-14)


def test_zero_data_gives_zero_indicators():
    space = build_space(uniform_refine(build_initial_mesh("kellogg"), 2), 1)
    z = np.zeros(space.n_dofs)
    prob = registry_get("kellogg")
    np.testing.assert_array_equal(local_indicators(space, prob.coeffs, z, z), 0)
    np.testing.assert_array_equal(oscillation(space, prob.coeffs, z, z), 0)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_affine_w_has_no_residual(p):
    space = build_space(bisect(uniform_refine(build_initial_mesh("unit_square_2x2"), 2), [3, 7]), p)
    w = interpolate(space, lambda x, y: 2 * x - 3 * y + 1)
    eta = local_indicators(space, LAPLACE, np.zeros(space.n_dofs), w)
    assert np.abs(eta).max() < 1e-24


def test_single_edge_jump_closed_form():
    # w = x - y on the lower triangle, 0 on the upper; flux jump across the diagonal is sqrt(2)
    mesh = build_initial_mesh("unit_square")
    space = build_space(mesh, 1)
    w = np.where(np.all(space.coords == [1.0, 0.0], axis=1), 1.0, 0.0)
    elem, edge = local_indicators(space, LAPLACE, np.zeros(4), w, split=True)
    np.testing.assert_allclose(elem, 0, atol=1e-28)
    g0, L = np.sqrt(2.0), np.sqrt(2.0)
    np.testing.assert_allclose(edge, [g0**2 * L**2] * 2, rtol=1e-14)


def test_scaling_and_additivity():
    P, c = kellogg_setup(3, 2)
    F = P.expand(c.U[:, 0])
    W = P.expand(solve_linear(P, P.M @ c.U[:, 0]))
    eta = local_indicators(P.space, P.coeffs, F, W)
    s = 0.7 - 2.1j
    np.testing.assert_allclose(local_indicators(P.space, P.coeffs, s * F, s * W), abs(s) ** 2 * eta,
                               rtol=1e-12)
    assert np.all(eta >= 0) and np.all(np.isfinite(eta))
    ind = compute_indicators(P, orthonormalize_c1(c, P.M))
    total = ind.per_triangle().sum()
    assert cluster_estimator(ind) == pytest.approx(ind.global_eta2 + ind.global_eta2_star, rel=1e-12)
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, ind.n_triangles)
    parts = [cluster_estimator(ind, np.flatnonzero(labels == k)) for k in range(3)]
    assert sum(parts) == pytest.approx(total, rel=1e-12)
    assert cluster_estimator(ind, []) == 0.0


def test_batched_indicators_match_single():
    P, c = kellogg_setup(3, 2)
    ind = compute_indicators(P, c)
    W, _ = source_solutions(P, c)
    one = local_indicators(P.space, P.coeffs, P.expand(c.U[:, 2]), P.expand(W[:, 2]))
    np.testing.assert_allclose(ind.eta2[2], one, rtol=1e-13)


def test_oscillation_vanishes_for_fe_data_p1():
    P, c = kellogg_setup(3, 1)
    ind = compute_indicators(P, c)
    assert ind.global_osc2 < 1e-20 * ind.global_eta2


def monomial_integral(a, b):
    return Fraction(factorial(a) * factorial(b), factorial(a + b + 2))


def tail_norm2(poly, q):
    """Exact ||(1 - Pi^q) f||^2 on the reference triangle for f = sum c x^a y^b."""
    basis = [(i - j, j) for i in range(q + 1) for j in range(i + 1)]
    G = [[monomial_integral(a1 + a2, b1 + b2) for (a2, b2) in basis] for (a1, b1) in basis]
    rhs = [sum(c * monomial_integral(a + a1, b + b1) for (a, b), c in poly.items()) for (a1, b1) in basis]
    # exact Gaussian elimination
    n = len(basis)
    aug = [row[:] + [r] for row, r in zip(G, rhs)]
    for k in range(n):
        piv = aug[k][k]
        aug[k] = [v / piv for v in aug[k]]
        for i in range(n):
            if i != k:
                aug[i] = [vi - aug[i][k] * vk for vi, vk in zip(aug[i], aug[k])]
    coef = [aug[i][-1] for i in range(n)]
    ff = sum(c1 * c2 * monomial_integral(a1 + a2, b1 + b2)
             for (a1, b1), c1 in poly.items() for (a2, b2), c2 in poly.items())
    return ff - sum(c * r for c, r in zip(coef, rhs))


@pytest.mark.parametrize("p,poly", [
    (1, {(2, 0): 1}),
    (1, {(1, 1): 3, (0, 2): -1, (1, 0): 2}),
    (2, {(2, 2): 1, (4, 0): 2}),
    (3, {(3, 3): 1, (6, 0): -1, (0, 1): 5}),
])
def test_oscillation_tail_oracle(p, poly):
    mesh = from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    space = build_space(mesh, p)
    f = lambda x, y: sum(c * x**a * y**b for (a, b), c in poly.items())
    osc = oscillation(space, LAPLACE, f, np.zeros(space.n_dofs))
    expected = 2.0 * float(tail_norm2({k: Fraction(v) for k, v in poly.items()}, 2 * p - 1))
    assert osc[0] == pytest.approx(expected, rel=1e-12, abs=1e-30)


def poisson_ratios(levels):
    f = lambda x, y: 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)
    gx = lambda x, y: np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
    gy = lambda x, y: np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
    mesh = uniform_refine(build_initial_mesh("unit_square_2x2"), 2)
    ratios, etas = [], []
    for _ in range(levels):
        space = build_space(mesh, 1)
        P = assemble_pencil(space, LAPLACE)
        rule = triangle_rule(6)
        xq, wq, phi, grad, _ = space.tabulate(rule)
        loc = np.einsum("tq,tq,qi->ti", wq, f(xq[..., 0], xq[..., 1]), phi)
        load = np.zeros(space.n_dofs)
        np.add.at(load, space.dofs, loc)
        w = P.expand(solve_linear(P, load[P.free]))
        gw = np.einsum("tqnd,tn->tqd", grad, w[space.dofs])
        err = np.sqrt(np.sum(wq * ((gw[..., 0] - gx(xq[..., 0], xq[..., 1])) ** 2
                                   + (gw[..., 1] - gy(xq[..., 0], xq[..., 1])) ** 2)))
        eta = np.sqrt(local_indicators(space, LAPLACE, f, w).sum())
        ratios.append(err / eta)
        etas.append(eta ** 2)
        mesh = uniform_refine(mesh, 2)
    return np.array(ratios), np.array(etas)


def test_reliability_surrogate_and_mesh_size_consistency():
    ratios, eta2 = poisson_ratios(4)
    assert ratios.min() > 0.05 and ratios.max() < 1.0
    assert ratios.max() / ratios.min() <= 2
    # each level halves h, so the first-order estimator should halve
    drops = np.sqrt(eta2[:-1] / eta2[1:])
    assert np.all((drops >= 1.7) & (drops <= 2.3))


def test_indicator_field_invariants():
    P, c = kellogg_setup(3, 2)
    ind = compute_indicators(P, orthonormalize_c1(c, P.M))
    assert isinstance(ind, IndicatorField)
    for arr in (ind.eta2, ind.eta2_star, ind.osc2, ind.osc2_star):
        assert arr.shape == (4, P.space.mesh.n_triangles)
        assert np.all(arr >= 0) and np.all(np.isfinite(arr))
    assert ind.global_eta2 == pytest.approx(ind.eta2.sum())
    np.testing.assert_allclose(ind.per_triangle(), ind.eta2.sum(0) + ind.eta2_star.sum(0))
