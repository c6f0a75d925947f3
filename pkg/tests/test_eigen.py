from fractions import Fraction

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from afem.assembly import CoefficientField, OperatorPencil, assemble_pencil
from afem.bench import KELLOGG_REFERENCE, registry_get
from afem.eigen import (
    ClusterBoundaryError, EigenError, gram_schmidt, lambda_hat, modulus_order,
    orthonormalize_c1, shortcut_defect, solve_adjoint_cluster, solve_cluster, subspace_gap,
)
from afem.mesh import bisect, uniform_refine
from afem.space import build_space


def matrix_pencil(A, M=None):
    A = sp.csr_matrix(np.asarray(A, dtype=float))
    M = sp.identity(A.shape[0], format="csr") if M is None else sp.csr_matrix(M)
    return OperatorPencil(A, M, np.arange(A.shape[0]))


def problem_pencil(name, rounds, p=1):
    prob = registry_get(name)
    space = build_space(uniform_refine(prob.initial_mesh(), rounds), p)
    return assemble_pencil(space, prob.coeffs)


def test_diagonal_pencil():
    c = solve_cluster(matrix_pencil(np.diag([1.0, 2.0])), 0, 1)
    assert c.lam[0] == pytest.approx(1.0)
    np.testing.assert_allclose(c.U[:, 0], [1.0, 0.0], atol=1e-15)


def test_laplace_cluster_of_three():
    errs = []
    for rounds in (4, 6):
        P = problem_pencil("laplace_square", rounds)
        c = solve_cluster(P, 0, 3)
        exact = np.pi**2 * np.array([2, 5, 5])
        np.testing.assert_allclose(c.lam.real, exact, rtol=0.1 if rounds == 4 else 0.02)
        errs.append(np.abs(c.lam - exact))
    # O(h^2): two bisection rounds halve h
    assert np.all(errs[0] / errs[1] > 3.5)


def test_degenerate_pair_may_be_split():
    # equal eigenvalues (not just equal moduli) are not a boundary ambiguity
    P = problem_pencil("laplace_square", 4)
    c = solve_cluster(P, 0, 2)
    assert c.next_modulus == pytest.approx(abs(c.lam[1]), rel=1e-10)


def test_conjugate_pair_on_the_boundary_is_reported():
    a, b = 3.0, 0.5
    A = np.zeros((3, 3))
    A[:2, :2] = [[a, -b], [b, a]]
    A[2, 2] = 1.0
    with pytest.raises(ClusterBoundaryError):
        solve_cluster(matrix_pencil(A), 0, 2)
    c = solve_cluster(matrix_pencil(A), 0, 3)
    # ties in modulus are broken by argument
    np.testing.assert_allclose(c.lam, [1, a - 1j * b, a + 1j * b])


def test_modulus_order_ties_by_argument():
    lam = np.array([1j, -1, 1, -1j])
    np.testing.assert_array_equal(modulus_order(lam), [3, 2, 0, 1])


def test_kellogg_reference_values_uniform_p3():
    ref = np.array(KELLOGG_REFERENCE)
    errs = []
    for rounds in (5, 6):
        c = solve_cluster(problem_pencil("kellogg", rounds, 3), 0, 12)
        assert np.all(c.lam.imag == 0)
        errs.append(np.abs(c.lam.real - ref) / ref)
    assert errs[1].max() < 2e-2
    assert errs[1].mean() < errs[0].mean()


def test_normalization_and_residuals():
    P = problem_pencil("kellogg", 4, 2)
    c = solve_cluster(P, 0, 6)
    for pair in c.pairs:
        u = pair.u
        assert abs(np.vdot(u, P.A @ u)) == pytest.approx(1.0, rel=1e-12)
        k = np.argmax(np.abs(u))
        assert np.real(u[k]) > 0 and np.imag(u[k]) == 0
        r = P.A @ u - pair.lam * (P.M @ u)
        assert np.linalg.norm(r) <= 1e-9 * np.linalg.norm(P.A @ u)


def test_shift_invariance():
    P = problem_pencil("kellogg", 6)
    base = solve_cluster(P, 0, 4, method="krylov")
    moved = solve_cluster(P, 0, 4, shift=0.5 * abs(base.lam[0]), method="krylov")
    np.testing.assert_allclose(moved.lam, base.lam, rtol=1e-8)


def test_shift_on_an_eigenvalue_is_perturbed():
    P = matrix_pencil(sp.diags(np.arange(1.0, 1001.0)).toarray())
    c = solve_cluster(P, 0, 3, shift=2.0, method="krylov")
    np.testing.assert_allclose(c.lam, [1, 2, 3], rtol=1e-10)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_krylov_matches_dense(seed):
    rng = np.random.default_rng(seed)
    prob = registry_get("kellogg")
    mesh = uniform_refine(prob.initial_mesh(), 2)
    for _ in range(3):
        mesh = bisect(mesh, np.flatnonzero(rng.random(mesh.n_triangles) < 0.3))
    P = assemble_pencil(build_space(mesh, 1), prob.coeffs)
    N = min(6, P.n - 5)
    k = solve_cluster(P, 0, N, method="krylov")
    d = solve_cluster(P, 0, N, method="dense")
    np.testing.assert_allclose(np.sort_complex(k.lam), np.sort_complex(d.lam), rtol=1e-9)


def test_window_larger_than_space():
    with pytest.raises(EigenError):
        solve_cluster(matrix_pencil(np.eye(3)), 2, 2)


def test_adjoint_of_known_nonsymmetric_matrix():
    S = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]])
    A = S @ np.diag([1.0, 2.0, 3.0]) @ np.linalg.inv(S)
    P = matrix_pencil(A)
    c = solve_adjoint_cluster(P, solve_cluster(P, 0, 3))
    np.testing.assert_allclose(c.lam, [1, 2, 3], rtol=1e-12)
    np.testing.assert_allclose(c.lam_star, [1, 2, 3], rtol=1e-12)
    G = c.vectors_star.conj().T @ (P.M @ c.vectors)
    off = G - np.diag(np.diag(G))
    assert np.abs(off).max() < 1e-12
    assert np.all(np.abs(np.diag(G)) > 1e-3)


def test_symmetric_adjoint_equals_primal():
    prob = registry_get("kellogg")
    space = build_space(uniform_refine(prob.initial_mesh(), 4), 1)
    P = assemble_pencil(space, CoefficientField(prob.coeffs.A, {}, {}))
    c = solve_adjoint_cluster(P, solve_cluster(P, 0, 4))
    np.testing.assert_allclose(c.lam_star, c.lam, rtol=1e-10)
    for u, w in zip(c.vectors.T, c.vectors_star.T):
        assert abs(abs(np.vdot(u, w)) - np.linalg.norm(u) * np.linalg.norm(w)) < 1e-8


def test_kellogg_adjoint_matching():
    P = problem_pencil("kellogg", 4)
    c = solve_adjoint_cluster(P, solve_cluster(P, 0, 12))
    assert c.match_error() <= 1e-8
    assert np.all(c.biorthogonality(P.M) > 0.1)
    assert sorted(c.matching) == list(range(12))


def test_gram_schmidt_identity_on_orthonormal_input():
    Q = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 3)))[0]
    np.testing.assert_allclose(gram_schmidt(Q, np.eye(8)), Q, atol=1e-14)


def test_gram_schmidt_rank_deficiency():
    v = np.random.default_rng(1).standard_normal(5)
    with pytest.raises(EigenError):
        gram_schmidt(np.stack([v, v], axis=1), np.eye(5))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gram_schmidt_random_spd(seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((10, 10))
    M = B @ B.T + 10 * np.eye(10)
    V = rng.standard_normal((10, 4)) + 1j * rng.standard_normal((10, 4))
    Q = gram_schmidt(V, M)
    np.testing.assert_allclose(Q.conj().T @ M @ Q, np.eye(4), atol=1e-12)
    # same span: V is reproduced by its projection onto Q
    np.testing.assert_allclose(Q @ (Q.conj().T @ M @ V), V, atol=1e-10)
    # triangular: q_j only mixes v_1..v_j
    R = Q.conj().T @ M @ V
    np.testing.assert_allclose(np.tril(R, -1), 0, atol=1e-10)


def test_orthonormalize_c1_on_cluster():
    P = problem_pencil("kellogg", 4, 2)
    c = orthonormalize_c1(solve_adjoint_cluster(P, solve_cluster(P, 0, 12)), P.M)
    for B in (c.U, c.U_star):
        np.testing.assert_allclose(B.conj().T @ (P.M @ B), np.eye(12), atol=1e-12)
    assert c.orthonormal and c.vectors is not c.U
    assert subspace_gap(c.U, c.vectors, P.M) < 1e-10


def test_subspace_gap_examples():
    I2 = np.eye(2)
    e1, e2 = I2[:, :1], I2[:, 1:]
    assert subspace_gap(e1, e1, I2) == pytest.approx(0.0, abs=1e-15)
    assert subspace_gap(e1, e2, I2) == pytest.approx(1.0)
    t = 0.3
    v = np.array([[np.cos(t)], [np.sin(t)]])
    assert subspace_gap(e1, v, I2) == pytest.approx(0.29552020666133955, rel=1e-12)
    with pytest.raises(EigenError):
        subspace_gap(np.ones((2, 2)), e1, I2)


def test_lambda_hat():
    assert lambda_hat(np.array([5.0 + 1j])) == 5.0 + 1j
    assert lambda_hat(np.array([1.0, 3.0])) == 2.0
    # exact rational mean of the twelve reference values
    mean = sum(Fraction(repr(v)) for v in KELLOGG_REFERENCE) / 12
    assert lambda_hat(np.array(KELLOGG_REFERENCE)) == pytest.approx(float(mean), rel=1e-15)
    assert float(mean) == pytest.approx(57.9832075, abs=1e-7)


def test_shortcut_identity():
    for rounds in (3, 4, 5):
        P = problem_pencil("kellogg", rounds, 2)
        c = solve_cluster(P, 0, 12)
        assert np.all(shortcut_defect(P, c) <= 1e-8)
