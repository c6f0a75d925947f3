"""Eigenvalue clusters of the non-symmetric pencil ``A u = lam M u`` and its adjoint.

Eigenvalues are enumerated by modulus (ties broken by argument, then solver
index) and a cluster is the window ``n+1 .. n+N`` of that ordering. Sparse
problems use shift-invert Arnoldi (ARPACK) on ``(A - sigma M)^{-1} M``; small
ones a dense QZ solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigs, splu

from .assembly import OperatorPencil, SolverError, adjoint_pencil, solve_linear

__all__ = [
    "EigenError",
    "ClusterBoundaryError",
    "EigenPair",
    "EigenCluster",
    "modulus_order",
    "solve_cluster",
    "solve_adjoint_cluster",
    "orthonormalize_c1",
    "gram_schmidt",
    "subspace_gap",
    "lambda_hat",
    "dense_spectrum",
    "shortcut_defect",
]

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9
MATCH_TOL = 1e-8
DENSE_LIMIT = 800


class EigenError(RuntimeError):
    pass


class ClusterBoundaryError(EigenError):
    """The cluster window cuts through eigenvalues of (numerically) equal modulus."""


@dataclass(frozen=True)
class EigenPair:
    lam: complex
    u: np.ndarray
    residual_norm: float


@dataclass(frozen=True, eq=False)
class EigenCluster:
    """``N`` eigenpairs ranked ``n+1 .. n+N`` by modulus.

    ``U`` holds the eigenvectors column-wise on free dofs; after
    :func:`orthonormalize_c1` it holds an M-orthonormal basis of their span
    instead (``orthonormal`` is then True) while ``vectors`` keeps the
    eigenvectors themselves.
    """

    n: int
    N: int
    shift: complex
    lam: np.ndarray
    U: np.ndarray
    residuals: np.ndarray
    vectors: np.ndarray
    next_modulus: float = np.inf      # |lam_{n+N+1}|, inf if not computed
    prev_modulus: float = 0.0         # |lam_n|, 0 when n == 0
    lam_star: np.ndarray | None = None
    U_star: np.ndarray | None = None
    vectors_star: np.ndarray | None = None
    residuals_star: np.ndarray | None = None
    matching: np.ndarray | None = None
    orthonormal: bool = False

    @property
    def pairs(self) -> list[EigenPair]:
        return [EigenPair(complex(l), self.vectors[:, j], float(r))
                for j, (l, r) in enumerate(zip(self.lam, self.residuals))]

    @property
    def adjoint_pairs(self) -> list[EigenPair]:
        if self.lam_star is None:
            return []
        return [EigenPair(complex(l), self.vectors_star[:, j], float(r))
                for j, (l, r) in enumerate(zip(self.lam_star, self.residuals_star))]

    @property
    def separation(self) -> float:
        """|lam_{n+N+1}| - |lam_{n+N}| on this mesh."""
        return float(self.next_modulus - abs(self.lam[-1]))

    @property
    def is_real(self) -> bool:
        bases = [self.U] + ([self.U_star] if self.U_star is not None else [])
        return bool(np.all(np.imag(self.lam) == 0)) and not any(np.iscomplexobj(b) for b in bases)

    def match_error(self) -> float:
        """max_j |lam_j - conj(lam*_j)| / |lam_j|."""
        if self.lam_star is None:
            raise EigenError("adjoint half not solved")
        return float(np.max(np.abs(self.lam - np.conj(self.lam_star)) / np.abs(self.lam)))

    def biorthogonality(self, M) -> np.ndarray:
        """|(u_j, u*_j)_0| for unit-L2 eigenvectors: a diagnostic for condition (C2)."""
        u = self.vectors / np.sqrt(np.real(np.einsum("ij,ij->j", self.vectors.conj(), M @ self.vectors)))
        w = self.vectors_star
        w = w / np.sqrt(np.real(np.einsum("ij,ij->j", w.conj(), M @ w)))
        return np.abs(np.einsum("ij,ij->j", w.conj(), M @ u))


def modulus_order(lam: np.ndarray) -> np.ndarray:
    """Indices sorting eigenvalues by (modulus, argument, index).

    Moduli are compared at 12 significant digits so that conjugate pairs
    count as ties and are ordered by argument.
    """
    lam = np.asarray(lam, dtype=complex)
    mod = np.abs(lam)
    q = np.array([float(f"{m:.11e}") for m in mod])
    return np.lexsort((np.arange(lam.size), np.angle(lam), q))


def _check_window(lam_sorted, n, N):
    """Raise if the window edges split eigenvalues of equal modulus."""
    mod = np.abs(lam_sorted)
    for lo, hi in ((n - 1, n), (n + N - 1, n + N)):
        if lo < 0 or hi >= lam_sorted.size:
            continue
        if abs(mod[hi] - mod[lo]) <= 1e-10 * mod[hi] and abs(lam_sorted[hi] - lam_sorted[lo]) > 1e-10 * mod[hi]:
            raise ClusterBoundaryError(
                f"eigenvalues {lam_sorted[lo]:.12g} and {lam_sorted[hi]:.12g} have equal modulus "
                f"across the cluster boundary at index {hi}")


def _form(A, u):
    """a(u, u) = u^H A u."""
    return np.vdot(u, A @ u)


def _normalize(A, u):
    """Scale so that |a(u, u)| = 1 and the largest entry is real positive."""
    k = int(np.argmax(np.abs(u)))
    u = u * (np.conj(u[k]) / abs(u[k]))
    val = _form(A, u)
    u = u / np.sqrt(abs(val))
    if np.iscomplexobj(u) and np.max(np.abs(u.imag)) <= 1e-10 * np.max(np.abs(u.real)):
        u = u.real.copy()
    return u


def _residuals(A, M, lam, U):
    AU = A @ U
    R = AU - (M @ U) * lam[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(AU, axis=0)


def dense_spectrum(pencil: OperatorPencil):
    """All eigenvalues and right eigenvectors via dense QZ, in modulus order."""
    lam, V = sla.eig(pencil.A.toarray(), pencil.M.toarray())
    order = modulus_order(lam)
    return lam[order], V[:, order]


def _start_vector(n, dtype):
    rng = np.random.default_rng(20240917)
    v = rng.standard_normal(n)
    if np.issubdtype(dtype, np.complexfloating):
        v = v + 1j * rng.standard_normal(n)
    return v


def _shifted_solver(pencil: OperatorPencil, shift: complex):
    if shift == 0:
        lu = pencil.factor()
        cplx = np.iscomplexobj(pencil.A.data)
        dtype = complex if cplx else float
        return (lambda r: lu.solve(r)), dtype
    key = ("shifted", complex(shift))
    cache = pencil.__dict__.setdefault("_shift_cache", {})
    if key not in cache:
        S = pencil.A - shift * pencil.M
        if np.imag(shift) == 0 and not np.iscomplexobj(S.data):
            S = (pencil.A - float(np.real(shift)) * pencil.M)
        cache[key] = splu(S.tocsc(), permc_spec="COLAMD")
        cache[key] = (cache[key], complex if np.iscomplexobj(S.data) else float)
    lu, dtype = cache[key]
    return (lambda r: lu.solve(r)), dtype


def _krylov(pencil: OperatorPencil, k: int, shift: complex, ncv: int):
    solve, dtype = _shifted_solver(pencil, shift)
    M = pencil.M
    n = pencil.n
    op = LinearOperator((n, n), matvec=lambda x: solve(np.asarray(M @ x, dtype=dtype)), dtype=dtype)
    mu, V = eigs(op, k=k, which="LM", ncv=ncv, tol=0.0, v0=_start_vector(n, dtype),
                 maxiter=max(1000, 50 * n))
    lam = shift + 1.0 / mu
    return lam, V


def solve_cluster(pencil: OperatorPencil, n: int, N: int, shift: complex = 0.0,
                  method: str = "auto", max_restarts: int = 6) -> EigenCluster:
    """Eigenpairs ranked ``n+1 .. n+N`` by modulus, normalised to |a(u, u)| = 1.

    ``method`` is ``"krylov"``, ``"dense"`` or ``"auto"`` (dense below
    ``DENSE_LIMIT`` free dofs).
    """
    if N < 1 or n < 0:
        raise ValueError("need n >= 0 and N >= 1")
    size = pencil.n
    if n + N > size:
        raise EigenError(f"cluster window {n + 1}..{n + N} exceeds {size} free dofs")
    if method not in ("auto", "krylov", "dense"):
        raise ValueError(f"unknown method {method!r}")
    use_dense = method == "dense" or (method == "auto" and size < DENSE_LIMIT)
    want = n + N + 3
    if not use_dense and want >= size - 1:
        use_dense = True

    if use_dense:
        lam, V = dense_spectrum(pencil)
        next_mod = abs(lam[n + N]) if n + N < lam.size else np.inf
    else:
        k = want
        shift = complex(shift)
        for attempt in range(max_restarts):
            ncv = min(max(2 * k + 10, 40), size)
            try:
                lam_k, V_k = _krylov(pencil, k, shift, ncv)
            except ArpackNoConvergence:
                log.warning("ARPACK did not converge with k=%d ncv=%d; retrying", k, ncv)
                k = min(2 * k, size - 2)
                continue
            except RuntimeError as exc:
                if shift == 0:
                    raise EigenError(f"operator factorization failed: {exc}") from exc
                # the shift hit an eigenvalue: move it slightly and try again
                shift = shift * (1 + 1e-6) + 1e-6j * abs(shift)
                log.warning("singular shifted operator; perturbing shift to %s", shift)
                continue
            radius = np.max(np.abs(lam_k - shift))
            order = modulus_order(lam_k)
            lam_k, V_k = lam_k[order], V_k[:, order]
            # all eigenvalues outside the computed set satisfy |lam| >= radius - |shift|
            certified = lam_k.size > n + N and abs(lam_k[n + N]) < radius - abs(shift)
            if certified:
                lam, V = lam_k, V_k
                next_mod = abs(lam[n + N])
                break
            if k >= size - 2:
                lam, V = dense_spectrum(pencil)
                next_mod = abs(lam[n + N]) if n + N < lam.size else np.inf
                break
            k = min(2 * k, size - 2)
        else:
            raise EigenError(f"could not certify cluster window after {max_restarts} attempts")

    _check_window(lam, n, N)
    prev_mod = abs(lam[n - 1]) if n > 0 else 0.0
    lam_c = lam[n:n + N]
    vecs = [_normalize(pencil.A, V[:, j]) for j in range(n, n + N)]
    dtype = complex if any(np.iscomplexobj(v) for v in vecs) else float
    U = np.stack(vecs, axis=1).astype(dtype)
    if np.all(np.abs(lam_c.imag) <= 1e-12 * np.abs(lam_c)) and dtype is float:
        lam_c = lam_c.real.astype(complex)
    res = _residuals(pencil.A, pencil.M, lam_c, U)
    if np.any(res > RESIDUAL_TOL):
        raise EigenError(f"eigenpair residual {res.max():.2e} exceeds {RESIDUAL_TOL:g}")
    return EigenCluster(n=n, N=N, shift=complex(shift), lam=lam_c, U=U, residuals=res,
                        vectors=U, next_modulus=float(next_mod), prev_modulus=float(prev_mod))


def _greedy_match(D):
    """Greedy assignment on a distance matrix: repeatedly take the smallest entry."""
    D = D.copy()
    N = D.shape[0]
    perm = -np.ones(N, dtype=np.int64)
    for _ in range(N):
        i, k = np.unravel_index(np.argmin(D), D.shape)
        perm[i] = k
        D[i, :] = np.inf
        D[:, k] = np.inf
    return perm


def solve_adjoint_cluster(pencil: OperatorPencil, primal: EigenCluster,
                          method: str = "auto") -> EigenCluster:
    """Solve the conjugate-transposed pencil and pair its eigenvalues with the primal ones."""
    adj = adjoint_pencil(pencil)
    star = solve_cluster(adj, primal.n, primal.N, np.conj(primal.shift), method=method)
    D = np.abs(primal.lam[:, None] - np.conj(star.lam)[None, :])
    perm = _greedy_match(D)
    mismatch = D[np.arange(primal.N), perm] / np.abs(primal.lam)
    if np.any(mismatch > MATCH_TOL):
        raise EigenError(f"adjoint eigenvalue mismatch {mismatch.max():.2e} exceeds {MATCH_TOL:g}")
    Us = star.U[:, perm]
    return replace(primal, lam_star=star.lam[perm], U_star=Us, vectors_star=Us,
                   residuals_star=star.residuals[perm], matching=perm)


def gram_schmidt(V: np.ndarray, M, rank_tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt in the M inner product with one reorthogonalisation pass."""
    V = np.array(V, copy=True)
    Q = np.zeros_like(V)
    for j in range(V.shape[1]):
        q = V[:, j]
        norm0 = np.sqrt(abs(np.vdot(q, M @ q)))
        for _ in range(2):
            for i in range(j):
                q = q - np.vdot(Q[:, i], M @ q) * Q[:, i]
        norm = np.sqrt(abs(np.vdot(q, M @ q)))
        if norm0 == 0 or norm < rank_tol * norm0:
            raise EigenError(f"rank-deficient basis at vector {j}")
        Q[:, j] = q / norm
    return Q


def orthonormalize_c1(cluster: EigenCluster, M) -> EigenCluster:
    """Replace both bases by M-orthonormal bases of the same spans."""
    U = gram_schmidt(cluster.U, M)
    Us = gram_schmidt(cluster.U_star, M) if cluster.U_star is not None else None
    return replace(cluster, U=U, U_star=Us, orthonormal=True)


def _orthonormal_basis(U, G):
    U = np.atleast_2d(np.asarray(U))
    if U.ndim == 1:
        U = U[:, None]
    S = U.conj().T @ (G @ U)
    S = 0.5 * (S + S.conj().T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise EigenError("rank-deficient basis") from None
    # the Cholesky diagonal resolves Gram eigenvalues only down to ~sqrt(eps)
    if np.min(np.abs(np.diag(L))) < 1e-7 * np.max(np.abs(np.diag(L))):
        raise EigenError("rank-deficient basis")
    return np.linalg.solve(L.conj(), U.T).T


def _directed_gap(Qa, Qb, G):
    C = Qb.conj().T @ (G @ Qa)
    R = Qa - Qb @ C
    H = R.conj().T @ (G @ R)
    return float(np.sqrt(max(np.max(np.linalg.eigvalsh(0.5 * (H + H.conj().T))), 0.0)))


def subspace_gap(U, W, G) -> float:
    """Symmetric gap max(delta(U, W), delta(W, U)) in the G inner product."""
    if np.shape(U)[0] != np.shape(W)[0]:
        raise ValueError("bases live in different ambient spaces")
    Qu = _orthonormal_basis(U, G)
    Qw = _orthonormal_basis(W, G)
    return max(_directed_gap(Qu, Qw, G), _directed_gap(Qw, Qu, G))


def lambda_hat(cluster) -> complex:
    """Arithmetic mean of the cluster eigenvalues."""
    lam = cluster.lam if isinstance(cluster, EigenCluster) else np.asarray(cluster)
    return complex(np.mean(lam))


def shortcut_defect(pencil: OperatorPencil, cluster: EigenCluster) -> np.ndarray:
    """||K u_j - u_j / lam_j|| / ||u_j|| per eigenvector (zero for exact eigenpairs)."""
    W = solve_linear(pencil, pencil.M @ cluster.vectors)
    D = W - cluster.vectors / cluster.lam[None, :]
    return np.linalg.norm(D, axis=0) / np.linalg.norm(cluster.vectors, axis=0)

