"""Sparse assembly of a(u, v) = (A grad u, grad v) + (b . grad u + c u, v) and the mass form."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .space import FeSpace, triangle_rule

__all__ = [
    "CoefficientField",
    "OperatorPencil",
    "AssemblyError",
    "SolverError",
    "element_coefficients",
    "element_matrices",
    "assemble_pencil",
    "assemble_rhs_mass",
    "adjoint_pencil",
    "solve_linear",
]


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    """Singular or inaccurate factorization (loss of discrete coercivity)."""


@dataclass(frozen=True)
class CoefficientField:
    """Piecewise constant coefficients keyed by subdomain tag.

    ``A`` maps tag -> symmetric positive definite 2x2, ``b`` tag -> 2-vector,
    ``c`` tag -> scalar. Missing ``b``/``c`` entries default to zero.
    """

    A: dict
    b: dict = field(default_factory=dict)
    c: dict = field(default_factory=dict)

    def __post_init__(self):
        for tag, a in self.A.items():
            a = np.asarray(a, dtype=float)
            if a.shape != (2, 2) or not np.allclose(a, a.T):
                raise AssemblyError(f"A on tag {tag} is not a symmetric 2x2 matrix")
            if np.linalg.eigvalsh(a)[0] <= 0:
                raise AssemblyError(f"A on tag {tag} is not positive definite")

    @classmethod
    def constant(cls, tags, A=((1.0, 0.0), (0.0, 1.0)), b=(0.0, 0.0), c=0.0):
        return cls({t: A for t in tags}, {t: b for t in tags}, {t: c for t in tags})

    def lookup(self, tag):
        if tag not in self.A:
            raise AssemblyError(f"no coefficients for subdomain tag {tag}")
        return (np.asarray(self.A[tag], dtype=float),
                np.asarray(self.b.get(tag, (0.0, 0.0)), dtype=float),
                float(self.c.get(tag, 0.0)))


def element_coefficients(mesh, coeffs: CoefficientField):
    """Arrays A (nt, 2, 2), b (nt, 2), c (nt,) gathered from the subdomain tags."""
    tags = np.unique(mesh.tags)
    table = {int(t): coeffs.lookup(int(t)) for t in tags}
    A = np.empty((mesh.n_triangles, 2, 2))
    b = np.empty((mesh.n_triangles, 2))
    c = np.empty(mesh.n_triangles)
    for t, (At, bt, ct) in table.items():
        sel = mesh.tags == t
        A[sel], b[sel], c[sel] = At, bt, ct
    return A, b, c


@dataclass(eq=False)
class OperatorPencil:
    """Free-dof matrices of a(phi_j, phi_i) and (phi_j, phi_i)_0.

    Row i / column j convention: ``A[i, j] = a(phi_j, phi_i)``. A single LU
    factorization of ``A`` is built lazily and serves both ``A x = r`` and
    ``A^H x = r``.
    """

    A: sp.csr_matrix
    M: sp.csr_matrix
    free: np.ndarray
    space: FeSpace | None = None
    coeffs: CoefficientField | None = None
    adjoint: bool = False
    _lu: object = field(default=None, repr=False)
    _parent: "OperatorPencil | None" = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def factor(self):
        if self._lu is None and self._parent is not None:
            self._lu = _TransposedLU(self._parent.factor())
        if self._lu is None:
            try:
                self._lu = splu(self.A.tocsc(), permc_spec="COLAMD")
            except RuntimeError as exc:
                raise SolverError(f"factorization failed: {exc}") from exc
        return self._lu

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Embed free-dof coefficients into the full dof vector (zero on the boundary)."""
        x = np.asarray(x)
        full = np.zeros((self.space.n_dofs,) + x.shape[1:], dtype=np.result_type(x, float))
        full[self.free] = x
        return full


def element_matrices(space: FeSpace, coeffs: CoefficientField):
    """Local operator and mass matrices (nt, nloc, nloc), entry [t, i, j] = a_T(phi_j, phi_i)."""
    A, b, c = element_coefficients(space.mesh, coeffs)
    rule = triangle_rule(2 * space.degree + 2)
    _, wq, phi, grad, _ = space.tabulate(rule)
    Agrad = np.einsum("tij,tqkj->tqki", A, grad)
    K = np.einsum("tq,tqjd,tqid->tij", wq, Agrad, grad, optimize=True)
    bgrad = np.einsum("td,tqjd->tqj", b, grad)
    K += np.einsum("tq,tqj,qi->tij", wq, bgrad, phi, optimize=True)
    Mloc = np.einsum("tq,qj,qi->tij", wq, phi, phi, optimize=True)
    K += c[:, None, None] * Mloc
    return K, Mloc


def _scatter(space: FeSpace, local: np.ndarray) -> sp.csr_matrix:
    dofs = space.dofs
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    n = space.n_dofs
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_pencil(space: FeSpace, coeffs: CoefficientField) -> OperatorPencil:
    """Assemble the operator and mass matrices restricted to free dofs."""
    K, Mloc = element_matrices(space, coeffs)
    free = space.free
    A = _scatter(space, K)[free][:, free].tocsr()
    M = _scatter(space, Mloc)[free][:, free].tocsr()
    A.sort_indices()
    M.sort_indices()
    return OperatorPencil(A, M, free, space, coeffs)


def assemble_rhs_mass(pencil: OperatorPencil, u: np.ndarray) -> np.ndarray:
    """Load vector (u, phi_i)_0 on free dofs for a finite element function u."""
    u = np.asarray(u)
    if u.shape != (pencil.n,):
        raise AssemblyError(f"expected {pencil.n} free-dof coefficients, got shape {u.shape}")
    return pencil.M @ u


def adjoint_pencil(pencil: OperatorPencil) -> OperatorPencil:
    """Conjugate-transposed pencil (A^H, M^H); shares the factorization."""
    out = replace(pencil, A=pencil.A.conj().T.tocsr(), M=pencil.M.conj().T.tocsr(),
                  adjoint=not pencil.adjoint, _lu=None, _parent=pencil)
    out.A.sort_indices()
    out.M.sort_indices()
    return out


class _TransposedLU:
    def __init__(self, lu):
        self.lu = lu

    def solve(self, rhs, trans="N"):
        flip = {"N": "H", "H": "N", "T": "T"}[trans]
        if trans == "T":
            # (A^H)^T = conj(A)
            return np.conj(self.lu.solve(np.conj(rhs), trans="N"))
        return self.lu.solve(rhs, trans=flip)


def _lu_solve(lu, rhs, trans, real_factor):
    if real_factor and np.iscomplexobj(rhs):
        # SuperLU keeps the factor dtype; split complex data into two real solves
        return _lu_solve(lu, rhs.real, trans, True) + 1j * _lu_solve(lu, rhs.imag, trans, True)
    return lu.solve(rhs, trans=trans)


def solve_linear(pencil: OperatorPencil, rhs: np.ndarray, which: str = "primal",
                 rtol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = rhs`` (primal) or ``A^H x = rhs`` (adjoint) with the cached LU.

    ``rhs`` may be a vector or an (n, k) block of right-hand sides.
    """
    if which not in ("primal", "adjoint"):
        raise ValueError(f"which must be 'primal' or 'adjoint', got {which!r}")
    rhs = np.asarray(rhs)
    if rhs.shape[0] != pencil.n:
        raise AssemblyError(f"rhs has {rhs.shape[0]} rows, pencil has {pencil.n}")
    lu = pencil.factor()
    trans = "N" if which == "primal" else "H"
    x = _lu_solve(lu, rhs, trans, not np.iscomplexobj(pencil.A.data))
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite solution; operator is singular")
    op = pencil.A if which == "primal" else pencil.A.conj().T
    r = op @ x - rhs
    nr = np.linalg.norm(rhs, axis=0)
    res = np.linalg.norm(r, axis=0)
    bad = res > rtol * np.where(nr > 0, nr, 1.0)
    if np.any(bad):
        raise SolverError(f"relative residual {np.max(res / np.where(nr > 0, nr, 1.0)):.3e} exceeds {rtol:g}")
    return x
