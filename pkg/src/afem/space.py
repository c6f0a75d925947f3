"""Lagrange P1-P3 spaces on triangles, with quadrature and basis evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .mesh import Mesh

__all__ = [
    "QuadRule",
    "FeSpace",
    "SpaceError",
    "triangle_rule",
    "gauss_line",
    "reference_nodes",
    "reference_basis",
    "build_space",
    "eval_basis",
    "interpolate",
    "evaluate",
]

SUPPORTED_DEGREES = (1, 2, 3)
# local edge k joins local vertices EDGE_VERTS[k] and is opposite vertex k
EDGE_VERTS = ((1, 2), (2, 0), (0, 1))


class SpaceError(ValueError):
    pass


@dataclass(frozen=True)
class QuadRule:
    """Points in barycentric coordinates; weights sum to one."""

    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def ref_points(self) -> np.ndarray:
        """Points on the reference triangle (0,0), (1,0), (0,1)."""
        return self.bary[:, 1:]


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadRule:
    """Collapsed Gauss rule on the reference triangle, exact up to ``degree``.

    The Duffy map ``x = u, y = v (1 - u)`` turns the triangle into a square;
    Gauss-Jacobi (alpha=1) in ``u`` absorbs the Jacobian and Gauss-Legendre
    handles ``v``. Both 1D rules use ``degree // 2 + 1`` points.
    """
    from scipy.special import roots_jacobi

    n = degree // 2 + 1
    # Jacobi weight (1 - s)^1 on [-1, 1]
    s, ws = roots_jacobi(n, 1.0, 0.0)
    t, wt = np.polynomial.legendre.leggauss(n)
    u = (1 + s) / 2
    v = (1 + t) / 2
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(ws, wt)
    x = U.ravel()
    y = (V * (1 - U)).ravel()
    w = W.ravel()
    w = w / w.sum()
    bary = np.stack([1 - x - y, x, y], axis=1)
    return QuadRule(bary, w, degree)


@lru_cache(maxsize=None)
def gauss_line(npts: int):
    """Gauss-Legendre points on [0, 1] with weights summing to one."""
    t, w = np.polynomial.legendre.leggauss(npts)
    return (t + 1) / 2, w / 2


def _monomial_exponents(p):
    return [(i - j, j) for i in range(p + 1) for j in range(i + 1)]


@lru_cache(maxsize=None)
def reference_nodes(p: int) -> np.ndarray:
    """Barycentric coordinates of the local Lagrange nodes.

    Order: the 3 vertices, then ``p - 1`` nodes per local edge k (running from
    ``EDGE_VERTS[k][0]`` to ``EDGE_VERTS[k][1]``), then interior nodes.
    """
    nodes = [np.eye(3)[i] for i in range(3)]
    for i, j in EDGE_VERTS:
        for s in range(1, p):
            lam = np.zeros(3)
            lam[i] = (p - s) / p
            lam[j] = s / p
            nodes.append(lam)
    for a in range(1, p):
        for b in range(1, p - a):
            c = p - a - b
            if c >= 1:
                nodes.append(np.array([c, a, b], dtype=float) / p)
    return np.array(nodes)


@lru_cache(maxsize=None)
def _coeffs(p: int) -> np.ndarray:
    exps = _monomial_exponents(p)
    xy = reference_nodes(p)[:, 1:]
    V = np.array([[x**a * y**b for a, b in exps] for x, y in xy])
    # column k holds the monomial coefficients of local basis function k
    return np.linalg.inv(V)


def reference_basis(p: int, xy: np.ndarray, derivs: int = 1):
    """Evaluate reference basis functions at points ``xy`` of shape (..., 2).

    Returns ``(phi, dphi, d2phi)`` with shapes (..., nloc), (..., nloc, 2) and
    (..., nloc, 2, 2); derivatives beyond ``derivs`` are returned as None.
    """
    exps = _monomial_exponents(p)
    C = _coeffs(p)
    x = xy[..., 0]
    y = xy[..., 1]

    def mono(a, b):
        if a < 0 or b < 0:
            return np.zeros_like(x)
        return x**a * y**b

    M = np.stack([mono(a, b) for a, b in exps], axis=-1)
    phi = M @ C
    dphi = d2phi = None
    if derivs >= 1:
        Mx = np.stack([a * mono(a - 1, b) for a, b in exps], axis=-1)
        My = np.stack([b * mono(a, b - 1) for a, b in exps], axis=-1)
        dphi = np.stack([Mx @ C, My @ C], axis=-1)
    if derivs >= 2:
        Mxx = np.stack([a * (a - 1) * mono(a - 2, b) for a, b in exps], axis=-1)
        Mxy = np.stack([a * b * mono(a - 1, b - 1) for a, b in exps], axis=-1)
        Myy = np.stack([b * (b - 1) * mono(a, b - 2) for a, b in exps], axis=-1)
        hxx, hxy, hyy = Mxx @ C, Mxy @ C, Myy @ C
        d2phi = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
    return phi, dphi, d2phi


@dataclass(frozen=True, eq=False)
class FeSpace:
    mesh: Mesh
    degree: int
    dofs: np.ndarray           # (nt, nloc) local -> global dof table
    coords: np.ndarray         # (ndof, 2) dof node coordinates
    dirichlet: np.ndarray      # (ndof,) True on the boundary
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.coords.shape[0]

    @property
    def n_local(self) -> int:
        return self.dofs.shape[1]

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet)

    def geometry(self):
        """Per-triangle affine map data: origin, jacobian, inverse transpose, area."""
        if "geom" not in self._cache:
            p = self.mesh.points[self.mesh.triangles]
            J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            invJ = np.empty_like(J)
            invJ[:, 0, 0] = J[:, 1, 1] / det
            invJ[:, 1, 1] = J[:, 0, 0] / det
            invJ[:, 0, 1] = -J[:, 0, 1] / det
            invJ[:, 1, 0] = -J[:, 1, 0] / det
            self._cache["geom"] = (p[:, 0], J, invJ.transpose(0, 2, 1), 0.5 * det)
        return self._cache["geom"]

    def tabulate(self, rule: QuadRule, derivs: int = 1):
        """Basis data at the points of ``rule`` on every triangle.

        Returns physical quadrature points (nt, nq, 2), weights times area
        (nt, nq), values (nq, nloc), physical gradients (nt, nq, nloc, 2) and,
        if ``derivs >= 2``, physical Hessians (nt, nq, nloc, 2, 2).
        """
        x0, J, invJT, area = self.geometry()
        phi, dphi, d2phi = reference_basis(self.degree, rule.ref_points, derivs)
        xq = x0[:, None, :] + np.einsum("tij,qj->tqi", J, rule.ref_points)
        wq = area[:, None] * rule.weights[None, :]
        grad = np.matmul(dphi[None], invJT.transpose(0, 2, 1)[:, None])
        hess = None
        if derivs >= 2:
            hess = np.einsum("tia,qkab,tjb->tqkij", invJT, d2phi, invJT, optimize=True)
        return xq, wq, phi, grad, hess


def build_space(mesh: Mesh, p: int) -> FeSpace:
    """Conforming Lagrange space of degree ``p`` with its dof map."""
    if p not in SUPPORTED_DEGREES:
        raise SpaceError(f"unsupported degree {p}; expected one of {SUPPORTED_DEGREES}")
    nv, ne, nt = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
    tris = mesh.triangles
    t2e = mesh.tri_edges
    cols = [tris]
    if p >= 2:
        k = p - 1
        for loc, (i, j) in enumerate(EDGE_VERTS):
            eid = t2e[:, loc]
            base = nv + k * eid
            # global edge dofs run from the smaller vertex index to the larger
            forward = tris[:, i] < tris[:, j]
            offs = np.arange(k)
            idx = np.where(forward[:, None], offs[None, :], (k - 1 - offs)[None, :])
            cols.append(base[:, None] + idx)
    n_int = (p - 1) * (p - 2) // 2
    if n_int:
        cols.append(nv + (p - 1) * ne + n_int * np.arange(nt)[:, None] + np.arange(n_int)[None, :])
    dofs = np.concatenate(cols, axis=1).astype(np.int64)
    ndof = nv + (p - 1) * ne + n_int * nt

    nodes = reference_nodes(p)
    pts = mesh.points[tris]
    local_xy = np.einsum("kv,tvd->tkd", nodes, pts)
    coords = np.empty((ndof, 2))
    coords[dofs.ravel()] = local_xy.reshape(-1, 2)

    dirichlet = np.zeros(ndof, dtype=bool)
    dirichlet[:nv] = mesh.boundary_vertices
    if p >= 2:
        bnd_edges = np.flatnonzero(mesh.boundary_edges)
        k = p - 1
        dirichlet[(nv + k * bnd_edges[:, None] + np.arange(k)[None, :]).ravel()] = True
    return FeSpace(mesh, p, dofs, coords, dirichlet)


def eval_basis(space: FeSpace, tri: int, bary) -> tuple[np.ndarray, np.ndarray]:
    """Values (npts, nloc) and physical gradients (npts, nloc, 2) on one triangle."""
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    phi, dphi, _ = reference_basis(space.degree, bary[:, 1:], 1)
    _, _, invJT, _ = space.geometry()
    grad = np.einsum("ij,qkj->qki", invJT[tri], dphi)
    return phi, grad


def interpolate(space: FeSpace, f) -> np.ndarray:
    """Nodal interpolant of ``f(x, y)`` (vectorised callable)."""
    x, y = space.coords[:, 0], space.coords[:, 1]
    vals = np.asarray(f(x, y))
    return np.broadcast_to(vals, x.shape).copy()


def evaluate(space: FeSpace, u: np.ndarray, tris, bary) -> np.ndarray:
    """Values of the finite element function ``u`` at barycentric points of given triangles."""
    tris = np.asarray(tris)
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    phi, _, _ = reference_basis(space.degree, bary[:, 1:], 0)
    return np.einsum("pk,pk->p", phi, u[space.dofs[tris]])
