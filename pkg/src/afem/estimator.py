"""Residual error indicators for the primal and adjoint source problems.

For a load ``f`` and discrete solution ``w`` the squared indicator on ``T`` is

    h_T^2 ||f - L w||_T^2 + sum_{e in dT} h_e ||[[A grad w . nu]]||_e^2

with ``h_T = diam(T)``, ``h_e = |e|`` and no jump on boundary edges. The
adjoint version uses ``L* w = -div(A grad w) - b . grad w + c w`` (valid for
piecewise constant ``b``). Every interior jump is charged in full to both
neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .assembly import OperatorPencil, element_coefficients, solve_linear
from .space import FeSpace, gauss_line, reference_basis, triangle_rule

__all__ = [
    "IndicatorField",
    "source_solutions",
    "local_indicators",
    "edge_jumps",
    "oscillation",
    "compute_indicators",
    "cluster_estimator",
]


def _as_columns(a):
    a = np.asarray(a)
    return (a[:, None], True) if a.ndim == 1 else (a, False)


def source_solutions(pencil: OperatorPencil, cluster):
    """``w_j = K u_j`` and ``w*_j = K_* u*_j`` for every basis vector of the cluster.

    Both use the single factorization held by ``pencil``.
    """
    W = solve_linear(pencil, pencil.M @ cluster.U, "primal")
    Ws = None
    if cluster.U_star is not None:
        Ws = solve_linear(pencil, pencil.M.conj().T @ cluster.U_star, "adjoint")
    return W, Ws


def _apply_operator(space, coeffs, w, which, rule):
    """Values of L w (or L* w) at the quadrature points: (nt, nq, k)."""
    A, b, c = element_coefficients(space.mesh, coeffs)
    xq, wq, phi, grad, _ = space.tabulate(rule, derivs=1)
    W = w[space.dofs]                                   # (nt, nloc, k)
    val = np.matmul(phi, W)
    # b . grad w through the per-triangle contraction of b with the gradients
    bg = np.matmul(np.einsum("td,tqnd->tqn", b, grad), W)
    divA = 0.0
    if space.degree > 1:
        # A : Hess w = (invJT^T A invJT) : reference Hessian, for affine maps
        _, invJT = space.geometry()[1:3]
        Aref = np.einsum("tia,tij,tjb->tab", invJT, A, invJT, optimize=True)
        d2 = reference_basis(space.degree, rule.ref_points, 2)[2]
        divA = np.matmul(np.einsum("tab,qnab->tqn", Aref, d2), W)
    if which == "primal":
        Lw = -divA + bg + c[:, None, None] * val
    elif which == "adjoint":
        Lw = -divA - bg + c[:, None, None] * val
    else:
        raise ValueError(f"which must be 'primal' or 'adjoint', got {which!r}")
    return xq, wq, Lw


def _load_values(space, f, rule, xq, k):
    if callable(f):
        vals = np.asarray(f(xq[..., 0], xq[..., 1]))
        vals = np.broadcast_to(vals, xq.shape[:2])
        return np.repeat(vals[..., None], k, axis=2) if vals.ndim == 2 else vals
    F, _ = _as_columns(f)
    phi, _, _ = reference_basis(space.degree, rule.ref_points, 0)
    return np.einsum("qn,tnk->tqk", phi, F[space.dofs])


def edge_jumps(space: FeSpace, coeffs, w, npts: int | None = None):
    """Normal-flux jumps ``[[A grad w . nu]]`` on interior edges.

    Returns ``(edge_ids, weights, jumps)`` where ``weights`` are the 1D Gauss
    weights on [0, 1] and ``jumps`` has shape (n_interior, npts, k).
    """
    mesh = space.mesh
    W, _ = _as_columns(w)
    npts = npts or space.degree + 1
    s, ws = gauss_line(npts)
    e2t = mesh.edge_tris
    inner = np.flatnonzero(e2t[:, 1] >= 0)
    edges = mesh.edges[inner]
    A, _, _ = element_coefficients(mesh, coeffs)
    pa = mesh.points[edges[:, 0]]
    pb = mesh.points[edges[:, 1]]
    d = pb - pa
    length = np.hypot(d[:, 0], d[:, 1])
    normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
    _, _, invJT, _ = space.geometry()
    cent = mesh.centroids()
    mid = 0.5 * (pa + pb)
    jump = np.zeros((inner.size, npts, W.shape[1]), dtype=np.result_type(W, float))
    for side in range(2):
        t = e2t[inner, side]
        tri = mesh.triangles[t]
        la = np.argmax(tri == edges[:, [0]], axis=1)
        lb = np.argmax(tri == edges[:, [1]], axis=1)
        bary = np.zeros((inner.size, npts, 3))
        rows = np.arange(inner.size)
        bary[rows, :, la] = 1 - s[None, :]
        bary[rows, :, lb] = s[None, :]
        _, dphi, _ = reference_basis(space.degree, bary[..., 1:], 1)   # (ne, nq, nloc, 2)
        sign = np.sign(np.einsum("ed,ed->e", normal, mid - cent[t]))
        # nu . A invJT grad_ref = (invJT^T A^T nu) . grad_ref
        dirn = np.einsum("eia,eji,ej->ea", invJT[t], A[t], normal * sign[:, None], optimize=True)
        flux = np.einsum("ea,eqna->eqn", dirn, dphi)
        jump += np.matmul(flux, W[space.dofs[t]])
    return inner, ws, jump


def local_indicators(space: FeSpace, coeffs, f, w, which: str = "primal",
                     split: bool = False):
    """Squared residual indicators per triangle.

    ``f`` and ``w`` are full dof vectors, or (ndof, k) blocks giving k
    indicator sets at once; ``f`` may also be a callable ``f(x, y)``.
    Returns (nt,) or (k, nt); with ``split=True`` the element and edge parts
    are returned separately.
    """
    W, single = _as_columns(w)
    rule = triangle_rule(2 * space.degree + 2)
    xq, wq, Lw = _apply_operator(space, coeffs, W, which, rule)
    F = _load_values(space, f, rule, xq, W.shape[1])
    R = F - Lw
    hT = space.mesh.diameters()
    elem = hT[:, None] ** 2 * np.einsum("tq,tqk->tk", wq, np.abs(R) ** 2)

    inner, ws, jump = edge_jumps(space, coeffs, W)
    he = space.mesh.edge_lengths()[inner]
    # h_e * ||J||_e^2 with ||J||_e^2 = |e| sum_q ws |J|^2
    contrib = he[:, None] ** 2 * np.einsum("q,eqk->ek", ws, np.abs(jump) ** 2)
    edge = np.zeros_like(elem)
    e2t = space.mesh.edge_tris[inner]
    np.add.at(edge, e2t[:, 0], contrib)
    np.add.at(edge, e2t[:, 1], contrib)
    elem, edge = elem.T, edge.T
    if single:
        elem, edge = elem[0], edge[0]
    if split:
        return elem, edge
    return elem + edge


@lru_cache(maxsize=None)
def _triangle_projector(q: int, degree: int):
    """Quadrature-space L2 projector onto P^q on the reference triangle."""
    rule = triangle_rule(degree)
    x, y = rule.ref_points[:, 0], rule.ref_points[:, 1]
    V = np.stack([x**(i - j) * y**j for i in range(q + 1) for j in range(i + 1)], axis=1)
    G = V.T @ (rule.weights[:, None] * V)
    L = np.linalg.cholesky(G)
    B = np.linalg.solve(L, V.T).T          # orthonormal in the weighted inner product
    return rule, B @ (B.T * rule.weights[None, :])


@lru_cache(maxsize=None)
def _line_projector(q: int, npts: int):
    s, ws = gauss_line(npts)
    V = np.stack([np.polynomial.legendre.legval(2 * s - 1, np.eye(q + 1)[i]) for i in range(q + 1)], axis=1)
    G = V.T @ (ws[:, None] * V)
    B = V @ np.linalg.inv(np.linalg.cholesky(G)).T
    return B @ (B.T * ws[None, :])


def oscillation(space: FeSpace, coeffs, f, w, which: str = "primal"):
    """Squared oscillation per triangle: the parts of the element residual and
    of the jumps not captured by polynomials of degree ``2p - 1``.
    """
    p = space.degree
    q = 2 * p - 1
    W, single = _as_columns(w)
    rule, P = _triangle_projector(q, 4 * p + 2)
    xq, wq, Lw = _apply_operator(space, coeffs, W, which, rule)
    F = _load_values(space, f, rule, xq, W.shape[1])
    R = Lw - F
    tail = R - np.einsum("qr,trk->tqk", P, R)
    hT = space.mesh.diameters()
    elem = hT[:, None] ** 2 * np.einsum("tq,tqk->tk", wq, np.abs(tail) ** 2)

    npts = 2 * p + 1
    inner, ws, jump = edge_jumps(space, coeffs, W, npts)
    Pe = _line_projector(q, npts)
    jt = jump - np.einsum("qr,erk->eqk", Pe, jump)
    he = space.mesh.edge_lengths()[inner]
    contrib = he[:, None] ** 2 * np.einsum("q,eqk->ek", ws, np.abs(jt) ** 2)
    edge = np.zeros_like(elem)
    e2t = space.mesh.edge_tris[inner]
    np.add.at(edge, e2t[:, 0], contrib)
    np.add.at(edge, e2t[:, 1], contrib)
    out = (elem + edge).T
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class IndicatorField:
    """Per-triangle squared indicators, rows indexed by cluster member j."""

    eta2: np.ndarray
    eta2_star: np.ndarray
    osc2: np.ndarray | None = None
    osc2_star: np.ndarray | None = None

    @property
    def n_triangles(self) -> int:
        return self.eta2.shape[1]

    def per_triangle(self) -> np.ndarray:
        """sum_j (eta_j(T)^2 + eta*_j(T)^2), the marking indicator."""
        return self.eta2.sum(axis=0) + self.eta2_star.sum(axis=0)

    @property
    def global_eta2(self) -> float:
        return float(self.eta2.sum())

    @property
    def global_eta2_star(self) -> float:
        return float(self.eta2_star.sum())

    @property
    def global_osc2(self) -> float:
        if self.osc2 is None:
            return float("nan")
        return float(self.osc2.sum() + self.osc2_star.sum())


def compute_indicators(pencil: OperatorPencil, cluster, with_osc: bool = True) -> IndicatorField:
    """Indicators for all cluster members, primal and adjoint."""
    space, coeffs = pencil.space, pencil.coeffs
    W, Ws = source_solutions(pencil, cluster)
    F = pencil.expand(cluster.U)
    Wf = pencil.expand(W)
    eta2 = local_indicators(space, coeffs, F, Wf, "primal")
    Fs = pencil.expand(cluster.U_star)
    Wsf = pencil.expand(Ws)
    eta2s = local_indicators(space, coeffs, Fs, Wsf, "adjoint")
    osc = osc_s = None
    if with_osc:
        osc = oscillation(space, coeffs, F, Wf, "primal")
        osc_s = oscillation(space, coeffs, Fs, Wsf, "adjoint")
    return IndicatorField(eta2, eta2s, osc, osc_s)


def cluster_estimator(ind: IndicatorField, subset=None) -> float:
    """sum_j sum_{T in subset} (eta_j(T)^2 + eta*_j(T)^2); all triangles if subset is None."""
    total = ind.per_triangle()
    if subset is None:
        return float(total.sum())
    idx = np.asarray(sorted(set(int(i) for i in subset)), dtype=np.int64)
    return float(total[idx].sum()) if idx.size else 0.0
