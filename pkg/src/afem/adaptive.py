"""Doerfler marking and the solve-estimate-mark-refine loop for eigenvalue clusters."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .assembly import SolverError, assemble_pencil
from .eigen import EigenError, lambda_hat, orthonormalize_c1, solve_adjoint_cluster, solve_cluster
from .estimator import compute_indicators
from .mesh import Mesh, refine
from .space import build_space

__all__ = [
    "AfemConfig",
    "AfemError",
    "ConvergenceRecord",
    "Marking",
    "dorfler_mark",
    "run_afem",
    "fit_rate",
    "mean_error",
    "count_dofs",
]

log = logging.getLogger(__name__)


class AfemError(RuntimeError):
    """A level failed; ``history`` holds the records completed before it."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class Marking(NamedTuple):
    ids: np.ndarray
    converged: bool


def dorfler_mark(indicators, theta: float) -> Marking:
    """Smallest set of triangles carrying a ``theta`` fraction of the indicator sum.

    Takes the shortest prefix of the indicators sorted in decreasing order
    (ties by ascending id). All-zero indicators give an empty, converged marking.
    """
    ind = np.asarray(indicators, dtype=float)
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if ind.size and (not np.all(np.isfinite(ind)) or ind.min() < 0):
        raise ValueError("indicators must be finite and non-negative")
    order = np.lexsort((np.arange(ind.size), -ind))
    csum = np.cumsum(ind[order])
    if ind.size == 0 or csum[-1] == 0:
        return Marking(np.empty(0, dtype=np.int64), True)
    total = csum[-1]
    k = int(np.searchsorted(csum, theta * total, side="left")) + 1
    # float partial sums can misplace the cut when it lies within roundoff of
    # the threshold; settle those cases exactly
    slack = 2.0 * ind.size * np.finfo(float).eps * total
    below = csum[k - 2] if k >= 2 else 0.0
    if k > ind.size or csum[k - 1] - theta * total <= slack or theta * total - below <= slack:
        k = _exact_cut(ind[order], theta)
    return Marking(np.sort(order[:k]), False)


def _exact_cut(values, theta: float) -> int:
    """Shortest prefix with den * sum(prefix) >= num * sum(all), in integer arithmetic."""
    mant, expo = np.frexp(values)
    ints = (mant * 2.0**53).astype(np.int64)
    expo = expo.astype(np.int64) - 53
    base = int(expo[ints != 0].min())
    exact = [int(m) << max(int(e) - base, 0) for m, e in zip(ints, expo)]
    num, den = float(theta).as_integer_ratio()
    target = num * sum(exact)
    acc = 0
    for k, v in enumerate(exact, 1):
        acc += v
        if den * acc >= target:
            return k
    return len(exact)


@dataclass
class AfemConfig:
    problem: str
    degree: int = 1
    theta: float = 0.5
    n: int = 0
    N: int | None = None
    shift: complex = 0.0
    max_dofs: int = 50_000
    max_levels: int = 40
    estimator_floor: float = 1e-10
    initial_refinements: int | None = None
    shift_policy: str = "fixed"
    method: str = "auto"
    with_osc: bool = True

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if (self.N is not None and self.N < 1) or self.n < 0:
            raise ValueError("cluster window needs n >= 0 and N >= 1")
        if self.degree not in (1, 2, 3):
            raise ValueError(f"degree must be 1, 2 or 3, got {self.degree}")
        if self.shift_policy not in ("fixed", "midpoint"):
            raise ValueError(f"unknown shift policy {self.shift_policy!r}")
        if self.max_levels < 1:
            raise ValueError("max_levels must be positive")


@dataclass
class ConvergenceRecord:
    level: int
    n_tri: int
    n_dof: int
    n_marked: int
    eta2: float
    eta2_star: float
    osc2: float
    lam: tuple
    lambda_hat: complex
    errors: tuple
    n: int = 0
    wall_time: float = field(default=0.0, compare=False)
    shift: complex = field(default=0j, compare=False)
    match_error: float = field(default=float("nan"), compare=False)
    c1_error: float = field(default=float("nan"), compare=False)
    separation: float = field(default=float("nan"), compare=False)
    biorthogonality: float = field(default=float("nan"), compare=False)

    @property
    def estimator(self) -> float:
        return self.eta2 + self.eta2_star

    @property
    def indices(self) -> range:
        return range(self.n + 1, self.n + len(self.lam) + 1)


def count_dofs(mesh: Mesh, p: int) -> int:
    return mesh.n_vertices + (p - 1) * mesh.n_edges + (p - 1) * (p - 2) // 2 * mesh.n_triangles


def _gram_error(U, M):
    G = U.conj().T @ (M @ U)
    return float(np.max(np.abs(G - np.eye(G.shape[0]))))


def run_afem(config: AfemConfig, problem=None, on_level: Callable | None = None,
             mesh: Mesh | None = None) -> list[ConvergenceRecord]:
    """Run the adaptive loop until a stop criterion holds.

    ``problem`` defaults to the registry entry named by ``config.problem``.
    ``on_level(level, mesh, pencil, cluster, indicators)`` is called after each
    level's estimate step.
    """
    if problem is None:
        from .bench import registry_get
        problem = registry_get(config.problem)
    N = config.N if config.N is not None else problem.window[1]
    if mesh is None:
        mesh = problem.initial_mesh()
        rounds = config.initial_refinements
        if rounds is None:
            rounds = problem.initial_refinements
        for _ in range(rounds):
            mesh = refine(mesh, range(mesh.n_triangles))
    refs = problem.reference
    history: list[ConvergenceRecord] = []
    shift = complex(config.shift)
    for level in range(config.max_levels):
        t0 = time.perf_counter()
        try:
            space = build_space(mesh, config.degree)
            pencil = assemble_pencil(space, problem.coeffs)
            cluster = solve_cluster(pencil, config.n, N, shift, method=config.method)
            cluster = solve_adjoint_cluster(pencil, cluster, method=config.method)
            biorth = float(np.min(cluster.biorthogonality(pencil.M)))
            cluster = orthonormalize_c1(cluster, pencil.M)
            ind = compute_indicators(pencil, cluster, with_osc=config.with_osc)
        except (EigenError, SolverError) as exc:
            raise AfemError(f"level {level}: {exc}", history) from exc
        total = ind.per_triangle()
        marking = dorfler_mark(total, config.theta)
        errors = []
        for j, lam in zip(range(config.n, config.n + N), cluster.lam):
            errors.append(abs(lam - refs[j]) if refs is not None and j < len(refs) else None)
        c1 = max(_gram_error(cluster.U, pencil.M), _gram_error(cluster.U_star, pencil.M))
        rec = ConvergenceRecord(
            level=level, n_tri=mesh.n_triangles, n_dof=space.n_dofs,
            n_marked=int(marking.ids.size),
            eta2=ind.global_eta2, eta2_star=ind.global_eta2_star, osc2=ind.global_osc2,
            lam=tuple(complex(l) for l in cluster.lam), lambda_hat=lambda_hat(cluster),
            errors=tuple(errors), n=config.n, wall_time=time.perf_counter() - t0,
            shift=shift, match_error=cluster.match_error(), c1_error=c1,
            separation=cluster.separation, biorthogonality=biorth)
        history.append(rec)
        log.info("level %d: %d triangles, %d dofs, estimator %.3e, lambda_1 %.10g",
                 level, rec.n_tri, rec.n_dof, rec.estimator, rec.lam[0].real)
        if on_level is not None:
            on_level(level, mesh, pencil, cluster, ind)
        if marking.converged or rec.estimator <= config.estimator_floor:
            break
        if level + 1 >= config.max_levels:
            break
        new_mesh = refine(mesh, marking.ids)
        if count_dofs(new_mesh, config.degree) > config.max_dofs:
            break
        mesh = new_mesh
        if config.shift_policy == "midpoint":
            mods = np.abs(cluster.lam)
            shift = complex(0.5 * (mods[0] + mods[-1]))
    return history


def mean_error(first: int | None = None, last: int | None = None):
    """Selector for the mean eigenvalue error over global indices ``first..last``."""
    def select(rec):
        vals = [e for j, e in zip(rec.indices, rec.errors)
                if (first is None or j >= first) and (last is None or j <= last)]
        if not vals or any(v is None for v in vals):
            raise ValueError("no reference errors in the requested range")
        return float(np.mean(vals))
    return select


def _selector(quantity):
    if callable(quantity):
        return quantity
    if quantity == "estimator":
        return lambda r: r.estimator
    if quantity in ("eta2", "eta2_star", "osc2"):
        return lambda r: getattr(r, quantity)
    if quantity == "err_mean":
        return mean_error()
    if quantity.startswith("err"):
        j = int(quantity[3:])
        return lambda r: r.errors[j - r.n - 1]
    raise ValueError(f"unknown quantity {quantity!r}")


def fit_rate(history: Sequence[ConvergenceRecord], quantity="estimator", window: int = 5) -> float:
    """Least-squares slope of log(quantity) against log(#dofs) over the last ``window`` levels."""
    if window < 3:
        raise ValueError("window must cover at least 3 levels")
    if len(history) < window:
        raise ValueError(f"history has {len(history)} levels, window needs {window}")
    sel = _selector(quantity)
    recs = history[-window:]
    y = np.array([sel(r) for r in recs], dtype=float)
    x = np.array([r.n_dof for r in recs], dtype=float)
    if np.any(~(y > 0)):
        raise ValueError("non-positive values in the fitting window")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
