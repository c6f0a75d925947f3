"""Benchmark problems, run configuration and result files."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import AfemConfig, ConvergenceRecord, fit_rate, mean_error, run_afem
from .assembly import CoefficientField
from .mesh import Mesh, build_initial_mesh, write_vtk

__all__ = [
    "ProblemDef",
    "RunReport",
    "ConfigError",
    "PROBLEMS",
    "KELLOGG_REFERENCE",
    "registry_get",
    "load_config",
    "parse_config",
    "run_benchmark",
    "write_history",
    "read_history",
    "history_header",
    "compute_slopes",
]

# first twelve eigenvalues of the Kellogg problem (adaptive P3, > 1e5 dofs)
KELLOGG_REFERENCE = (
    17.714316836537, 20.741585348761, 37.145042894655, 43.608009384122,
    48.640297883881, 49.129389042157, 63.720910445531, 69.110565445000,
    77.939634255303, 78.541679776972, 94.585833879139, 94.921224922705,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemDef:
    id: str
    geometry: str
    coeffs: CoefficientField
    reference: tuple | None = None
    provenance: str = ""
    window: tuple = (0, 1)
    initial_refinements: int = 0

    def initial_mesh(self) -> Mesh:
        return build_initial_mesh(self.geometry)

    def coefficient_at(self, x: float, y: float):
        """(A, b, c) at a point, from the subdomain containing it."""
        mesh = self.initial_mesh()
        p = mesh.points[mesh.triangles]
        pt = np.array([x, y])
        for t in range(mesh.n_triangles):
            a, b, c = p[t]
            m = np.array([b - a, c - a]).T
            s = np.linalg.solve(m, pt - a)
            if s.min() >= -1e-12 and s.sum() <= 1 + 1e-12:
                return self.coeffs.lookup(int(mesh.tags[t]))
        raise ValueError(f"point ({x}, {y}) lies outside the domain")


def _square_modes(count, shift=0.0):
    vals = sorted(math.pi**2 * (i * i + j * j) + shift for i in range(1, 12) for j in range(1, 12))
    return tuple(vals[:count])


def _kellogg():
    stiff, soft = ((10.0, 0.0), (0.0, 10.0)), ((1.0, 0.0), (0.0, 1.0))
    A = {1: stiff, 2: soft, 3: stiff, 4: soft}
    b = {k: (2.0, 2.0) for k in A}
    return ProblemDef(
        "kellogg", "kellogg", CoefficientField(A, b, {k: 0.0 for k in A}),
        reference=KELLOGG_REFERENCE,
        provenance="twelve reference eigenvalues from an adaptive P3 computation, lambda_1 certified to 1e-6",
        window=(0, 12), initial_refinements=2)


def _laplace_square():
    return ProblemDef(
        "laplace_square", "unit_square_2x2", CoefficientField.constant([0]),
        reference=_square_modes(20), provenance="analytic: pi^2 (m^2 + n^2)",
        window=(0, 1), initial_refinements=2)


def _convection_square():
    # u = exp(b.x / 2) v turns -lap u + b.grad u into -lap v + |b|^2/4 v
    return ProblemDef(
        "convection_square", "unit_square_2x2", CoefficientField.constant([0], b=(2.0, 2.0)),
        reference=_square_modes(20, shift=2.0), provenance="analytic: pi^2 (m^2 + n^2) + |b|^2/4",
        window=(0, 3), initial_refinements=1)


PROBLEMS = {
    "kellogg": _kellogg,
    "laplace_square": _laplace_square,
    "convection_square": _convection_square,
}


def registry_get(problem_id: str) -> ProblemDef:
    try:
        return PROBLEMS[problem_id]()
    except KeyError:
        raise KeyError(f"unknown problem {problem_id!r}; known: {sorted(PROBLEMS)}") from None


# ---------------------------------------------------------------- config

_FIELDS = {
    "problem": str, "degree": int, "theta": float, "n": int, "N": int,
    "shift_re": float, "shift_im": float, "max_dofs": int, "max_levels": int,
    "estimator_floor": float, "output_dir": str, "initial_refinements": int,
    "shift_policy": str, "rate_window": int, "write_meshes": bool,
}
_REQUIRED = ("problem", "degree", "theta")


@dataclass
class RunSettings:
    afem: AfemConfig
    output_dir: str = "afem_out"
    rate_window: int = 5
    write_meshes: bool = False
    raw: dict = field(default_factory=dict)


def parse_config(doc: dict) -> RunSettings:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _FIELDS:
            raise ConfigError(f"unknown field {key!r}")
    for key in _REQUIRED:
        if key not in doc:
            raise ConfigError(f"missing required field {key!r}")
    vals = {}
    for key, value in doc.items():
        kind = _FIELDS[key]
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if kind is int and isinstance(value, float) and value.is_integer():
            value, ok = int(value), True
        if not ok:
            raise ConfigError(f"field {key!r} must be of type {kind.__name__}, got {value!r}")
        vals[key] = kind(value)
    if vals["problem"] not in PROBLEMS:
        raise ConfigError(f"field 'problem': unknown problem {vals['problem']!r}")
    kwargs = {k: vals[k] for k in ("problem", "degree", "theta", "n", "N", "max_dofs",
                                   "max_levels", "estimator_floor", "initial_refinements",
                                   "shift_policy") if k in vals}
    kwargs["shift"] = complex(vals.get("shift_re", 0.0), vals.get("shift_im", 0.0))
    try:
        afem = AfemConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunSettings(afem, vals.get("output_dir", "afem_out"), vals.get("rate_window", 5),
                       vals.get("write_meshes", False), dict(doc))


def load_config(path) -> RunSettings:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(doc)


# ---------------------------------------------------------------- history csv

def _num(x: float) -> str:
    return f"{x:.17g}"


def history_header(n: int, N: int) -> list[str]:
    head = ["level", "n_tri", "n_dof", "n_marked", "eta2", "eta2_star", "osc2",
            "lambda_hat_re", "lambda_hat_im"]
    for j in range(n + 1, n + N + 1):
        head += [f"lam{j}_re", f"lam{j}_im", f"err{j}"]
    return head


def write_history(history, path) -> None:
    if not history:
        raise ValueError("empty history")
    first = history[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(history_header(first.n, len(first.lam)))
        for r in history:
            row = [str(r.level), str(r.n_tri), str(r.n_dof), str(r.n_marked), _num(r.eta2),
                   _num(r.eta2_star), _num(r.osc2), _num(r.lambda_hat.real), _num(r.lambda_hat.imag)]
            for lam, err in zip(r.lam, r.errors):
                row += [_num(lam.real), _num(lam.imag), "" if err is None else _num(err)]
            w.writerow(row)


def read_history(path) -> list[ConvergenceRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    head = rows[0]
    lam_cols = [h for h in head if h.startswith("lam") and h.endswith("_re") and h != "lambda_hat_re"]
    if head[:9] != history_header(0, 0) or not lam_cols:
        raise ValueError(f"{path}: unexpected header")
    n = int(lam_cols[0][3:-3]) - 1
    N = len(lam_cols)
    if head != history_header(n, N):
        raise ValueError(f"{path}: unexpected header")
    out = []
    for row in rows[1:]:
        lam, errs = [], []
        for k in range(N):
            re, im, err = row[9 + 3 * k: 12 + 3 * k]
            lam.append(complex(float(re), float(im)))
            errs.append(None if err == "" else float(err))
        out.append(ConvergenceRecord(
            level=int(row[0]), n_tri=int(row[1]), n_dof=int(row[2]), n_marked=int(row[3]),
            eta2=float(row[4]), eta2_star=float(row[5]), osc2=float(row[6]),
            lam=tuple(lam), lambda_hat=complex(float(row[7]), float(row[8])),
            errors=tuple(errs), n=n))
    return out


def compute_slopes(history, window: int) -> dict:
    """Fitted log-log slopes over the last ``window`` levels (skipping what cannot be fitted)."""
    slopes = {}
    if len(history) < max(window, 3):
        return slopes
    candidates = {"estimator": "estimator", "eta2": "eta2", "eta2_star": "eta2_star"}
    rec = history[-1]
    if all(e is not None for e in rec.errors):
        candidates["err_mean"] = mean_error()
        if len(rec.lam) > 2:
            candidates[f"err_mean_{rec.n + 3}_{rec.n + len(rec.lam)}"] = mean_error(rec.n + 3)
        for j in rec.indices:
            candidates[f"err{j}"] = f"err{j}"
    for name, q in candidates.items():
        try:
            slopes[name] = fit_rate(history, q, window)
        except ValueError:
            continue
    return slopes


# ---------------------------------------------------------------- run

@dataclass
class RunReport:
    config: dict
    history: list
    slopes: dict
    environment: dict
    output_dir: str = ""

    def to_json(self) -> str:
        final = self.history[-1]
        doc = {
            "config": self.config,
            "levels": len(self.history),
            "final": {
                "n_dof": final.n_dof,
                "n_tri": final.n_tri,
                "estimator": final.estimator,
                "lambda": [[z.real, z.imag] for z in final.lam],
                "errors": list(final.errors),
            },
            "diagnostics": {
                "max_adjoint_mismatch": max(r.match_error for r in self.history),
                "max_c1_error": max(r.c1_error for r in self.history),
                "min_separation": min(r.separation for r in self.history),
                "min_biorthogonality": min(r.biorthogonality for r in self.history),
            },
            "slopes": self.slopes,
            "environment": self.environment,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def run_benchmark(config_path, output_dir=None) -> RunReport:
    """Run one configured benchmark and write history.csv, report.json and convergence.svg."""
    from .plot import emit_plot

    settings = load_config(config_path)
    out = Path(output_dir or settings.output_dir)
    if not out.is_absolute() and output_dir is None:
        out = Path(config_path).resolve().parent / out
    out.mkdir(parents=True, exist_ok=True)
    cfg = settings.afem

    def dump_mesh(level, mesh, *_):
        write_vtk(mesh, out / f"mesh_level{level:03d}.vtk")

    history = run_afem(cfg, on_level=dump_mesh if settings.write_meshes else None)
    write_history(history, out / "history.csv")
    slopes = compute_slopes(history, settings.rate_window)
    env = {
        "afem_version": __version__,
        "numpy": np.__version__,
        "scipy": __import__("scipy").__version__,
        "determinism": "no random seeds; fixed Krylov start vector; identical configs give identical files",
    }
    report = RunReport(settings.raw, history, slopes, env, str(out))
    (out / "report.json").write_text(report.to_json())
    if len(history) >= 2:
        (out / "convergence.svg").write_text(emit_plot(history, guide_slope=-cfg.degree))
    return report


def thread_cap() -> int | None:
    value = os.environ.get("AFEM_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"AFEM_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("AFEM_THREADS must be positive")
    return n

