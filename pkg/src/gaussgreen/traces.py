"""Normal traces as limits of level-set boundary integrals, and related diagnostics.

Sign convention: the trace of F on ∂U paired with φ is the volume side
``∫_U φ d divF + ∫_U F·∇φ``; boundary integrals use the inner normal, so they converge to
minus the trace.  Compact-set traces use the outward gradient of dist(·, K) instead and
converge to plus the trace.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import geometry as geo
from .fields import (DivergenceMeasure, Potential, TestFunction, VectorFieldSpec, constant, measure_pairing,
                     product)
from .quadrature import DEFAULT_TOL, Region, volume_integral


class InsufficientScheduleError(ValueError):
    pass


class EmptyShellError(ValueError):
    pass


@dataclass
class TraceEstimate:
    kind: str
    per_eps: list
    good_flags: list
    volume_side: float
    limit: float
    limit_error: float
    good_count: int
    convention: str = "inner"
    volume_error: float = 0.0
    order: float | None = None

    @property
    def residual(self) -> float:
        if self.convention == "inner":
            return abs(self.volume_side + self.limit)
        return abs(self.volume_side - self.limit)

    @property
    def trace(self) -> float:
        return self.volume_side

    @property
    def boundary_trace(self) -> float:
        """The trace as read off the boundary integrals."""
        return -self.limit if self.convention == "inner" else self.limit

    def to_dict(self) -> dict:
        out = asdict(self)
        out["residual"] = self.residual
        out["trace"] = self.trace
        out["boundary_trace"] = self.boundary_trace
        return out


# ---------------------------------------------------------------- extrapolation

def _order_from_three(e, v):
    d1, d2 = v[0] - v[1], v[1] - v[2]
    if d2 == 0 or d1 == 0 or np.sign(d1) != np.sign(d2):
        return None
    target = d1 / d2

    def g(p):
        return (e[0] ** p - e[1] ** p) / (e[1] ** p - e[2] ** p) - target

    lo, hi = 0.25, 8.0
    try:
        if g(lo) * g(hi) > 0:
            return None
        return optimize.brentq(g, lo, hi, xtol=1e-12)
    except (ValueError, ZeroDivisionError, OverflowError):
        return None


def extrapolate(eps: Sequence[float], values: Sequence[float], floor: float = 1e-12):
    """Richardson limit of values(ε) as ε → 0 from the last three points.

    Returns (limit, error, order).  Falls back to the last value (error = last difference)
    when fewer than three points exist, the differences sit at rounding level, or the
    fitted order is outside [0.25, 8].
    """
    eps = list(map(float, eps))
    values = list(map(float, values))
    if len(values) < 2:
        raise InsufficientScheduleError("need at least two good ε values")
    last_diff = abs(values[-1] - values[-2])
    scale = max(1.0, max(abs(v) for v in values))
    if len(values) < 3 or last_diff <= floor * scale:
        return values[-1], last_diff, None
    e, v = eps[-3:], values[-3:]
    p = _order_from_three(e, v)
    if p is None:
        return values[-1], last_diff, None
    limit = v[2] - (v[1] - v[2]) * e[2] ** p / (e[1] ** p - e[2] ** p)
    return limit, abs(limit - v[2]), p


# ---------------------------------------------------------------- traces

def _flux_integrand(fld: VectorFieldSpec, phi: TestFunction, sign: float = 1.0):
    def integrand(p, n):
        return sign * phi.eval(p) * np.sum(fld.eval(p) * n, axis=1)

    return integrand


def _volume_side(fld, U, phi, closure, tol):
    pair = measure_pairing(fld.div, phi, U, closure, tol=tol / 2)
    if U.bounded and np.any(np.asarray(U.bounds[1]) - np.asarray(U.bounds[0]) <= 0):
        return pair, 0.0
    res = volume_integral(lambda x: np.sum(fld.eval(x) * phi.grad(x), axis=1), U,
                          fld.singular_points + phi.singular_points, tol / 2,
                          kinks=list(phi.kinks) + list(fld.kinks), feature=phi.feature)
    return pair + res.value, res.error_estimate


def _usable_schedule(U, schedule, interior):
    eps = list(schedule.values)
    flags = list(schedule.good_flags)
    if interior:
        r_in = U.inradius_estimate()
        keep = [e < r_in for e in eps]
        if not all(keep):
            warnings.warn(f"schedule values ≥ inradius {r_in:.4g} dropped", RuntimeWarning, stacklevel=3)
        eps = [e for e, k in zip(eps, keep) if k]
        flags = [f for f, k in zip(flags, keep) if k]
    return eps, flags


def _boundary_sequence(fld, U, phi, eps, flags, resolution, levels_sign, integrand_sign, order):
    grid = geo.level_grid(U, resolution, max(eps) if levels_sign < 0 else 0.0)
    integrand = _flux_integrand(fld, phi, integrand_sign)
    per, good = [], []
    for e, flag in zip(eps, flags):
        mesh = geo.contour(grid, levels_sign * e, order)
        val = geo.surface_integral(mesh, integrand)
        per.append((e, val))
        good.append(bool(flag and mesh.good and len(mesh) > 0))
    return per, good


def _assemble(kind, per, good, volume, verr, convention):
    ge = [e for (e, _), g in zip(per, good) if g]
    gv = [v for (_, v), g in zip(per, good) if g]
    if len(gv) < 2:
        raise InsufficientScheduleError(f"{kind} trace: only {len(gv)} good ε values")
    limit, err, order = extrapolate(ge, gv)
    return TraceEstimate(kind, per, good, volume, limit, err, len(gv), convention, verr, order)


def normal_trace(fld: VectorFieldSpec, U: geo.SetDescriptor, phi: TestFunction, closure: bool = False,
                 tol: float = DEFAULT_TOL) -> float:
    """⟨F·ν, φ⟩ from its defining volume identity only (no boundary limit)."""
    return _volume_side(fld, U, phi, closure, tol)[0]


def interior_trace(fld: VectorFieldSpec, U: geo.SetDescriptor, phi: TestFunction, schedule: geo.EpsilonSchedule,
                   resolution: float, tol: float = DEFAULT_TOL, order: int = 6) -> TraceEstimate:
    eps, flags = _usable_schedule(U, schedule, True)
    per, good = _boundary_sequence(fld, U, phi, eps, flags, resolution, 1.0, 1.0, order)
    volume, verr = _volume_side(fld, U, phi, False, tol)
    return _assemble("interior", per, good, volume, verr, "inner")


def exterior_trace(fld: VectorFieldSpec, U: geo.SetDescriptor, phi: TestFunction, schedule: geo.EpsilonSchedule,
                   resolution: float, tol: float = DEFAULT_TOL, order: int = 6) -> TraceEstimate:
    eps, flags = _usable_schedule(U, schedule, False)
    per, good = _boundary_sequence(fld, U, phi, eps, flags, resolution, -1.0, 1.0, order)
    volume, verr = _volume_side(fld, U, phi, True, tol)
    return _assemble("exterior", per, good, volume, verr, "inner")


def compact_trace(fld: VectorFieldSpec, K: geo.SetDescriptor, phi: TestFunction, schedule: geo.EpsilonSchedule,
                  resolution: float, tol: float = DEFAULT_TOL, order: int = 6) -> TraceEstimate:
    """Trace on the compact closure of K from the outer levels dist(·, K) = ε.

    ∇dist(·, K) = -∇d off K, so the boundary values are +∫ φ F·∇dist and converge to the
    trace itself.
    """
    eps, flags = _usable_schedule(K, schedule, False)
    per, good = _boundary_sequence(fld, K, phi, eps, flags, resolution, -1.0, -1.0, order)
    volume, verr = _volume_side(fld, K, phi, True, tol)
    return _assemble("compact", per, good, volume, verr, "outward")


# ---------------------------------------------------------------- averaged form

def medial_kinks(U: geo.SetDescriptor) -> list:
    """Lines carrying the gradient jumps of d near the boundary (corner bisectors).

    Implemented for 2D boxes and polygons with at most four vertices; other kinds return
    an empty list and rely on refinement.
    """
    if U.dim != 2:
        return []
    if U.kind == "Box":
        lo, hi = U.params["lo"], U.params["hi"]
        V = np.array([lo, (hi[0], lo[1]), hi, (lo[0], hi[1])])
    elif U.kind == "Polygon2D" and 3 <= len(U.params["vertices"]) <= 4:
        V = U.params["vertices"]
    else:
        return []
    lines = []
    m = len(V)
    for i in range(m):
        a, b, c = V[i - 1], V[i], V[(i + 1) % m]
        u = (a - b) / np.linalg.norm(a - b)
        w = (c - b) / np.linalg.norm(c - b)
        bis = u + w
        if np.linalg.norm(bis) < 1e-12:
            continue
        bis /= np.linalg.norm(bis)
        nrm = np.array([-bis[1], bis[0]])
        off = float(nrm @ b)
        if any(abs(abs(nrm @ n2) - 1) < 1e-12 and abs(off - np.sign(nrm @ n2) * o2) < 1e-12 for n2, o2 in lines):
            continue
        lines.append((nrm, off))
    return [lambda x, n=n, o=o: x @ n - o for n, o in lines]


def averaged_trace(fld: VectorFieldSpec, U: geo.SetDescriptor, phi: TestFunction, eps: float,
                   tol: float = DEFAULT_TOL) -> float:
    """-(1/ε) ∫_{U \\ U^ε} φ F·∇d dx."""
    if eps <= 0 or eps >= U.inradius_estimate():
        raise EmptyShellError(f"shell {{0 < d < {eps}}} is empty or swallows the set")
    lo, hi = U.bounding_box()
    shell = Region(lambda x: np.minimum(U.signed_distance(x), eps - U.signed_distance(x)), lo, hi,
                   min(eps, U.feature_size()))

    def integrand(x):
        return phi.eval(x) * np.sum(fld.eval(x) * geo._closed_gradient(U, x), axis=1)

    res = volume_integral(integrand, shell, fld.singular_points + phi.singular_points, tol * eps,
                          kinks=list(phi.kinks) + list(fld.kinks) + medial_kinks(U), feature=phi.feature)
    return -res.value / eps


# ---------------------------------------------------------------- product rule and Green identities

def _support_box(psi: TestFunction, dim: int):
    if not math.isfinite(psi.support_radius):
        raise ValueError("ψ must have bounded support")
    c = np.zeros(dim) if psi.center is None else np.asarray(psi.center, float)
    r = psi.support_radius * (1 + 1e-9)
    return geo.box(c - r, c + r)


def product_rule_residual(fld: VectorFieldSpec, g: TestFunction, psi: TestFunction,
                          tol: float = 1e-8) -> float:
    """|-∫ gF·∇ψ - [∫ gψ d divF + ∫ ψ F·∇g]| over a box around supp ψ."""
    B = _support_box(psi, fld.dim)
    sing = fld.singular_points + g.singular_points + psi.singular_points
    kinks = list(g.kinks) + list(psi.kinks) + list(fld.kinks)
    feature = min(g.feature, psi.feature)
    lhs = -volume_integral(lambda x: g.eval(x) * np.sum(fld.eval(x) * psi.grad(x), axis=1), B, sing, tol,
                           kinks=kinks, feature=feature).value
    pair = measure_pairing(fld.div, product(g, psi), B, True, tol=tol)
    vol = volume_integral(lambda x: psi.eval(x) * np.sum(fld.eval(x) * g.grad(x), axis=1), B, sing, tol,
                          kinks=kinks, feature=feature).value
    return abs(lhs - (pair + vol))


def green_first(u: Potential, U: geo.SetDescriptor, phi: TestFunction, schedule: geo.EpsilonSchedule,
                resolution: float, tol: float = DEFAULT_TOL) -> TraceEstimate:
    """∫_U φ dΔu + ∫_U ∇u·∇φ against -lim ∫_{∂U^ε} φ ∇u·ν."""
    return interior_trace(u.gradient, U, phi, schedule, resolution, tol)


@dataclass
class GreenSecondResult:
    left: float
    right: float
    per_eps: list
    limit_error: float

    @property
    def residual(self) -> float:
        return abs(self.left - self.right)


def green_second(u: Potential, v: Potential, U: geo.SetDescriptor, schedule: geo.EpsilonSchedule,
                 resolution: float, tol: float = DEFAULT_TOL, order: int = 6) -> GreenSecondResult:
    """∫_U v dΔu - ∫_U u dΔv against -lim ∫_{∂U^ε} (v∇u - u∇v)·ν."""
    tu, tv = u.as_test_function(), v.as_test_function()
    left = measure_pairing(u.laplacian, tv, U, False, tol=tol / 2) - measure_pairing(v.laplacian, tu, U, False,
                                                                                      tol=tol / 2)
    eps, flags = _usable_schedule(U, schedule, True)
    grid = geo.level_grid(U, resolution)

    def integrand(p, n):
        a = tv.eval(p)[:, None] * u.gradient.eval(p)
        b = tu.eval(p)[:, None] * v.gradient.eval(p)
        return np.sum((a - b) * n, axis=1)

    per, good = [], []
    for e, flag in zip(eps, flags):
        mesh = geo.contour(grid, e, order)
        per.append((e, geo.surface_integral(mesh, integrand)))
        good.append(bool(flag and mesh.good and len(mesh) > 0))
    ge = [e for (e, _), g in zip(per, good) if g]
    gv = [x for (_, x), g in zip(per, good) if g]
    limit, err, _ = extrapolate(ge, gv)
    return GreenSecondResult(left, -limit, per, err)


# ---------------------------------------------------------------- measure-trace diagnostics

@dataclass
class NecessaryReport:
    probes: list
    radii: list
    values: list
    exponents: list
    ratio_to_r: list
    regime: str
    bounded_constant: list

    def to_dict(self) -> dict:
        return asdict(self)


def _fit_exponent(radii, values):
    r = np.asarray(radii, float)
    v = np.abs(np.asarray(values, float))
    ok = v > 1e-14
    if ok.sum() < 2:
        return math.inf
    return float(np.polyfit(np.log(r[ok]), np.log(v[ok]), 1)[0])


def trace_measure_necessary(fld: VectorFieldSpec, U: geo.SetDescriptor, probes: Sequence, radii: Sequence[float],
                            tol: float = 1e-10) -> NecessaryReport:
    """∫_{B(x,r) ∩ U} F(y)·(y-x)/|y-x| dy at boundary probes, with growth fits in r.

    For p < n/(n-1) a measure trace forces |value| ≤ C r; for larger p it forces o(r);
    both are reported through value/r and the fitted exponent.
    """
    n = fld.dim
    values, exps, ratios, consts = [], [], [], []
    for x in probes:
        x = np.asarray(x, float)
        row = []
        for r in radii:
            def integrand(y, x=x):
                d = y - x
                nd = np.linalg.norm(d, axis=1)
                return np.sum(fld.eval(y) * d, axis=1) / np.where(nd > 0, nd, 1.0)

            res = volume_integral(integrand, [geo.ball(x, r), U], fld.singular_points + [x], tol * r ** 2)
            row.append(res.value)
        values.append(row)
        exps.append(_fit_exponent(radii, row))
        ratios.append([v / r for v, r in zip(row, radii)])
        consts.append(max(abs(v) / r for v, r in zip(row, radii)))
    crit = n / (n - 1)
    regime = "bounded_by_Cr" if fld.p < crit else "little_o_r"
    return NecessaryReport([np.asarray(p, float).tolist() for p in probes], list(radii), values, exps, ratios,
                           regime, consts)


@dataclass
class SufficientReport:
    p: float
    minkowski: list
    minkowski_content: float
    eps: list
    shell_averages: list
    bounded: bool
    atoms_inside: bool
    density_compact_inside: bool
    representation: bool
    prop_compact_support: bool
    prop_integrability: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _bounded_trend(vals, ratio=0.75):
    if len(vals) < 3:
        return True
    d = np.abs(np.diff(vals))
    scale = max(1e-300, np.max(np.abs(vals)))
    if d[-1] <= 1e-6 * scale:
        return True
    return bool(d[-1] <= ratio * d[-2] and d[-2] <= ratio * d[-3] if len(d) >= 3 else d[-1] <= ratio * d[-2])


def trace_measure_sufficient(fld: VectorFieldSpec, U: geo.SetDescriptor, schedule: geo.EpsilonSchedule,
                             p: float | None = None, exclusion_radius: float = 0.0,
                             tol: float = 1e-6, density_compact_inside: bool | None = None) -> SufficientReport:
    """Minkowski content of ∂U, shell averages (1/ε)∫_{U\\U^ε}|F|^p, and the compact-support test.

    ``exclusion_radius`` removes balls around the field's singular points from the shells.
    """
    p = fld.p if p is None else p
    mk = geo.minkowski_content(U, schedule)
    averages = []
    if math.isfinite(p):
        lo, hi = U.bounding_box()
        for e in schedule.values:
            parts = [Region(lambda x, e=e: np.minimum(U.signed_distance(x), e - U.signed_distance(x)), lo, hi,
                            min(e, U.feature_size()))]
            if exclusion_radius > 0:
                parts += [geo.complement(geo.ball(s, exclusion_radius)) for s in fld.singular_points]
            res = volume_integral(lambda x: np.linalg.norm(fld.eval(x), axis=1) ** p, parts,
                                  [] if exclusion_radius > 0 else fld.singular_points, tol * e)
            averages.append(res.value / e)
        bounded = _bounded_trend(averages)
    else:
        bounded = True
    atoms_inside = all(U.signed_distance(np.asarray(a, float)) > 0 for a, m in fld.div.atoms if m != 0)
    atoms_inside = atoms_inside and not fld.div.surface_parts
    if density_compact_inside is None:
        density_compact_inside = fld.div.density is None
    compact = atoms_inside and density_compact_inside
    return SufficientReport(p, mk.values, mk.content, list(schedule.values), averages, bounded, atoms_inside,
                            density_compact_inside, fld.representation, compact and fld.representation,
                            (not math.isfinite(p)) or bounded)
