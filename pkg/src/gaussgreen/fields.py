"""Vector fields with hand-specified divergence measures, and test functions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import geometry as geo
from .quadrature import DEFAULT_TOL, line_integral, volume_integral

ATOM_TOL = 1e-12


class CatalogError(KeyError):
    pass


class AmbiguousAtomError(ValueError):
    pass


def unit_sphere_area(n: int) -> float:
    """n ω_n, the (n-1)-measure of the unit sphere in R^n."""
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


@dataclass
class SurfacePart:
    """Divergence mass spread along the segment a-b with a density per unit length."""

    a: np.ndarray
    b: np.ndarray
    density: Callable

    def __post_init__(self):
        self.a = np.asarray(self.a, float)
        self.b = np.asarray(self.b, float)


@dataclass
class DivergenceMeasure:
    density: Callable | None = None
    atoms: list = field(default_factory=list)
    surface_parts: list = field(default_factory=list)
    kinks: list = field(default_factory=list)

    @property
    def is_zero(self) -> bool:
        return self.density is None and not self.atoms and not self.surface_parts

    def total_variation(self, region: geo.SetDescriptor, closed: bool = True, tol: float = 1e-8) -> float:
        """|μ|(region), closed or open; used as the σ bound of manufactured fluxes."""
        absmu = DivergenceMeasure(
            None if self.density is None else (lambda x: np.abs(self.density(x))),
            [(p, abs(m)) for p, m in self.atoms],
            [SurfacePart(s.a, s.b, lambda t, s=s: np.abs(s.density(t))) for s in self.surface_parts],
            self.kinks,
        )
        return measure_pairing(absmu, constant(1.0, region.dim), region, closed, tol=tol)


@dataclass
class VectorFieldSpec:
    name: str
    dim: int
    eval: Callable
    div: DivergenceMeasure
    singular_points: list = field(default_factory=list)
    p: float = math.inf
    representation: bool = False
    kinks: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        x = np.asarray(x, float)
        if x.ndim == 1:
            return self.eval(x[None, :])[0]
        return self.eval(x)


@dataclass
class TestFunction:
    """Lipschitz test function with closed-form gradient.

    ``kinks`` are 1-Lipschitz functions whose zero sets carry the gradient jumps, used to
    split quadrature regions.
    """

    eval: Callable
    grad: Callable
    support_radius: float = math.inf
    center: np.ndarray | None = None
    lipschitz: float = math.inf
    smoothness: str = "Cinf"
    kinks: list = field(default_factory=list)
    singular_points: list = field(default_factory=list)
    name: str = ""
    feature: float = math.inf  # width of the thinnest piece between kinks

    def __call__(self, x):
        x = np.asarray(x, float)
        if x.ndim == 1:
            return float(self.eval(x[None, :])[0])
        return self.eval(x)


# ---------------------------------------------------------------- test functions

def constant(c: float = 1.0, dim: int = 2) -> TestFunction:
    return TestFunction(lambda x: np.full(len(x), float(c)), lambda x: np.zeros((len(x), dim)),
                        lipschitz=0.0, name=f"constant({c})")


def affine(a: Sequence[float], b: float = 0.0) -> TestFunction:
    a = np.asarray(a, float)
    return TestFunction(lambda x: x @ a + b, lambda x: np.broadcast_to(a, x.shape).copy(),
                        lipschitz=float(np.linalg.norm(a)), name="affine")


def polynomial(fn: Callable, grad: Callable, name: str = "polynomial") -> TestFunction:
    return TestFunction(fn, grad, smoothness="Cinf", name=name)


def hat(center: Sequence[float], radius: float) -> TestFunction:
    """(r - |y - x0|)^+ ; kinks on the circle |y - x0| = r and at the apex."""
    c = np.asarray(center, float)
    r = float(radius)

    def ev(x):
        return np.maximum(r - np.linalg.norm(x - c, axis=1), 0.0)

    def gr(x):
        v = x - c
        n = np.linalg.norm(v, axis=1, keepdims=True)
        g = -v / np.where(n > 0, n, 1.0)
        return np.where(n < r, g, 0.0)

    return TestFunction(ev, gr, r, c, 1.0, "Lipschitz", [lambda x: r - np.linalg.norm(x - c, axis=1)], [c],
                        name="hat", feature=r)


def bump(center: Sequence[float], radius: float, amplitude: float = 1.0) -> TestFunction:
    """amplitude * exp(1 - 1/(1 - s^2)), s = |y - x0|/r; equals amplitude at the centre."""
    c = np.asarray(center, float)
    r = float(radius)

    def parts(x):
        v = (x - c) / r
        s2 = np.sum(v * v, axis=1)
        inside = s2 < 1
        q = np.where(inside, 1 - s2, 1.0)
        val = np.where(inside, amplitude * np.exp(1 - 1 / q), 0.0)
        return v, q, inside, val

    def ev(x):
        return parts(x)[3]

    def gr(x):
        v, q, inside, val = parts(x)
        return np.where(inside[:, None], val[:, None] * (-2 * v / (q ** 2)[:, None]) / r, 0.0)

    # max |∇| of exp(1-1/(1-s^2)) is about 1.8 at s ~ 0.62; bound generously
    return TestFunction(ev, gr, r, c, 2.0 * amplitude / r, "Cinf", name="bump")


def _ramp(t, a, b):
    """0 below a, 1 above b, linear between; derivative returned too."""
    u = np.clip((t - a) / (b - a), 0.0, 1.0)
    du = np.where((t > a) & (t < b), 1.0 / (b - a), 0.0)
    return u, du


def plateau(delta: float, top: float = 0.5, fade: float = 0.75, depth: float = 0.5, floor: float = 0.75) -> TestFunction:
    """One-sided plateau: 1 on [delta, top] x [-depth, depth] in (x1, x2), zero for x1 < delta/2.

    Linear ramps on [delta/2, delta] and [top, fade] in x1 and on depth < |x2| < floor.
    """
    d = float(delta)

    def pieces(x):
        a, da = _ramp(x[:, 0], d / 2, d)
        b, db = _ramp(x[:, 0], top, fade)
        c, dc = _ramp(np.abs(x[:, 1]), depth, floor)
        return a * (1 - b), da * (1 - b) - a * db, 1 - c, -dc * np.sign(x[:, 1])

    def ev(x):
        p, _, q, _ = pieces(x)
        return p * q

    def gr(x):
        p, dp, q, dq = pieces(x)
        return np.stack([dp * q, p * dq], axis=1)

    kinks = [lambda x, c=c: x[:, 0] - c for c in (d / 2, d, top, fade)]
    kinks += [lambda x, c=c: np.abs(x[:, 1]) - c for c in (depth, floor)]
    return TestFunction(ev, gr, math.hypot(fade, floor), np.zeros(2), 2.0 / d, "Lipschitz", kinks,
                        name=f"plateau({d})", feature=min(d / 2, fade - top, floor - depth))


def product(f: TestFunction, g: TestFunction) -> TestFunction:
    return TestFunction(lambda x: f.eval(x) * g.eval(x),
                        lambda x: f.grad(x) * g.eval(x)[:, None] + g.grad(x) * f.eval(x)[:, None],
                        min(f.support_radius, g.support_radius),
                        f.center if f.support_radius <= g.support_radius else g.center,
                        smoothness="Lipschitz" if "Lipschitz" in (f.smoothness, g.smoothness) else "C1",
                        kinks=f.kinks + g.kinks, singular_points=f.singular_points + g.singular_points,
                        name=f"{f.name}*{g.name}", feature=min(f.feature, g.feature))


# ---------------------------------------------------------------- catalog

def _radial(dim: int, scale: float):
    def ev(x):
        r2 = np.sum(x * x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return scale * x / r2[:, None] ** (dim / 2)

    return ev


def whitney(dim: int = 2) -> VectorFieldSpec:
    """x/|x|^n with div = nω_n δ_0."""
    mass = unit_sphere_area(dim)
    return VectorFieldSpec("whitney", dim, _radial(dim, 1.0), DivergenceMeasure(atoms=[(np.zeros(dim), mass)]),
                           [np.zeros(dim)], p=1.5 if dim == 2 else 1.25)


def whitney_normalized(dim: int = 2) -> VectorFieldSpec:
    """x/(nω_n |x|^n): the fundamental solution gradient, div = δ_0."""
    mass = unit_sphere_area(dim)
    f = whitney(dim)
    return VectorFieldSpec("whitney_normalized", dim, _radial(dim, 1.0 / mass),
                           DivergenceMeasure(atoms=[(np.zeros(dim), 1.0)]), [np.zeros(dim)], p=f.p,
                           representation=True)


def radial_n(dim: int = 3) -> VectorFieldSpec:
    f = whitney(dim)
    f.name = "radial_n"
    return f


def rotational_alpha(alpha: float = 2.0) -> VectorFieldSpec:
    """(-x2, x1)/|x|^alpha, divergence free off the origin, alpha in [2, 3)."""
    if not 2.0 <= alpha < 3.0:
        raise CatalogError(f"alpha must lie in [2, 3), got {alpha}")

    def ev(x):
        r2 = np.sum(x * x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.stack([-x[:, 1], x[:, 0]], axis=1) / r2[:, None] ** (alpha / 2)

    # |F| ~ r^(1-alpha) is in L^p near 0 for p < 2/(alpha-1)
    p = 0.5 * (1.0 + 2.0 / (alpha - 1.0))
    return VectorFieldSpec("rotational_alpha" if alpha != 2.0 else "rotational", 2, ev, DivergenceMeasure(),
                           [np.zeros(2)], p=p, params={"alpha": alpha})


def rotational() -> VectorFieldSpec:
    return rotational_alpha(2.0)


def smooth_linear(dim: int = 2) -> VectorFieldSpec:
    return VectorFieldSpec("smooth_linear", dim, lambda x: np.array(x, float),
                           DivergenceMeasure(density=lambda x: np.full(len(x), float(dim))), p=math.inf)


def constant_field(vector: Sequence[float]) -> VectorFieldSpec:
    v = np.asarray(vector, float)
    return VectorFieldSpec("constant", len(v), lambda x: np.broadcast_to(v, x.shape).copy(), DivergenceMeasure(),
                           p=math.inf, params={"vector": v.tolist()})


def staircase_widths(depth: int = 6):
    """Strip heights and widths of the truncated staircase.

    Strip 0 is (0,1) x (0,1/2); strip n covers x2 in (1-2^-n, 1-2^-(n+1)) with width
    1 + sum_{k<=n} (-1)^(k-1)/k.  The strip above the last one is filled up to x2 = 1 with
    the limiting width 1 + log 2.
    """
    bands = [(0.0, 0.5, 1.0)]
    w = 1.0
    for n in range(1, depth + 1):
        w += (-1) ** (n - 1) / n
        bands.append((1 - 2.0 ** -n, 1 - 2.0 ** -(n + 1), w))
    bands.append((1 - 2.0 ** -(depth + 1), 1.0, 1 + math.log(2)))
    return bands


def staircase_set(depth: int = 6) -> geo.SetDescriptor:
    bands = staircase_widths(depth)
    verts = [(0.0, 0.0)]
    for lo, hi, w in bands:
        verts += [(w, lo), (w, hi)]
    verts.append((0.0, 1.0))
    return geo.polygon(verts)


def staircase_field(depth: int = 6, f: Callable | None = None, g: Callable | None = None,
                    dg: Callable | None = None, masked: bool = False) -> VectorFieldSpec:
    """f(x2) g(x1) (1, 0), optionally multiplied by the indicator of the truncated staircase.

    Defaults: f = 1, g = cos.  Unmasked, div = f g' L^2.  Masked, the jump of the indicator
    adds f g along the vertical edges (+ on x1 = 0, - on each right edge).
    """
    f = f or (lambda t: np.ones_like(t))
    if g is None:
        g, dg = np.cos, (lambda t: -np.sin(t))
    if dg is None:
        raise CatalogError("staircase_field needs dg when g is given")

    def raw(x):
        out = np.zeros_like(x)
        out[:, 0] = f(x[:, 1]) * g(x[:, 0])
        return out

    dens = (lambda x: f(x[:, 1]) * dg(x[:, 0]))
    if not masked:
        return VectorFieldSpec("staircase_field", 2, raw, DivergenceMeasure(density=dens), p=math.inf,
                               params={"depth": depth, "masked": False})
    E = staircase_set(depth)
    bands = staircase_widths(depth)

    def ev(x):
        return raw(x) * (E.signed_distance(x) > 0)[:, None]

    parts = [SurfacePart((0.0, 0.0), (0.0, 1.0), lambda y: f(y[:, 1]) * g(y[:, 0]))]
    for lo, hi, w in bands:
        parts.append(SurfacePart((w, lo), (w, hi), lambda y: -f(y[:, 1]) * g(y[:, 0])))
    div = DivergenceMeasure(density=lambda x: dens(x) * (E.signed_distance(x) > 0), surface_parts=parts,
                            kinks=[E])
    return VectorFieldSpec("staircase_field", 2, ev, div, p=math.inf, kinks=[E],
                           params={"depth": depth, "masked": True})


CATALOG = {
    "whitney": whitney,
    "whitney_normalized": whitney_normalized,
    "rotational": rotational,
    "rotational_alpha": rotational_alpha,
    "radial_n": radial_n,
    "smooth_linear": smooth_linear,
    "staircase_field": staircase_field,
    "constant": constant_field,
}


def catalog(name: str, **params) -> VectorFieldSpec:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise CatalogError(f"unknown field {name!r}; known: {sorted(CATALOG)}") from None
    return factory(**params)


# ---------------------------------------------------------------- potentials

@dataclass
class Potential:
    """u with its gradient field and Laplacian measure (for the Green identities)."""

    u: Callable
    gradient: VectorFieldSpec
    name: str = ""

    @property
    def laplacian(self) -> DivergenceMeasure:
        return self.gradient.div

    def as_test_function(self) -> TestFunction:
        return TestFunction(self.u, self.gradient.eval, smoothness="C1",
                            singular_points=list(self.gradient.singular_points), name=self.name)


def log_potential() -> Potential:
    """u = log|x| in 2D: ∇u is the whitney field, Δu = 2π δ_0."""
    return Potential(lambda x: 0.5 * np.log(np.sum(x * x, axis=1)), whitney(2), "log")


def quadratic_potential(dim: int = 2) -> Potential:
    return Potential(lambda x: 0.5 * np.sum(x * x, axis=1), smooth_linear(dim), "quadratic")


def harmonic_potential(kind: str = "xy") -> Potential:
    """Harmonic polynomials in 2D: xy, x^2 - y^2, x^3 - 3xy^2, or linear x."""
    forms = {
        "xy": (lambda x: x[:, 0] * x[:, 1], lambda x: np.stack([x[:, 1], x[:, 0]], axis=1)),
        "x2-y2": (lambda x: x[:, 0] ** 2 - x[:, 1] ** 2, lambda x: np.stack([2 * x[:, 0], -2 * x[:, 1]], axis=1)),
        "x3-3xy2": (lambda x: x[:, 0] ** 3 - 3 * x[:, 0] * x[:, 1] ** 2,
                    lambda x: np.stack([3 * x[:, 0] ** 2 - 3 * x[:, 1] ** 2, -6 * x[:, 0] * x[:, 1]], axis=1)),
        "x": (lambda x: x[:, 0].copy(), lambda x: np.stack([np.ones(len(x)), np.zeros(len(x))], axis=1)),
    }
    if kind not in forms:
        raise CatalogError(f"unknown harmonic polynomial {kind!r}")
    u, g = forms[kind]
    return Potential(u, VectorFieldSpec(f"grad({kind})", 2, g, DivergenceMeasure(), p=math.inf), kind)


def smooth_potential(u: Callable, grad: Callable, lap: Callable, name: str = "smooth") -> Potential:
    return Potential(u, VectorFieldSpec(f"grad({name})", 2, grad, DivergenceMeasure(density=lap), p=math.inf), name)


# ---------------------------------------------------------------- pairing

def _membership(region: geo.SetDescriptor, point, closure_flag: bool | None, tol: float) -> bool:
    d = region.signed_distance(np.asarray(point, float))
    if d > tol:
        return True
    if d < -tol:
        return False
    if closure_flag is None:
        raise AmbiguousAtomError(
            f"atom at {np.asarray(point).tolist()} lies on the region boundary (d = {d:.3e}); "
            "pass closure_flag to choose the open set or its closure")
    return bool(closure_flag)


def _segment_pieces(region, a, b, closure_flag, tol, samples=257):
    """Parameter intervals of [0,1] where a + t(b-a) lies in the region (or its closure)."""
    ts = np.linspace(0.0, 1.0, samples)
    pts = a + ts[:, None] * (b - a)
    d = region.signed_distance(pts)
    state = np.where(d > tol, 1, np.where(d < -tol, -1, 0))
    if np.any(state == 0) and closure_flag is None:
        raise AmbiguousAtomError("surface part runs along the region boundary; pass closure_flag")
    inside = np.where(state == 0, bool(closure_flag), state > 0)

    def dist_t(t):
        return region.signed_distance(a + t * (b - a))

    pieces = []
    start = 0.0 if inside[0] else None
    for k in range(1, samples):
        if inside[k] == inside[k - 1]:
            continue
        t0, t1 = ts[k - 1], ts[k]
        if state[k - 1] * state[k] < 0:
            t = optimize.brentq(dist_t, t0, t1, xtol=1e-15)
        else:
            t = t0 if inside[k - 1] else t1
        if inside[k]:
            start = t
        else:
            pieces.append((start, t))
            start = None
    if start is not None:
        pieces.append((start, 1.0))
    return pieces


def measure_pairing(mu: DivergenceMeasure, phi: TestFunction, region: geo.SetDescriptor, closure_flag: bool | None,
                    tol: float = DEFAULT_TOL, singular_points: Sequence = ()) -> float:
    """∫_region φ dμ, with atoms and surface parts on ∂region assigned by ``closure_flag``.

    ``closure_flag=False`` pairs over the open set, ``True`` over its closure, ``None``
    refuses to decide and raises when a mass sits on the boundary.
    """
    total = 0.0
    if mu.density is not None:
        res = volume_integral(lambda x: phi.eval(x) * mu.density(x), region,
                              list(singular_points) + list(phi.singular_points), tol,
                              kinks=list(phi.kinks) + list(mu.kinks))
        total += res.value
    for point, mass in mu.atoms:
        if mass != 0 and _membership(region, point, closure_flag, ATOM_TOL):
            total += mass * phi(np.asarray(point, float))
    for part in mu.surface_parts:
        L = float(np.linalg.norm(part.b - part.a))
        for t0, t1 in _segment_pieces(region, part.a, part.b, closure_flag, ATOM_TOL):
            def integrand(t, part=part):
                y = (part.a + t * (part.b - part.a))[None, :]
                return float(phi.eval(y)[0] * part.density(y)[0])

            total += L * line_integral(integrand, t0, t1, tol=min(tol, 1e-10))
    return total


def growth_check(fld: VectorFieldSpec, radii: Sequence[float] = (0.1, 0.05, 0.025, 0.0125), outer: float = 0.2,
                 tol: float = 1e-7) -> dict:
    """∫_{B(s,outer) \\ B(s,r)} |F|^p for shrinking r at each singular point.

    Returns the values; a finite declared p shows them levelling off.
    """
    out = {}
    for s in fld.singular_points:
        s = np.asarray(s, float)
        vals = []
        for r in radii:
            annulus = [geo.ball(s, outer), geo.complement(geo.ball(s, r))]
            res = volume_integral(lambda x: np.linalg.norm(fld.eval(x), axis=1) ** fld.p, annulus, tol=tol)
            vals.append(res.value)
        out[tuple(s.tolist())] = vals
    return out
