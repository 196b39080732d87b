"""Regularized distance ρ = G(·, ρ), with G a mollified shift of the signed distance, and
the vertical deformation of graph domains onto its level sets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from . import geometry as geo

SOLVER_TOL = 1e-10
MAX_ITER = 50
NONDEGENERATE = 0.05


class SolverError(RuntimeError):
    def __init__(self, message: str, points=None, residuals=None):
        super().__init__(message)
        self.points = points
        self.residuals = residuals


class ConditioningError(RuntimeError):
    pass


class DeformationError(RuntimeError):
    pass


def standard_bump(r):
    r = np.asarray(r, float)
    q = np.where(r < 1, 1 - r * r, 1.0)
    return np.where(r < 1, np.exp(-1.0 / q), 0.0)


@dataclass
class MollifierSpec:
    """Radial mollifier η on B(0,1) with a polar product rule.

    The rule weights are normalised by their own sum, so the discrete mass is 1 and the
    Lipschitz bounds on G hold for the discrete G exactly.  ``continuum_mass`` records
    the raw rule mass times the adaptive-quadrature normalisation.
    """

    dim: int = 2
    profile: Callable = standard_bump
    order: int = 16
    normalization: float = field(init=False)
    continuum_mass: float = field(init=False)
    _rules: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("mollifier dimension must be 2 or 3")
        sphere = 2 * math.pi if self.dim == 2 else 4 * math.pi
        mass = sphere * integrate.quad(lambda r: float(self.profile(r)) * r ** (self.dim - 1), 0, 1,
                                       epsabs=1e-15, epsrel=1e-13, limit=200)[0]
        self.normalization = 1.0 / mass
        nodes, w_raw = self._raw_rule(self.order)
        self.continuum_mass = float(w_raw.sum() * self.normalization)
        z, w = self.rule(self.order)
        if abs(math.fsum(w) - 1.0) > 1e-10 or np.any(w < 0) or np.any(np.linalg.norm(z, axis=1) > 1 + 1e-15):
            raise ValueError("mollifier rule is not a probability rule on the unit ball")

    def _raw_rule(self, order):
        x, wr = np.polynomial.legendre.leggauss(order)
        r, wr = (x + 1) / 2, wr / 2
        radial = wr * np.asarray(self.profile(r), float) * r ** (self.dim - 1)
        if self.dim == 2:
            th = (np.arange(order) + 0.5) * 2 * math.pi / order
            dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
            wd = np.full(order, 2 * math.pi / order)
        else:
            c, wc = np.polynomial.legendre.leggauss(order)
            ph = (np.arange(2 * order) + 0.5) * math.pi / order
            C, P = np.meshgrid(c, ph, indexing="ij")
            S = np.sqrt(1 - C ** 2)
            dirs = np.stack([S * np.cos(P), S * np.sin(P), C], axis=-1).reshape(-1, 3)
            wd = np.repeat(wc, 2 * order) * (math.pi / order)
        z = (r[:, None, None] * dirs[None, :, :]).reshape(-1, self.dim)
        w = (radial[:, None] * wd[None, :]).ravel()
        return z, w

    def rule(self, order: int | None = None):
        order = self.order if order is None else order
        if order not in self._rules:
            z, w = self._raw_rule(order)
            self._rules[order] = (z, w / w.sum())
        return self._rules[order]


@dataclass
class RegDistResult:
    rho: float
    iterations: int
    residual: float
    ratio: float
    d: float


# ---------------------------------------------------------------- G and its derivatives

def _pts(x, dim):
    x = np.asarray(x, float)
    return (x[None, :] if x.ndim == 1 else x), x.ndim == 1


def _G_parts(U: geo.SetDescriptor, x, tau, moll: MollifierSpec, order=None, derivatives=False):
    z, w = moll.rule(order)
    N, n = x.shape
    tau = np.broadcast_to(np.asarray(tau, float), (N,))
    P = (x[:, None, :] - 0.5 * tau[:, None, None] * z[None, :, :]).reshape(-1, n)
    val = U.signed_distance(P).reshape(N, -1) @ w
    if not derivatives:
        return val, None, None
    gd = geo._closed_gradient(U, P).reshape(N, -1, n)
    grad = np.einsum("k,nkj->nj", w, gd)
    dtau = -0.5 * np.einsum("k,nkj,kj->n", w, gd, z)
    return val, dtau, grad


def G_eval(U: geo.SetDescriptor, x, tau, moll: MollifierSpec | None = None, tol: float = 1e-9, max_order: int = 256):
    """G(x, τ) = ∫ d(x - τz/2) η(z) dz; the rule order doubles until G changes by less than tol."""
    moll = moll or MollifierSpec(U.dim)
    X, scalar = _pts(x, U.dim)
    order = moll.order
    val = _G_parts(U, X, tau, moll, order)[0]
    while order < max_order:
        order *= 2
        nxt = _G_parts(U, X, tau, moll, order)[0]
        done = np.max(np.abs(nxt - val)) < tol
        val = nxt
        if done:
            break
    return float(val[0]) if scalar else val


def G_derivatives(U: geo.SetDescriptor, x, tau, moll: MollifierSpec | None = None):
    """(G, ∂G/∂τ, ∇ₓG) at the default rule order; |∇G| ≤ 1 and |∂G/∂τ| ≤ 1/2 by construction."""
    moll = moll or MollifierSpec(U.dim)
    X, scalar = _pts(x, U.dim)
    v, dt, g = _G_parts(U, X, tau, moll, derivatives=True)
    if scalar:
        return float(v[0]), float(dt[0]), g[0]
    return v, dt, g


# ---------------------------------------------------------------- fixed point

def _solve(U, X, moll, tol=SOLVER_TOL, max_iter=MAX_ITER):
    d = U.signed_distance(X)
    rho = d.copy()
    iters = np.zeros(len(X), dtype=int)
    active = np.ones(len(X), dtype=bool)
    for it in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        g, gt, _ = _G_parts(U, X[idx], rho[idx], moll, derivatives=True)
        f = rho[idx] - g
        slope = 1.0 - gt
        step = f / slope
        rho[idx] -= step
        iters[idx] += 1
        active[idx] = np.abs(step) > 1e-12 * np.maximum(np.abs(rho[idx]), 1e-6)
    residual = np.abs(rho - _G_parts(U, X, rho, moll)[0])
    bad = residual > tol
    if bad.any():
        raise SolverError(f"fixed point not reached at {int(bad.sum())} points within {max_iter} iterations",
                          X[bad], residual[bad])
    return rho, iters, residual, d


def regularized_distance(U: geo.SetDescriptor, x, moll: MollifierSpec | None = None):
    """Solve ρ = G(x, ρ) by Newton from ρ = d(x).  Scalar input gives a RegDistResult,
    an (N, n) array gives a dict of arrays with the same fields."""
    moll = moll or MollifierSpec(U.dim)
    X, scalar = _pts(x, U.dim)
    rho, iters, res, d = _solve(U, X, moll)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d != 0, rho / np.where(d != 0, d, 1.0), np.nan)
    if scalar:
        return RegDistResult(float(rho[0]), int(iters[0]), float(res[0]), float(ratio[0]), float(d[0]))
    return {"rho": rho, "iterations": iters, "residual": res, "ratio": ratio, "d": d}


def rho(U: geo.SetDescriptor, x, moll: MollifierSpec | None = None) -> np.ndarray:
    moll = moll or MollifierSpec(U.dim)
    X, scalar = _pts(x, U.dim)
    r = _solve(U, X, moll)[0]
    return float(r[0]) if scalar else r


def regdist_gradient(U: geo.SetDescriptor, x, moll: MollifierSpec | None = None, rho_values=None):
    """∇ρ = ∇G / (1 - ∂G/∂τ) at (x, ρ(x))."""
    moll = moll or MollifierSpec(U.dim)
    X, scalar = _pts(x, U.dim)
    r = _solve(U, X, moll)[0] if rho_values is None else np.asarray(rho_values, float).reshape(-1)
    _, gt, g = _G_parts(U, X, r, moll, derivatives=True)
    denom = 1.0 - gt
    if np.any(np.abs(denom) < 0.25):
        raise ConditioningError("1 - ∂G/∂τ below 1/4; mollifier quadrature is inconsistent")
    grad = g / denom[:, None]
    if np.any(np.linalg.norm(grad, axis=1) > 2 + 1e-9):
        raise ConditioningError("|∇ρ| exceeds 2")
    return grad[0] if scalar else grad


# ---------------------------------------------------------------- level sets and nondegeneracy

@dataclass
class NondegeneracyReport:
    eps0: float | None
    min_grad: dict
    samples: int
    max_grad: float
    ratio_range: tuple


def sample_points(U: geo.SetDescriptor, n: int, rng: np.random.Generator, pad: float = 0.25) -> np.ndarray:
    lo, hi = (np.asarray(b, float) for b in U.bounding_box(pad))
    return lo + rng.random((n, U.dim)) * (hi - lo)


def nondegeneracy(U: geo.SetDescriptor, schedule, n: int = 10_000, seed: int = 0,
                  moll: MollifierSpec | None = None, threshold: float = NONDEGENERATE,
                  pad: float | None = None) -> NondegeneracyReport:
    """Largest ε in the schedule with min |∇ρ| > threshold on the band 0 < |ρ| < ε."""
    moll = moll or MollifierSpec(U.dim)
    eps = sorted(schedule.values if hasattr(schedule, "values") else schedule, reverse=True)
    pad = 2 * eps[0] if pad is None else pad
    X = sample_points(U, n, np.random.default_rng(seed), pad)
    r, _, _, d = _solve(U, X, moll)
    grad = np.linalg.norm(regdist_gradient(U, X, moll, r), axis=1)
    mins = {}
    eps0 = None
    for e in eps:
        band = (np.abs(r) > 0) & (np.abs(r) < e)
        m = float(grad[band].min()) if band.any() else math.inf
        mins[e] = m
        if eps0 is None and m > threshold:
            eps0 = e
    nz = d != 0
    ratio = r[nz] / d[nz]
    return NondegeneracyReport(eps0, mins, n, float(grad.max()), (float(ratio.min()), float(ratio.max())))


def extract_regdist_level(U: geo.SetDescriptor, eps: float, resolution: float,
                          moll: MollifierSpec | None = None, order: int = 6) -> geo.SurfaceMesh:
    """Contour {ρ = eps} of ρ sampled on a grid; facet normals replaced by ∇ρ/|∇ρ|."""
    moll = moll or MollifierSpec(U.dim)
    reach = 2 * abs(eps) if eps < 0 else 0.0
    lo, hi = (np.asarray(b, float) for b in U.bounding_box(reach))
    sf = geo.SampledField(lambda P: _solve(U, P, moll)[0], lo - 2 * resolution, hi + 2 * resolution, resolution)
    mesh = geo.contour(sf, eps, order)
    if len(mesh) == 0:
        return mesh
    g = regdist_gradient(U, mesh.centroids, moll)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    mesh.normals = g / np.where(nrm > 0, nrm, 1.0)
    return mesh


# ---------------------------------------------------------------- deformation of graph domains

@dataclass(frozen=True)
class HSpec:
    """h(ε, r) = ε H(r/ε): H = 1 on [0, 1], 0 beyond 5/2, C¹ and piecewise quadratic.

    H' ramps linearly from 0 to -m over [1, 1+a], stays at -m, and ramps back to 0 over
    [5/2 - a, 5/2]; unit total drop fixes m = 1/(3/2 - a).  a = 0.1 gives m = 0.714 > -1 + σ
    for σ = 0.1.
    """

    a: float = 0.1
    start: float = 1.0
    stop: float = 2.5

    @property
    def max_slope(self) -> float:
        return 1.0 / (self.stop - self.start - self.a)

    def H(self, s):
        s = np.asarray(s, float)
        a, m, s0, s1 = self.a, self.max_slope, self.start, self.stop
        drop = np.where(
            s <= s0, 0.0,
            np.where(s <= s0 + a, 0.5 * m * (s - s0) ** 2 / a,
                     np.where(s <= s1 - a, 0.5 * m * a + m * (s - s0 - a),
                              np.where(s < s1, 1.0 - 0.5 * m * (s1 - s) ** 2 / a, 1.0))))
        return 1.0 - drop

    def dH(self, s):
        s = np.asarray(s, float)
        a, m, s0, s1 = self.a, self.max_slope, self.start, self.stop
        return -np.where(s <= s0, 0.0, np.where(s <= s0 + a, m * (s - s0) / a,
                                                np.where(s <= s1 - a, m, np.where(s < s1, m * (s1 - s) / a, 0.0))))

    def h(self, eps: float, r):
        return eps * self.H(np.asarray(r, float) / eps)

    def dh(self, eps: float, r):
        return self.dH(np.asarray(r, float) / eps)


def graph_deformation(U: geo.SetDescriptor, eps: float, x, h: HSpec | None = None,
                      moll: MollifierSpec | None = None, tol: float = 1e-12, max_iter: int = 200):
    """f(ε, x) = x + t eₙ with ρ(x + t eₙ) = ρ(x) + h(ε, ρ(x)), t ≥ 0, for 0 ≤ ρ(x) < 3ε.

    Other points are returned unchanged.  The root is bracketed by doubling and refined
    with the Illinois variant of regula falsi, vectorised over points.
    """
    if U.kind != "GraphDomain":
        raise geo.ConfigurationError("graph_deformation needs a GraphDomain descriptor")
    h = h or HSpec()
    moll = moll or MollifierSpec(U.dim)
    X, scalar = _pts(x, U.dim)
    out = X.copy()
    r0 = _solve(U, X, moll)[0]
    # boundary samples may carry a rounding-level negative distance
    move = (r0 >= -1e-12) & (r0 < 3 * eps)
    idx = np.nonzero(move)[0]
    if len(idx):
        e_n = np.zeros(U.dim)
        e_n[-1] = 1.0
        base = X[idx]
        target = r0[idx] + h.h(eps, r0[idx])

        def f(t, sel):
            return _solve(U, base[sel] + t[:, None] * e_n, moll)[0] - target[sel]

        everything = np.arange(len(idx))
        a = np.zeros(len(idx))
        fa = r0[idx] - target
        b = np.maximum(2 * (target - r0[idx]), 1e-300)
        fb = f(b, everything)
        for _ in range(60):
            low = fb < 0
            if not low.any():
                break
            a[low], fa[low] = b[low], fb[low]
            b[low] *= 2
            fb[low] = f(b[low], np.nonzero(low)[0])
        if np.any(fb < 0):
            raise DeformationError(f"no root bracketed for ε = {eps}; ε exceeds ε₀ for this domain")
        t = np.where(fa == 0, a, b)
        active = (fa != 0) & (fb != 0)
        side = np.zeros(len(idx), dtype=int)
        for _ in range(max_iter):
            if not active.any():
                break
            k = np.nonzero(active)[0]
            c = (a[k] * fb[k] - b[k] * fa[k]) / (fb[k] - fa[k])
            fc = f(c, k)
            t[k] = c
            left = fc * fa[k] > 0
            kl, kr = k[left], k[~left]
            a[kl], fa[kl] = c[left], fc[left]
            fb[kl[side[kl] == -1]] *= 0.5
            side[kl] = -1
            b[kr], fb[kr] = c[~left], fc[~left]
            fa[kr[side[kr] == 1]] *= 0.5
            side[kr] = 1
            active[k] = (np.abs(fc) > tol) & (np.abs(b[k] - a[k]) > 1e-15)
        if active.any():
            raise DeformationError("root refinement did not converge")
        out[idx] = base + t[:, None] * e_n
    return out[0] if scalar else out
