"""Adaptive cell quadrature over sets given by a Lipschitz level function.

Cells are classified with a Lipschitz bound on the level function: cells that are
certainly inside get a tensor Gauss rule, cells that may meet the boundary are split
into simplices and clipped against the linear interpolant of the level.  Cells touching
a declared singular point are replaced by Duffy pyramids with apex at the point, which
removes a ``1/r^(n-1)`` singularity from the integrand.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

DEFAULT_TOL = 1e-6
MAX_CELLS = 10_000_000


class QuadratureError(RuntimeError):
    def __init__(self, message: str, location=None):
        super().__init__(message if location is None else f"{message} (worst cell near {np.round(location, 12).tolist()})")
        self.location = location


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error_estimate: float
    cells_used: int
    excluded_measure: float = 0.0


@dataclass(frozen=True)
class Region:
    """Integration domain ``{level > 0}`` clipped to the box ``[lo, hi]``.

    ``level`` must be 1-Lipschitz (a signed distance or a min of such); ``None`` means the
    whole box.
    """

    level: Callable | None
    lo: np.ndarray
    hi: np.ndarray
    feature: float = math.inf

    @property
    def dim(self) -> int:
        return len(self.lo)


def as_region(region) -> Region:
    """Accept a Region, anything with ``.region()``, or a sequence of those (intersection)."""
    if isinstance(region, Region):
        return region
    if hasattr(region, "region"):
        return region.region()
    parts = [as_region(r) for r in region]
    if not parts:
        raise ValueError("empty region list")
    lo = np.max([p.lo for p in parts], axis=0)
    hi = np.min([p.hi for p in parts], axis=0)
    levels = [p.level for p in parts if p.level is not None]
    return Region(min_level(levels) if levels else None, lo, hi, min(p.feature for p in parts))


def min_level(levels: Sequence[Callable]) -> Callable:
    levels = list(levels)
    if len(levels) == 1:
        return levels[0]

    def level(x):
        out = levels[0](x)
        for g in levels[1:]:
            out = np.minimum(out, g(x))
        return out

    return level


# ---------------------------------------------------------------- reference rules

def gauss_01(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_rule(dim: int, order: int):
    x, w = gauss_01(order)
    nodes = np.array(list(itertools.product(x, repeat=dim)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=dim))), axis=1)
    return nodes, weights


# Dunavant degree-5 rule, barycentric coordinates; weights sum to one.
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
_TRI_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def _collapsed_tet_rule(order: int = 3):
    # Duffy-collapsed Gauss rule on the unit tetrahedron, returned in barycentric form
    x, w = gauss_01(order)
    bary, wts = [], []
    for (u, wu), (v, wv), (t, wt) in itertools.product(zip(x, w), repeat=3):
        p1 = u
        p2 = v * (1 - u)
        p3 = t * (1 - u) * (1 - v)
        bary.append([1 - p1 - p2 - p3, p1, p2, p3])
        wts.append(wu * wv * wt * (1 - u) ** 2 * (1 - v) * 6.0)
    return np.array(bary), np.array(wts)


_TET_BARY, _TET_W = _collapsed_tet_rule()


def simplex_rule(dim: int):
    """Barycentric nodes and weights (summing to 1) for the reference simplex."""
    if dim == 2:
        return _TRI_BARY, _TRI_W
    if dim == 3:
        return _TET_BARY, _TET_W
    raise ValueError(f"unsupported dimension {dim}")


def _kuhn_simplices(dim: int) -> np.ndarray:
    """Vertex offsets of the Kuhn triangulation of the unit cube, shape (dim!, dim+1, dim)."""
    out = []
    for perm in itertools.permutations(range(dim)):
        v = np.zeros(dim)
        verts = [v.copy()]
        for k in perm:
            v[k] = 1.0
            verts.append(v.copy())
        out.append(verts)
    return np.array(out)


_KUHN = {2: _kuhn_simplices(2), 3: _kuhn_simplices(3)}
_TENSOR = {2: tensor_rule(2, 4), 3: tensor_rule(3, 3)}
_CUT_DEPTH = {2: 128.0, 3: 16.0}
_PATCH_CUT_DEPTH = {2: 16.0, 3: 8.0}
_CHUNK = 16_384  # cells per vectorized evaluation
_CHILD = {d: np.array(list(itertools.product((0.0, 0.5), repeat=d))) for d in (2, 3)}


# ---------------------------------------------------------------- simplex clipping

def _edge_points(A, B, la, lb, level):
    """Zero of the level on segments A->B (la > 0 >= lb), regula falsi polished."""
    t = la / (la - lb)
    if level is not None:
        ta, tb = np.zeros_like(t), np.ones_like(t)
        fa, fb = la.copy(), lb.copy()
        for _ in range(2):
            P = A + t[:, None] * (B - A)
            fp = level(P)
            pos = fp > 0
            ta = np.where(pos, t, ta)
            fa = np.where(pos, fp, fa)
            tb = np.where(pos, tb, t)
            fb = np.where(pos, fb, fp)
            denom = fa - fb
            safe = np.abs(denom) > 0
            t = np.where(safe, ta + (tb - ta) * fa / np.where(safe, denom, 1.0), t)
            t = np.clip(t, ta, tb)
    return A + t[:, None] * (B - A)


def _prism_tets(A0, A1, A2, B0, B1, B2):
    return [np.stack(s, axis=1) for s in ((A0, A1, A2, B2), (A0, A1, B1, B2), (A0, B0, B1, B2))]


def _caps(p, q, inward, level):
    """Second-order correction between a boundary chord p-q and the true zero curve.

    The curve midpoint is located by a secant step along the chord normal and the
    bulge is integrated as 4/3 of the triangle (parabolic segment).
    """
    d = q - p
    nrm = np.stack([-d[:, 1], d[:, 0]], axis=1)
    ln = np.linalg.norm(nrm, axis=1)
    ok = ln > 0
    nrm = nrm / np.where(ok, ln, 1.0)[:, None]
    nrm *= np.where(np.sum(nrm * (inward - p), axis=1) < 0, -1.0, 1.0)[:, None]
    m = 0.5 * (p + q)
    lm = level(m)
    l2 = level(m - lm[:, None] * nrm)
    den = lm - l2
    delta = np.where(np.abs(den) > 1e-300, lm * lm / np.where(np.abs(den) > 1e-300, den, 1.0), lm)
    delta = np.clip(delta, -0.5 * ln, 0.5 * ln)
    delta = np.where(ok, delta, 0.0)
    apex = m - delta[:, None] * nrm
    # a cap removed from the piece lies across the level, where a kinked integrand takes
    # the other branch; shift it inward by its depth so it is sampled on this side
    shift = np.maximum(-delta, 0.0)[:, None] * nrm
    return np.stack([p + shift, q + shift, apex + shift], axis=1), np.sign(delta) * (4.0 / 3.0)


def clip_simplices(V, lv, level=None):
    """Clip simplices ``V`` (m, n+1, n) to ``{level > 0}`` using vertex values ``lv``.

    Returns ``(simplices, owner, weight)``: ``owner`` indexes the input simplex each piece
    came from and ``weight`` multiplies its integral.  Pieces always lie on the positive
    side, so kinked integrands split along a level are never sampled across the kink.  In
    2D each boundary chord also gets a signed curvature cap.
    """
    m, k, n = V.shape
    pos = lv > 0
    code = (pos * (1 << np.arange(k))).sum(axis=1)
    pieces, owners, weights = [], [], []
    idx_all = np.arange(m)

    def add(piece, own, w=1.0):
        pieces.append(piece)
        owners.append(own)
        weights.append(np.broadcast_to(np.asarray(w, float), (len(own),)))

    for c in np.unique(code):
        sel = code == c
        S, L, own = V[sel], lv[sel], idx_all[sel]
        P = [i for i in range(k) if (c >> i) & 1]
        N = [i for i in range(k) if not (c >> i) & 1]
        if not P:
            continue
        if not N:
            add(S, own)
            continue

        def cut(i, j):
            return _edge_points(S[:, i], S[:, j], L[:, i], L[:, j], level)

        if n == 2:
            if len(P) == 1:
                a = P[0]
                b, c2 = N
                pab, pac = cut(a, b), cut(a, c2)
                add(np.stack([S[:, a], pab, pac], axis=1), own)
            else:
                a, b = P
                c2 = N[0]
                pab, pac = cut(b, c2), cut(a, c2)
                add(np.stack([S[:, a], S[:, b], pab], axis=1), own)
                add(np.stack([S[:, a], pab, pac], axis=1), own)
            if level is not None:
                cap, w = _caps(pab, pac, S[:, a], level)
                add(cap, own, w)
        else:
            if len(P) == 1:
                a = P[0]
                add(np.stack([S[:, a]] + [cut(a, j) for j in N], axis=1), own)
            elif len(P) == 2:
                a, b = P
                c2, d = N
                for t in _prism_tets(S[:, a], cut(a, c2), cut(a, d), S[:, b], cut(b, c2), cut(b, d)):
                    add(t, own)
            else:
                a, b, c2 = P
                d = N[0]
                for t in _prism_tets(S[:, a], S[:, b], S[:, c2], cut(a, d), cut(b, d), cut(c2, d)):
                    add(t, own)
    if not pieces:
        return np.zeros((0, k, n)), np.zeros(0, dtype=int), np.zeros(0)
    return np.concatenate(pieces), np.concatenate(owners), np.concatenate(weights)


def simplex_volumes(S):
    n = S.shape[2]
    M = S[:, 1:, :] - S[:, :1, :]
    return np.abs(np.linalg.det(M)) / math.factorial(n)


def integrate_simplices(f, S):
    """Per-simplex integrals of ``f`` over simplices ``S`` (m, n+1, n)."""
    if len(S) == 0:
        return np.zeros(0)
    n = S.shape[2]
    bary, w = simplex_rule(n)
    pts = np.einsum("qk,mkn->mqn", bary, S)
    vals = np.asarray(f(pts.reshape(-1, n)), float).reshape(len(S), len(w))
    return simplex_volumes(S) * (vals @ w)


# ---------------------------------------------------------------- cell rules

def _full_rule(f, lo, size):
    n = lo.shape[1]
    nodes, w = _TENSOR[n]
    pts = lo[:, None, :] + nodes[None, :, :] * size[:, None, :]
    vals = np.asarray(f(pts.reshape(-1, n)), float).reshape(len(lo), len(w))
    return (vals @ w) * np.prod(size, axis=1)


def _cut_rule(f, level, lo, size):
    n = lo.shape[1]
    kuhn = _KUHN[n]
    V = lo[:, None, None, :] + kuhn[None] * size[:, None, None, :]
    V = V.reshape(-1, n + 1, n)
    owner_cell = np.repeat(np.arange(len(lo)), len(kuhn))
    lv = np.asarray(level(V.reshape(-1, n)), float).reshape(V.shape[:2])
    S, own, w = clip_simplices(V, lv, level)
    out = np.zeros(len(lo))
    if len(S):
        np.add.at(out, owner_cell[own], w * integrate_simplices(f, S))
    return out


def _children(lo, size):
    n = lo.shape[1]
    off = _CHILD[n]
    half = size / 2
    clo = (lo[:, None, :] + off[None] * size[:, None, :]).reshape(-1, n)
    csize = np.repeat(half, len(off), axis=0)
    return clo, csize


class _Adaptive:
    """Global error-driven refinement of a cell population."""

    def __init__(self, f, level, lip, max_cells, cut_max=None):
        self.f = f
        self.level = level
        self.lip = lip
        self.max_cells = max_cells
        self.cut_max = cut_max
        self.evaluated = 0

    def _classify(self, lo, size):
        if self.level is None:
            return np.ones(len(lo), dtype=int)
        c = lo + size / 2
        lc = np.asarray(self.level(c), float)
        if self.lip is None:
            R = 0.5 * np.linalg.norm(size, axis=1)
        else:
            R = 0.5 * size @ self.lip
        R = R * (1 + 1e-9) + 1e-300
        return np.where(lc > R, 1, np.where(lc < -R, 0, 2))

    def _rule(self, lo, size, kind):
        out = np.zeros(len(lo))
        m = kind == 1
        if m.any():
            out[m] = _full_rule(self.f, lo[m], size[m])
        m = kind == 2
        if m.any():
            out[m] = _cut_rule(self.f, self.level, lo[m], size[m])
        return out

    def evaluate(self, lo, size):
        kind = self._classify(lo, size)
        keep = kind > 0
        lo, size, kind = lo[keep], size[keep], kind[keep]
        coarse = self._rule(lo, size, kind)
        clo, csize = _children(lo, size)
        nch = 2 ** lo.shape[1]
        ckind = np.repeat(kind, nch)
        cut = ckind == 2
        if cut.any():
            # children of cut cells may be fully inside or outside; reclassify them
            ck = self._classify(clo[cut], csize[cut])
            ckind[cut] = ck
        fine = self._rule(clo, csize, ckind).reshape(-1, nch).sum(axis=1)
        self.evaluated += len(lo) * (1 + nch)
        if self.evaluated > self.max_cells:
            j = int(np.argmax(np.abs(fine - coarse))) if len(lo) else 0
            loc = (lo[j] + size[j] / 2) if len(lo) else None
            raise QuadratureError(f"cell cap {self.max_cells} exceeded", loc)
        err = np.abs(fine - coarse)
        if lo.shape[1] == 3:
            # planar clipping errs by O(h^2) per unit area with a stable leading term;
            # extrapolate the cut cells and take the correction as their estimate
            cut3 = kind == 2
            fine = np.where(cut3, fine + (fine - coarse) / 3.0, fine)
            err = np.where(cut3, err / 3.0, err)
        if self.cut_max is not None:
            # corner samples of coarse cut cells can miss a boundary that bulges across
            # one edge; such cells are refined unconditionally down to cut_max
            coarse_cut = (kind == 2) & np.any(size > self.cut_max, axis=1)
            err = np.where(coarse_cut, np.inf, err)
        return lo, size, fine, err

    def run(self, lo, size, tol):
        lo, size, val, err = self.evaluate(lo, size)
        min_size = 1e-13 * (np.max(size) if len(size) else 1.0)
        while len(err) and err.sum() > tol:
            forced = np.isinf(err)
            if forced.any():
                pick = np.nonzero(forced)[0]
            else:
                order = np.argsort(-err, kind="stable")
                excess = err.sum() - 0.5 * tol
                csum = np.cumsum(err[order])
                nsplit = int(np.searchsorted(csum, excess)) + 1
                pick = order[:nsplit]
            pick = pick[np.min(size[pick], axis=1) > min_size]
            if len(pick) == 0:
                j = int(np.argmax(err))
                raise QuadratureError("refinement stalled", lo[j] + size[j] / 2)
            mask = np.zeros(len(err), dtype=bool)
            mask[pick] = True
            clo, csize = _children(lo[mask], size[mask])
            parts = [self.evaluate(clo[i:i + _CHUNK], csize[i:i + _CHUNK]) for i in range(0, len(clo), _CHUNK)]
            nlo, nsize, nval, nerr = (np.concatenate(a) for a in zip(*parts))
            lo = np.concatenate([lo[~mask], nlo])
            size = np.concatenate([size[~mask], nsize])
            val = np.concatenate([val[~mask], nval])
            err = np.concatenate([err[~mask], nerr])
        return float(np.sum(val)), float(np.sum(err)), len(val)


# ---------------------------------------------------------------- singular patches

def _duffy_patches(lo, size, s):
    """Pyramids with apex ``s`` over the faces of the cell ``[lo, lo+size]``."""
    n = len(lo)
    patches = []
    for k in range(n):
        for side in (0, 1):
            a = lo.copy()
            a[k] += side * size[k]
            edges = [size[m] * np.eye(n)[m] for m in range(n) if m != k]
            height = abs(a[k] - s[k])
            if height <= 1e-15 * max(1.0, np.max(size)):
                continue
            patches.append((a, edges, height * np.prod([size[m] for m in range(n) if m != k])))
    return patches


def _patch_integral(f, level, s, a, edges, base, tol, max_cells, feature=math.inf):
    """Integrate over one pyramid in (u, v...) coordinates with geometric u-slabs."""
    n = len(s)
    E = np.array(edges)
    corners = [a + np.dot(np.array(c), E) for c in itertools.product((0, 1), repeat=n - 1)]
    D = max(np.linalg.norm(c - s) for c in corners)
    lip = np.concatenate([[D], np.linalg.norm(E, axis=1)])
    jac0 = base  # |det(a - s, e...)| = height * face area

    def to_x(p):
        u = p[:, :1]
        return s + u * (a + p[:, 1:] @ E - s)

    def g(p):
        return np.asarray(f(to_x(p)), float) * jac0 * p[:, 0] ** (n - 1)

    lev = None if level is None else (lambda p: level(to_x(p)))
    total, err, cells = 0.0, 0.0, 0
    u_hi, k = 1.0, 0
    while True:
        u_lo = u_hi * 0.5
        slab_tol = tol * 0.25 * 2.0 ** (-k / 2)
        lo = np.array([[u_lo] + [0.0] * (n - 1)])
        sz = np.array([[u_hi - u_lo] + [1.0] * (n - 1)])
        # parametric width of the thinnest feature: physical v-extent at u is u * |E_m|
        phys = np.concatenate([[D], u_hi * lip[1:]])
        ad = _Adaptive(g, lev, lip, max_cells, np.minimum(sz[0] / _PATCH_CUT_DEPTH[n], 0.5 * feature / phys))
        v, e, c = ad.run(lo, sz, slab_tol)
        total += v
        err += e
        cells += c
        u_hi = u_lo
        k += 1
        # a zero slab proves nothing while features smaller than the slab may hide nearer s
        if k >= 3 and abs(v) < tol / 10 and u_hi * D <= feature:
            break
        if k > 200:
            raise QuadratureError("singular contribution does not decay", s)
    excluded = u_hi ** n * base / n
    return total, err, cells, excluded


# ---------------------------------------------------------------- public API

def volume_integral(integrand: Callable, region, singular_points: Sequence = (), tol: float = DEFAULT_TOL,
                    *, kinks: Sequence[Callable] = (), max_cells: int = MAX_CELLS,
                    initial: int = 8, feature: float = math.inf) -> QuadratureResult:
    """Integrate ``integrand`` (vectorized over rows of an (N, n) array) over ``region``.

    ``kinks`` are 1-Lipschitz functions (or set descriptors) whose zero sets carry
    derivative jumps of the integrand; the region is split along each of them so every
    piece is smooth.  Boundary cells are refined at least to half the smallest feature
    size the descriptors report, so thin parts are not stepped over.
    """
    reg = as_region(region)
    lo0, hi0 = np.asarray(reg.lo, float), np.asarray(reg.hi, float)
    n = len(lo0)
    if not (np.all(np.isfinite(lo0)) and np.all(np.isfinite(hi0))):
        raise ValueError("integration region is unbounded; intersect it with a bounded set")
    ext = hi0 - lo0
    if np.any(ext <= 0):
        return QuadratureResult(0.0, 0.0, 0, 0.0)
    counts = np.maximum(1, np.ceil(initial * ext / ext.max())).astype(int)
    size0 = ext / counts
    grid = np.array(list(itertools.product(*[range(c) for c in counts])), float)
    lo_cells = lo0 + grid * size0
    sz_cells = np.tile(size0, (len(lo_cells), 1))

    sing = [np.asarray(p, float) for p in singular_points]
    sing = [p for p in sing if np.all(p >= lo0 - 1e-12) and np.all(p <= hi0 + 1e-12)]
    special = np.zeros(len(lo_cells), dtype=bool)
    owners = []
    for p in sing:
        touch = np.all((lo_cells <= p + 1e-12) & (lo_cells + sz_cells >= p - 1e-12), axis=1)
        special |= touch
        owners.append(np.nonzero(touch)[0])

    feature = min(reg.feature, feature)
    kink_fns = []
    for k in kinks:
        if hasattr(k, "signed_distance"):
            feature = min(feature, k.feature_size())
            kink_fns.append(k.signed_distance)
        else:
            kink_fns.append(k)
    kinks = kink_fns
    cut_max = np.minimum(ext / _CUT_DEPTH[n], 0.5 * feature)
    signs = list(itertools.product((1.0, -1.0), repeat=len(kinks)))
    base_levels = [] if reg.level is None else [reg.level]
    npieces = len(signs)
    value = err = excluded = 0.0
    cells = 0
    tol_reg = tol / (2 if sing else 1) / npieces
    for sg in signs:
        levels = base_levels + [(lambda x, g=g, c=c: c * g(x)) for g, c in zip(kinks, sg)]
        level = min_level(levels) if levels else None
        ad = _Adaptive(integrand, level, None, max_cells, cut_max)
        if (~special).any():
            v, e, c = ad.run(lo_cells[~special], sz_cells[~special], tol_reg)
            value += v
            err += e
            cells += c
        if sing:
            done = set()
            jobs = []
            for p, idx in zip(sing, owners):
                for i in idx:
                    if i in done:
                        continue
                    done.add(i)
                    for a, edges, base in _duffy_patches(lo_cells[i], sz_cells[i], p):
                        jobs.append((p, a, edges, base))
            tol_patch = tol / 2 / npieces / max(1, len(jobs))
            for p, a, edges, base in jobs:
                v, e, c, x = _patch_integral(integrand, level, p, a, edges, base, tol_patch, max_cells,
                                             feature)
                value += v
                err += e
                cells += c
                excluded += x
    return QuadratureResult(value, err, cells, excluded)


def line_integral(fn: Callable, a: float, b: float, tol: float = 1e-10, points=None) -> float:
    """1D adaptive integral (QUADPACK)."""
    val, _ = integrate.quad(fn, a, b, epsabs=tol, epsrel=tol, limit=400, points=points)
    return float(val)


def principal_value(fn: Callable, a: float, b: float, pole: float, tol: float = 1e-11) -> float:
    """P.V. of ``∫_a^b fn(x)/(x - pole) dx`` via QUADPACK's Cauchy weight."""
    val, _ = integrate.quad(fn, a, b, weight="cauchy", wvar=pole, epsabs=tol, epsrel=tol, limit=400)
    return float(val)


def box_integral(fn: Callable, lo, hi, tol: float = 1e-12, order: int = 8, max_cells: int = 100_000) -> float:
    """Adaptive tensor Gauss–Legendre over a k-dimensional box (k ≥ 1), vectorised over cells.

    Each cell compares its order-``order`` rule with the sum over its 2^k children; the
    worst cells are split until the summed difference is below ``tol``.
    """
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    k = len(lo)
    if np.any(hi <= lo):
        return 0.0
    nodes, weights = tensor_rule(k, order)
    child = np.array(list(itertools.product((0.0, 0.5), repeat=k)))

    def rule(clo, csize):
        P = (clo[:, None, :] + nodes[None, :, :] * csize[:, None, :]).reshape(-1, k)
        vals = np.asarray(fn(P), float).reshape(len(clo), -1)
        return vals @ weights * np.prod(csize, axis=1)

    def split(clo, csize):
        half = csize / 2
        return ((clo[:, None, :] + child[None, :, :] * csize[:, None, :]).reshape(-1, k),
                np.repeat(half, len(child), axis=0))

    def evaluate(clo, csize):
        coarse = rule(clo, csize)
        flo, fsz = split(clo, csize)
        fine = rule(flo, fsz).reshape(len(clo), -1).sum(axis=1)
        return fine, np.abs(fine - coarse)

    clo, csize = lo[None, :], (hi - lo)[None, :]
    val, err = evaluate(clo, csize)
    used = 1
    while err.sum() > tol:
        if not np.all(np.isfinite(val)):
            raise QuadratureError("non-finite integrand", clo[int(np.argmax(~np.isfinite(val)))])
        order_ = np.argsort(-err, kind="stable")
        csum = np.cumsum(err[order_])
        pick = order_[: int(np.searchsorted(csum, err.sum() - 0.5 * tol)) + 1]
        used += len(pick) * 2 ** k
        if used > max_cells:
            j = int(np.argmax(err))
            raise QuadratureError(f"cell cap {max_cells} exceeded", clo[j] + csize[j] / 2)
        mask = np.zeros(len(err), dtype=bool)
        mask[pick] = True
        nlo, nsz = split(clo[mask], csize[mask])
        nval, nerr = evaluate(nlo, nsz)
        clo = np.concatenate([clo[~mask], nlo])
        csize = np.concatenate([csize[~mask], nsz])
        val = np.concatenate([val[~mask], nval])
        err = np.concatenate([err[~mask], nerr])
    return float(math.fsum(val))
