"""Cauchy fluxes on axis-aligned side surfaces and recovery of the underlying field by
cube averaging.

Orientation: a side surface (S, U) with S on the face x_j = s of the box U carries
``orientation = +1`` when U lies on the side x_j > s (inner normal +e_j) and -1 otherwise.
A field-backed flux is 𝓕(S) = -∫_S F·ν_in with F taken one-sidedly from inside U, so on a
box 𝓕(∂I) = div F(I) for boxes whose boundary carries no atoms.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import interpolate

from . import geometry as geo
from .fields import VectorFieldSpec
from .quadrature import QuadratureError, box_integral

log = logging.getLogger(__name__)

ONE_SIDED = 1e-12


class FaceSingularityError(ValueError):
    def __init__(self, message: str, s: float | None = None):
        super().__init__(message)
        self.s = s


class FluxError(RuntimeError):
    pass


@dataclass(frozen=True)
class SideSurface:
    """Face {x_j = s} × extent of a box; ``axis`` is 1-based (j ∈ {1..n})."""

    axis: int
    coordinate: float
    extent: tuple
    orientation: int = 1
    parent_box: tuple | None = None

    def __post_init__(self):
        n = len(self.extent) + 1
        if not 1 <= self.axis <= n:
            raise ValueError(f"axis {self.axis} outside 1..{n}")
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")
        for a, b in self.extent:
            if not b >= a:
                raise ValueError("face extent must have lo <= hi")
        if self.parent_box is not None:
            lo, hi = (np.asarray(v, float) for v in self.parent_box)
            j = self.axis - 1
            face = lo[j] if self.orientation == 1 else hi[j]
            if abs(face - self.coordinate) > 1e-12 * max(1.0, abs(face)):
                raise ValueError("side surface does not lie on the matching face of its parent box")
            others = [i for i in range(n) if i != j]
            for (a, b), i in zip(self.extent, others):
                if a < lo[i] - 1e-12 or b > hi[i] + 1e-12:
                    raise ValueError("side surface extends beyond its parent face")

    @property
    def dim(self) -> int:
        return len(self.extent) + 1

    @property
    def area(self) -> float:
        return float(np.prod([b - a for a, b in self.extent])) if self.extent else 1.0

    def flipped(self) -> "SideSurface":
        """The same face seen from the other side (-S)."""
        parent = None
        if self.parent_box is not None:
            lo, hi = (np.asarray(v, float).copy() for v in self.parent_box)
            j = self.axis - 1
            width = hi[j] - lo[j]
            if self.orientation == 1:
                lo[j], hi[j] = self.coordinate - width, self.coordinate
            else:
                lo[j], hi[j] = self.coordinate, self.coordinate + width
            parent = (tuple(lo), tuple(hi))
        return SideSurface(self.axis, self.coordinate, self.extent, -self.orientation, parent)

    def bisect(self, k: int = 0):
        """Split along the k-th extent direction into two disjoint faces."""
        a, b = self.extent[k]
        m = 0.5 * (a + b)
        e1 = tuple((a, m) if i == k else ext for i, ext in enumerate(self.extent))
        e2 = tuple((m, b) if i == k else ext for i, ext in enumerate(self.extent))
        return (SideSurface(self.axis, self.coordinate, e1, self.orientation),
                SideSurface(self.axis, self.coordinate, e2, self.orientation))


def box_faces(lo, hi) -> list:
    """The 2n faces of [lo, hi] as side surfaces of the open box (inner orientation)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = len(lo)
    parent = (tuple(lo), tuple(hi))
    faces = []
    for j in range(n):
        ext = tuple((lo[i], hi[i]) for i in range(n) if i != j)
        faces.append(SideSurface(j + 1, lo[j], ext, 1, parent))
        faces.append(SideSurface(j + 1, hi[j], ext, -1, parent))
    return faces


def box_exterior_faces(lo, hi) -> list:
    """-∂U: the same faces oriented toward the complement."""
    return [f.flipped() for f in box_faces(lo, hi)]


def _embed(axis, s, pts):
    """Insert the coordinate s at position axis-1 of (M, n-1) face points."""
    j = axis - 1
    s = np.broadcast_to(np.asarray(s, float), (len(pts),))
    return np.concatenate([pts[:, :j], s[:, None], pts[:, j:]], axis=1)


# ---------------------------------------------------------------- flux functionals

class FluxFunctional:
    """𝓕 on side surfaces, with the bounds used by the axioms.

    ``sigma_bound(lo, hi)`` bounds |𝓕(∂U)| for the open box U; ``h_bound(points)`` is the
    surface density bounding |𝓕(S)|.
    """

    dim: int = 2
    domain: tuple | None = None

    def eval(self, S: SideSurface) -> float:
        raise NotImplementedError

    def eval_slices(self, axis: int, s: np.ndarray, extent: tuple, orientation: int = 1) -> np.ndarray:
        return np.array([self.eval(SideSurface(axis, float(v), extent, orientation)) for v in np.atleast_1d(s)])

    def sigma_bound(self, lo, hi) -> float:
        return math.inf

    def h_bound(self, points: np.ndarray, axis: int | None = None) -> np.ndarray:
        return np.full(len(points), math.inf)

    def __call__(self, S: SideSurface) -> float:
        return self.eval(S)


class ZeroFlux(FluxFunctional):
    def __init__(self, dim: int = 2):
        self.dim = dim

    def eval(self, S):
        return 0.0

    def eval_slices(self, axis, s, extent, orientation=1):
        return np.zeros(len(np.atleast_1d(s)))

    def sigma_bound(self, lo, hi):
        return 0.0

    def h_bound(self, points, axis=None):
        return np.zeros(len(points))


class FieldFlux(FluxFunctional):
    """𝓕(S) = -orientation ∫_S F·e_j with F sampled just inside the parent."""

    def __init__(self, fld: VectorFieldSpec, tol: float = 1e-12, domain=None, order: int = 8):
        self.field = fld
        self.dim = fld.dim
        self.tol = tol
        self.domain = domain
        self.order = order

    def _check_face(self, axis, s, extent):
        j = axis - 1
        for p in self.field.singular_points:
            p = np.asarray(p, float)
            if abs(p[j] - s) <= 1e-12:
                rest = np.delete(p, j)
                if all(a - 1e-12 <= c <= b + 1e-12 for c, (a, b) in zip(rest, extent)):
                    raise FaceSingularityError(f"face x{axis} = {s} passes through a singular point", s)

    def eval_slices(self, axis, s, extent, orientation=1):
        s = np.atleast_1d(np.asarray(s, float))
        for v in s:
            self._check_face(axis, v, extent)
        j = axis - 1
        shift = orientation * ONE_SIDED * np.maximum(1.0, np.abs(s))
        lo = np.array([a for a, _ in extent])
        hi = np.array([b for _, b in extent])
        if len(extent) == 0:
            X = np.zeros((len(s), self.dim))
            X[:, j] = s + shift
            return -orientation * self.field.eval(X)[:, j]
        m = len(s)

        out = np.empty(m)
        for i in range(m):
            def face(P, i=i):
                Y = _embed(axis, s[i] + shift[i], P)
                return self.field.eval(Y)[:, j]

            try:
                out[i] = box_integral(face, lo, hi, self.tol * max(1.0, float(np.prod(hi - lo))), self.order)
            except QuadratureError as exc:
                raise FaceSingularityError(f"face x{axis} = {s[i]}: {exc}", float(s[i])) from exc
        return -orientation * out

    def eval(self, S):
        return float(self.eval_slices(S.axis, [S.coordinate], S.extent, S.orientation)[0])

    def sigma_bound(self, lo, hi):
        return self.field.div.total_variation(geo.box(lo, hi), closed=False)

    def h_bound(self, points, axis=None):
        """|F|, taking the larger one-sided value across the face when the axis is known."""
        if axis is None:
            return np.linalg.norm(self.field.eval(points), axis=1)
        e = np.zeros(self.dim)
        e[axis - 1] = 1.0
        shift = ONE_SIDED * np.maximum(1.0, np.abs(points[:, axis - 1]))[:, None] * e
        return np.maximum(np.linalg.norm(self.field.eval(points + shift), axis=1),
                          np.linalg.norm(self.field.eval(points - shift), axis=1))


class TabulatedFlux(FluxFunctional):
    """Flux values read from rows ``axis,s,c1,d1[,c2,d2],value`` (orientation +1).

    Rows sharing an axis and extent form a family in s, interpolated by a cubic spline
    (linear below four samples).  Orientation -1 returns the negated value.
    """

    def __init__(self, rows: Sequence[Sequence[float]], dim: int | None = None):
        fams: dict = {}
        for row in rows:
            row = [float(v) for v in row]
            if len(row) not in (5, 7):
                raise ValueError(f"flux row needs 5 (2D) or 7 (3D) numbers, got {len(row)}")
            n = 2 if len(row) == 5 else 3
            if dim is not None and n != dim:
                raise ValueError("mixed dimensions in flux table")
            dim = n
            axis = int(row[0])
            ext = tuple((row[2 + 2 * i], row[3 + 2 * i]) for i in range(n - 1))
            fams.setdefault((axis, ext), []).append((row[1], row[-1]))
        if not fams:
            raise ValueError("empty flux table")
        self.dim = dim
        self._fam = {}
        for key, pts in fams.items():
            pts.sort()
            s = np.array([p[0] for p in pts])
            v = np.array([p[1] for p in pts])
            if np.any(np.diff(s) <= 0):
                raise ValueError(f"duplicate s values in flux family {key}")
            if len(s) >= 4:
                self._fam[key] = (s, interpolate.CubicSpline(s, v))
            else:
                self._fam[key] = (s, lambda t, s=s, v=v: np.interp(t, s, v))
        self._keys = list(self._fam)

    @classmethod
    def from_csv(cls, path) -> "TabulatedFlux":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = [r for r in reader if r and not r[0].strip().startswith("#")]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        return cls(rows)

    def _family(self, axis, extent):
        ext = tuple((float(a), float(b)) for a, b in extent)
        fam = self._fam.get((axis, ext))
        if fam is None:
            for (ax, e), val in self._fam.items():
                if ax == axis and np.allclose(np.array(e), np.array(ext), rtol=0, atol=1e-12):
                    return val
            raise FluxError(f"no tabulated faces for axis {axis} with extent {ext}")
        return fam

    def eval_slices(self, axis, s, extent, orientation=1):
        grid, fn = self._family(axis, extent)
        s = np.atleast_1d(np.asarray(s, float))
        tol = 1e-12 * max(1.0, float(np.max(np.abs(grid))))
        if np.any(s < grid[0] - tol) or np.any(s > grid[-1] + tol):
            raise FluxError(f"s outside the tabulated range [{grid[0]}, {grid[-1]}]")
        return orientation * np.asarray(fn(s), float)

    def eval(self, S):
        return float(self.eval_slices(S.axis, [S.coordinate], S.extent, S.orientation)[0])

    def s_range(self, axis, extent):
        grid = self._family(axis, extent)[0]
        return float(grid[0]), float(grid[-1])


def _is_number(v) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def flux_from_field(fld: VectorFieldSpec, S: SideSurface, tol: float = 1e-12) -> float:
    """-orientation ∫_S F·e_j dH^{n-1}, one-sided from the parent."""
    return FieldFlux(fld, tol).eval(S)


# ---------------------------------------------------------------- μ^j and reconstruction

def _slice_extent(lo, hi, j):
    return tuple((lo[i], hi[i]) for i in range(len(lo)) if i != j)


def mu_j(flux: FluxFunctional, lo, hi, axis: int, order: int = 8, tol: float = 1e-13,
         max_perturb: int = 4) -> float:
    """μ^j(I) = ∫_{a_j}^{b_j} 𝓕(I_{j,s}) ds over the box I = [lo, hi]; ``axis`` is 1-based.

    Nodes whose face hits a singularity are nudged by a small fraction of the width and
    the nudge is logged.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    j = axis - 1
    extent = _slice_extent(lo, hi, j)
    a, b = lo[j], hi[j]
    width = b - a

    def slices(s):
        s = np.asarray(s, float).copy()
        for attempt in range(max_perturb + 1):
            try:
                return flux.eval_slices(axis, s, extent, 1)
            except FaceSingularityError as exc:
                if attempt == max_perturb or exc.s is None:
                    raise FluxError(f"face evaluation failed at s = {exc.s}") from exc
                k = int(np.argmin(np.abs(s - exc.s)))
                nudge = 1e-7 * width * (1 if attempt % 2 == 0 else -1) * (attempt + 1)
                log.info("face at s=%r hits a singular locus; nudged by %.3e", s[k], nudge)
                s[k] += nudge

    return box_integral(lambda P: slices(P[:, 0]), [a], [b], tol * max(1.0, width), order)


@dataclass
class Reconstruction:
    points: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    window: float
    skipped: list = field(default_factory=list)

    def rms_error(self, reference: Callable) -> float:
        """Relative RMS error of the valid points against ``reference(points)``."""
        P = self.points[self.valid]
        ref = np.asarray(reference(P), float)
        diff = self.values[self.valid] - ref
        denom = math.sqrt(np.mean(np.sum(ref * ref, axis=1)))
        num = math.sqrt(np.mean(np.sum(diff * diff, axis=1)))
        return num / denom if denom > 0 else num

    def to_rows(self):
        return np.concatenate([self.points, self.values], axis=1)


def grid_points(lo, hi, spacing: float, exclude: Sequence = ()) -> np.ndarray:
    """Regular grid on [lo, hi] minus closed balls given as (center, radius)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    axes = [np.arange(a, b + 0.5 * spacing, spacing) for a, b in zip(lo, hi)]
    P = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    keep = np.ones(len(P), dtype=bool)
    for c, r in exclude:
        keep &= np.linalg.norm(P - np.asarray(c, float), axis=1) > r
    return P[keep]


def reconstruct_field(flux: FluxFunctional, points, window: float, order: int = 8,
                      tol: float = 1e-13) -> Reconstruction:
    """f_j(x) = -μ^j(Q(x, window)) / |Q| with Q the cube of side ``window`` centred at x.

    Points whose cube leaves ``flux.domain`` or whose faces cannot be evaluated are flagged
    invalid and listed in ``skipped``.
    """
    P = np.atleast_2d(np.asarray(points, float))
    n = P.shape[1]
    vals = np.full(P.shape, np.nan)
    valid = np.ones(len(P), dtype=bool)
    skipped = []
    half = 0.5 * window
    vol = window ** n
    for i, x in enumerate(P):
        lo, hi = x - half, x + half
        if flux.domain is not None:
            dlo, dhi = (np.asarray(v, float) for v in flux.domain)
            if np.any(lo < dlo) or np.any(hi > dhi):
                valid[i] = False
                skipped.append((i, "cube leaves the domain"))
                continue
        try:
            for j in range(n):
                vals[i, j] = -mu_j(flux, lo, hi, j + 1, order, tol) / vol
        except (FluxError, QuadratureError) as exc:
            valid[i] = False
            vals[i] = np.nan
            skipped.append((i, str(exc)))
    return Reconstruction(P, vals, valid, window, skipped)


def observed_orders(windows: Sequence[float], errors: Sequence[float], floor: float = 1e-10) -> list:
    """Pairwise log2 error ratios as the window halves; None where both errors sit below floor."""
    out = []
    for (w0, e0), (w1, e1) in zip(zip(windows, errors), zip(windows[1:], errors[1:])):
        if e0 <= floor and e1 <= floor:
            out.append(None)
        else:
            out.append(math.log(e0 / max(e1, 1e-300)) / math.log(w0 / w1))
    return out


# ---------------------------------------------------------------- axioms

@dataclass
class AxiomReport:
    boxes: list
    additivity: list
    sigma: list
    h: list
    orientation_jump: list
    tol: float

    @property
    def passed(self) -> dict:
        return {
            "additivity": all(r["pass"] for r in self.additivity),
            "sigma": all(r["pass"] for r in self.sigma),
            "h": all(r["pass"] for r in self.h),
        }

    @property
    def jump_detected(self) -> bool:
        return any(abs(r["jump"]) > self.tol for r in self.orientation_jump)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "jump_detected": self.jump_detected, "additivity": self.additivity,
                "sigma": self.sigma, "h": self.h, "orientation_jump": self.orientation_jump, "tol": self.tol}


def boundary_flux(flux: FluxFunctional, lo, hi, exterior: bool = False) -> float:
    faces = box_exterior_faces(lo, hi) if exterior else box_faces(lo, hi)
    return math.fsum(flux.eval(f) for f in faces)


def _h_integral(flux, S: SideSurface, tol):
    if not S.extent:
        return float(flux.h_bound(np.array([[S.coordinate]]), S.axis)[0])
    lo = [a for a, _ in S.extent]
    hi = [b for _, b in S.extent]
    return box_integral(lambda P: flux.h_bound(_embed(S.axis, S.coordinate, P), S.axis), lo, hi, tol, 6)


def verify_axioms(flux: FluxFunctional, boxes: Sequence, tol: float = 1e-8) -> AxiomReport:
    """Additivity under face bisection, |𝓕(∂U)| ≤ σ(U), |𝓕(S)| ≤ ∫_S h, and the size of
    𝓕(∂U) + 𝓕(-∂U) (nonzero when the flux jumps across ∂U)."""
    add, sig, hb, jump = [], [], [], []
    for b_i, (lo, hi) in enumerate(boxes):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        faces = box_faces(lo, hi)
        values = [flux.eval(f) for f in faces]
        for f_i, (S, v) in enumerate(zip(faces, values)):
            if S.extent:
                s1, s2 = S.bisect(0)
                parts = flux.eval(s1) + flux.eval(s2)
                add.append({"box": b_i, "face": f_i, "whole": v, "parts": parts,
                            "pass": abs(v - parts) <= tol * max(1.0, abs(v))})
            hv = _h_integral(flux, S, tol)
            hb.append({"box": b_i, "face": f_i, "flux": v, "bound": hv, "pass": abs(v) <= hv + tol})
        total = math.fsum(values)
        sb = flux.sigma_bound(lo, hi)
        sig.append({"box": b_i, "flux": total, "bound": sb, "pass": abs(total) <= sb + tol})
        ext = boundary_flux(flux, lo, hi, exterior=True)
        jump.append({"box": b_i, "interior": total, "exterior": ext, "jump": total + ext})
    return AxiomReport([(np.asarray(l).tolist(), np.asarray(h).tolist()) for l, h in boxes], add, sig, hb, jump,
                       tol)
