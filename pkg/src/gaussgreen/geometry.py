"""Open sets described by their signed distance (positive inside)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .quadrature import Region

KINDS = ("Box", "Ball", "Polygon2D", "GraphDomain", "Implicit", "Complement", "Union")
BRUTE_FORCE_LIMIT = 100_000
GRAD_FLAG_TOL = 0.05


class ConfigurationError(ValueError):
    pass


class GradientResult(NamedTuple):
    vector: np.ndarray
    flag: np.ndarray


def _points(x, dim: int):
    p = np.asarray(x, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got shape {p.shape}")
    return p, single


# ---------------------------------------------------------------- polyline distance

def segment_distance(P, A, B, chunk: int = 65536):
    """Distance from points P (N,2) to the polyline segments A[i]-B[i] and the nearest point."""
    N = len(P)
    dist = np.empty(N)
    near = np.empty((N, 2))
    D = B - A
    L2 = np.einsum("ij,ij->i", D, D)
    L2 = np.where(L2 > 0, L2, 1.0)
    step = max(1, chunk // max(1, len(A)))
    for s in range(0, N, step):
        Q = P[s:s + step]
        rel = Q[:, None, :] - A[None, :, :]
        t = np.clip(np.einsum("nmk,mk->nm", rel, D) / L2, 0.0, 1.0)
        C = A[None, :, :] + t[..., None] * D[None, :, :]
        d2 = np.sum((Q[:, None, :] - C) ** 2, axis=2)
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(Q))
        dist[s:s + step] = np.sqrt(d2[rows, j])
        near[s:s + step] = C[rows, j]
    return dist, near


def _even_odd_inside(P, V):
    x, y = P[:, 0:1], P[:, 1:2]
    x0, y0 = V[:, 0][None, :], V[:, 1][None, :]
    W = np.roll(V, -1, axis=0)
    x1, y1 = W[:, 0][None, :], W[:, 1][None, :]
    crosses = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    hit = crosses & (x < xint)
    return (np.count_nonzero(hit, axis=1) % 2) == 1


class _PolylineDistance:
    """Exact distance to a set of segments, with KD-tree candidate pruning for big sets."""

    def __init__(self, A, B):
        self.A = np.asarray(A, float)
        self.B = np.asarray(B, float)
        self.tree = None
        if len(self.A) > 64:
            mids = 0.5 * (self.A + self.B)
            self.tree = cKDTree(mids)
            self.half = 0.5 * np.max(np.linalg.norm(self.B - self.A, axis=1))

    def __call__(self, P):
        if self.tree is None:
            return segment_distance(P, self.A, self.B)
        k = min(16, len(self.A))
        _, idx = self.tree.query(P, k=k)
        A = self.A[idx]
        D = self.B[idx] - A
        L2 = np.einsum("nmk,nmk->nm", D, D)
        L2 = np.where(L2 > 0, L2, 1.0)
        t = np.clip(np.einsum("nmk,nmk->nm", P[:, None, :] - A, D) / L2, 0.0, 1.0)
        C = A + t[..., None] * D
        d2 = np.sum((P[:, None, :] - C) ** 2, axis=2)
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(P))
        return np.sqrt(d2[rows, j]), C[rows, j]


# ---------------------------------------------------------------- descriptors

@dataclass(frozen=True, eq=False)
class SetDescriptor:
    """An open set U in R^n (n = 2 or 3).

    ``bounds`` is a box containing U (or, for unbounded kinds, the window of interest).
    Build instances with the module-level constructors (``box``, ``ball``, ...).
    """

    kind: str
    params: dict
    dim: int
    bounds: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown descriptor kind {self.kind!r}")
        if self.dim not in (2, 3):
            raise ConfigurationError("dimension must be 2 or 3")

    @property
    def bounded(self) -> bool:
        if self.kind == "GraphDomain":
            return False
        if self.kind == "Complement":
            return False
        if self.kind == "Union":
            return self.params["a"].bounded and self.params["b"].bounded
        return True

    def bounding_box(self, eps_max: float = 0.0):
        lo, hi = (np.asarray(b, float) for b in self.bounds)
        pad = max(float(eps_max), 0.0)
        return lo - pad, hi + pad

    def signed_distance(self, x):
        p, single = _points(x, self.dim)
        d = _DIST[self.kind](self, p)
        return float(d[0]) if single else d

    __call__ = signed_distance

    def contains(self, x, closed: bool = False, tol: float = 0.0):
        d = self.signed_distance(x)
        return d >= -tol if closed else d > tol

    def region(self) -> Region:
        """Quadrature region; a complement is unbounded and must be intersected with a bounded set."""
        lo, hi = self.bounding_box()
        if self.kind == "Complement":
            lo, hi = np.full(self.dim, -np.inf), np.full(self.dim, np.inf)
        return Region(self.signed_distance, lo, hi, self.feature_size())

    def feature_size(self) -> float:
        """Smallest length scale of the boundary (shortest edge, radius, grid spacing)."""
        k = self.kind
        if k == "Box":
            return float(np.min(self.params["hi"] - self.params["lo"]))
        if k == "Ball":
            return self.params["radius"] or math.inf
        if k == "Polygon2D":
            V = self.params["vertices"]
            return float(np.min(np.linalg.norm(np.roll(V, -1, axis=0) - V, axis=1)))
        if k == "GraphDomain":
            return float(np.min(np.hypot(np.diff(self.params["xs"]), np.diff(self.params["ys"]))))
        if k == "Complement":
            return self.params["inner"].feature_size()
        return 4 * self.params["resolution"]

    def inradius_estimate(self) -> float:
        """Largest d over a coarse sample of the bounding box."""
        lo, hi = self.bounding_box()
        n = 65 if self.dim == 2 else 25
        axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        return float(np.max(self.signed_distance(pts)))

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for k, v in self.params.items():
            if isinstance(v, SetDescriptor):
                out[k] = v.to_dict()
            elif isinstance(v, np.ndarray):
                out[k] = v.tolist()
            elif callable(v):
                if k == "level" and "expression" in self.params:
                    continue
                raise ConfigurationError(f"parameter {k!r} of {self.kind} is a function handle and cannot be serialized")
            else:
                out[k] = v
        return out


def box(lo: Sequence[float], hi: Sequence[float]) -> SetDescriptor:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ConfigurationError("box needs lo < hi componentwise")
    return SetDescriptor("Box", {"lo": lo, "hi": hi}, len(lo), (lo, hi))


def ball(center: Sequence[float], radius: float) -> SetDescriptor:
    c = np.asarray(center, float)
    if radius < 0:
        raise ConfigurationError("radius must be nonnegative")
    return SetDescriptor("Ball", {"center": c, "radius": float(radius)}, len(c), (c - radius, c + radius))


def polygon(vertices) -> SetDescriptor:
    """Simple polygon (even-odd interior).  Two vertices give a segment with empty interior."""
    V = np.asarray(vertices, float)
    if V.ndim != 2 or V.shape[1] != 2 or len(V) < 2:
        raise ConfigurationError("polygon needs at least two 2D vertices")
    if np.allclose(V[0], V[-1]) and len(V) > 2:
        V = V[:-1]
    return SetDescriptor("Polygon2D", {"vertices": V}, 2, (V.min(axis=0), V.max(axis=0)))


def graph_domain(xs=None, ys=None, window=(0.0, 1.0), height: float = 1.0, gamma: Callable | None = None,
                 samples: int = 2001) -> SetDescriptor:
    """{x2 > gamma(x1)} with gamma piecewise linear over ``window`` and constant outside it.

    Either give the vertices ``xs, ys`` or a handle ``gamma`` (sampled on the window).
    ``height`` sets how far above the graph the bounding window reaches.
    """
    a, b = map(float, window)
    if gamma is not None:
        xs = np.linspace(a, b, samples)
        ys = np.asarray(gamma(xs), float)
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.ndim != 1 or xs.shape != ys.shape or np.any(np.diff(xs) <= 0):
        raise ConfigurationError("graph needs increasing abscissae and matching ordinates")
    lo = np.array([a, ys.min() - height])
    hi = np.array([b, ys.max() + height])
    params = {"xs": xs, "ys": ys, "window": [a, b], "height": float(height)}
    return SetDescriptor("GraphDomain", params, 2, (lo, hi))


def sawtooth(teeth: int = 5, amplitude: float = 0.1, window=(0.0, 1.0), height: float = 1.0) -> SetDescriptor:
    a, b = window
    xs = np.linspace(a, b, 2 * teeth + 1)
    ys = np.where(np.arange(len(xs)) % 2 == 1, amplitude, 0.0)
    return graph_domain(xs, ys, window, height)


def implicit(level: Callable | str, lo, hi, resolution: float | None = None) -> SetDescriptor:
    """{level > 0} for a level function; the distance is rebuilt from its zero set.

    ``level`` may be a string expression in x, y (, z) using numpy functions.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    params = {"lo": lo, "hi": hi}
    if isinstance(level, str):
        params["expression"] = level
        level = _compile_expression(level, len(lo))
    params["level"] = level
    if resolution is None:
        resolution = float(np.max(hi - lo)) / (1024 if len(lo) == 2 else 96)
    params["resolution"] = float(resolution)
    return SetDescriptor("Implicit", params, len(lo), (lo, hi))


def complement(inner: SetDescriptor) -> SetDescriptor:
    """Interior of the complement of the closure of ``inner``; bounds are those of ``inner``."""
    return SetDescriptor("Complement", {"inner": inner}, inner.dim, inner.bounds)


def union(a: SetDescriptor, b: SetDescriptor, resolution: float | None = None) -> SetDescriptor:
    if a.dim != b.dim:
        raise ConfigurationError("union operands differ in dimension")
    lo = np.minimum(a.bounds[0], b.bounds[0])
    hi = np.maximum(a.bounds[1], b.bounds[1])
    if resolution is None:
        resolution = float(np.max(hi - lo)) / (1024 if a.dim == 2 else 96)
    return SetDescriptor("Union", {"a": a, "b": b, "resolution": float(resolution)}, a.dim, (lo, hi))


def l_shape(size: float = 1.0) -> SetDescriptor:
    s = size
    return polygon([(0, 0), (s, 0), (s, s / 2), (s / 2, s / 2), (s / 2, s), (0, s)])


_SAFE = {k: getattr(np, k) for k in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "minimum", "maximum",
                                     "hypot", "arctan2", "pi", "tanh", "cosh", "sinh", "where")}


def _compile_expression(expr: str, dim: int) -> Callable:
    code = compile(expr, "<level>", "eval")
    for name in code.co_names:
        if name not in _SAFE and name not in ("x", "y", "z"):
            raise ConfigurationError(f"name {name!r} not allowed in level expression")

    def level(p):
        env = dict(_SAFE, x=p[:, 0], y=p[:, 1])
        if dim == 3:
            env["z"] = p[:, 2]
        return np.broadcast_to(eval(code, {"__builtins__": {}}, env), (len(p),)).astype(float)

    return level


def from_dict(data: dict) -> SetDescriptor:
    kind = data.get("kind")
    p = {k: v for k, v in data.items() if k != "kind"}
    try:
        if kind == "Box":
            return box(p["lo"], p["hi"])
        if kind == "Ball":
            return ball(p["center"], p["radius"])
        if kind == "Polygon2D":
            return polygon(p["vertices"])
        if kind == "LShape":
            return l_shape(p.get("size", 1.0))
        if kind == "GraphDomain":
            if "teeth" in p:
                return sawtooth(p["teeth"], p.get("amplitude", 0.1), p.get("window", (0, 1)), p.get("height", 1.0))
            return graph_domain(p["xs"], p["ys"], p.get("window", (p["xs"][0], p["xs"][-1])), p.get("height", 1.0))
        if kind == "Implicit":
            return implicit(p["expression"], p["lo"], p["hi"], p.get("resolution"))
        if kind == "Complement":
            return complement(from_dict(p["inner"]))
        if kind == "Union":
            return union(from_dict(p["a"]), from_dict(p["b"]), p.get("resolution"))
    except KeyError as exc:
        raise ConfigurationError(f"descriptor {kind!r} missing parameter {exc.args[0]!r}") from None
    raise ConfigurationError(f"unknown descriptor kind {kind!r}")


# ---------------------------------------------------------------- distance per kind

def _box_sdf(s, p):
    lo, hi = s.params["lo"], s.params["hi"]
    c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    q = np.abs(p - c) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return -(outside + inside)


def _ball_sdf(s, p):
    return s.params["radius"] - np.linalg.norm(p - s.params["center"], axis=1)


def _polygon_segments(V):
    if len(V) == 2:
        return V[:1], V[1:]
    return V, np.roll(V, -1, axis=0)


def _polygon_near(s, p):
    A, B = _polygon_segments(s.params["vertices"])
    key = "polyline"
    if key not in s._cache:
        s._cache[key] = _PolylineDistance(A, B)
    dist, near = s._cache[key](p)
    if len(s.params["vertices"]) == 2:
        sign = -np.ones(len(p))
    else:
        sign = np.where(_even_odd_inside(p, s.params["vertices"]), 1.0, -1.0)
    return sign * dist, near


def _graph_segments(s):
    xs, ys = s.params["xs"], s.params["ys"]
    a, b = s.params["window"]
    ext = 10.0 * (b - a) + 10.0 * s.params["height"]
    X = np.concatenate([[xs[0] - ext], xs, [xs[-1] + ext]])
    Y = np.concatenate([[ys[0]], ys, [ys[-1]]])
    V = np.stack([X, Y], axis=1)
    return V[:-1], V[1:]


def _graph_near(s, p):
    if "polyline" not in s._cache:
        s._cache["polyline"] = _PolylineDistance(*_graph_segments(s))
    dist, near = s._cache["polyline"](p)
    g = np.interp(p[:, 0], s.params["xs"], s.params["ys"])
    sign = np.where(p[:, 1] > g, 1.0, -1.0)
    return sign * dist, near


def _grid_level(s):
    if s.kind == "Implicit":
        return s.params["level"]
    a, b = s.params["a"], s.params["b"]
    return lambda p: np.maximum(a.signed_distance(p), b.signed_distance(p))


def _grid_backend(s):
    """Exact distance to the extracted zero polyline, or fast marching when it is large."""
    if "backend" in s._cache:
        return s._cache["backend"]
    level = _grid_level(s)
    h = s.params["resolution"]
    lo, hi = s.bounding_box()
    pad = 4 * h
    field_ = SampledField(level, lo - pad, hi + pad, h)
    if s.dim == 2:
        segs = field_.zero_segments(0.0)
        if len(segs) <= BRUTE_FORCE_LIMIT and len(segs) > 0:
            s._cache["backend"] = ("brute", _PolylineDistance(segs[:, 0], segs[:, 1]), level)
            return s._cache["backend"]
    import skfmm

    phi = field_.values
    dist = skfmm.distance(phi, dx=[h] * s.dim)
    interp = RegularGridInterpolator(field_.axes, np.asarray(dist), bounds_error=False, fill_value=None)
    s._cache["backend"] = ("fmm", interp, level)
    return s._cache["backend"]


def _grid_sdf(s, p):
    mode, obj, level = _grid_backend(s)
    if mode == "brute":
        dist, _ = obj(p)
        return np.where(level(p) > 0, dist, -dist)
    return obj(p)


def _dist_complement(s, p):
    return -s.params["inner"].signed_distance(p)


_DIST = {
    "Box": _box_sdf,
    "Ball": _ball_sdf,
    "Polygon2D": lambda s, p: _polygon_near(s, p)[0],
    "GraphDomain": lambda s, p: _graph_near(s, p)[0],
    "Implicit": _grid_sdf,
    "Union": _grid_sdf,
    "Complement": _dist_complement,
}


def signed_distance(s: SetDescriptor, x):
    return s.signed_distance(x)


# ---------------------------------------------------------------- gradient

def _closed_gradient(s, p):
    kind = s.kind
    if kind == "Ball":
        r = p - s.params["center"]
        n = np.linalg.norm(r, axis=1, keepdims=True)
        return -r / np.where(n > 0, n, 1.0)
    if kind == "Box":
        lo, hi = s.params["lo"], s.params["hi"]
        c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        sg = np.where(p >= c, 1.0, -1.0)
        q = np.abs(p - c) - half
        out = np.maximum(q, 0.0)
        on = np.linalg.norm(out, axis=1, keepdims=True)
        g_out = -sg * out / np.where(on > 0, on, 1.0)
        k = np.argmax(q, axis=1)
        g_in = np.zeros_like(p)
        g_in[np.arange(len(p)), k] = -sg[np.arange(len(p)), k]
        return np.where(on > 0, g_out, g_in)
    if kind in ("Polygon2D", "GraphDomain"):
        d, near = (_polygon_near if kind == "Polygon2D" else _graph_near)(s, p)
        r = p - near
        n = np.linalg.norm(r, axis=1, keepdims=True)
        return np.sign(d)[:, None] * r / np.where(n > 0, n, 1.0)
    if kind == "Complement":
        return -_closed_gradient(s.params["inner"], p)
    return _fd_gradient(s, p, _grid_step(s))


def _grid_step(s):
    if s.kind in ("Implicit", "Union"):
        mode = _grid_backend(s)[0]
        return 0.5 * s.params["resolution"] if mode == "fmm" else 1e-6
    if s.kind == "Complement":
        return _grid_step(s.params["inner"])
    return 1e-7


def _fd_gradient(s, p, h):
    g = np.empty_like(p)
    for k in range(s.dim):
        e = np.zeros(s.dim)
        e[k] = h
        g[:, k] = (s.signed_distance(p + e) - s.signed_distance(p - e)) / (2 * h)
    return g


def distance_gradient(s: SetDescriptor, x) -> GradientResult:
    """∇d with a degeneracy flag.

    Closed forms are used where available; a central-difference check runs alongside and
    points where its norm departs from 1 by more than 0.05 (medial axis, corners) are
    flagged and get the normalized difference quotient instead.
    """
    p, single = _points(x, s.dim)
    g = _closed_gradient(s, p)
    fd = _fd_gradient(s, p, _grid_step(s))
    nfd = np.linalg.norm(fd, axis=1)
    flag = np.abs(nfd - 1.0) > GRAD_FLAG_TOL
    if flag.any():
        g = g.copy()
        g[flag] = fd[flag] / np.where(nfd[flag] > 0, nfd[flag], 1.0)[:, None]
    if single:
        return GradientResult(g[0], bool(flag[0]))
    return GradientResult(g, flag)


# ---------------------------------------------------------------- sampled fields and meshes

class SampledField:
    """Node samples of a scalar function on a regular grid covering ``[lo, hi]``."""

    def __init__(self, fn: Callable, lo, hi, resolution: float):
        self.fn = fn
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        counts = np.maximum(2, np.ceil((hi - lo) / resolution).astype(int))
        self.h = (hi - lo) / counts
        self.lo = lo
        self.axes = [lo[k] + self.h[k] * np.arange(counts[k] + 1) for k in range(len(lo))]
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        self.values = np.asarray(fn(pts), float).reshape(mesh[0].shape)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def zero_segments(self, level: float):
        return _marching_squares(self, level)[0]


# bits: corner 0=(i,j) 1=(i+1,j) 2=(i+1,j+1) 3=(i,j+1); edges e_k joins corner k and k+1
def _ms_tables():
    """Segments (exit edge -> enter edge) per case; interior lies to the left."""
    table = {}
    for case in range(16):
        inside = [(case >> k) & 1 for k in range(4)]
        enters, exits = [], []
        for e in range(4):
            a, b = inside[e], inside[(e + 1) % 4]
            if a and not b:
                exits.append(e)
            elif b and not a:
                enters.append(e)
        if not exits:
            table[case] = ([], [])
            continue
        if len(exits) == 1:
            table[case] = ([(exits[0], enters[0])], [(exits[0], enters[0])])
            continue
        # saddle: separated (centre outside) pairs each exit with the enter of its own
        # inside run, which is the enter preceding it going counterclockwise
        sep, con = [], []
        for x in exits:
            prev = max([e for e in enters if e < x], default=max(enters))
            sep.append((x, prev))
            nxt = min([e for e in enters if e > x], default=min(enters))
            con.append((x, nxt))
        table[case] = (sep, con)
    return table


_MS = _ms_tables()


def _marching_squares(field_: SampledField, level: float, center_fn: Callable | None = None):
    """Oriented segments of {f = level} with the region {f > level} on the left.

    Returns (segments (m,2,2), vertex ids (m,2), cell ids (m,), n_cells_cut, n_ambiguous, cell index arrays).
    """
    V = field_.values - level
    X, Y = field_.axes
    nx, ny = V.shape[0] - 1, V.shape[1] - 1
    ins = V > 0
    b0, b1, b2, b3 = ins[:-1, :-1], ins[1:, :-1], ins[1:, 1:], ins[:-1, 1:]
    case = b0 * 1 + b1 * 2 + b2 * 4 + b3 * 8
    ci, cj = np.nonzero((case > 0) & (case < 15))
    cases = case[ci, cj]
    saddle = (cases == 5) | (cases == 10)
    centre_in = np.zeros(len(ci), dtype=bool)
    if saddle.any():
        fn = center_fn or field_.fn
        cpts = np.stack([X[ci[saddle]] + 0.5 * field_.h[0], Y[cj[saddle]] + 0.5 * field_.h[1]], axis=1)
        centre_in[saddle] = np.asarray(fn(cpts), float) - level > 0

    # edge crossing points; edge ids: horizontal (i,j)->(i+1,j) and vertical (i,j)->(i,j+1)
    nh = nx * (ny + 1)

    def hpoint(i, j):
        va, vb = V[i, j], V[i + 1, j]
        t = va / (va - vb)
        return np.stack([X[i] + t * field_.h[0], Y[j]], axis=1), i * (ny + 1) + j

    def vpoint(i, j):
        va, vb = V[i, j], V[i, j + 1]
        t = va / (va - vb)
        return np.stack([X[i], Y[j] + t * field_.h[1]], axis=1), nh + i * ny + j

    def edge_point(e, i, j):
        if e == 0:
            return hpoint(i, j)
        if e == 1:
            return vpoint(i + 1, j)
        if e == 2:
            return hpoint(i, j + 1)
        return vpoint(i, j)

    segs, vids, owner = [], [], []
    for c in np.unique(cases):
        for centre in (False, True):
            m = (cases == c) & (centre_in == centre)
            if not m.any():
                continue
            sep, con = _MS[int(c)]
            pairs = con if centre else sep
            i, j = ci[m], cj[m]
            for ex, en in pairs:
                P, pid = edge_point(ex, i, j)
                Q, qid = edge_point(en, i, j)
                segs.append(np.stack([P, Q], axis=1))
                vids.append(np.stack([pid, qid], axis=1))
                owner.append(np.nonzero(m)[0])
    if not segs:
        return np.zeros((0, 2, 2)), np.zeros((0, 2), dtype=int), np.zeros(0, dtype=int), 0, 0, (ci, cj)
    segs = np.concatenate(segs)
    vids = np.concatenate(vids)
    owner = np.concatenate(owner)
    order = np.lexsort((vids[:, 0], owner))
    segs, vids, owner = segs[order], vids[order], owner[order]
    return segs, vids, owner, len(ci), int(saddle.sum()), (ci, cj)


@dataclass
class SurfaceMesh:
    """Facets approximating a level set, with inner normals and quadrature nodes."""

    dim: int
    level: float
    centroids: np.ndarray
    normals: np.ndarray
    measures: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    vertices: np.ndarray
    vertex_ids: np.ndarray | None = None
    good: bool = True
    degenerate_fraction: float = 0.0
    ambiguous_fraction: float = 0.0

    @property
    def total_measure(self) -> float:
        return float(math.fsum(self.measures))

    def __len__(self) -> int:
        return len(self.measures)

    def facets(self):
        return list(zip(self.centroids, self.normals, self.measures))

    def is_closed(self) -> bool:
        """Every vertex is shared by exactly two segments (2D Euler check)."""
        if self.dim != 2 or self.vertex_ids is None:
            raise NotImplementedError("closedness check is implemented for 2D meshes")
        if len(self.vertex_ids) == 0:
            return True
        starts = np.bincount(self.vertex_ids[:, 0], minlength=self.vertex_ids.max() + 1)
        ends = np.bincount(self.vertex_ids[:, 1], minlength=self.vertex_ids.max() + 1)
        used = (starts + ends) > 0
        return bool(np.all(starts[used] == 1) and np.all(ends[used] == 1))

    def to_csv(self, path) -> None:
        cols = ["x", "y", "z"][: self.dim] + ["nx", "ny", "nz"][: self.dim] + ["measure"]
        data = np.column_stack([self.centroids, self.normals, self.measures])
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")


def _empty_mesh(dim, level):
    z = np.zeros((0, dim))
    return SurfaceMesh(dim, level, z, z.copy(), np.zeros(0), np.zeros((0, 1, dim)), np.zeros((0, 1)),
                       np.zeros((0, dim, dim)), np.zeros((0, 2), dtype=int))


def _segment_mesh(segs, vids, level, order):
    P, Q = segs[:, 0], segs[:, 1]
    D = Q - P
    length = np.linalg.norm(D, axis=1)
    keep = length > 0
    P, Q, D, length, vids = P[keep], Q[keep], D[keep], length[keep], vids[keep]
    normals = np.stack([-D[:, 1], D[:, 0]], axis=1) / length[:, None]
    from .quadrature import gauss_01

    t, w = gauss_01(order)
    nodes = P[:, None, :] + t[None, :, None] * D[:, None, :]
    weights = length[:, None] * w[None, :]
    return SurfaceMesh(2, level, 0.5 * (P + Q), normals, length, nodes, weights, np.stack([P, Q], axis=1), vids)


def _crossing_gradient(field_, segs, owner, cells):
    """|∇| of the bilinear interpolant at each segment midpoint (in grid units of the field)."""
    ci, cj = cells
    V = field_.values
    i, j = ci[owner], cj[owner]
    v00, v10, v11, v01 = V[i, j], V[i + 1, j], V[i + 1, j + 1], V[i, j + 1]
    mid = 0.5 * (segs[:, 0] + segs[:, 1])
    s = (mid[:, 0] - field_.axes[0][i]) / field_.h[0]
    t = (mid[:, 1] - field_.axes[1][j]) / field_.h[1]
    gx = ((1 - t) * (v10 - v00) + t * (v11 - v01)) / field_.h[0]
    gy = ((1 - s) * (v01 - v00) + s * (v11 - v10)) / field_.h[1]
    return np.hypot(gx, gy)


DEGENERATE_GRAD = 0.1
DEGENERATE_FRACTION = 0.005
AMBIGUOUS_FRACTION = 0.001


def contour(field_: SampledField, level: float, order: int = 6, center_fn: Callable | None = None) -> SurfaceMesh:
    """Level set {f = level} of a sampled field, with normals toward increasing f."""
    if field_.dim == 3:
        return _contour3d(field_, level, order)
    segs, vids, owner, ncut, namb, cells = _marching_squares(field_, level, center_fn)
    if len(segs) == 0:
        return _empty_mesh(2, level)
    gnorm = _crossing_gradient(field_, segs, owner, cells)
    bad_cells = np.unique(owner[gnorm < DEGENERATE_GRAD])
    mesh = _segment_mesh(segs, vids, level, order)
    mesh.degenerate_fraction = len(bad_cells) / max(ncut, 1)
    mesh.ambiguous_fraction = namb / max(ncut, 1)
    mesh.good = mesh.degenerate_fraction <= DEGENERATE_FRACTION and mesh.ambiguous_fraction <= AMBIGUOUS_FRACTION
    return mesh


def _contour3d(field_, level, order):
    from scipy.ndimage import map_coordinates
    from skimage.measure import marching_cubes

    V = field_.values
    if not (V.min() < level < V.max()):
        return _empty_mesh(3, level)
    verts, faces, _, _ = marching_cubes(V, level=level, spacing=tuple(field_.h))
    verts = verts + field_.lo
    T = verts[faces]
    cr = np.cross(T[:, 1] - T[:, 0], T[:, 2] - T[:, 0])
    area2 = np.linalg.norm(cr, axis=1)
    keep = area2 > 0
    T, cr, area2 = T[keep], cr[keep], area2[keep]
    normals = cr / area2[:, None]
    cent = T.mean(axis=1)
    grads = np.gradient(V, *field_.h)
    idx = ((cent - field_.lo) / field_.h).T
    g = np.stack([map_coordinates(gk, idx, order=1, mode="nearest") for gk in grads], axis=1)
    gn = np.linalg.norm(g, axis=1)
    normals *= np.where(np.sum(normals * g, axis=1) < 0, -1.0, 1.0)[:, None]
    from .quadrature import simplex_rule

    if order <= 1:
        bary, w = np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    else:
        bary, w = simplex_rule(2)
    nodes = np.einsum("qk,mkn->mqn", bary, T)
    measures = 0.5 * area2
    mesh = SurfaceMesh(3, level, cent, normals, measures, nodes, measures[:, None] * w[None, :], T, None)
    mesh.degenerate_fraction = float(np.mean(gn < DEGENERATE_GRAD))
    mesh.good = mesh.degenerate_fraction <= DEGENERATE_FRACTION
    return mesh


def level_grid(s: SetDescriptor, resolution: float, eps_max: float = 0.0) -> SampledField:
    """Distance samples on the bounding box inflated by ``eps_max`` plus two cells."""
    lo, hi = s.bounding_box(eps_max)
    pad = 2 * resolution
    return SampledField(s.signed_distance, lo - pad, hi + pad, resolution)


def extract_level_set(s: SetDescriptor, eps: float, resolution: float, order: int = 6,
                      grid: SampledField | None = None) -> SurfaceMesh:
    """Mesh of {d = eps} (pass eps < 0 for the outer level) with inner normals.

    Normals are the geometric facet normals oriented toward increasing d; the facet
    integrand is sampled at ``order`` Gauss points per facet (order 1 = centroid rule).
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if grid is None:
        grid = level_grid(s, resolution, max(-eps, 0.0))
    return contour(grid, eps, order)


class IntegrandError(FloatingPointError):
    pass


def surface_integral(mesh: SurfaceMesh, integrand: Callable) -> float:
    """Σ over facets of ∫ integrand(point, inner_normal) dH^{n-1}, summed in facet order.

    ``integrand`` is vectorized: it receives (N, n) points and (N, n) normals.
    """
    if len(mesh) == 0:
        return 0.0
    m, k, n = mesh.nodes.shape
    pts = mesh.nodes.reshape(-1, n)
    nrm = np.repeat(mesh.normals, k, axis=0)
    vals = np.asarray(integrand(pts, nrm), float).reshape(m, k)
    per = np.sum(vals * mesh.weights, axis=1)
    bad = ~np.isfinite(per)
    if bad.any():
        j = int(np.argmax(bad))
        raise IntegrandError(f"integrand not finite on facet {j} at {mesh.centroids[j].tolist()}")
    return math.fsum(per)


# ---------------------------------------------------------------- schedules and tubes

@dataclass
class EpsilonSchedule:
    values: list
    good_flags: list | None = None

    def __post_init__(self):
        v = [float(x) for x in self.values]
        if not v:
            raise ValueError("schedule is empty")
        if any(x <= 0 for x in v):
            raise ValueError("schedule values must be positive")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("schedule values must be strictly decreasing")
        self.values = v
        if self.good_flags is None:
            self.good_flags = [True] * len(v)
        elif len(self.good_flags) != len(v):
            raise ValueError("good_flags length differs from values")

    @classmethod
    def geometric(cls, start: float, ratio: float, count: int) -> "EpsilonSchedule":
        if not 0 < ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        return cls([start * ratio ** k for k in range(count)])

    def good_values(self):
        return [e for e, g in zip(self.values, self.good_flags) if g]

    def __len__(self):
        return len(self.values)


@dataclass
class MinkowskiEstimate:
    eps: list
    values: list
    good_flags: list
    content: float


def tube_volume(s: SetDescriptor, eps: float, tol: float = 1e-9) -> float:
    """|{x : |d(x)| < eps}| by adaptive clipped-cell quadrature."""
    from .quadrature import volume_integral

    lo, hi = s.bounding_box(eps)
    reg = Region(lambda x: eps - np.abs(s.signed_distance(x)), lo, hi, min(eps, s.feature_size()))
    # |d| kinks along ∂U, in the middle of the tube
    return volume_integral(lambda x: np.ones(len(x)), reg, tol=tol, kinks=[s.signed_distance]).value


def minkowski_content(s: SetDescriptor, schedule: EpsilonSchedule, tol: float | None = None) -> MinkowskiEstimate:
    """Tube volume over 2ε per schedule value; the minimum over good ε proxies the liminf."""
    vals = []
    for e in schedule.values:
        t = tol if tol is not None else 1e-4 * e
        vals.append(tube_volume(s, e, t) / (2 * e))
    good = [v for v, g in zip(vals, schedule.good_flags) if g]
    return MinkowskiEstimate(list(schedule.values), vals, list(schedule.good_flags), min(good) if good else float("nan"))


@dataclass
class CoareaReport:
    eps: float
    shell_integral: float
    level_integral: float
    levels: list
    measures: list

    @property
    def relative_error(self) -> float:
        return abs(self.shell_integral - self.level_integral) / abs(self.level_integral)


def coarea_check(s: SetDescriptor, eps: float, resolution: float, n_levels: int = 33,
                 g: Callable | None = None, tol: float = 1e-9) -> CoareaReport:
    """∫_{0<d<ε} g|∇d| dx against ∫_0^ε ∫_{d=t} g dH^{n-1} dt (trapezoid over extracted levels)."""
    from .quadrature import volume_integral

    g = g or (lambda x: np.ones(len(x)))
    lo, hi = s.bounding_box()
    shell = Region(lambda x: np.minimum(s.signed_distance(x), eps - s.signed_distance(x)), lo, hi,
                   min(eps, s.feature_size()))

    def integrand(x):
        return g(x) * np.linalg.norm(_closed_gradient(s, x), axis=1)

    lhs = volume_integral(integrand, shell, tol=tol).value
    grid = level_grid(s, resolution)
    ts = np.linspace(0.0, eps, n_levels)
    meas = [surface_integral(contour(grid, float(t)), lambda p, n: g(p)) for t in ts]
    rhs = float(np.trapezoid(meas, ts))
    return CoareaReport(eps, lhs, rhs, ts.tolist(), meas)
