import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from gaussgreen import geometry as geo
from gaussgreen import regdist as rd

HALF = geo.graph_domain([-5.0, 5.0], [0.0, 0.0], window=(-5.0, 5.0), height=5.0)
UNIT = geo.box([0, 0], [1, 1])
DISK = geo.ball([0, 0], 1.0)
MOLL = rd.MollifierSpec(2)

DESCRIPTORS = {"square": UNIT, "ball": DISK, "lshape": geo.l_shape(), "sawtooth": geo.sawtooth()}


def test_mollifier_mass_against_cartesian_quadrature():
    eta = lambda y, x: MOLL.normalization * float(rd.standard_bump(math.hypot(x, y)))  # noqa: E731
    mass = integrate.dblquad(eta, -1, 1, lambda x: -math.sqrt(1 - x * x), lambda x: math.sqrt(1 - x * x),
                             epsabs=1e-13, epsrel=1e-13)[0]
    assert mass == pytest.approx(1.0, abs=1e-10)
    assert MOLL.continuum_mass == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("dim", [2, 3])
def test_mollifier_rule_is_probability_on_ball(dim):
    m = rd.MollifierSpec(dim, order=8)
    z, w = m.rule()
    assert math.fsum(w) == pytest.approx(1.0, abs=1e-14)
    assert np.all(w >= 0) and np.all(np.linalg.norm(z, axis=1) <= 1.0)
    # radial symmetry: odd moments vanish
    assert np.allclose(w @ z, 0.0, atol=1e-15)


def test_mollifier_rejects_dimension():
    with pytest.raises(ValueError):
        rd.MollifierSpec(4)


def test_standard_bump_support():
    r = np.linspace(0, 2, 401)
    v = rd.standard_bump(r)
    assert np.all(v >= 0) and np.all(v[r >= 1] == 0) and np.all(v[r < 1] > 0)


def test_G_half_space_and_zero_tau():
    X = np.array([[0.1, 0.3], [-0.4, -0.2], [0.0, 0.05]])
    for tau in (0.1, 0.3):
        assert np.allclose(rd.G_eval(HALF, X, tau, MOLL), X[:, 1], atol=1e-14)
    for U in DESCRIPTORS.values():
        assert np.allclose(rd.G_eval(U, X, 0.0, MOLL), U.signed_distance(X), atol=0)


def test_G_ball_reference():
    # refined-quadrature value of ∫ (1 - |(0.5, 0) - 0.1 z|) η(z) dz, frozen
    assert rd.G_eval(DISK, [0.5, 0.0], 0.2, MOLL) == pytest.approx(0.49869216059491, abs=1e-6)


@settings(max_examples=25)
@given(st.floats(-0.4, 1.4), st.floats(-0.4, 1.4), st.floats(-0.6, 0.6))
def test_G_derivative_bounds(x, y, tau):
    for U in (UNIT, geo.l_shape()):
        _, dt, g = rd.G_derivatives(U, [x, y], tau, MOLL)
        assert np.linalg.norm(g) <= 1 + 1e-9
        assert abs(dt) <= 0.5 + 1e-9


def test_regdist_examples():
    res = rd.regularized_distance(HALF, [0.2, 0.37], MOLL)
    assert res.rho == pytest.approx(0.37, abs=1e-12)
    assert rd.regdist_gradient(HALF, [0.2, 0.37], MOLL) == pytest.approx([0.0, 1.0], abs=1e-12)
    assert rd.rho(UNIT, [0.0, 0.4], MOLL) == 0.0
    c = rd.regularized_distance(UNIT, [0.5, 0.5], MOLL)
    assert 0.25 <= c.rho <= 1.0 and 0.5 <= c.ratio <= 2.0
    assert c.residual <= rd.SOLVER_TOL and c.iterations <= rd.MAX_ITER


@pytest.mark.parametrize("name", sorted(DESCRIPTORS))
def test_ratio_and_gradient_bounds(name, rng):
    U = DESCRIPTORS[name]
    X = rd.sample_points(U, 1000, rng, pad=0.5)
    res = rd.regularized_distance(U, X, MOLL)
    off = res["d"] != 0
    assert np.all(res["ratio"][off] >= 0.5) and np.all(res["ratio"][off] <= 2.0)
    assert np.all(res["residual"] <= rd.SOLVER_TOL)
    g = np.linalg.norm(rd.regdist_gradient(U, X, MOLL, res["rho"]), axis=1)
    assert g.max() <= 2 + 1e-6


def test_gradient_on_ring():
    t = np.linspace(0, 2 * math.pi, 64, endpoint=False)
    X = 0.7 * np.stack([np.cos(t), np.sin(t)], axis=1)
    g = np.linalg.norm(rd.regdist_gradient(DISK, X, MOLL), axis=1)
    assert np.all(g > 0) and np.all(g <= 2)


def test_gradient_matches_finite_differences(rng):
    U = geo.l_shape()
    X = rd.sample_points(U, 50, rng, pad=0.2)
    h = 1e-6
    fd = np.stack([(rd.rho(U, X + h * e, MOLL) - rd.rho(U, X - h * e, MOLL)) / (2 * h) for e in np.eye(2)], 1)
    assert np.max(np.abs(fd - rd.regdist_gradient(U, X, MOLL))) < 1e-5


def test_nondegeneracy_l_shape():
    rep = rd.nondegeneracy(geo.l_shape(), [0.2, 0.1, 0.05], n=1000, seed=3)
    assert rep.eps0 is not None
    assert rep.min_grad[rep.eps0] > rd.NONDEGENERATE
    assert rep.max_grad <= 2 + 1e-6
    lo, hi = rep.ratio_range
    assert 0.5 <= lo <= hi <= 2.0


def test_regdist_level_half_space():
    U = geo.graph_domain([-1.0, 1.0], [0.0, 0.0], window=(-1.0, 1.0), height=0.5)
    mesh = rd.extract_regdist_level(U, 0.1, 1 / 64)
    assert np.allclose(mesh.centroids[:, 1], 0.1, atol=1e-9)
    assert np.allclose(mesh.normals, [0.0, 1.0], atol=1e-9)


def test_regdist_level_square_is_closed_and_contained():
    mesh = rd.extract_regdist_level(UNIT, 0.1, 1 / 128)
    assert mesh.is_closed()
    assert 4 * (1 - 2 * 0.2) <= mesh.total_measure <= 4 * (1 - 2 * 0.05)
    d = UNIT.signed_distance(mesh.centroids)
    assert d.min() >= 0.05 - 1e-3 and d.max() <= 0.2 + 1e-3


def test_regdist_level_ball_tends_to_circle():
    errs = []
    for eps in (0.2, 0.1, 0.05):
        mesh = rd.extract_regdist_level(DISK, eps, 1 / 64)
        assert mesh.is_closed()
        errs.append(abs(mesh.total_measure - 2 * math.pi))
    assert errs[0] > errs[1] > errs[2]


@given(st.floats(0.01, 0.7))
def test_h_spline_bounds(a):
    h = rd.HSpec(a=a)
    s = np.linspace(0, 4, 4001)
    H, dH = h.H(s), h.dH(s)
    assert np.all(H[s <= 1] == 1) and np.all(H[s >= 2.5] == 0)
    assert np.all(np.diff(H) <= 1e-15)
    assert dH.min() == pytest.approx(-h.max_slope)
    # C¹: the derivative has no jumps
    assert np.max(np.abs(np.diff(dH))) <= h.max_slope * (s[1] - s[0]) / a * (1 + 1e-9)
    fd = np.gradient(H, s)
    assert np.max(np.abs(fd - dH)) <= h.max_slope * (s[1] - s[0]) / a + 1e-9


def test_default_h_slope_stays_above_minus_one():
    h = rd.HSpec()
    assert h.max_slope < 0.9
    r = np.linspace(0, 0.3, 3001)
    assert np.all(h.dh(0.1, r) >= -0.9)
    assert h.h(0.1, 0.05) == pytest.approx(0.1) and h.h(0.1, 0.26) == 0.0


def test_deformation_half_space():
    f = rd.graph_deformation(HALF, 0.1, [0.0, 0.0])
    assert f == pytest.approx([0.0, 0.1], abs=1e-12)


def test_deformation_identity_far_away():
    U = geo.sawtooth()
    X = np.array([[0.3, 0.5], [0.7, 0.8], [0.5, -0.5]])
    r = rd.rho(U, X)
    assert np.all((np.abs(r) >= 0.15) | (r < 0))
    assert np.array_equal(rd.graph_deformation(U, 0.05, X), X)


def test_deformation_sawtooth_residual_and_bilipschitz(rng):
    U = geo.sawtooth()
    xs = np.sort(rng.uniform(0.05, 0.95, 200))
    B = np.stack([xs, np.interp(xs, U.params["xs"], U.params["ys"])], axis=1)
    F = rd.graph_deformation(U, 0.05, B)
    assert np.max(np.abs(rd.rho(U, F) - 0.05)) <= 1e-8
    i, j = rng.integers(0, 200, (2, 500))
    keep = i != j
    ratio = np.linalg.norm(F[i] - F[j], axis=1)[keep] / np.linalg.norm(B[i] - B[j], axis=1)[keep]
    assert ratio.min() >= 0.5 and ratio.max() <= 2.0


def test_deformation_needs_graph_domain():
    with pytest.raises(geo.ConfigurationError):
        rd.graph_deformation(UNIT, 0.05, [0.5, 0.0])
