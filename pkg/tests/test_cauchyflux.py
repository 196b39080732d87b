import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from gaussgreen import cauchyflux as cf
from gaussgreen import fields as fl
from gaussgreen import geometry as geo

LIN = fl.smooth_linear()
WHITNEY = fl.whitney()


def test_side_surface_validation():
    parent = ((0.0, 0.0), (1.0, 2.0))
    S = cf.SideSurface(1, 0.0, ((0.0, 2.0),), 1, parent)
    assert S.area == 2.0 and S.dim == 2
    with pytest.raises(ValueError):
        cf.SideSurface(1, 0.5, ((0.0, 2.0),), 1, parent)
    with pytest.raises(ValueError):
        cf.SideSurface(1, 0.0, ((0.0, 3.0),), 1, parent)
    with pytest.raises(ValueError):
        cf.SideSurface(3, 0.0, ((0.0, 1.0),))
    with pytest.raises(ValueError):
        cf.SideSurface(1, 0.0, ((0.0, 1.0),), 0)
    F = S.flipped()
    assert F.orientation == -1 and F.parent_box == ((-1.0, 0.0), (0.0, 2.0))


def test_box_faces_lie_on_parent():
    faces = cf.box_faces([0, 0, 0], [1, 2, 3])
    assert len(faces) == 6
    assert {f.orientation for f in faces} == {1, -1}
    assert math.fsum(f.area for f in faces) == 2 * (2 + 3 + 6)


def test_face_flux_of_linear_field():
    for s, (c, d) in ((0.3, (0.0, 1.0)), (-1.2, (0.5, 2.5))):
        S = cf.SideSurface(1, s, ((c, d),), 1)
        assert cf.flux_from_field(LIN, S) == pytest.approx(-s * (d - c), abs=1e-11)
        assert cf.flux_from_field(LIN, S.flipped()) == pytest.approx(s * (d - c), abs=1e-11)


def test_whitney_box_fluxes():
    flux = cf.FieldFlux(WHITNEY)
    assert abs(cf.boundary_flux(flux, [0.2, 0.2], [0.8, 0.8])) < 1e-10
    # atom inside: the face sum equals div F(I) = 2π
    assert cf.boundary_flux(flux, [-0.5, -0.5], [0.5, 0.5]) == pytest.approx(2 * math.pi, abs=1e-10)


def test_face_sum_matches_pairing_on_random_cubes(rng):
    flux = cf.FieldFlux(WHITNEY)
    for _ in range(10):
        lo = rng.uniform(-1, 0.5, 2)
        hi = lo + rng.uniform(0.1, 1.0, 2)
        pair = fl.measure_pairing(WHITNEY.div, fl.constant(1.0), geo.box(lo, hi), False)
        assert cf.boundary_flux(flux, lo, hi) == pytest.approx(pair, abs=1e-9)


def test_mu_j_examples():
    assert cf.mu_j(cf.FieldFlux(LIN), [0, 0], [1, 1], 1) == pytest.approx(-0.5, abs=1e-12)
    assert cf.mu_j(cf.ZeroFlux(), [0, 0], [1, 1], 2) == 0.0
    ref = integrate.dblquad(lambda y, x: x / (x * x + y * y), 0.2, 0.8, 0.2, 0.8, epsabs=1e-13)[0]
    assert cf.mu_j(cf.FieldFlux(WHITNEY), [0.2, 0.2], [0.8, 0.8], 1) == pytest.approx(-ref, abs=1e-10)


def test_mu_j_nudges_faces_off_singular_points(caplog):
    # the slice x1 = 0 of [−1/2, 1/2]² runs through the atom
    ref = integrate.dblquad(lambda y, x: x / (x * x + y * y), 0.0, 0.5, -0.5, 0.5, epsabs=1e-12)[0]
    with caplog.at_level("INFO"):
        val = cf.mu_j(cf.FieldFlux(WHITNEY), [0.0, -0.5], [0.5, 0.5], 1, order=3)
    assert val == pytest.approx(-ref, abs=1e-6)


def test_mu_j_3d():
    # -∫_{[0,1]^3} x3 dx
    assert cf.mu_j(cf.FieldFlux(fl.smooth_linear(3)), [0, 0, 0], [1, 1, 1], 3) == pytest.approx(-0.5, abs=1e-12)


@settings(max_examples=20)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 1), st.integers(1, 2), st.sampled_from([1, -1]))
def test_bisection_additivity(s, c, width, axis, orientation):
    field_ = fl.bump([0.1, 0.2], 5.0)
    F = fl.VectorFieldSpec("grad-bump", 2, field_.grad, fl.DivergenceMeasure())
    S = cf.SideSurface(axis, s, ((c, c + width),), orientation)
    a, b = S.bisect()
    flux = cf.FieldFlux(F)
    assert flux(a) + flux(b) == pytest.approx(flux(S), abs=1e-12)


def test_grid_points_and_orders():
    P = cf.grid_points([-0.5, -0.5], [0.5, 0.5], 0.25, [((0, 0), 0.1)])
    assert len(P) == 24 and not np.any(np.all(P == 0, axis=1))
    assert cf.observed_orders([0.1, 0.05, 0.025], [4e-3, 1e-3, 1e-12]) == pytest.approx([2.0, 29.897352853986263])
    assert cf.observed_orders([0.1, 0.05], [1e-12, 1e-13]) == [None]


def test_reconstruct_linear_and_constant():
    P = cf.grid_points([-0.5, -0.5], [0.5, 0.5], 0.25)
    rec = cf.reconstruct_field(cf.FieldFlux(LIN), P, 1 / 16)
    assert rec.valid.all()
    # faces are sampled 1e-12 inside their parent
    assert np.max(np.abs(rec.values - P)) < 3e-12
    rec = cf.reconstruct_field(cf.FieldFlux(fl.constant_field([1.0, 0.0])), P, 1 / 8)
    assert np.max(np.abs(rec.values - [1.0, 0.0])) < 1e-13
    assert rec.to_rows().shape == (len(P), 4)


def test_reconstruct_whitney_converges():
    P = cf.grid_points([-0.5, -0.5], [0.5, 0.5], 0.125, [((0, 0), 0.1)])
    errs = [cf.reconstruct_field(cf.FieldFlux(WHITNEY), P, w).rms_error(WHITNEY.eval) for w in (1 / 8, 1 / 16, 1 / 32)]
    assert errs[-1] < 0.01
    assert all(o >= 1.8 for o in cf.observed_orders([1 / 8, 1 / 16, 1 / 32], errs))


def test_reconstruct_skips_cubes_outside_domain():
    flux = cf.FieldFlux(LIN, domain=((0, 0), (1, 1)))
    rec = cf.reconstruct_field(flux, [[0.5, 0.5], [0.99, 0.5]], 0.1)
    assert rec.valid.tolist() == [True, False] and rec.skipped[0][0] == 1


def test_uniqueness_from_equal_face_values(tmp_path):
    x, w = np.array([0.3, -0.2]), 0.25
    field_flux = cf.FieldFlux(LIN)
    rows = []
    for axis in (1, 2):
        j = axis - 1
        other = x[1 - j]
        ext = ((other - w / 2, other + w / 2),)
        for s in np.linspace(x[j] - w / 2, x[j] + w / 2, 9):
            rows.append([axis, s, *ext[0], field_flux.eval(cf.SideSurface(axis, s, ext))])
    table = cf.TabulatedFlux(rows)
    a = cf.reconstruct_field(field_flux, [x], w).values
    b = cf.reconstruct_field(table, [x], w).values
    assert np.allclose(a, b, atol=1e-12)
    path = tmp_path / "flux.csv"
    path.write_text("axis,s,c1,d1,value\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows))
    c = cf.reconstruct_field(cf.TabulatedFlux.from_csv(path), [x], w).values
    assert np.array_equal(b, c)


def test_tabulated_flux_errors():
    with pytest.raises(ValueError):
        cf.TabulatedFlux([[1, 0.0, 0.0, 1.0]])
    t = cf.TabulatedFlux([[1, 0.0, 0.0, 1.0, 2.0], [1, 1.0, 0.0, 1.0, 3.0]])
    assert t(cf.SideSurface(1, 0.5, ((0.0, 1.0),), -1)) == -2.5
    with pytest.raises(cf.FluxError):
        t(cf.SideSurface(1, 2.0, ((0.0, 1.0),)))
    with pytest.raises(cf.FluxError):
        t(cf.SideSurface(2, 0.5, ((0.0, 1.0),)))


def test_axioms_whitney_random_boxes(rng):
    boxes = []
    for _ in range(20):
        lo = rng.uniform(-1, 0.5, 2)
        boxes.append((lo, lo + rng.uniform(0.1, 1.0, 2)))
    rep = cf.verify_axioms(cf.FieldFlux(WHITNEY), boxes)
    assert all(rep.passed.values())
    assert not rep.jump_detected


def test_axioms_zero_flux():
    rep = cf.verify_axioms(cf.ZeroFlux(), [((0, 0), (1, 1)), ((-1, 2), (0.5, 3))])
    assert all(rep.passed.values()) and not rep.jump_detected


def test_staircase_orientation_jump():
    F = fl.staircase_field(masked=True)
    rep = cf.verify_axioms(cf.FieldFlux(F), [((0.0, 0.0), (2.0, 2.0))])
    assert all(rep.passed.values())
    assert rep.jump_detected
    # the exterior faces miss the flux g(0) = 1 entering through x1 = 0 and the
    # right edges of the staircase from inside
    assert rep.orientation_jump[0]["jump"] == pytest.approx(-1 + math.cos(2) / 4, abs=1e-9)
