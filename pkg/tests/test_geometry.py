import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import lens_area, mc_overlap
from stexceed.geometry import (
    CylinderKernel,
    Ellipse,
    SpaceTimePoint,
    congruent_overlap_area,
    cylinder_intersection_volume,
    ellipse_overlap_area,
    overlap_volumes,
)

KERNEL_B = CylinderKernel(0.2, 0.3, math.pi / 4, 5.0, (0.05, 0.10))

axes = st.floats(0.05, 2.0)
angles = st.floats(0.0, 2 * math.pi)
coords = st.floats(-2.0, 2.0)


def test_identical_ellipses_overlap_equals_area():
    e = Ellipse((0.3, -0.1), 0.2, 0.3, 1.1)
    assert ellipse_overlap_area(e, e) == pytest.approx(math.pi * 0.06, abs=1e-12)


def test_disjoint_circles():
    assert ellipse_overlap_area(Ellipse((0, 0), 1, 1), Ellipse((3, 0), 1, 1)) == 0.0


def test_circle_lens():
    got = ellipse_overlap_area(Ellipse((0, 0), 1, 1), Ellipse((1, 0), 1, 1))
    assert got == pytest.approx(2 * math.acos(0.5) - 0.5 * math.sqrt(3), abs=1e-9)
    assert got == pytest.approx(1.2283696986087567, abs=1e-9)


@pytest.mark.parametrize("a", [0.0, -1.0, float("nan")])
def test_degenerate_ellipse_rejected(a):
    with pytest.raises(ValueError):
        Ellipse((0, 0), a, 1.0)


def test_contained_ellipse():
    big = Ellipse((0, 0), 2.0, 1.0, 0.3)
    small = Ellipse((0.2, 0.1), 0.3, 0.2, 2.0)
    assert ellipse_overlap_area(big, small) == pytest.approx(small.area, rel=1e-12)
    assert ellipse_overlap_area(small, big) == pytest.approx(small.area, rel=1e-12)


def test_tangent_circles():
    assert ellipse_overlap_area(Ellipse((0, 0), 1, 1), Ellipse((2, 0), 1, 1)) == pytest.approx(0.0, abs=1e-9)
    inner = ellipse_overlap_area(Ellipse((0, 0), 1, 1), Ellipse((0.5, 0), 0.5, 0.5))
    assert inner == pytest.approx(math.pi * 0.25, rel=1e-9)


def test_four_point_crossing_against_monte_carlo(rng):
    e1 = ((0.0, 0.0), 2.0, 0.5, 0.0)
    e2 = ((0.0, 0.0), 2.0, 0.5, math.pi / 2)
    got = ellipse_overlap_area(Ellipse(*e1), Ellipse(*e2))
    est, se = mc_overlap(e1, e2, 2_000_000, rng)
    assert abs(got - est) < 4 * se
    # two perpendicular congruent ellipses: 4 ab arctan(b/a)
    assert got == pytest.approx(4 * 2.0 * 0.5 * math.atan(0.25), rel=1e-10)


@given(coords, coords, axes, axes, angles, coords, coords, axes, axes, angles)
def test_overlap_bounded_and_symmetric(x1, y1, a1, b1, p1, x2, y2, a2, b2, p2):
    e1 = Ellipse((x1, y1), a1, b1, p1)
    e2 = Ellipse((x2, y2), a2, b2, p2)
    v = ellipse_overlap_area(e1, e2)
    assert -1e-12 <= v <= min(e1.area, e2.area) * (1 + 1e-9)
    assert v == pytest.approx(ellipse_overlap_area(e2, e1), rel=1e-8, abs=1e-10)


@given(coords, coords, axes, axes, angles, coords, coords, axes, axes, angles, angles)
def test_rotation_equivariance(x1, y1, a1, b1, p1, x2, y2, a2, b2, p2, rot):
    c, s = math.cos(rot), math.sin(rot)

    def turn(x, y):
        return (c * x - s * y, s * x + c * y)

    v = ellipse_overlap_area(Ellipse((x1, y1), a1, b1, p1), Ellipse((x2, y2), a2, b2, p2))
    w = ellipse_overlap_area(Ellipse(turn(x1, y1), a1, b1, p1 + rot), Ellipse(turn(x2, y2), a2, b2, p2 + rot))
    assert w == pytest.approx(v, rel=1e-10, abs=1e-10 * max(a1 * b1, a2 * b2))


@given(axes, axes, angles)
def test_half_turn_invariance(a, b, p):
    e1 = Ellipse((0.1, 0.2), a, b, p)
    e2 = Ellipse((0.3, -0.1), b, a, 0.7)
    e1r = Ellipse((0.1, 0.2), a, b, p + math.pi)
    assert ellipse_overlap_area(e1, e2) == pytest.approx(ellipse_overlap_area(e1r, e2), rel=1e-9, abs=1e-12)


@given(axes, axes, angles, angles)
def test_translates_overlap_decreases_along_ray(a, b, p, direction):
    e = Ellipse((0, 0), a, b, p)
    d = np.linspace(0, 2.2 * max(a, b), 25)
    vals = [
        ellipse_overlap_area(e, Ellipse((r * math.cos(direction), r * math.sin(direction)), a, b, p)) for r in d
    ]
    assert np.all(np.diff(vals) <= 1e-9 * e.area)


@given(axes, axes, angles, coords, coords)
def test_congruent_closed_form_matches_general(a, b, p, dx, dy):
    general = ellipse_overlap_area(Ellipse((0, 0), a, b, p), Ellipse((dx, dy), a, b, p))
    closed = float(congruent_overlap_area(np.array([dx, dy]), a, b, p))
    assert closed == pytest.approx(general, rel=1e-8, abs=1e-10)


def test_circle_closed_form_matches_lens():
    for d in np.linspace(0, 2.5, 11):
        got = float(congruent_overlap_area(np.array([d, 0.0]), 0.7, 0.7, 0.3))
        assert got == pytest.approx(lens_area(0.7, d), abs=1e-12)


def test_full_self_intersection():
    x = SpaceTimePoint((0.4, 0.2), 3.0)
    assert cylinder_intersection_volume(x, x, KERNEL_B) == pytest.approx(KERNEL_B.volume, rel=1e-12)


@pytest.mark.parametrize("lag", [5.0, 7.5])
def test_no_overlap_after_duration(lag):
    x1 = SpaceTimePoint((0, 0), 0.0)
    x2 = SpaceTimePoint((0.0, 0.0), lag)
    assert cylinder_intersection_volume(x1, x2, KERNEL_B) == 0.0


def test_scenario_b_volume_pinned():
    # reference from a 1e7-point rejection sampler over the space-time box
    # (0.41345 +/- 0.00059); the pinned value is the exact lens volume
    v = cylinder_intersection_volume(SpaceTimePoint((0, 0), 0), SpaceTimePoint((0.1, 0.1), 2), KERNEL_B)
    assert v == pytest.approx(0.4136748330726425, abs=1e-12)
    assert abs(v - 0.41345304) < 3 * 0.00058885


def test_cylinder_volume_monte_carlo(rng):
    k = CylinderKernel(0.3, 0.15, 0.6, 4.0, (0.08, -0.05))
    x1, x2 = SpaceTimePoint((0.0, 0.0), 0.0), SpaceTimePoint((0.1, -0.05), 1.5)
    n = 4_000_000
    lo = np.array([-0.9, -0.6, -4.0])
    hi = np.array([0.6, 0.6, 1.5])
    pts = lo + (hi - lo) * rng.uniform(size=(n, 3))

    def inside(x):
        tau = x.t - pts[:, 2]
        dx = pts[:, 0] - (x.s[0] - k.velocity[0] * tau)
        dy = pts[:, 1] - (x.s[1] - k.velocity[1] * tau)
        c, s = math.cos(k.angle), math.sin(k.angle)
        u = (c * dx + s * dy) / k.semi_axis1
        w = (-s * dx + c * dy) / k.semi_axis2
        return (tau >= 0) & (tau < k.duration) & (u * u + w * w <= 1)

    p = np.mean(inside(x1) & inside(x2))
    box = np.prod(hi - lo)
    est, se = box * p, box * math.sqrt(p * (1 - p) / n)
    assert abs(cylinder_intersection_volume(x1, x2, k) - est) < 4 * se


@given(coords, coords, st.floats(-20, 20), coords, coords, st.floats(-20, 20), coords, coords, st.floats(-50, 50))
def test_volume_symmetric_and_translation_invariant(x1, y1, t1, x2, y2, t2, sx, sy, st_):
    a = SpaceTimePoint((x1, y1), t1)
    b = SpaceTimePoint((x2, y2), t2)
    v = cylinder_intersection_volume(a, b, KERNEL_B)
    assert v == cylinder_intersection_volume(b, a, KERNEL_B)
    assert 0.0 <= v <= KERNEL_B.volume * (1 + 1e-12)
    a2 = SpaceTimePoint((x1 + sx, y1 + sy), t1 + st_)
    b2 = SpaceTimePoint((x2 + sx, y2 + sy), t2 + st_)
    assert cylinder_intersection_volume(a2, b2, KERNEL_B) == pytest.approx(v, rel=1e-9, abs=1e-12)


def test_vectorised_volumes_match_pointwise(rng):
    h = rng.normal(scale=0.3, size=(50, 2))
    k = rng.integers(-6, 7, size=50).astype(float)
    vec = overlap_volumes(h, k, KERNEL_B)
    for i in range(50):
        ref = cylinder_intersection_volume(SpaceTimePoint((0, 0), 0), SpaceTimePoint(h[i], k[i]), KERNEL_B)
        assert vec[i] == pytest.approx(ref, rel=1e-12, abs=1e-15)
