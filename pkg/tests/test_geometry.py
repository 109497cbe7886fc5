"""Geometry kernel tests.

The two load-bearing oracles here are written independently of the kernel:
a brute-force sign-pattern support function for zonotopes, and a sampled
definition check of the Minkowski difference.
"""

import itertools

import numpy as np
import pytest
from scipy.optimize import linprog

from stumblekit.geometry import (
    PolytopeH,
    Zonotope2,
    contains,
    convex_hull,
    minkowski_diff,
    polytope_from_vertices,
    support,
)


def oracle_zonotope_support(center, gens, d):
    """Brute force over all 2^m sign patterns. Only sane for m <= 12."""
    m = gens.shape[1]
    best = -np.inf
    for signs in itertools.product((-1.0, 1.0), repeat=m):
        val = (center + gens @ np.array(signs)) @ d
        best = max(best, val)
    return best


def oracle_zonotope_member(z, x, tol=1e-9):
    """LP feasibility of x = c + G xi, ||xi||_inf <= 1."""
    m = z.m
    if m == 0:
        return np.linalg.norm(x - z.center) <= tol
    res = linprog(c=np.zeros(m), A_eq=z.generators, b_eq=np.asarray(x) - z.center,
                  bounds=[(-1, 1)] * m, method="highs")
    return bool(res.success)


def unit_square(lo=0.0, hi=1.0):
    return polytope_from_vertices([[lo, lo], [hi, lo], [hi, hi], [lo, hi]])


# ---------------------------------------------------------------------------
# support functions


def test_support_unit_square_zonotope():
    z = Zonotope2([0.0, 0.0], [[0.5, 0.0], [0.0, 0.5]])
    assert support(z, [1.0, 0.0]) == pytest.approx(0.5)
    assert support(z, [0.0, -1.0]) == pytest.approx(0.5)
    assert support(z, [1.0, 1.0]) == pytest.approx(1.0)


def test_support_point_zonotope():
    z = Zonotope2([2.0, -3.0], np.zeros((2, 0)))
    d = np.array([0.6, 0.8])
    assert support(z, d) == pytest.approx(z.center @ d)


def test_support_matches_sign_pattern_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = rng.integers(1, 9)
        z = Zonotope2(rng.normal(size=2), rng.normal(size=(2, m)))
        d = rng.normal(size=2)
        d /= np.linalg.norm(d)
        assert abs(z.support(d) - oracle_zonotope_support(z.center, z.generators, d)) < 1e-12


def test_support_sublinearity():
    rng = np.random.default_rng(12)
    z = Zonotope2(rng.normal(size=2), rng.normal(size=(2, 6)))
    for _ in range(200):
        d1, d2 = rng.normal(size=2), rng.normal(size=2)
        assert z.support(d1 + d2) <= z.support(d1) + z.support(d2) + 1e-12
        lam = float(rng.uniform(0.1, 5.0))
        assert z.support(lam * d1) == pytest.approx(lam * z.support(d1))


def test_polytope_support_over_vertices():
    p = unit_square(0.0, 2.0)
    assert p.support([1.0, 0.0]) == pytest.approx(2.0)
    assert p.support([-1.0, -1.0]) == pytest.approx(0.0)


def test_support_rejects_zero_direction():
    z = Zonotope2([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        z.support([0.0, 0.0])


def test_polytope_support_rejects_unbounded():
    # only two halfplanes: a wedge, unbounded
    p = PolytopeH(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 1.0]))
    assert not p.is_bounded()
    with pytest.raises(ValueError):
        p.support([1.0, 1.0])


# ---------------------------------------------------------------------------
# polytope structure


def test_unit_rows_enforced():
    p = PolytopeH(np.array([[2.0, 0.0], [0.0, 3.0], [-4.0, 0.0], [0.0, -5.0]]),
                  np.array([2.0, 3.0, 4.0, 5.0]))
    assert np.allclose(np.linalg.norm(p.A, axis=1), 1.0)
    assert np.allclose(p.b, 1.0)


def test_vertices_of_square():
    p = unit_square()
    v = p.vertices()
    assert v.shape == (4, 2)
    expected = {(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)}
    got = {(round(x, 9), round(y, 9)) for x, y in v}
    assert got == expected


def test_emptiness_detection():
    # x <= 0, y <= 0, x + y >= 1: bounded and empty
    s = np.sqrt(0.5)
    p = PolytopeH(np.array([[1.0, 0.0], [0.0, 1.0], [-s, -s]]),
                  np.array([0.0, 0.0, -s * 1.0]))
    assert p.is_bounded()
    assert p.is_empty()
    assert not unit_square().is_empty()


def test_contains_margins():
    p = unit_square()
    inside, m = contains(p, [0.5, 0.5])
    assert inside and m == pytest.approx(-0.5)
    on_edge, m_edge = contains(p, [1.0, 0.5])
    assert on_edge and abs(m_edge) < 1e-12
    outside, m_out = contains(p, [2.0, 0.5])
    assert not outside and m_out == pytest.approx(1.0)


def test_margin_many_matches_scalar():
    rng = np.random.default_rng(3)
    p = unit_square(-1.0, 1.0)
    X = rng.normal(size=(64, 2))
    batch = p.margin_many(X)
    for x, m in zip(X, batch):
        assert m == pytest.approx(p.margin(x))


# ---------------------------------------------------------------------------
# hulls and H-rep construction


def test_hull_square_with_interior_noise():
    rng = np.random.default_rng(4)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    interior = rng.uniform(0.05, 0.95, size=(200, 2))
    hull = convex_hull(np.vstack([corners, interior]))
    assert hull.shape == (4, 2)
    p = polytope_from_vertices(hull)
    assert np.max(p.margin_many(interior)) <= 1e-12
    assert np.max(p.margin_many(corners)) <= 1e-12


def test_hull_is_counterclockwise_and_normals_sorted():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 2))
    hull = convex_hull(pts)
    area2 = 0.0
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        area2 += a[0] * b[1] - a[1] * b[0]
    assert area2 > 0
    p = polytope_from_vertices(hull)
    ang = np.arctan2(p.A[:, 1], p.A[:, 0])
    assert np.all(np.diff(ang) > 0)
    assert np.allclose(np.linalg.norm(p.A, axis=1), 1.0)


def test_hull_rejects_collinear():
    with pytest.raises(ValueError):
        convex_hull([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])


def test_vertex_roundtrip_random_polygons():
    rng = np.random.default_rng(6)
    for _ in range(20):
        pts = rng.normal(size=(30, 2)) * rng.uniform(0.5, 3.0)
        hull = convex_hull(pts)
        p = polytope_from_vertices(hull)
        back = p.vertices()
        assert len(back) == len(hull)
        # same vertex set regardless of starting index
        for v in hull:
            assert np.min(np.linalg.norm(back - v, axis=1)) < 1e-9


# ---------------------------------------------------------------------------
# zonogon conversion


def test_zonogon_polygon_matches_lp_membership():
    rng = np.random.default_rng(7)
    for _ in range(10):
        z = Zonotope2(rng.normal(size=2), rng.normal(size=(2, 5)) * 0.7)
        p = z.to_polytope()
        for _ in range(40):
            x = z.center + rng.normal(size=2) * 2.0
            in_poly = p.margin(x) <= 1e-9
            in_zono = oracle_zonotope_member(z, x)
            if abs(p.margin(x)) > 1e-7:  # skip razor-edge ties
                assert in_poly == in_zono


def test_zonogon_supports_agree_with_polytope():
    rng = np.random.default_rng(8)
    z = Zonotope2([0.3, -0.2], rng.normal(size=(2, 7)))
    p = z.to_polytope()
    for _ in range(100):
        d = rng.normal(size=2)
        assert p.support(d) == pytest.approx(z.support(d), abs=1e-9)


# ---------------------------------------------------------------------------
# Minkowski difference


def test_minkowski_diff_box_shrink():
    p = unit_square(0.0, 2.0)
    z = Zonotope2([0.0, 0.0], [[0.5, 0.0], [0.0, 0.5]])
    d = minkowski_diff(p, z)
    assert not d.is_empty()
    v = d.vertices()
    expected = {(0.5, 0.5), (1.5, 0.5), (1.5, 1.5), (0.5, 1.5)}
    got = {(round(x, 9), round(y, 9)) for x, y in v}
    assert got == expected


def test_minkowski_diff_point_is_translation():
    p = unit_square(0.0, 1.0)
    z = Zonotope2([0.25, -0.25], np.zeros((2, 0)))
    d = minkowski_diff(p, z)
    assert np.allclose(d.b, p.b - p.A @ z.center)


def test_minkowski_diff_empty_when_inner_too_big():
    p = unit_square(0.0, 1.0)
    z = Zonotope2([0.0, 0.0], [[2.0, 0.0], [0.0, 2.0]])
    d = minkowski_diff(p, z)
    assert d.empty_flag and d.is_empty()


def test_minkowski_diff_sampled_definition():
    """x in P - Z iff x + z in P for all z in Z, checked by sampling."""
    rng = np.random.default_rng(9)
    p = polytope_from_vertices(convex_hull(rng.normal(size=(12, 2)) * 1.5))
    z = Zonotope2(rng.normal(size=2) * 0.1, rng.normal(size=(2, 4)) * 0.25)
    d = minkowski_diff(p, z)
    signs = rng.choice([-1.0, 1.0], size=(200, z.m))
    zs = z.center + signs @ z.generators.T  # extreme points suffice (convexity)
    xs = rng.normal(size=(300, 2)) * 1.5
    for x in xs:
        m = d.margin(x)
        if abs(m) < 1e-7:
            continue
        inside_diff = m <= 0
        all_shifted_inside = bool(np.all(p.margin_many(x + zs) <= 1e-9))
        assert inside_diff == all_shifted_inside
