"""Exact 2-D set-geometry kernel.

H-rep polytopes with unit-norm rows, zonotopes, support functions, the
Minkowski (Pontryagin) difference, and containment with margins. Everything
the planning constraint needs lives in the plane, so the kernel is
deliberately 2-D only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


def _normalize_rows(A, b):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms <= 0):
        raise ValueError("zero-norm constraint row")
    return A / norms[:, None], b / norms


@dataclass
class PolytopeH:
    """{x in R^2 : A x <= b} with unit-norm rows of A."""

    A: np.ndarray
    b: np.ndarray
    empty_flag: bool = field(default=False)

    def __post_init__(self):
        self.A, self.b = _normalize_rows(self.A, self.b)
        if self.A.shape[1] != 2:
            raise ValueError("PolytopeH is 2-D only")

    # -- structure ---------------------------------------------------------

    def is_bounded(self) -> bool:
        """Bounded iff the outward normals positively span the plane."""
        ang = np.sort(np.arctan2(self.A[:, 1], self.A[:, 0]))
        if len(ang) < 3:
            return False
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
        return bool(np.max(gaps) < np.pi - 1e-12)

    def chebyshev_radius(self) -> float:
        """Radius of the largest inscribed ball; negative iff empty."""
        n = len(self.b)
        A_ub = np.hstack([self.A, np.ones((n, 1))])
        res = linprog(c=[0.0, 0.0, -1.0], A_ub=A_ub, b_ub=self.b,
                      bounds=[(None, None), (None, None), (None, None)], method="highs")
        if not res.success:
            # unbounded radius or solver failure: fall back to feasibility
            feas = linprog(c=[0.0, 0.0], A_ub=self.A, b_ub=self.b,
                           bounds=[(None, None), (None, None)], method="highs")
            return 0.0 if feas.success else -np.inf
        return float(-res.fun)

    def is_empty(self, tol: float = 1e-12) -> bool:
        if self.empty_flag:
            return True
        return self.chebyshev_radius() < -tol

    def vertices(self) -> np.ndarray:
        """All feasible pairwise intersections, ordered counterclockwise."""
        if not self.is_bounded():
            raise ValueError("vertex enumeration requires a bounded polytope")
        A, b = self.A, self.b
        pts = []
        n = len(b)
        for i in range(n):
            for j in range(i + 1, n):
                det = A[i, 0] * A[j, 1] - A[i, 1] * A[j, 0]
                if abs(det) < 1e-12:
                    continue
                x = np.linalg.solve(A[[i, j]], b[[i, j]])
                if np.all(A @ x - b <= 1e-9):
                    pts.append(x)
        if not pts:
            return np.zeros((0, 2))
        pts = np.array(pts)
        # dedupe
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        pts = pts[order]
        keep = [0]
        for i in range(1, len(pts)):
            if np.linalg.norm(pts[i] - pts[keep[-1]]) > 1e-10:
                keep.append(i)
        pts = pts[keep]
        centroid = pts.mean(axis=0)
        ang = np.arctan2(pts[:, 1] - centroid[1], pts[:, 0] - centroid[0])
        return pts[np.argsort(ang)]

    # -- queries -----------------------------------------------------------

    def support(self, d) -> float:
        d = np.asarray(d, dtype=float)
        if np.linalg.norm(d) == 0:
            raise ValueError("support direction must be nonzero")
        V = self.vertices()
        if len(V) == 0:
            raise ValueError("support of an empty polytope")
        return float(np.max(V @ d))

    def margin(self, x) -> float:
        """max(A x - b); <= 0 iff contained."""
        return float(np.max(self.A @ np.asarray(x, dtype=float) - self.b))

    def margin_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.max(X @ self.A.T - self.b, axis=-1)

    def contains(self, x, tol: float = 0.0):
        m = self.margin(x)
        return (m <= tol), m


@dataclass
class Zonotope2:
    """{c + G xi : ||xi||_inf <= 1} in the plane."""

    center: np.ndarray
    generators: np.ndarray  # (2, m)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).ravel()
        G = np.asarray(self.generators, dtype=float)
        if G.size == 0:
            G = np.zeros((2, 0))
        self.generators = G.reshape(2, -1)
        if self.center.shape != (2,) or not np.all(np.isfinite(self.center)) or not np.all(np.isfinite(self.generators)):
            raise ValueError("zonotope entries must be finite, center 2-D")

    @property
    def m(self) -> int:
        return self.generators.shape[1]

    def support(self, d) -> float:
        d = np.asarray(d, dtype=float)
        if np.linalg.norm(d) == 0:
            raise ValueError("support direction must be nonzero")
        return float(self.center @ d + np.sum(np.abs(self.generators.T @ d)))

    def __add__(self, other: "Zonotope2") -> "Zonotope2":
        return Zonotope2(self.center + other.center, np.hstack([self.generators, other.generators]))

    def __neg__(self) -> "Zonotope2":
        return Zonotope2(-self.center, -self.generators)

    def linear_map(self, T) -> "Zonotope2":
        T = np.asarray(T, dtype=float)
        return Zonotope2(T @ self.center, T @ self.generators)

    def radius_bound(self) -> float:
        """sum of generator norms: radius of a covering ball."""
        return float(np.sum(np.linalg.norm(self.generators, axis=0)))

    def to_polygon(self) -> np.ndarray:
        """Boundary vertices counterclockwise (zonogon construction)."""
        G = self.generators[:, np.linalg.norm(self.generators, axis=0) > 1e-15]
        m = G.shape[1]
        if m == 0:
            return self.center[None, :]
        flip = (G[1] < 0) | ((G[1] == 0) & (G[0] < 0))
        G = G * np.where(flip, -1.0, 1.0)
        ang = np.arctan2(G[1], G[0])
        G = G[:, np.argsort(ang, kind="stable")]
        start = self.center - G.sum(axis=1)
        upper = start[None, :] + 2.0 * np.cumsum(G, axis=1).T
        lower = upper[-1][None, :] - 2.0 * np.cumsum(G, axis=1).T
        verts = np.vstack([start, upper, lower[:-1]])
        return verts

    def to_polytope(self) -> PolytopeH:
        verts = self.to_polygon()
        if len(verts) < 3:
            raise ValueError("degenerate zonotope has no 2-D H-rep")
        return polytope_from_vertices(verts)


def support(s, d) -> float:
    """Support function of a Zonotope2 or PolytopeH."""
    return s.support(d)


def convex_hull(points) -> np.ndarray:
    """Andrew monotone chain; returns hull vertices counterclockwise.

    Raises ValueError if fewer than 3 non-collinear points are given.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        raise ValueError("hull needs at least 3 distinct points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise ValueError("points are collinear; hull is degenerate")
    return hull


def polytope_from_vertices(verts) -> PolytopeH:
    """H-rep of a counterclockwise-ordered convex polygon.

    Rows get unit outward normals and are sorted by normal angle for
    deterministic serialization.
    """
    verts = np.asarray(verts, dtype=float)
    n = len(verts)
    rows_A, rows_b = [], []
    for i in range(n):
        t = verts[(i + 1) % n] - verts[i]
        norm = np.linalg.norm(t)
        if norm < 1e-14:
            continue
        normal = np.array([t[1], -t[0]]) / norm  # outward for CCW ordering
        rows_A.append(normal)
        rows_b.append(normal @ verts[i])
    A = np.array(rows_A)
    b = np.array(rows_b)
    ang = np.arctan2(A[:, 1], A[:, 0])
    order = np.argsort(ang, kind="stable")
    return PolytopeH(A[order], b[order])


def minkowski_diff(outer: PolytopeH, inner: Zonotope2) -> PolytopeH:
    """P minus-with-circle Z = {x : {x} + Z subset of P}, rows preserved.

    b_i' = b_i - h_{Z - c}(a_i) - a_i . c. Result carries empty_flag when
    infeasible; callers treat that as the +infinity constraint case.
    """
    shrink = np.sum(np.abs(inner.generators.T @ outer.A.T), axis=0) if inner.m else 0.0
    b_new = outer.b - shrink - outer.A @ inner.center
    result = PolytopeH(outer.A.copy(), b_new)
    result.empty_flag = result.chebyshev_radius() < -1e-12
    return result


def contains(poly: PolytopeH, x, tol: float = 0.0):
    """(contained, margin) with margin = max(A x - b)."""
    return poly.contains(x, tol)
