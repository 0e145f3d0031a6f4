"""Ellipse overlap areas and intersection volumes of moving elliptical cylinders.

Two entry points matter for the rest of the package:

* :func:`ellipse_overlap_area` handles two arbitrary ellipses. The second
  ellipse is written in the frame where the first one is the unit circle, the
  intersection points are the unit-modulus roots of a quartic (solved through
  companion-matrix eigenvalues), and the area of the intersection is assembled
  arc by arc with Green's theorem.
* :func:`overlap_volumes` is the vectorised workhorse used by the likelihood.
  All cylinders of the model share one ellipse shape, so an affine map turns
  every overlap into the lens between two unit circles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Ellipse",
    "CylinderKernel",
    "SpaceTimePoint",
    "ellipse_overlap_area",
    "congruent_overlap_area",
    "cylinder_intersection_volume",
    "overlap_volumes",
]

ROOT_TOL = 1e-12
MERGE_TOL = 1e-9
UNIT_MODULUS_TOL = 1e-6

TWO_PI = 2.0 * math.pi


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Ellipse:
    """Ellipse with center, two semi-axes and a counterclockwise rotation.

    ``semi_axis1`` lies along the direction ``angle`` and ``semi_axis2`` along
    ``angle + pi/2``. Neither axis has to be the longer one.
    """

    center: tuple[float, float]
    semi_axis1: float
    semi_axis2: float
    angle: float = 0.0

    def __post_init__(self):
        if not (self.semi_axis1 > 0 and self.semi_axis2 > 0):
            raise ValueError(
                f"ellipse semi-axes must be positive, got "
                f"{self.semi_axis1!r}, {self.semi_axis2!r}"
            )
        if not all(math.isfinite(v) for v in (*self.center, self.angle)):
            raise ValueError("ellipse center and angle must be finite")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def area(self) -> float:
        return math.pi * self.semi_axis1 * self.semi_axis2

    def shape_matrix(self) -> np.ndarray:
        """Matrix ``M`` such that the ellipse is ``(p-c)' M (p-c) <= 1``."""
        r = _rotation(self.angle)
        return r @ np.diag([self.semi_axis1**-2, self.semi_axis2**-2]) @ r.T

    def level(self, points) -> np.ndarray:
        """Quadratic form ``(p-c)' M (p-c)`` at ``points`` of shape (..., 2)."""
        d = np.asarray(points, dtype=float) - np.asarray(self.center)
        m = self.shape_matrix()
        return np.einsum("...i,ij,...j->...", d, m, d)

    def contains(self, points) -> np.ndarray:
        return self.level(points) <= 1.0


@dataclass(frozen=True)
class CylinderKernel:
    """Slanted elliptical cylinder: an ellipse moving with ``velocity`` for ``duration``.

    The set attached to a space-time point ``(s, t)`` collects the points
    ``(s - e - velocity * tau, t - tau)`` with ``e`` in the ellipse centred at
    the origin and ``0 <= tau < duration``.
    """

    semi_axis1: float
    semi_axis2: float
    angle: float = 0.0
    duration: float = 1.0
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.semi_axis1 > 0 and self.semi_axis2 > 0):
            raise ValueError("kernel semi-axes must be positive")
        if not self.duration > 0:
            raise ValueError("kernel duration must be positive")
        vel = (float(self.velocity[0]), float(self.velocity[1]))
        if not all(math.isfinite(v) for v in (*vel, self.angle)):
            raise ValueError("kernel angle and velocity must be finite")
        object.__setattr__(self, "velocity", vel)

    @property
    def base_area(self) -> float:
        return math.pi * self.semi_axis1 * self.semi_axis2

    @property
    def volume(self) -> float:
        return self.duration * self.base_area

    def ellipse(self, center=(0.0, 0.0)) -> Ellipse:
        return Ellipse(tuple(center), self.semi_axis1, self.semi_axis2, self.angle)

    @property
    def reach(self) -> float:
        """Largest spatial distance between a site and a point of its cylinder."""
        return max(self.semi_axis1, self.semi_axis2) + self.duration * math.hypot(*self.velocity)


@dataclass(frozen=True)
class SpaceTimePoint:
    s: tuple[float, float]
    t: float

    def __post_init__(self):
        s = (float(self.s[0]), float(self.s[1]))
        if not all(math.isfinite(v) for v in (*s, self.t)):
            raise ValueError("space-time point coordinates must be finite")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", float(self.t))


# ---------------------------------------------------------------------------
# general ellipse-ellipse overlap
# ---------------------------------------------------------------------------


def _merge_angles(angles: np.ndarray, tol: float) -> np.ndarray:
    if angles.size == 0:
        return angles
    a = np.sort(np.mod(angles, TWO_PI))
    keep = [a[0]]
    for v in a[1:]:
        if v - keep[-1] > tol:
            keep.append(v)
    if len(keep) > 1 and keep[0] + TWO_PI - keep[-1] <= tol:
        keep.pop()
    return np.array(keep)


def _polish(coeffs: np.ndarray, z: complex) -> complex:
    dcoeffs = np.polyder(coeffs)
    for _ in range(4):
        f = np.polyval(coeffs, z)
        if abs(f) <= ROOT_TOL:
            break
        df = np.polyval(dcoeffs, z)
        if df == 0:
            break
        z_new = z - f / df
        if abs(np.polyval(coeffs, z_new)) >= abs(f):
            break
        z = z_new
    return z


def _circle_crossings(conic: tuple[float, ...]) -> np.ndarray | None:
    """Angles where the unit circle meets the conic ``A x² + B xy + C y² + D x + E y + F = 0``.

    Substituting ``x = cos θ``, ``y = sin θ`` and ``z = exp(iθ)`` gives a
    quartic in ``z`` whose unit-modulus roots are the crossings. Returns None
    when the conic coincides with the unit circle.
    """
    A, B, C, D, E, F = conic
    coeffs = np.array(
        [
            (A - C) / 4 - 0.25j * B,
            D / 2 - 0.5j * E,
            (A + C) / 2 + F,
            D / 2 + 0.5j * E,
            (A - C) / 4 + 0.25j * B,
        ]
    )
    scale = max(abs(v) for v in conic)
    cmax = np.abs(coeffs).max()
    if cmax <= ROOT_TOL * scale:
        return None
    coeffs = coeffs / cmax
    # trailing and leading coefficients vanish together (conjugate pair)
    nz = np.nonzero(np.abs(coeffs) > ROOT_TOL)[0]
    coeffs = coeffs[nz[0] : nz[-1] + 1]
    if coeffs.size < 2:
        return np.empty(0)
    roots = np.roots(coeffs)
    out = []
    for z in roots:
        z = _polish(coeffs, z)
        if abs(abs(z) - 1.0) < UNIT_MODULUS_TOL:
            out.append(math.atan2(z.imag, z.real))
    return np.array(out)


def _unit_circle_overlap(center: np.ndarray, axes_rot: np.ndarray, a: float, b: float) -> float:
    """Area of the unit disc intersected with the ellipse ``center + axes_rot @ (a cos, b sin)``."""
    dist = math.hypot(center[0], center[1])
    big, small = max(a, b), min(a, b)
    if dist >= 1.0 + big:
        return 0.0
    if dist + big <= 1.0:
        return math.pi * a * b
    if dist + 1.0 <= small:
        return math.pi

    m = axes_rot @ np.diag([a**-2, b**-2]) @ axes_rot.T
    mc = m @ center
    conic = (m[0, 0], 2 * m[0, 1], m[1, 1], -2 * mc[0], -2 * mc[1], center @ mc - 1.0)

    def ellipse_level(p):
        d = p - center
        return d @ m @ d - 1.0

    def ellipse_point(psi):
        return center + axes_rot @ np.array([a * math.cos(psi), b * math.sin(psi)])

    def ellipse_angle(p):
        u = axes_rot.T @ (p - center)
        return math.atan2(u[1] / b, u[0] / a)

    thetas = _circle_crossings(conic)
    if thetas is None:
        return math.pi
    thetas = _merge_angles(thetas, MERGE_TOL)

    if thetas.size < 2:
        # no crossing (at most a tangency): containment or disjointness
        probe = thetas[0] + math.pi if thetas.size else 0.0
        if ellipse_level(np.array([math.cos(probe), math.sin(probe)])) < 0:
            return math.pi
        if thetas.size:
            psi = ellipse_angle(np.array([math.cos(thetas[0]), math.sin(thetas[0])])) + math.pi
        else:
            psi = 0.0
        p = ellipse_point(psi)
        if p @ p < 1.0:
            return math.pi * a * b
        return 0.0

    area = 0.0
    n = thetas.size
    for k in range(n):
        t0 = thetas[k]
        t1 = thetas[(k + 1) % n] + (TWO_PI if k == n - 1 else 0.0)
        mid = 0.5 * (t0 + t1)
        if ellipse_level(np.array([math.cos(mid), math.sin(mid)])) < 0:
            area += 0.5 * (t1 - t0)

    pts = np.column_stack([np.cos(thetas), np.sin(thetas)])
    psis = _merge_angles(np.array([ellipse_angle(p) for p in pts]), MERGE_TOL)
    n = psis.size
    for k in range(n):
        p0 = psis[k]
        p1 = psis[(k + 1) % n] + (TWO_PI if k == n - 1 else 0.0)
        q = ellipse_point(0.5 * (p0 + p1))
        if q @ q < 1.0:
            du = axes_rot @ np.array(
                [a * (math.cos(p1) - math.cos(p0)), b * (math.sin(p1) - math.sin(p0))]
            )
            area += 0.5 * (a * b * (p1 - p0) + center[0] * du[1] - center[1] * du[0])
    return min(max(area, 0.0), math.pi, math.pi * a * b)


def ellipse_overlap_area(e1: Ellipse, e2: Ellipse) -> float:
    """Exact area of the intersection of two ellipses.

    Examples
    --------
    >>> e = Ellipse((0.0, 0.0), 1.0, 1.0)
    >>> round(ellipse_overlap_area(e, Ellipse((1.0, 0.0), 1.0, 1.0)), 5)
    1.22837
    """
    a1, b1 = e1.semi_axis1, e1.semi_axis2
    # q = S^-1 R1' (p - c1) sends e1 onto the unit circle
    to_unit = _rotation(e1.angle) @ np.diag([a1, b1])
    from_unit = np.linalg.inv(to_unit)
    center = from_unit @ (np.asarray(e2.center) - np.asarray(e1.center))
    m = to_unit.T @ e2.shape_matrix() @ to_unit
    lam, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if np.linalg.det(vecs) < 0:
        vecs[:, 1] = -vecs[:, 1]
    a, b = 1.0 / math.sqrt(lam[0]), 1.0 / math.sqrt(lam[1])
    return _unit_circle_overlap(center, vecs, a, b) * a1 * b1


# ---------------------------------------------------------------------------
# congruent ellipses and cylinders
# ---------------------------------------------------------------------------


def _unit_lens(r: np.ndarray) -> np.ndarray:
    """Overlap area of two unit discs whose centers are ``r`` apart."""
    r = np.minimum(np.asarray(r, dtype=float), 2.0)
    h = 0.5 * r
    return 2.0 * np.arccos(h) - h * np.sqrt(np.maximum(4.0 - r * r, 0.0))


def congruent_overlap_area(offsets, semi_axis1: float, semi_axis2: float, angle: float) -> np.ndarray:
    """Overlap areas of an ellipse with translated copies of itself.

    ``offsets`` has shape (..., 2) and holds the translation vectors.
    """
    d = np.asarray(offsets, dtype=float)
    c, s = math.cos(angle), math.sin(angle)
    u = (c * d[..., 0] + s * d[..., 1]) / semi_axis1
    v = (-s * d[..., 0] + c * d[..., 1]) / semi_axis2
    return semi_axis1 * semi_axis2 * _unit_lens(np.hypot(u, v))


def overlap_volumes(spatial_lag, time_lag, kernel: CylinderKernel) -> np.ndarray:
    """Intersection volumes of the cylinders attached to ``(s, t)`` and ``(s + h, t + k)``.

    ``spatial_lag`` has shape (..., 2) (the vector ``h``) and ``time_lag``
    broadcasts against ``spatial_lag[..., 0]`` (the signed ``k``). The
    translation between the two moving ellipses is ``h - velocity * k``,
    which equals ``s~ - s`` after ordering the two points in time.
    """
    h = np.asarray(spatial_lag, dtype=float)
    k = np.asarray(time_lag, dtype=float)
    wx, wy = kernel.velocity
    offsets = np.stack([h[..., 0] - wx * k, h[..., 1] - wy * k], axis=-1)
    area = congruent_overlap_area(offsets, kernel.semi_axis1, kernel.semi_axis2, kernel.angle)
    return np.maximum(kernel.duration - np.abs(k), 0.0) * area


def cylinder_intersection_volume(x1: SpaceTimePoint, x2: SpaceTimePoint, kernel: CylinderKernel) -> float:
    """Volume of ``A_{x1} ∩ A_{x2}`` for the slanted cylinder ``kernel``."""
    if x2.t < x1.t:
        x1, x2 = x2, x1
    dt = x2.t - x1.t
    if dt >= kernel.duration:
        return 0.0
    h = np.array([x2.s[0] - x1.s[0], x2.s[1] - x1.s[1]])
    return float(overlap_volumes(h, dt, kernel))
