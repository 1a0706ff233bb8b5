"""Flat-torus geometry: points, line directions, cones, and subspace metrics.

The phase space is the flat 2-torus R^2/Z^2 with the Euclidean metric.
One-dimensional subspaces of the tangent plane (line directions) are stored
as angles in [0, pi).  Two metrics on the space of lines are provided:

* ``subspace_dist`` is the operator-norm gap between orthogonal projections,
  which for lines in the plane equals |sin dtheta|;
* ``subspace_dist_prime`` is the minimal distance between unit vectors of the
  two lines, sqrt(2) * (1 - <A,B>)**0.5 with <A,B> the largest inner product
  of unit vectors, equal to 2*sin(dtheta/2) for the acute angle dtheta.

Cones are sectors around an axis line, with the complement line supplying the
second leg of an (oblique) basis: a vector v = alpha*u + beta*w lies in the
cone of half-width a iff |beta| <= a*|alpha|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "wrap",
    "torus_delta",
    "torus_dist",
    "lift_path",
    "Direction",
    "angle_of_vector",
    "subspace_dist",
    "subspace_dist_prime",
    "Cone",
]


def wrap(p):
    """Reduce coordinates mod 1 into [0, 1)."""
    return np.asarray(p, dtype=float) % 1.0


def torus_delta(a, b):
    """Shortest displacement a - b on the torus, componentwise in [-1/2, 1/2)."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return (d + 0.5) % 1.0 - 0.5


def torus_dist(a, b):
    """Geodesic (shortest Euclidean) distance on the flat torus."""
    d = torus_delta(a, b)
    return np.sqrt(np.sum(d * d, axis=-1))


def lift_path(points):
    """Lift a sequence of torus points to a continuous path in R^2.

    Consecutive points must be closer than 1/2 on the torus so that the
    nearest-representative choice is unambiguous.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    steps = torus_delta(pts[1:], pts[:-1])
    out = np.empty_like(pts)
    out[0] = pts[0]
    np.cumsum(steps, axis=0, out=out[1:])
    out[1:] += pts[0]
    return out


def _wrap_angle(theta):
    """Reduce a line angle mod pi into [0, pi)."""
    return np.asarray(theta, dtype=float) % np.pi


def angle_of_vector(v):
    """Line angle in [0, pi) spanned by a nonzero vector (vectorized)."""
    v = np.asarray(v, dtype=float)
    return np.arctan2(v[..., 1], v[..., 0]) % np.pi


def acute_angle(theta1, theta2):
    """Acute angle in [0, pi/2] between two lines given by angles."""
    d = (np.asarray(theta1) - np.asarray(theta2) + 0.5 * np.pi) % np.pi - 0.5 * np.pi
    return np.abs(d)


def subspace_dist(theta1, theta2):
    """Projection-gap distance between two lines: |sin dtheta|.

    Accepts angles (scalars or arrays) or Direction instances.
    """
    return np.abs(np.sin(_angle(theta1) - _angle(theta2)))


def subspace_dist_prime(theta1, theta2):
    """Closest-unit-vector distance between two lines: 2*sin(acute/2).

    Satisfies subspace_dist_prime <= sqrt(2) * subspace_dist**0.5.
    """
    return 2.0 * np.sin(0.5 * acute_angle(_angle(theta1), _angle(theta2)))


def _angle(x):
    if isinstance(x, Direction):
        return x.angle
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Direction:
    """A line through the origin, stored as an angle in [0, pi)."""

    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", float(_wrap_angle(self.angle)))

    @classmethod
    def from_vector(cls, v) -> "Direction":
        v = np.asarray(v, dtype=float)
        n = np.hypot(v[0], v[1])
        if not n > 0.0:
            raise ValueError("zero vector has no direction")
        return cls(float(np.arctan2(v[1], v[0])))

    @property
    def vector(self) -> np.ndarray:
        """Unit vector (cos theta, sin theta)."""
        return np.array([np.cos(self.angle), np.sin(self.angle)])

    def perp(self) -> "Direction":
        return Direction(self.angle + 0.5 * np.pi)

    def dist(self, other: "Direction") -> float:
        return float(subspace_dist(self.angle, other.angle))


@dataclass(frozen=True)
class Cone:
    """Sector {alpha*u + beta*w : |beta| <= half_width * |alpha|}.

    ``axis`` (u) and ``complement`` (w) are line directions forming an oblique
    basis of the plane; they must be transversal.  Membership margins are
    normalized by the vector length so they are scale invariant.
    """

    axis: Direction
    complement: Direction
    half_width: float

    def __post_init__(self):
        if not 0.0 < self.half_width:
            raise ValueError("cone half-width must be positive")
        det = self._det()
        if abs(det) < 1e-12:
            raise ValueError("cone axis and complement are (nearly) parallel")

    def _det(self) -> float:
        u, w = self.axis.vector, self.complement.vector
        return u[0] * w[1] - u[1] * w[0]

    def decompose(self, v):
        """Coefficients (alpha, beta) with v = alpha*u + beta*w, vectorized."""
        v = np.asarray(v, dtype=float)
        u, w = self.axis.vector, self.complement.vector
        det = self._det()
        alpha = (v[..., 0] * w[1] - v[..., 1] * w[0]) / det
        beta = (u[0] * v[..., 1] - u[1] * v[..., 0]) / det
        return alpha, beta

    def margin(self, v):
        """Scaled membership margin (half_width*|alpha| - |beta|) / |v|.

        Nonnegative iff v lies in the cone; zero exactly on the boundary.
        """
        v = np.asarray(v, dtype=float)
        alpha, beta = self.decompose(v)
        norm = np.sqrt(np.sum(v * v, axis=-1))
        with np.errstate(invalid="ignore"):
            return (self.half_width * np.abs(alpha) - np.abs(beta)) / norm

    def contains(self, v, strict: bool = False):
        m = self.margin(v)
        return m > 0.0 if strict else m >= 0.0

    def sample_dirs(self, count: int) -> np.ndarray:
        """Unit vectors spanning the cone, including both boundary rays.

        Parameter t runs over linspace(-1, 1, count); t = +-1 gives the
        boundary directions |beta| = half_width*|alpha|.
        """
        if count < 2:
            raise ValueError("need at least the two boundary directions")
        t = np.linspace(-1.0, 1.0, count)
        u, w = self.axis.vector, self.complement.vector
        vs = u[None, :] + (t * self.half_width)[:, None] * w[None, :]
        return vs / np.linalg.norm(vs, axis=1, keepdims=True)

    def boundary_dirs(self) -> np.ndarray:
        return self.sample_dirs(2)

    def narrowed(self, factor: float) -> "Cone":
        """Same axes with the half-width scaled by ``factor``."""
        return Cone(self.axis, self.complement, self.half_width * factor)
