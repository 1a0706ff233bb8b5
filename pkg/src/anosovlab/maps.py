"""Torus diffeomorphisms of Anosov type and their guide maps.

A map is T(x) = A x + g(x) mod 1 with A an integer matrix, |det A| = 1,
and g a trig-polynomial displacement field (periodic, so T is well defined
on the torus).  Derivatives of all orders are exact; the inverse is computed
by Newton iteration on the universal cover.

A guide map is an Anosov map designated as the center of a C2 neighbourhood
from which the maps of one interval of the composition are drawn.  It carries
the eigen-data of its linear part, the cone half-width, and the declared
neighbourhood radius; for a nonlinear guide the same constant cone family is
used and is certified numerically by the sequence validator rather than
derived from an exact splitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import Cone, Direction, wrap
from .trig import TrigVectorField

__all__ = ["AnosovMap", "GuideMap", "NewtonError"]

NEWTON_TOL = 1e-13
NEWTON_MAXITER = 50


class NewtonError(ArithmeticError):
    """Newton inversion failed to reach tolerance."""


def _solve2(M, rhs):
    """Solve the batched 2x2 systems M x = rhs by the closed-form inverse."""
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    out = np.empty_like(rhs)
    out[..., 0] = (M[..., 1, 1] * rhs[..., 0] - M[..., 0, 1] * rhs[..., 1]) / det
    out[..., 1] = (-M[..., 1, 0] * rhs[..., 0] + M[..., 0, 0] * rhs[..., 1]) / det
    return out


def operator_norms(M) -> np.ndarray:
    """Largest singular value of batched 2x2 matrices (closed form)."""
    M = np.asarray(M, dtype=float)
    frob2 = np.sum(M * M, axis=(-2, -1))
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    gap = np.sqrt(np.maximum(frob2 * frob2 - 4.0 * det * det, 0.0))
    return np.sqrt(0.5 * (frob2 + gap))


class AnosovMap:
    """T(x) = A x + g(x) mod 1 with exact derivatives and Newton inverse."""

    def __init__(self, A, g: TrigVectorField | None = None, eps: float = 1.0):
        A = np.asarray(A, dtype=int)
        if A.shape != (2, 2):
            raise ValueError("linear part must be a 2x2 integer matrix")
        det = int(round(np.linalg.det(A)))
        if abs(det) != 1:
            raise ValueError("linear part must have determinant +-1")
        self.A = A
        self.det = det
        if g is None:
            g = TrigVectorField.zero()
        # fold the amplitude into the field; eps kept for reporting only
        self.g = g.scaled(eps) if eps != 1.0 else g
        self.eps = float(eps)
        self.Af = A.astype(float)
        self.Ainv = np.linalg.inv(self.Af)

    # -- evaluation ---------------------------------------------------------

    def __call__(self, x) -> np.ndarray:
        return wrap(self.lift(x))

    def lift(self, x) -> np.ndarray:
        """Lifted map A x + g(x) on R^2 (no reduction mod 1)."""
        x = np.asarray(x, dtype=float)
        return x @ self.Af.T + self.g(x)

    def derivative(self, x) -> np.ndarray:
        """DT(x) = A + Dg(x), shape x.shape[:-1] + (2, 2)."""
        x = np.asarray(x, dtype=float)
        return self.Af + self.g.jacobian(x)

    def second_derivative(self, x) -> np.ndarray:
        return self.g.hessian(x)

    # -- inverse ------------------------------------------------------------

    def inverse_lift(self, z, tol: float = NEWTON_TOL) -> np.ndarray:
        """Solve A x + g(x) = z on R^2 by Newton from x0 = A^-1 z."""
        z = np.asarray(z, dtype=float)
        x = z @ self.Ainv.T
        if len(self.g) == 0:
            return x
        for _ in range(NEWTON_MAXITER):
            r = self.lift(x) - z
            if np.max(np.abs(r)) <= tol:
                return x
            x = x - _solve2(self.derivative(x), r)
        r = self.lift(x) - z
        if np.max(np.abs(r)) <= tol:
            return x
        raise NewtonError(
            f"inverse Newton stalled at residual {np.max(np.abs(r)):.3e}"
        )

    def inverse(self, y, tol: float = NEWTON_TOL) -> np.ndarray:
        """Preimage on the torus."""
        return wrap(self.inverse_lift(wrap(y), tol=tol))

    def inverse_derivative(self, y) -> np.ndarray:
        """DT^-1 at y, i.e. (DT)^-1 evaluated at the preimage."""
        x = self.inverse(y)
        M = self.derivative(x)
        det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
        inv = np.empty_like(M)
        inv[..., 0, 0] = M[..., 1, 1] / det
        inv[..., 0, 1] = -M[..., 0, 1] / det
        inv[..., 1, 0] = -M[..., 1, 0] / det
        inv[..., 1, 1] = M[..., 0, 0] / det
        return inv

    # -- analytic bounds ----------------------------------------------------

    def deriv_sup_bound(self) -> float:
        """Analytic upper bound for sup |DT| (operator norm)."""
        return float(operator_norms(self.Af) + self.g.jacobian_bound())

    def hessian_sup_bound(self) -> float:
        return self.g.hessian_bound()

    def diffeo_margin(self) -> float:
        """Positive iff the Newton contraction criterion |A^-1| |Dg| < 1 holds.

        Sufficient for T to be a diffeomorphism (global injectivity of the
        lift follows from invertibility of A + Dg(x) plus properness).
        """
        return float(1.0 - operator_norms(self.Ainv) * self.g.jacobian_bound())

    def is_hyperbolic_linear(self) -> bool:
        tr = int(self.A[0, 0] + self.A[1, 1])
        if self.det == 1:
            return abs(tr) > 2
        return tr != 0

    # -- bookkeeping --------------------------------------------------------

    def content_key(self) -> bytes:
        """Stable identity of the map contents (for matrix caching)."""
        return b"".join(
            np.ascontiguousarray(a).tobytes()
            for a in (self.A, self.g.freqs, self.g.cos_coef, self.g.sin_coef)
        )

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "g": self.g.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "AnosovMap":
        g = TrigVectorField.from_dict(d.get("g", {}))
        return cls(np.array(d["A"], dtype=int), g, eps=float(d.get("eps", 1.0)))

    def __repr__(self) -> str:
        return f"AnosovMap(A={self.A.tolist()}, terms={len(self.g)})"


def linear_eigen_data(A) -> tuple[float, float, Direction, Direction]:
    """(lam_u, lam_s, dir_u, dir_s) of a hyperbolic 2x2 matrix.

    lam_u is the eigenvalue of largest modulus.  Directions are lines, so
    eigenvalue signs do not affect them.
    """
    A = np.asarray(A, dtype=float)
    tr = A[0, 0] + A[1, 1]
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    disc = tr * tr - 4.0 * det
    if disc <= 0.0:
        raise ValueError("linear part is not hyperbolic (complex eigenvalues)")
    root = np.sqrt(disc)
    lam1, lam2 = 0.5 * (tr + root), 0.5 * (tr - root)
    if abs(lam1) < abs(lam2):
        lam1, lam2 = lam2, lam1
    if not (abs(lam1) > 1.0 > abs(lam2)):
        raise ValueError("linear part is not hyperbolic (unit-circle eigenvalue)")

    def eigvec(lam):
        if abs(A[0, 1]) > 1e-14:
            return np.array([A[0, 1], lam - A[0, 0]])
        if abs(A[1, 0]) > 1e-14:
            return np.array([lam - A[1, 1], A[1, 0]])
        return np.array([1.0, 0.0]) if abs(A[0, 0] - lam) < 1e-14 else np.array([0.0, 1.0])

    return (
        float(lam1),
        float(lam2),
        Direction.from_vector(eigvec(lam1)),
        Direction.from_vector(eigvec(lam2)),
    )


@dataclass
class GuideMap:
    """Center of one interval's C2 neighbourhood, with cone data.

    half_width is the cone aperture a_q; eps_ball the declared neighbourhood
    radius (a C0 coefficient-sum bound; the validator also reports the implied
    C1/C2 radii).  The cone axes come from the eigendirections of the linear
    part; for a nonlinear guide they are certified by validation.
    """

    map: AnosovMap
    half_width: float = 0.1
    eps_ball: float = 0.0

    def __post_init__(self):
        if not self.map.is_hyperbolic_linear():
            raise ValueError("guide linear part must be hyperbolic")
        lam_u, lam_s, dir_u, dir_s = linear_eigen_data(self.map.A)
        self.lam_u = lam_u
        self.lam_s = lam_s
        self.dir_u = dir_u
        self.dir_s = dir_s

    @property
    def is_linear(self) -> bool:
        return len(self.map.g) == 0

    def unstable_cone(self) -> Cone:
        return Cone(self.dir_u, self.dir_s, self.half_width)

    def stable_cone(self) -> Cone:
        return Cone(self.dir_s, self.dir_u, self.half_width)

    @cached_property
    def deriv_grid_sup(self) -> float:
        """sup_x |DT~(x)| measured on a grid with a second-derivative slack."""
        n = 64
        ax = (np.arange(n) + 0.5) / n
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        sup = float(np.max(operator_norms(self.map.derivative(pts))))
        slack = self.map.hessian_sup_bound() * (np.sqrt(2.0) / (2 * n))
        return min(sup + slack, self.map.deriv_sup_bound())

    def lambda_bar(self) -> float:
        """Growth cap sup |DT~| + eps_ball for curves driven by this interval."""
        return self.deriv_grid_sup + self.eps_ball

    def to_dict(self) -> dict:
        d = self.map.to_dict()
        d["half_width"] = self.half_width
        d["eps_ball"] = self.eps_ball
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuideMap":
        return cls(
            AnosovMap.from_dict(d),
            half_width=float(d.get("half_width", 0.1)),
            eps_ball=float(d.get("eps_ball", 0.0)),
        )
