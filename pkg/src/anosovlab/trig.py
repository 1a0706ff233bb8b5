"""Trigonometric polynomials on the torus with exact derivatives.

Both scalar functions (observables, densities) and vector fields (map
perturbations) are finite Fourier sums over integer frequency vectors
k in Z^2:

    f(x) = const + sum_k  a_k * cos(2 pi k.x) + b_k * sin(2 pi k.x)

Coefficients are real; for vector fields a_k, b_k are in R^2.  Derivatives
of any order are again trig polynomials and are evaluated in closed form,
and sup bounds follow from coefficient sums, so C0/C1/C2 distances between
maps can be bounded analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

__all__ = ["TrigScalar", "TrigVectorField", "TWO_PI"]


def _check_term_keys(terms) -> None:
    for t in terms:
        unknown = set(t) - {"k", "cos", "sin"}
        if unknown:
            raise ValueError(
                f"unknown term keys {sorted(unknown)}; terms use 'k', 'cos', 'sin'"
            )
        if "k" not in t:
            raise ValueError("every term needs a frequency vector 'k'")


def _as_freqs(freqs) -> np.ndarray:
    k = np.atleast_2d(np.asarray(freqs, dtype=int))
    if k.ndim != 2 or k.shape[1] != 2:
        raise ValueError("frequencies must be an (m, 2) integer array")
    if np.any(np.all(k == 0, axis=1)):
        raise ValueError("zero frequency belongs in the constant term")
    return k


def _phases(freqs: np.ndarray, x: np.ndarray) -> np.ndarray:
    # phase[..., m] = 2 pi k_m . x
    return TWO_PI * (x[..., None, 0] * freqs[:, 0] + x[..., None, 1] * freqs[:, 1])


@dataclass(frozen=True)
class TrigScalar:
    """Real trig polynomial R^2/Z^2 -> R with closed-form derivatives."""

    const: float = 0.0
    freqs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    cos_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sin_coef: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        k = _as_freqs(self.freqs) if np.size(self.freqs) else np.zeros((0, 2), int)
        a = np.asarray(self.cos_coef, dtype=float).reshape(-1)
        b = np.asarray(self.sin_coef, dtype=float).reshape(-1)
        if not (len(a) == len(b) == len(k)):
            raise ValueError("coefficient arrays must match the frequency list")
        object.__setattr__(self, "freqs", k)
        object.__setattr__(self, "cos_coef", a)
        object.__setattr__(self, "sin_coef", b)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if len(self.freqs) == 0:
            return np.full(x.shape[:-1], self.const)
        ph = _phases(self.freqs, x)
        return self.const + np.cos(ph) @ self.cos_coef + np.sin(ph) @ self.sin_coef

    def grad(self, x) -> np.ndarray:
        """Gradient, shape x.shape[:-1] + (2,)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        if len(self.freqs) == 0:
            return out
        ph = _phases(self.freqs, x)
        # d/dx_j [a cos + b sin] = 2 pi k_j (-a sin + b cos)
        radial = -np.sin(ph) * self.cos_coef + np.cos(ph) * self.sin_coef
        for j in range(2):
            out[..., j] = TWO_PI * radial @ self.freqs[:, j].astype(float)
        return out

    @property
    def amplitudes(self) -> np.ndarray:
        """Per-term sup amplitude hypot(a_k, b_k)."""
        return np.hypot(self.cos_coef, self.sin_coef)

    def sup_bound(self) -> float:
        return float(self.const + np.sum(self.amplitudes))

    def inf_bound(self) -> float:
        return float(self.const - np.sum(self.amplitudes))

    def lipschitz_bound(self) -> float:
        """Upper bound for sup |grad f|."""
        if len(self.freqs) == 0:
            return 0.0
        knorm = np.linalg.norm(self.freqs, axis=1)
        return float(TWO_PI * np.sum(knorm * self.amplitudes))

    def range_bound(self) -> float:
        """Upper bound for sup f - inf f."""
        return float(2.0 * np.sum(self.amplitudes))

    def to_dict(self) -> dict:
        return {
            "const": self.const,
            "terms": [
                {"k": [int(k0), int(k1)], "cos": float(a), "sin": float(b)}
                for (k0, k1), a, b in zip(self.freqs, self.cos_coef, self.sin_coef)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrigScalar":
        terms = d.get("terms", [])
        _check_term_keys(terms)
        return cls(
            const=float(d.get("const", 0.0)),
            freqs=np.array([t["k"] for t in terms], dtype=int).reshape(-1, 2),
            cos_coef=np.array([t.get("cos", 0.0) for t in terms], dtype=float),
            sin_coef=np.array([t.get("sin", 0.0) for t in terms], dtype=float),
        )


@dataclass(frozen=True)
class TrigVectorField:
    """Trig-polynomial vector field g: R^2/Z^2 -> R^2 (zero mean term).

    cos_coef and sin_coef have shape (m, 2): component i of g is
    sum_k cos_coef[k, i] cos(2 pi k.x) + sin_coef[k, i] sin(2 pi k.x).
    """

    freqs: np.ndarray
    cos_coef: np.ndarray
    sin_coef: np.ndarray

    def __post_init__(self):
        k = _as_freqs(self.freqs) if np.size(self.freqs) else np.zeros((0, 2), int)
        a = np.asarray(self.cos_coef, dtype=float).reshape(-1, 2) if np.size(self.cos_coef) else np.zeros((0, 2))
        b = np.asarray(self.sin_coef, dtype=float).reshape(-1, 2) if np.size(self.sin_coef) else np.zeros((0, 2))
        if not (a.shape[0] == b.shape[0] == k.shape[0]):
            raise ValueError("coefficient arrays must match the frequency list")
        object.__setattr__(self, "freqs", k)
        object.__setattr__(self, "cos_coef", a)
        object.__setattr__(self, "sin_coef", b)

    @classmethod
    def zero(cls) -> "TrigVectorField":
        return cls(np.zeros((0, 2), int), np.zeros((0, 2)), np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.freqs)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if len(self.freqs) == 0:
            return np.zeros(x.shape)
        ph = _phases(self.freqs, x)
        return np.cos(ph) @ self.cos_coef + np.sin(ph) @ self.sin_coef

    def jacobian(self, x) -> np.ndarray:
        """Dg, shape x.shape[:-1] + (2, 2), [i, j] = dg_i/dx_j."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        if len(self.freqs) == 0:
            return out
        ph = _phases(self.freqs, x)
        s, c = np.sin(ph), np.cos(ph)
        kf = self.freqs.astype(float)
        for i in range(2):
            radial = -s * self.cos_coef[:, i] + c * self.sin_coef[:, i]
            for j in range(2):
                out[..., i, j] = TWO_PI * radial @ kf[:, j]
        return out

    def hessian(self, x) -> np.ndarray:
        """D^2 g, shape x.shape[:-1] + (2, 2, 2), [i, j, l] = d2 g_i / dx_j dx_l."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        if len(self.freqs) == 0:
            return out
        ph = _phases(self.freqs, x)
        s, c = np.sin(ph), np.cos(ph)
        kf = self.freqs.astype(float)
        for i in range(2):
            # second derivative rotates the phase twice
            radial = -c * self.cos_coef[:, i] - s * self.sin_coef[:, i]
            for j in range(2):
                for l in range(2):
                    out[..., i, j, l] = (TWO_PI ** 2) * radial @ (kf[:, j] * kf[:, l])
        return out

    @property
    def amplitudes(self) -> np.ndarray:
        """Per-term sup bound on |g_term(x)|_2 (triangle inequality)."""
        return np.sqrt(
            np.hypot(self.cos_coef[:, 0], self.sin_coef[:, 0]) ** 2
            + np.hypot(self.cos_coef[:, 1], self.sin_coef[:, 1]) ** 2
        )

    def max_freq_norm(self) -> float:
        if len(self.freqs) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.freqs, axis=1)))

    def sup_bound(self) -> float:
        """Upper bound for sup |g|_2."""
        return float(np.sum(self.amplitudes))

    def jacobian_bound(self) -> float:
        """Upper bound for sup |Dg| (operator norm, via Frobenius)."""
        if len(self.freqs) == 0:
            return 0.0
        knorm = np.linalg.norm(self.freqs, axis=1)
        return float(TWO_PI * np.sum(knorm * self.amplitudes))

    def hessian_bound(self) -> float:
        """Upper bound for sup |D^2 g|."""
        if len(self.freqs) == 0:
            return 0.0
        knorm = np.linalg.norm(self.freqs, axis=1)
        return float(TWO_PI ** 2 * np.sum(knorm ** 2 * self.amplitudes))

    def scaled(self, c: float) -> "TrigVectorField":
        return TrigVectorField(self.freqs, c * self.cos_coef, c * self.sin_coef)

    def plus(self, other: "TrigVectorField") -> "TrigVectorField":
        return self.minus(other.scaled(-1.0))

    def minus(self, other: "TrigVectorField") -> "TrigVectorField":
        """Difference of two fields as a single field (frequency union)."""
        keys = {}
        for src, sign in ((self, 1.0), (other, -1.0)):
            for (k0, k1), a, b in zip(src.freqs, src.cos_coef, src.sin_coef):
                key = (int(k0), int(k1))
                acc = keys.setdefault(key, np.zeros(4))
                acc[:2] += sign * a
                acc[2:] += sign * b
        if not keys:
            return TrigVectorField.zero()
        ks = sorted(keys)
        return TrigVectorField(
            np.array(ks, dtype=int),
            np.array([keys[k][:2] for k in ks]),
            np.array([keys[k][2:] for k in ks]),
        )

    def to_dict(self) -> dict:
        return {
            "terms": [
                {
                    "k": [int(k0), int(k1)],
                    "cos": [float(a0), float(a1)],
                    "sin": [float(b0), float(b1)],
                }
                for (k0, k1), (a0, a1), (b0, b1) in zip(
                    self.freqs, self.cos_coef, self.sin_coef
                )
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrigVectorField":
        terms = d.get("terms", [])
        _check_term_keys(terms)
        if not terms:
            return cls.zero()
        return cls(
            np.array([t["k"] for t in terms], dtype=int),
            np.array([t.get("cos", (0.0, 0.0)) for t in terms], dtype=float),
            np.array([t.get("sin", (0.0, 0.0)) for t in terms], dtype=float),
        )
