"""Finite-time stable and unstable line fields with convergence certificates.

The stable field at time n is obtained by pulling a far-future stable seed
back through the sequence: run the orbit of x forward K steps (the augmented
future repeats the last guide), seed with the stable eigendirection of that
guide, and pull back by step-wise inverse Jacobians with normalization.  The
unstable field mirrors this through the augmented past.  Each evaluation
carries a certificate: the subspace distance between the depth-K and
depth-(K+5) results must fall below a direction tolerance, and the depth is
increased until it does.

The module also estimates the Hoelder modulus of the fields by log-log
regression over dyadic separations, and provides the two growth diagnostics
used to compare expansion along nearby orbits: norm-ratio comparability of
cone vectors and the per-step coalescence of tangential Jacobians along
stable-related pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Direction, angle_of_vector, subspace_dist, torus_dist, wrap
from .sequence import MapSequence

__all__ = [
    "FieldCertificateError",
    "HolderEstimate",
    "ComparabilitySeries",
    "CoalescenceSeries",
    "eval_stable_field",
    "eval_unstable_field",
    "estimate_holder",
    "expansion_comparability",
    "jacobian_coalescence",
    "sample_field_grid",
]

DIR_TOL = 1e-10
DEPTH_MAX = 200
_DEPTH_STEP = 5
_MEMO_QUANTUM = 1e-6


class FieldCertificateError(RuntimeError):
    """Maximum pull-back depth reached without a direction certificate."""


def _inv22(M: np.ndarray) -> np.ndarray:
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    return out / det[..., None, None]


def _apply_norm(M: np.ndarray, w: np.ndarray) -> np.ndarray:
    w = np.einsum("pij,pj->pi", M, w)
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


class _CocycleLadder:
    """Per-step (inverse) Jacobians along an orbit, grown lazily in depth."""

    def __init__(self, seq: MapSequence, x: np.ndarray, n: int, stable: bool):
        self.seq = seq
        self.n = n
        self.stable = stable
        self.states = [np.atleast_2d(np.asarray(x, dtype=float))]
        self.mats: list[np.ndarray] = []

    def grow(self, depth: int) -> None:
        while len(self.mats) < depth:
            j = len(self.mats)
            x = self.states[-1]
            if self.stable:
                T = self.seq.map_for_step(self.n + j + 1)
                self.mats.append(_inv22(T.derivative(x)))
                self.states.append(T(x))
            else:
                T = self.seq.map_for_step(self.n - j)
                y = T.inverse(x)
                self.mats.append(T.derivative(y))
                self.states.append(y)

    def pull(self, depth: int, seed: np.ndarray) -> np.ndarray:
        """Unit directions at x from a seed planted at the given depth."""
        self.grow(depth)
        P = self.states[0].shape[0]
        w = np.broadcast_to(seed, (P, 2)).copy()
        for j in range(depth - 1, -1, -1):
            w = _apply_norm(self.mats[j], w)
        return w


def _eval_field(seq: MapSequence, n: int, x, stable: bool, tol: float,
                k_max: int, use_memo: bool):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = wrap(np.atleast_2d(x))
    P = pts.shape[0]
    angles = np.empty(P)
    defects = np.empty(P)
    depths = np.zeros(P, dtype=int)

    memo = seq.__dict__.setdefault("_field_memo", {}) if use_memo else None
    kind = "E" if stable else "F"
    keys = []
    missing = []
    for i, (px, py) in enumerate(pts):
        key = (kind, n, round(px / _MEMO_QUANTUM), round(py / _MEMO_QUANTUM))
        keys.append(key)
        if memo is not None and key in memo:
            angles[i], depths[i], defects[i] = memo[key]
        else:
            missing.append(i)

    if missing:
        idx = np.array(missing)
        guide = seq.guides[-1] if stable else seq.guides[0]
        seed = (guide.dir_s if stable else guide.dir_u).vector
        # start deep enough that the seed sits in the pure-guide tail
        if stable:
            k0 = max(seq.n_total - n, 0) + 12
        else:
            k0 = max(n, 0) + 12
        ladder = _CocycleLadder(seq, pts[idx], n, stable)
        k = min(k0, k_max - _DEPTH_STEP)
        while True:
            shallow = ladder.pull(k, seed)
            deep = ladder.pull(k + _DEPTH_STEP, seed)
            d = subspace_dist(angle_of_vector(shallow), angle_of_vector(deep))
            if float(np.max(d)) <= tol:
                break
            k += _DEPTH_STEP
            if k + _DEPTH_STEP > k_max:
                raise FieldCertificateError(
                    f"no direction certificate at depth {k_max} "
                    f"(defect {float(np.max(d)):.3e} > {tol:g})"
                )
        angles[idx] = angle_of_vector(deep)
        defects[idx] = d
        depths[idx] = k
        if memo is not None:
            for i in missing:
                memo[keys[i]] = (angles[i], depths[i], defects[i])

    cert = {"depth": int(np.max(depths)), "defect": float(np.max(defects)), "tol": tol}
    if single:
        return Direction(float(angles[0])), cert
    return angles, cert


def eval_stable_field(seq: MapSequence, n: int, x, tol: float = DIR_TOL,
                      k_max: int = DEPTH_MAX, use_memo: bool = True):
    """Finite-time stable direction at time n, with a depth certificate.

    Returns (Direction, cert) for a single point or (angles, cert) for a
    batch; cert reports the certified depth and the worst defect between
    successive depths.  Raises FieldCertificateError if the tolerance is
    not reached by depth k_max.
    """
    return _eval_field(seq, n, x, True, tol, k_max, use_memo)


def eval_unstable_field(seq: MapSequence, n: int, x, tol: float = DIR_TOL,
                        k_max: int = DEPTH_MAX, use_memo: bool = True):
    """Finite-time unstable direction at time n (push-forward from the past)."""
    return _eval_field(seq, n, x, False, tol, k_max, use_memo)


def sample_field_grid(seq: MapSequence, n: int, kind: str, grid_n: int = 64,
                      tol: float = DIR_TOL):
    """Sample a field on a uniform grid; returns (points, angles, cert)."""
    t = (np.arange(grid_n) + 0.5) / grid_n
    X, Y = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    f = eval_stable_field if kind == "stable" else eval_unstable_field
    angles, cert = f(seq, n, pts, tol=tol)
    return pts, angles, cert


# -- Hoelder modulus estimation ---------------------------------------------


@dataclass
class HolderEstimate:
    alpha_emp: float
    k_emp: float
    r2: float
    n_pairs: int
    flat: bool
    separations: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)
    alpha_pred: float | None = None
    consistent_with_pred: bool | None = None
    residuals: np.ndarray | None = field(default=None, repr=False)


def _loglog_fit(x: np.ndarray, y: np.ndarray):
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=-1)
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    fitted = A @ np.array([slope, intercept])
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - np.mean(ly)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan
    return float(slope), float(intercept), r2, ly - fitted


def estimate_holder(seq: MapSequence, n: int, kind: str = "stable",
                    samples: int = 64, distances=None, seed: int = 0,
                    alpha_pred: float | None = None) -> HolderEstimate:
    """Empirical Hoelder exponent of a field by dyadic-separation regression.

    Draws base points and random offset directions, evaluates the field at
    both ends of segments of dyadic lengths, and regresses the log of the
    per-scale geometric-mean subspace distance on log separation.  The raw
    pair ledger is kept on the estimate.  A constant field (zero distances)
    is reported with the flat flag and an infinite exponent.
    """
    if distances is None:
        distances = [2.0 ** (-k) for k in range(3, 13)]
    rng = np.random.default_rng(seed)
    base = rng.random((samples, 2))
    theta = rng.uniform(0.0, 2.0 * np.pi, samples)
    offs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    f = eval_stable_field if kind == "stable" else eval_unstable_field

    seps, dists = [], []
    a0, _ = f(seq, n, base)
    for h in distances:
        other = wrap(base + h * offs)
        a1, _ = f(seq, n, other)
        seps.append(torus_dist(base, other))
        dists.append(subspace_dist(a0, a1))
    scale_means = []
    for h, s, d in zip(distances, seps, dists):
        d = d[d > 1e-14]
        if len(d):
            scale_means.append((h, math.exp(float(np.mean(np.log(d))))))
    seps = np.concatenate(seps)
    dists = np.concatenate(dists)

    if len(scale_means) < 3:
        return HolderEstimate(math.inf, 0.0, math.nan, 0, True, seps, dists,
                              alpha_pred, None)
    # one statistic per dyadic scale: the geometric mean distance
    hs = np.array([p[0] for p in scale_means])
    ds = np.array([p[1] for p in scale_means])
    slope, intercept, r2, resid = _loglog_fit(hs, ds)
    consistent = None
    if alpha_pred is not None and math.isfinite(alpha_pred):
        # the theory gives an upper modulus; a materially smaller fitted
        # exponent would mean the field is rougher than certified
        consistent = slope >= alpha_pred - 0.1
    return HolderEstimate(slope, math.exp(intercept), r2, int(len(seps)), False,
                          seps, dists, alpha_pred, consistent, resid)


# -- growth comparability diagnostics ---------------------------------------


@dataclass
class ComparabilitySeries:
    ratios: np.ndarray
    angle_defects: np.ndarray
    ratio_sup: float
    decay_rate: float  # fitted geometric rate of the angle defect (nan if flat)


def expansion_comparability(seq: MapSequence, q: int, x, w, w_tilde,
                            n_steps: int) -> ComparabilitySeries:
    """Growth-ratio and angle-coalescence series for two vectors at x.

    Both vectors are pushed through the maps of the 1-based interval q
    (continued by its guide beyond the interval length).  Reported per step:
    the relative growth ratio |w~_n|/|w_n| for unit initial vectors, and the
    angle defect 1 - |cos| between the two images.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float) / np.linalg.norm(w)
    wt = np.asarray(w_tilde, dtype=float) / np.linalg.norm(w_tilde)
    steps = list(seq.interval_steps(q - 1))
    maps = [seq.maps[i - 1] for i in steps]
    guide = seq.guides[q - 1]
    while len(maps) < n_steps:
        maps.append(guide.map)

    ratios = np.empty(n_steps)
    defects = np.empty(n_steps)
    gw = gt = 1.0
    for n in range(n_steps):
        M = maps[n].derivative(x)
        w = M @ w
        wt = M @ wt
        nw, nt = np.linalg.norm(w), np.linalg.norm(wt)
        gw *= nw
        gt *= nt
        w /= nw
        wt /= nt
        ratios[n] = gt / gw
        defects[n] = 1.0 - abs(float(w @ wt))
        x = maps[n](x)

    good = defects > 1e-15
    if good.sum() >= 3:
        ns = np.arange(1, n_steps + 1)[good]
        A = np.stack([ns, np.ones_like(ns, dtype=float)], axis=-1)
        (slope, _), *_ = np.linalg.lstsq(A, np.log(defects[good]), rcond=None)
        rate = math.exp(slope)
    else:
        rate = math.nan
    return ComparabilitySeries(ratios, defects, float(np.max(ratios)), rate)


@dataclass
class CoalescenceSeries:
    defects: np.ndarray
    separations: np.ndarray
    mu_hat: float
    envelope: float  # max defect / mu_hat^n


def jacobian_coalescence(seq: MapSequence, x1, x2, w1, w2, n_steps: int,
                         delta: float = 0.05,
                         lam: float | None = None) -> CoalescenceSeries:
    """Per-step tangential-Jacobian defects along a stable-related pair.

    The points must stay close: their separation at step n is required to
    be below delta (times lam^n when a contraction rate is supplied), else
    a ValueError with the witness is raised.  The defect at step n is
    |J1/J2 - 1| for the one-step stretches of the carried unit directions.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    u1 = w1.vector if isinstance(w1, Direction) else np.asarray(w1, dtype=float)
    u2 = w2.vector if isinstance(w2, Direction) else np.asarray(w2, dtype=float)
    u1 = u1 / np.linalg.norm(u1)
    u2 = u2 / np.linalg.norm(u2)

    defects = np.empty(n_steps)
    seps = np.empty(n_steps)
    for n in range(n_steps):
        d = float(torus_dist(x1, x2))
        bound = delta * (lam ** n if lam is not None else 1.0)
        seps[n] = d
        if d >= bound:
            raise ValueError(
                f"pair separated at step {n}: distance {d:.3e} >= bound {bound:.3e}"
            )
        T = seq.map_for_step(n + 1)
        j1 = float(np.linalg.norm(T.derivative(x1) @ u1))
        j2 = float(np.linalg.norm(T.derivative(x2) @ u2))
        defects[n] = abs(j1 / j2 - 1.0)
        u1 = T.derivative(x1) @ u1
        u2 = T.derivative(x2) @ u2
        u1 /= np.linalg.norm(u1)
        u2 /= np.linalg.norm(u2)
        x1 = T(x1)
        x2 = T(x2)

    good = defects > 1e-15
    if good.sum() >= 3:
        ns = np.arange(n_steps)[good]
        A = np.stack([ns, np.ones_like(ns, dtype=float)], axis=-1)
        (slope, _), *_ = np.linalg.lstsq(A, np.log(defects[good]), rcond=None)
        mu = math.exp(slope)
    else:
        mu = 0.0
    env = float(np.max(defects / np.maximum(mu, 1e-300) ** np.arange(n_steps))) \
        if mu > 0 else float(np.max(defects, initial=0.0))
    return CoalescenceSeries(defects, seps, mu, env)
