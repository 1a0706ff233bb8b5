"""Unstable curves, densities, standard pairs, and their evolution.

Curves are adaptive polylines in the universal cover: nodes carry lifted
coordinates, tangents come from central differences, curvatures from
three-point circumcircles, and segment lengths use the circle-corrected
chord 2R asin(c/2R) so that arc-length quadrature stays well below the
1e-8 relative target at the default resolution.  Mass bookkeeping is
per-segment and transport-exact: mapping a curve never changes segment
masses, refinement splits them proportionally to sub-integrals, merging
adds them, so total mass is conserved to rounding.

A standard pair couples a curve of length between ell and L and curvature
below the cap with a probability density whose log is regular; a standard
family adds a probability weight vector.  Evolution maps nodes stepwise,
refines the polyline against spacing and bending thresholds, pushes the
density with the tangential Jacobian, cuts over-long curves into equal
pieces, and can resample a family down to a pair budget (seeded,
mass-proportional) when the piece count would otherwise grow with the
total length.

Long-horizon diagnostics (curvature flattening, distortion) evolve a
trimmed arc window around the curve middle instead of the full image,
which grows exponentially; growth checks use short seed curves or coarse
curvature-adaptive resolution so the measured length stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import angle_of_vector, wrap
from .maps import AnosovMap
from .sequence import MapSequence

__all__ = [
    "ConeError",
    "RefinementPolicy",
    "UnstableCurve",
    "DensityProfile",
    "StandardPair",
    "StandardFamily",
    "line_curve",
    "wiggle_curve",
    "uniform_pair",
    "random_standard_pair",
    "evolve_pair",
    "evolve_family",
    "growth_check",
    "growth_check_sampled",
    "curvature_check",
    "distortion_check",
    "curve_jacobian",
    "density_comparability",
    "density_regularity",
    "subcurve_measure",
]

ELL_MIN = 0.05  # shortest standard-curve length
L_MAX = 0.5  # longest standard-curve length
KAPPA_CAP = 100.0  # default curvature cap for standard curves


class ConeError(ValueError):
    """A curve tangent left the unstable cone; witness in args."""


@dataclass(frozen=True)
class RefinementPolicy:
    """Node spacing control: split above h_max or when a segment bends by
    more than theta radians (spacing times curvature); merge below h_min."""

    h_max: float = 1e-3
    h_min: float = 1e-5
    theta: float = 0.05
    use_bend: bool = False  # when True the split threshold is min(h_max, theta/kappa)
    max_nodes: int = 2_000_000

    def split_threshold(self, kappa_seg: np.ndarray) -> np.ndarray:
        if not self.use_bend:
            return np.full_like(kappa_seg, self.h_max)
        with np.errstate(divide="ignore"):
            return np.minimum(self.h_max, self.theta / np.maximum(kappa_seg, 1e-30))


COARSE_POLICY = RefinementPolicy(h_max=0.05, h_min=1e-7, theta=0.05, use_bend=True)


# -- polyline geometry -------------------------------------------------------


def _geometry(nodes: np.ndarray):
    """(chords, corrected segment lengths, arc table, tangent angles, curvatures)."""
    n = len(nodes)
    if n < 2:
        raise ValueError("a curve needs at least two nodes")
    d = np.diff(nodes, axis=0)
    chord = np.linalg.norm(d, axis=1)
    if np.any(chord == 0.0):
        raise ValueError("degenerate zero-length segment")

    tvec = np.empty_like(nodes)
    tvec[0] = d[0]
    tvec[-1] = d[-1]
    if n > 2:
        tvec[1:-1] = nodes[2:] - nodes[:-2]
    tang = angle_of_vector(tvec)

    kappa = np.zeros(n)
    if n > 2:
        cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
        far = np.linalg.norm(nodes[2:] - nodes[:-2], axis=1)
        denom = chord[:-1] * chord[1:] * far
        kappa[1:-1] = np.where(denom > 0, 2.0 * np.abs(cross) / np.maximum(denom, 1e-300), 0.0)
        kappa[0] = kappa[1]
        kappa[-1] = kappa[-2]

    kseg = 0.5 * (kappa[:-1] + kappa[1:])
    half = 0.5 * chord * kseg  # sin of half the subtended angle
    seg = np.where(half > 1e-8,
                   np.where(half < 1.0, 2.0 / np.maximum(kseg, 1e-300)
                            * np.arcsin(np.minimum(half, 1.0)), chord),
                   chord * (1.0 + half * half / 6.0))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    return chord, seg, arc, tang, kappa


@dataclass
class UnstableCurve:
    """Polyline in lifted coordinates with a cone-family tag q (1-based)."""

    nodes: np.ndarray
    q: int = 1
    chord: np.ndarray = field(init=False, repr=False)
    seg_len: np.ndarray = field(init=False, repr=False)
    arc: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)
    curvatures: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.refresh()

    def refresh(self) -> None:
        self.chord, self.seg_len, self.arc, self.tangents, self.curvatures = \
            _geometry(self.nodes)

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def max_curvature(self) -> float:
        return float(np.max(self.curvatures))

    def unit_tangents(self) -> np.ndarray:
        return np.stack([np.cos(self.tangents), np.sin(self.tangents)], axis=-1)

    def points_on_torus(self) -> np.ndarray:
        return wrap(self.nodes)

    def length_richardson(self) -> tuple[float, float]:
        """(length, relative error estimate) by node decimation."""
        full = self.length
        if self.n_nodes < 5:
            return full, 0.0
        sub = self.nodes[::2] if (self.n_nodes - 1) % 2 == 0 else \
            np.concatenate([self.nodes[:-1:2], self.nodes[-1:]])
        _, seg, _, _, _ = _geometry(sub)
        half = float(np.sum(seg))
        return full, abs(full - half) / (3.0 * full)


@dataclass
class DensityProfile:
    """Per-node log-density and per-segment masses, linear in arc length."""

    log_rho: np.ndarray
    seg_mass: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.sum(self.seg_mass))

    def normalized(self) -> "DensityProfile":
        m = self.mass
        return DensityProfile(self.log_rho - math.log(m), self.seg_mass / m)


@dataclass
class StandardPair:
    """A curve with a probability density and coupling bookkeeping."""

    curve: UnstableCurve
    density: DensityProfile
    remaining: np.ndarray | None = None

    def __post_init__(self):
        if self.remaining is None:
            self.remaining = np.ones(self.curve.n_nodes)

    @property
    def length(self) -> float:
        return self.curve.length

    @property
    def is_remnant(self) -> bool:
        return self.length < ELL_MIN

    def remaining_mass(self) -> float:
        r = 0.5 * (self.remaining[:-1] + self.remaining[1:])
        return float(np.sum(self.density.seg_mass * r))

    def coupled_mass(self) -> float:
        return self.density.mass - self.remaining_mass()


@dataclass
class StandardFamily:
    pairs: list[StandardPair]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.pairs) != len(self.weights):
            raise ValueError("one weight per pair")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    def total_remaining(self) -> float:
        return float(sum(w * p.remaining_mass()
                         for w, p in zip(self.weights, self.pairs)))


# -- constructors ------------------------------------------------------------


def _resample_even(points: np.ndarray, n_out: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, len(points))
    ti = np.linspace(0.0, 1.0, n_out)
    return np.stack([np.interp(ti, t, points[:, 0]), np.interp(ti, t, points[:, 1])],
                    axis=-1)


def _as_unit(direction) -> np.ndarray:
    v = direction.vector if hasattr(direction, "vector") else \
        np.asarray(direction, dtype=float)
    return v / np.linalg.norm(v)


def line_curve(center, direction, length: float, q: int = 1,
               spacing: float = 1e-3) -> UnstableCurve:
    """Straight segment through center along a unit direction."""
    center = np.asarray(center, dtype=float)
    u = _as_unit(direction)
    n = max(int(math.ceil(length / spacing)) + 1, 2)
    s = np.linspace(-0.5 * length, 0.5 * length, n)
    return UnstableCurve(center + s[:, None] * u, q)


def wiggle_curve(center, direction, length: float, kappa: float, q: int = 1,
                 max_angle: float = 0.08, spacing: float = 2e-4) -> UnstableCurve:
    """Curve along a direction with sinusoidal wiggles of peak curvature kappa.

    The transverse slope is capped at tan(max_angle) so the tangents stay
    near the base direction; the wiggle frequency follows from the two
    constraints (peak curvature A w^2 = kappa, peak slope A w = tan)."""
    center = np.asarray(center, dtype=float)
    u = _as_unit(direction)
    perp = np.array([-u[1], u[0]])
    slope = math.tan(max_angle)
    omega = kappa / slope
    amp = slope * slope / kappa
    n = max(int(math.ceil(length / spacing)) + 1, 64)
    s = np.linspace(-0.5 * length, 0.5 * length, n)
    return UnstableCurve(center + s[:, None] * u
                         + (amp * np.sin(omega * s))[:, None] * perp, q)


def uniform_pair(curve: UnstableCurve) -> StandardPair:
    """Standard pair with the uniform probability density on the curve."""
    L = curve.length
    lr = np.full(curve.n_nodes, -math.log(L))
    seg = curve.seg_len / L
    seg = seg / seg.sum()
    return StandardPair(curve, DensityProfile(lr, seg))


def _trapezoid_masses(curve: UnstableCurve, log_rho: np.ndarray) -> np.ndarray:
    rho = np.exp(log_rho)
    return 0.5 * (rho[:-1] + rho[1:]) * curve.seg_len


def random_standard_pair(rng: np.random.Generator, guide, q: int = 1,
                         length: float | None = None,
                         density_amp: float = 0.3) -> StandardPair:
    """Random standard pair: direction drawn inside the guide's unstable
    cone, random center, length in [ell, L], mild random log-density."""
    if length is None:
        length = float(rng.uniform(ELL_MIN, L_MAX))
    cone = guide.unstable_cone()
    t = rng.uniform(-0.6, 0.6)
    u = cone.axis.vector + t * cone.half_width * cone.complement.vector
    curve = line_curve(rng.random(2), u, length, q)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    lr = density_amp * np.sin(2.0 * math.pi * curve.arc / max(length, 1e-9) + phase)
    seg = _trapezoid_masses(curve, lr)
    total = seg.sum()
    return StandardPair(curve, DensityProfile(lr - math.log(total), seg / total))


# -- the evolution engine ----------------------------------------------------


class _Strip:
    """Mutable parallel arrays for one curve during evolution."""

    __slots__ = ("nodes", "log_rho", "seg_mass", "remaining", "logj", "q")

    def __init__(self, nodes, log_rho=None, seg_mass=None, remaining=None,
                 logj=None, q=1):
        self.nodes = np.asarray(nodes, dtype=float)
        self.log_rho = log_rho
        self.seg_mass = seg_mass
        self.remaining = remaining
        self.logj = logj
        self.q = q

    @classmethod
    def from_pair(cls, pair: StandardPair, track_jacobian: bool = False):
        n = pair.curve.n_nodes
        return cls(pair.curve.nodes.copy(), pair.density.log_rho.copy(),
                   pair.density.seg_mass.copy(), pair.remaining.copy(),
                   np.zeros(n) if track_jacobian else None, pair.curve.q)

    @classmethod
    def from_curve(cls, curve: UnstableCurve, track_jacobian: bool = False):
        n = curve.n_nodes
        return cls(curve.nodes.copy(), q=curve.q,
                   logj=np.zeros(n) if track_jacobian else None)

    def to_pair(self) -> StandardPair:
        curve = UnstableCurve(self.nodes.copy(), self.q)
        lr = self.log_rho if self.log_rho is not None else \
            np.full(len(self.nodes), -math.log(curve.length))
        seg = self.seg_mass if self.seg_mass is not None else \
            curve.seg_len / curve.length
        dens = DensityProfile(np.asarray(lr, dtype=float).copy(),
                              np.asarray(seg, dtype=float).copy()).normalized()
        rem = self.remaining.copy() if self.remaining is not None else None
        return StandardPair(curve, dens, rem)

    def curve(self) -> UnstableCurve:
        return UnstableCurve(self.nodes.copy(), self.q)

    def node_fields(self):
        for name in ("log_rho", "remaining", "logj"):
            v = getattr(self, name)
            if v is not None:
                yield name, v

    def insert_nodes(self, idx: np.ndarray, new_nodes: np.ndarray,
                     new_fields: dict, mass_left: np.ndarray | None,
                     mass_right: np.ndarray | None) -> None:
        """Split segments idx: insert one node after each idx."""
        self.nodes = np.insert(self.nodes, idx + 1, new_nodes, axis=0)
        for name, v in list(self.node_fields()):
            setattr(self, name, np.insert(v, idx + 1, new_fields[name]))
        if self.seg_mass is not None:
            seg = self.seg_mass.copy()
            seg[idx] = mass_left
            self.seg_mass = np.insert(seg, idx + 1, mass_right)

    def delete_node(self, j: int) -> None:
        self.nodes = np.delete(self.nodes, j, axis=0)
        for name, v in list(self.node_fields()):
            setattr(self, name, np.delete(v, j))
        if self.seg_mass is not None:
            seg = self.seg_mass
            seg[j - 1] += seg[j]
            self.seg_mass = np.delete(seg, j)


def _node_stretches(T: AnosovMap, strip: _Strip, tangents_vec: np.ndarray):
    M = T.derivative(strip.nodes)
    w = np.einsum("nij,nj->ni", M, tangents_vec)
    return np.linalg.norm(w, axis=-1), M


def _split_mass(seg_mass, lr_a, lr_mid, lr_b, c1, c2):
    i1 = c1 * (np.exp(lr_a) + np.exp(lr_mid))
    i2 = c2 * (np.exp(lr_mid) + np.exp(lr_b))
    tot = i1 + i2
    frac = np.where(tot > 0, i1 / np.where(tot > 0, tot, 1.0), c1 / (c1 + c2))
    left = seg_mass * frac
    return left, seg_mass - left


@dataclass
class StepStats:
    stretch_min: float
    stretch_max: float
    normal_ratio_max: float  # max |DT n| / |DT u| over nodes (recursion constant)


def _map_strip(strip: _Strip, T: AnosovMap, policy: RefinementPolicy,
               cone=None) -> tuple[_Strip, StepStats]:
    """One evolution step: map, push density, refine, check the cone."""
    src_nodes = strip.nodes
    _, _, _, tang, _ = _geometry(src_nodes)
    uvec = np.stack([np.cos(tang), np.sin(tang)], axis=-1)
    s, M = _node_stretches(T, strip, uvec)
    nvec = np.stack([-uvec[..., 1], uvec[..., 0]], axis=-1)
    wn = np.linalg.norm(np.einsum("nij,nj->ni", M, nvec), axis=-1)
    stats = StepStats(float(np.min(s)), float(np.max(s)), float(np.max(wn / s)))

    out = _Strip(T.lift(src_nodes), q=strip.q)
    logs = np.log(s)
    if strip.log_rho is not None:
        out.log_rho = strip.log_rho - logs
    if strip.logj is not None:
        out.logj = strip.logj + logs
    if strip.remaining is not None:
        out.remaining = strip.remaining.copy()
    if strip.seg_mass is not None:
        out.seg_mass = strip.seg_mass.copy()

    src = src_nodes.copy()
    # split until every image segment is below its spacing threshold
    for _ in range(64):
        chord, _, _, _, kappa = _geometry(out.nodes)
        kseg = 0.5 * (kappa[:-1] + kappa[1:])
        idx = np.flatnonzero(chord > policy.split_threshold(kseg))
        if len(idx) == 0:
            break
        if len(out.nodes) + len(idx) > policy.max_nodes:
            raise MemoryError(
                f"refinement exceeds {policy.max_nodes} nodes; "
                "use a coarser policy or a windowed diagnostic"
            )
        mid_src = 0.5 * (src[idx] + src[idx + 1])
        useg = src[idx + 1] - src[idx]
        useg = useg / np.linalg.norm(useg, axis=-1, keepdims=True)
        sm = np.linalg.norm(
            np.einsum("nij,nj->ni", T.derivative(mid_src), useg), axis=-1)
        mid_img = T.lift(mid_src)

        new_fields = {}
        mass_lr = None
        if out.log_rho is not None:
            lr_src_mid = 0.5 * (strip.log_rho[idx] + strip.log_rho[idx + 1]) \
                if strip.log_rho is not None else None
            # interpolate the source density, then push through the stretch
            src_lr = 0.5 * (out.log_rho[idx] + np.log(s[idx])
                            + out.log_rho[idx + 1] + np.log(s[idx + 1])) \
                if lr_src_mid is None else lr_src_mid
            new_fields["log_rho"] = src_lr - np.log(sm)
        if out.remaining is not None:
            new_fields["remaining"] = 0.5 * (out.remaining[idx] + out.remaining[idx + 1])
        if out.logj is not None:
            base = 0.5 * (strip.logj[idx] + strip.logj[idx + 1]) \
                if strip.logj is not None else 0.0
            new_fields["logj"] = base + np.log(sm)
        if out.seg_mass is not None:
            c1 = np.linalg.norm(mid_img - out.nodes[idx], axis=-1)
            c2 = np.linalg.norm(out.nodes[idx + 1] - mid_img, axis=-1)
            lr_mid = new_fields.get("log_rho", np.zeros(len(idx)))
            lr_a = out.log_rho[idx] if out.log_rho is not None else np.zeros(len(idx))
            lr_b = out.log_rho[idx + 1] if out.log_rho is not None else np.zeros(len(idx))
            mass_lr = _split_mass(out.seg_mass[idx], lr_a, lr_mid, lr_b, c1, c2)

        # grow the parallel source arrays the same way
        src = np.insert(src, idx + 1, mid_src, axis=0)
        s = np.insert(s, idx + 1, sm)
        if strip.log_rho is not None:
            strip_lr = np.insert(strip.log_rho, idx + 1,
                                 0.5 * (strip.log_rho[idx] + strip.log_rho[idx + 1]))
            strip = _Strip(src, strip_lr, None, None,
                           np.insert(strip.logj, idx + 1,
                                     0.5 * (strip.logj[idx] + strip.logj[idx + 1]))
                           if strip.logj is not None else None, strip.q)
        elif strip.logj is not None:
            strip = _Strip(src, None, None, None,
                           np.insert(strip.logj, idx + 1,
                                     0.5 * (strip.logj[idx] + strip.logj[idx + 1])),
                           strip.q)
        else:
            strip = _Strip(src, q=strip.q)

        out.insert_nodes(idx, mid_img,
                         {k: v for k, v in new_fields.items()},
                         *(mass_lr if mass_lr is not None else (None, None)))
    else:
        raise RuntimeError("refinement failed to settle in 64 passes")

    # merge ultra-short segments (right to left, endpoints kept)
    chord = np.linalg.norm(np.diff(out.nodes, axis=0), axis=1)
    short = np.flatnonzero(chord < policy.h_min)
    for j in reversed(short):
        if 0 < j < len(out.nodes) - 1 and len(out.nodes) > 2:
            left = chord[j - 1] if j - 1 >= 0 else math.inf
            if left + chord[j] <= policy.h_max:
                out.delete_node(j)

    if cone is not None:
        _, _, _, tang2, _ = _geometry(out.nodes)
        uv = np.stack([np.cos(tang2), np.sin(tang2)], axis=-1)
        margins = cone.margin(uv)
        i = int(np.argmin(margins))
        if margins[i] <= 0.0:
            raise ConeError(
                "tangent left the unstable cone",
                {"node": i, "point": [float(v) for v in wrap(out.nodes[i])],
                 "angle": float(tang2[i]), "margin": float(margins[i])},
            )
    return out, stats


def _cut_strip(strip: _Strip, piece_len: float) -> tuple[list[_Strip], list[float]]:
    """Cut into ceil(len/piece_len) equal-arc pieces; exact mass partition."""
    curve_geo = _geometry(strip.nodes)
    arc = curve_geo[2]
    total = float(arc[-1])
    k = int(math.ceil(total / piece_len - 1e-12))
    if k <= 1:
        masses = [float(np.sum(strip.seg_mass))] if strip.seg_mass is not None else [1.0]
        return [strip], masses

    marks = [total * j / k for j in range(1, k)]
    cut_idx = [0]
    for mark in marks:
        arc = _geometry(strip.nodes)[2]
        i = int(np.searchsorted(arc, mark)) - 1
        i = min(max(i, 0), len(strip.nodes) - 2)
        f = (mark - arc[i]) / (arc[i + 1] - arc[i])
        f = min(max(f, 0.0), 1.0)
        if f < 1e-9:  # mark sits on an existing node
            cut_idx.append(i)
            continue
        if f > 1.0 - 1e-9:
            cut_idx.append(i + 1)
            continue
        p = (1.0 - f) * strip.nodes[i] + f * strip.nodes[i + 1]
        fields = {}
        for name, v in strip.node_fields():
            fields[name] = np.array([(1.0 - f) * v[i] + f * v[i + 1]])
        mass_lr = (None, None)
        if strip.seg_mass is not None:
            lr_a = strip.log_rho[i] if strip.log_rho is not None else 0.0
            lr_b = strip.log_rho[i + 1] if strip.log_rho is not None else 0.0
            lr_m = fields.get("log_rho", np.array([0.0]))[0]
            c1 = np.linalg.norm(p - strip.nodes[i])
            c2 = np.linalg.norm(strip.nodes[i + 1] - p)
            mass_lr = _split_mass(np.array([strip.seg_mass[i]]), np.array([lr_a]),
                                  np.array([lr_m]), np.array([lr_b]),
                                  np.array([c1]), np.array([c2]))
        strip.insert_nodes(np.array([i]), p[None, :], fields, *mass_lr)
        cut_idx.append(i + 1)
    cut_idx.append(len(strip.nodes) - 1)

    pieces, masses = [], []
    for a, b in zip(cut_idx[:-1], cut_idx[1:]):
        if b <= a:
            continue
        sub = _Strip(strip.nodes[a:b + 1].copy(), q=strip.q)
        for name, v in strip.node_fields():
            setattr(sub, name, v[a:b + 1].copy())
        if strip.seg_mass is not None:
            sub.seg_mass = strip.seg_mass[a:b].copy()
            masses.append(float(np.sum(sub.seg_mass)))
        else:
            masses.append((b - a) / (len(strip.nodes) - 1))
        pieces.append(sub)
    return pieces, masses


def _rebase(strip: _Strip) -> _Strip:
    """Shift lifted nodes by an integer vector to keep coordinates O(1).

    Integer translations commute with the dynamics (the periodic part of
    the map is unchanged), so lengths, tangents, curvatures, stretches and
    torus projections are all exactly invariant; the shift only removes
    the catastrophic cancellation that O(Lambda^n) coordinates would cause
    in chord differences.
    """
    shift = np.round(np.mean(strip.nodes, axis=0))
    strip.nodes = strip.nodes - shift
    return strip


def _trim_window(strip: _Strip, window: float) -> _Strip:
    """Keep the arc window of the given length centered on the curve middle."""
    arc = _geometry(strip.nodes)[2]
    total = float(arc[-1])
    if total <= window:
        return _rebase(strip)
    mid = 0.5 * total
    lo = int(np.searchsorted(arc, mid - 0.5 * window))
    hi = int(np.searchsorted(arc, mid + 0.5 * window))
    lo = max(lo - 1, 0)
    hi = min(hi + 1, len(strip.nodes) - 1)
    sub = _Strip(strip.nodes[lo:hi + 1].copy(), q=strip.q)
    for name, v in strip.node_fields():
        setattr(sub, name, v[lo:hi + 1].copy())
    if strip.seg_mass is not None:
        sub.seg_mass = strip.seg_mass[lo:hi].copy()
    return _rebase(sub)


def _interval_tag(seq: MapSequence, step: int) -> int:
    return seq.interval_index(step) + 1


def evolve_pair(seq: MapSequence, pair: StandardPair, n_from: int, n_to: int,
                policy: RefinementPolicy | None = None, cut: bool = True,
                piece_len: float = L_MAX,
                max_pairs: int | None = None,
                rng: np.random.Generator | None = None) -> StandardFamily:
    """Evolve a standard pair, standardizing by cutting; returns a family.

    The output weights are the mass fractions c_i (they sum to 1); each
    output density is renormalized to a probability.  With max_pairs set,
    the family is resampled mass-proportionally whenever it outgrows the
    budget (seeded and deterministic via rng).
    """
    policy = policy or RefinementPolicy()
    strips = [_Strip.from_pair(pair)]
    weights = [1.0]
    for step in range(n_from + 1, n_to + 1):
        T = seq.map_for_step(step)
        tag = _interval_tag(seq, step)
        cone = seq.guides[tag - 1].unstable_cone()
        new_strips, new_weights = [], []
        for st, w in zip(strips, weights):
            st.q = tag
            img, _ = _map_strip(st, T, policy, cone)
            if cut:
                pieces, masses = _cut_strip(img, piece_len)
                tot = sum(masses)
                for piece, m in zip(pieces, masses):
                    new_strips.append(_rebase(piece))
                    new_weights.append(w * m / tot)
            else:
                new_strips.append(_rebase(img))
                new_weights.append(w)
        strips, weights = new_strips, new_weights
        if max_pairs is not None and len(strips) > max_pairs:
            strips, weights = _resample(strips, weights, max_pairs, rng)
    out_pairs = [st.to_pair() for st in strips]
    return StandardFamily(out_pairs, np.array(weights) / sum(weights))


def _resample(strips, weights, m: int, rng: np.random.Generator | None):
    """Mass-proportional residual resampling down to m representatives."""
    if rng is None:
        rng = np.random.default_rng(0)
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    p = w / total
    counts = np.floor(m * p).astype(int)
    residual = m - counts.sum()
    if residual > 0:
        r = m * p - counts
        r = r / r.sum()
        extra = rng.choice(len(p), size=residual, p=r)
        np.add.at(counts, extra, 1)
    out_s, out_w = [], []
    for i, c in enumerate(counts):
        for _ in range(c):
            out_s.append(strips[i])
            out_w.append(total / m)
    return out_s, out_w


def evolve_family(seq: MapSequence, family: StandardFamily, n_from: int, n_to: int,
                  policy: RefinementPolicy | None = None,
                  max_pairs: int = 256,
                  rng: np.random.Generator | None = None) -> StandardFamily:
    """Evolve every pair of a family one step at a time with a pair budget."""
    policy = policy or RefinementPolicy()
    strips = [_Strip.from_pair(p) for p in family.pairs]
    weights = list(family.weights)
    for step in range(n_from + 1, n_to + 1):
        T = seq.map_for_step(step)
        tag = _interval_tag(seq, step)
        cone = seq.guides[tag - 1].unstable_cone()
        new_strips, new_weights = [], []
        for st, w in zip(strips, weights):
            st.q = tag
            img, _ = _map_strip(st, T, policy, cone)
            pieces, masses = _cut_strip(img, L_MAX)
            tot = sum(masses)
            for piece, mss in zip(pieces, masses):
                new_strips.append(_rebase(piece))
                new_weights.append(w * mss / tot)
        strips, weights = new_strips, new_weights
        if len(strips) > max_pairs:
            strips, weights = _resample(strips, weights, max_pairs, rng)
    pairs = [st.to_pair() for st in strips]
    return StandardFamily(pairs, np.array(weights) / sum(weights))


# -- diagnostics -------------------------------------------------------------


def _cached_report(seq: MapSequence, report=None):
    """Validation report for the sequence, computed once and cached."""
    if report is not None:
        return report
    cached = seq.__dict__.get("_default_report")
    if cached is None:
        from .validation import validate_assumptions

        cached = seq.__dict__["_default_report"] = validate_assumptions(seq)
    return cached


def _comparability_const(seq: MapSequence, tag: int, grid_n: int = 24) -> float:
    """Uniform one-step comparability constant for interval tag: largest
    ratio |DT w| / |DT u| over grid points, arbitrary unit w, and unit u
    in the unstable cone (so it dominates the curvature-recursion term)."""
    cache = seq.__dict__.setdefault("_csharp_cache", {})
    if tag in cache:
        return cache[tag]
    from .maps import operator_norms

    cone = seq.guides[tag - 1].unstable_cone()
    dirs = cone.sample_dirs(9)
    steps = seq.interval_steps(tag - 1)
    t = np.linspace(0.0, 1.0, grid_n, endpoint=False) + 0.5 / grid_n
    gx, gy = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    seen = set()
    worst = 0.0
    for step in steps:
        T = seq.map_for_step(step)
        key = T.content_key()
        if key in seen:
            continue
        seen.add(key)
        M = T.derivative(pts)
        op = float(np.max(operator_norms(M)))
        stretches = np.linalg.norm(np.einsum("gij,dj->gdi", M, dirs), axis=-1)
        worst = max(worst, op / float(np.min(stretches)))
    cache[tag] = worst
    return worst


@dataclass
class GrowthCheck:
    lower: np.ndarray
    measured: np.ndarray
    upper: np.ndarray
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def growth_check(seq: MapSequence, curve: UnstableCurve, n: int,
                 report=None, policy: RefinementPolicy | None = None,
                 stable: bool = False) -> GrowthCheck:
    """Length sandwich along the evolution of a curve.

    Unstable mode: lower = product of certified C_q (once per interval
    entered) times Lambda_q per step; upper = product of Lambda_bar_q.
    Stable mode: upper = |W| / (C Lambda^n), no lower bound; refinement
    runs with merging only (the curve contracts).
    """
    report = _cached_report(seq, report)
    policy = policy or (COARSE_POLICY if not stable else RefinementPolicy())
    strip = _Strip.from_curve(curve)
    length0 = curve.length
    measured = [length0]
    lower = [length0]
    upper = [length0]
    lo = hi = 1.0
    seen: set[int] = set()
    for k in range(1, n + 1):
        step = k  # evolution starts at time 0
        tag = _interval_tag(seq, step)
        iv = report.interval(tag)
        T = seq.map_for_step(step)
        strip, _ = _map_strip(strip, T, policy, None)
        arc = _geometry(strip.nodes)[2]
        measured.append(float(arc[-1]))
        if stable:
            hi *= 1.0 / (iv.lambda_cert *
                         (iv.c_cert if tag not in seen else 1.0) ** 1.0)
            if tag not in seen:
                seen.add(tag)
            lower.append(0.0)
            upper.append(length0 * hi)
        else:
            if tag not in seen:
                lo *= iv.c_cert
                seen.add(tag)
            lo *= iv.lambda_cert
            hi *= iv.lambda_bar
            lower.append(length0 * lo)
            upper.append(length0 * hi)
    lower = np.array(lower)
    measured = np.array(measured)
    upper = np.array(upper)
    bad = int(np.sum((measured < lower - 1e-12) | (measured > upper + 1e-12)))
    return GrowthCheck(lower, measured, upper, bad)


@dataclass
class SampledGrowthCheck:
    lower: np.ndarray
    measured: np.ndarray  # quadrature estimates of |T_n W| for n = 0..n
    upper: np.ndarray
    rel_stderr: np.ndarray
    violations: int

    @property
    def ok(self) -> bool:
        return self.violations == 0


def growth_check_sampled(seq: MapSequence, curve: UnstableCurve, n: int,
                         report=None, m_samples: int = 4096,
                         seed: int = 0) -> SampledGrowthCheck:
    """Growth sandwich via the Jacobian identity |T_n W| = int_W J_n dm_W.

    At standard lengths the image of 20 steps is ~1e16 long, far beyond
    any polyline, but the identity turns the length into a quadrature over
    the source: stratified seeded midpoints carry exact tangent-cocycle
    Jacobians, the integrand's log-range is bounded by the distortion
    constant, so the relative standard error goes like range/sqrt(m) and
    sits orders of magnitude inside the sandwich slack.  Every horizon up
    to n is checked from the same orbits.
    """
    report = _cached_report(seq, report)
    rng = np.random.default_rng(seed)
    arc = curve.arc
    total = curve.length
    u01 = (np.arange(m_samples) + rng.random(m_samples)) / m_samples
    s = u01 * total
    x = np.stack([np.interp(s, arc, curve.nodes[:, 0]),
                  np.interp(s, arc, curve.nodes[:, 1])], axis=-1)
    seg = np.clip(np.searchsorted(arc, s) - 1, 0, curve.n_nodes - 2)
    d = curve.nodes[seg + 1] - curve.nodes[seg]
    u = d / np.linalg.norm(d, axis=-1, keepdims=True)

    logst = np.zeros(m_samples)
    measured = [total]
    stderr = [0.0]
    lower = [total]
    upper = [total]
    lo = hi = 1.0
    seen: set[int] = set()
    for k in range(1, n + 1):
        tag = _interval_tag(seq, k)
        iv = report.interval(tag)
        T = seq.map_for_step(k)
        M = T.derivative(x)
        w = np.einsum("nij,nj->ni", M, u)
        st = np.linalg.norm(w, axis=-1)
        u = w / st[:, None]
        logst = logst + np.log(st)
        x = wrap(T.lift(x))
        base = float(np.max(logst))
        j = np.exp(logst - base)
        est = math.exp(base) * float(np.mean(j)) * total
        se = float(np.std(j) / math.sqrt(m_samples) / max(np.mean(j), 1e-300))
        measured.append(est)
        stderr.append(se)
        if tag not in seen:
            lo *= iv.c_cert
            seen.add(tag)
        lo *= iv.lambda_cert
        hi *= iv.lambda_bar
        lower.append(total * lo)
        upper.append(total * hi)
    lower = np.array(lower)
    measured = np.array(measured)
    upper = np.array(upper)
    stderr = np.array(stderr)
    slack = 1.0 + 5.0 * stderr
    bad = int(np.sum((measured * slack < lower) | (measured > upper * slack)))
    return SampledGrowthCheck(lower, measured, upper, stderr, bad)


@dataclass
class CurvatureCheck:
    kappa: np.ndarray  # max curvature per step, 0..n
    bound: np.ndarray  # one-step recursion right sides for steps 1..n
    fixed_point: float
    kappa_uniform: float  # max of the series (the empirical uniform bound)
    n_attained: int  # first step at/below the fixed point (-1 if never)
    stays_below: bool
    recursion_ok: bool


def curvature_check(seq: MapSequence, curve: UnstableCurve, n: int,
                    report=None, policy: RefinementPolicy | None = None,
                    window: float = L_MAX, tol: float = 1e-6) -> CurvatureCheck:
    """Curvature series over a trimmed arc window, with the one-step
    recursion bound kappa' <= (C Lam)^-2 |D2T| + (C Lam)^-1 C# kappa
    from certified constants and the uniform comparability constant C#.

    The fixed point B / (1 - rho) with B = (C Lam)^-2 sup|D2T| and
    rho = (C Lam)^-1 C# is the eventual curvature bound; the check reports
    the first step at or below it and whether the series stays there.
    A noise allowance of tol covers the polyline curvature floor.
    """
    report = _cached_report(seq, report)
    policy = policy or RefinementPolicy(h_max=2e-3, h_min=1e-7, theta=0.02,
                                        use_bend=True)
    strip = _Strip.from_curve(curve)
    kappas = [float(np.max(_geometry(strip.nodes)[4]))]
    bounds = []
    recursion_ok = True
    fixed_pt = 0.0
    for k in range(1, n + 1):
        tag = _interval_tag(seq, k)
        iv = report.interval(tag)
        T = seq.map_for_step(k)
        strip, _ = _map_strip(strip, T, policy, None)
        strip = _trim_window(strip, window)
        kap = float(np.max(_geometry(strip.nodes)[4]))
        cl = iv.c_cert * iv.lambda_cert
        b2 = T.hessian_sup_bound()
        csharp = _comparability_const(seq, tag)
        rho = csharp / cl
        rhs = b2 / cl ** 2 + rho * kappas[-1]
        bounds.append(rhs)
        if kap > rhs + tol:
            recursion_ok = False
        kappas.append(kap)
        if rho >= 1.0:
            raise ValueError(
                f"one-step contraction fails on interval {tag}: "
                f"C#={csharp:.3f} >= C Lambda={cl:.3f}; "
                "the fixed point needs a block length N > 1"
            )
        fixed_pt = max(fixed_pt, (b2 / cl ** 2) / (1.0 - rho))
    kappas = np.array(kappas)
    below = np.flatnonzero(kappas <= fixed_pt + tol)
    n_att = int(below[0]) if len(below) else -1
    stays = bool(n_att >= 0 and np.all(kappas[n_att:] <= fixed_pt + tol))
    return CurvatureCheck(kappas, np.array(bounds), fixed_pt,
                          float(np.max(kappas)), n_att, stays, recursion_ok)


@dataclass
class DistortionCheck:
    max_ratio: np.ndarray  # per step: max |dlogJ| / image arc distance
    slope: float  # trend of max_ratio vs n
    n_pairs: int


def distortion_check(seq: MapSequence, curve: UnstableCurve, n: int,
                     n_pairs: int = 1000, seed: int = 0,
                     policy: RefinementPolicy | None = None,
                     window: float = L_MAX) -> DistortionCheck:
    """Per-step distortion statistic over node pairs of a windowed image.

    The cumulative tangential log-Jacobian is carried per node (histories
    of inserted nodes are arc-interpolated, a diagnostic-grade
    approximation that is exact for linear maps); pairs are drawn from the
    final window of each step.
    """
    rng = np.random.default_rng(seed)
    policy = policy or RefinementPolicy(h_max=2e-3, h_min=1e-7, theta=0.02,
                                        use_bend=True)
    strip = _Strip.from_curve(curve, track_jacobian=True)
    per_step = max(n_pairs // max(n, 1), 8)
    stats = []
    for k in range(1, n + 1):
        T = seq.map_for_step(k)
        strip, _ = _map_strip(strip, T, policy, None)
        strip = _trim_window(strip, window)
        arc = _geometry(strip.nodes)[2]
        m = len(strip.nodes)
        i = rng.integers(0, m, per_step)
        j = rng.integers(0, m, per_step)
        keep = i != j
        i, j = i[keep], j[keep]
        num = np.abs(strip.logj[i] - strip.logj[j])
        den = np.abs(arc[i] - arc[j])
        stats.append(float(np.max(num / den)) if len(i) else 0.0)
    stats = np.array(stats)
    ns = np.arange(1, n + 1, dtype=float)
    A = np.stack([ns, np.ones_like(ns)], axis=-1)
    (slope, _), *_ = np.linalg.lstsq(A, stats, rcond=None)
    return DistortionCheck(stats, float(slope), per_step * n)


@dataclass
class JacobianCheck:
    jac: np.ndarray  # per source node
    integral: float  # int J dm_W over the source curve
    image_length: float
    rel_error: float


def curve_jacobian(seq: MapSequence, curve: UnstableCurve, n: int,
                   n_from: int = 0,
                   policy: RefinementPolicy | None = None) -> JacobianCheck:
    """Tangential Jacobian of the n-step composition at source nodes.

    The source polyline is pre-refined so the image needs no insertion;
    the consistency integral int J dm_W must match the image arc length.
    Intended for short horizons (cost grows with the image length).
    """
    policy = policy or RefinementPolicy()
    # estimate the total stretch to choose the source resolution
    stretch = 1.0
    for k in range(n_from + 1, n_from + n + 1):
        tag = _interval_tag(seq, k)
        stretch *= seq.guides[tag - 1].lambda_bar()
    n_nodes = int(curve.length * stretch / policy.h_max) + 2
    if n_nodes > policy.max_nodes:
        raise MemoryError("horizon too long for a fully resolved Jacobian check")
    nodes = _resample_even(curve.nodes, max(n_nodes, curve.n_nodes))
    fine = UnstableCurve(nodes, curve.q)
    x = fine.nodes
    u = fine.unit_tangents()
    logst = np.zeros(len(x))
    for k in range(n_from + 1, n_from + n + 1):
        T = seq.map_for_step(k)
        M = T.derivative(x)
        w = np.einsum("nij,nj->ni", M, u)
        s = np.linalg.norm(w, axis=-1)
        u = w / s[:, None]
        logst += np.log(s)
        x = T.lift(x)
    jac = np.exp(logst)
    integral = float(np.sum(0.5 * (jac[:-1] + jac[1:]) * fine.seg_len))
    img = UnstableCurve(x, curve.q) if n > 0 else fine
    image_length = img.length
    rel = abs(integral - image_length) / image_length
    return JacobianCheck(jac, integral, image_length, rel)


# -- density diagnostics -----------------------------------------------------


def subcurve_measure(pair: StandardPair, s0: float, s1: float) -> float:
    """Measure of the arc interval [s0, s1] under the pair's density."""
    arc = pair.curve.arc
    seg = pair.density.seg_mass
    s0, s1 = max(s0, 0.0), min(s1, float(arc[-1]))
    if s1 <= s0:
        return 0.0
    total = 0.0
    for k in range(len(seg)):
        a, b = arc[k], arc[k + 1]
        lo, hi = max(a, s0), min(b, s1)
        if hi > lo:
            total += seg[k] * (hi - lo) / (b - a)
    return float(total)


def density_comparability(pair: StandardPair, int1: tuple[float, float],
                          int2: tuple[float, float], c_r: float = 1.0,
                          eta_r: float = 0.5) -> tuple[float, float, bool]:
    """Two-sided comparison of average densities on two subcurves.

    Returns (ratio, D, ok) with D = exp(2 c_r L^eta_r) and ratio the
    quotient of the two average densities nu(W)/|W|.
    """
    m1 = subcurve_measure(pair, *int1)
    m2 = subcurve_measure(pair, *int2)
    l1 = int1[1] - int1[0]
    l2 = int2[1] - int2[0]
    if min(l1, l2) <= 0 or m2 == 0.0:
        raise ValueError("need two subcurves of positive length and mass")
    ratio = (m1 / l1) / (m2 / l2)
    D = math.exp(2.0 * c_r * pair.curve.length ** eta_r)
    return ratio, D, (1.0 / D) - 1e-12 <= ratio <= D + 1e-12


def density_regularity(pair: StandardPair, eta_r: float = 0.5,
                       max_pairs: int = 200_000,
                       seed: int = 0) -> float:
    """Smallest constant C with |ln rho(x) - ln rho(y)| <= C |W(x,y)|^eta_r
    over sampled node pairs (all pairs when the count allows)."""
    lr = pair.density.log_rho
    arc = pair.curve.arc
    n = len(lr)
    if n * (n - 1) // 2 <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n, max_pairs)
        keep = i != j
        i, j = i[keep], j[keep]
    num = np.abs(lr[i] - lr[j])
    den = np.abs(arc[i] - arc[j]) ** eta_r
    good = den > 0
    return float(np.max(num[good] / den[good])) if np.any(good) else 0.0
