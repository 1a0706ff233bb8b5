"""Magnet-based coupling of standard families.

A magnet is a small rectangle bounded by stable and unstable segments of
one guide map, refined at each time n to the sub-region whose time-n
stable leaves connect the unstable sides without leaving the rectangle.
When the evolved images of two standard families both cross the refined
magnet properly (complete crossing plus excess length on both sides), a
fixed fraction of their masses is coupled: curves are matched component
by component after an affine subdivision that equalizes relative masses,
points are matched by the stable holonomy, and the coupled layer heights
tau_alpha (source, constant) and tau_beta (target, from the consistency
rule tau_beta rho_beta = tau_alpha rho_alpha / Jh) make the transfer
measure preserving.  Repeating couple -> recover drains the uncoupled
mass geometrically; the ledger records exact scalar bookkeeping, the
coupling-time tail, and holonomy handles for separation checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path as _MplPath

from .curves import (ELL_MIN, DensityProfile, RefinementPolicy,
                     StandardFamily, StandardPair, UnstableCurve, _cached_report,
                     _geometry, _split_mass, _Strip, evolve_family,
                     random_standard_pair, subcurve_measure,
                     density_regularity)
from .fields import eval_stable_field, eval_unstable_field
from .holonomy import (ELL0, LEAF_STEP, HolonomyError, HolonomyMap,
                       build_holonomy, compute_jacobians,
                       matched_forward_separation)
from .maps import wrap
from .sequence import MapSequence

U_EXT_RATIO = 0.3     # u-extent of the base rectangle, as a fraction of ell
S_EXT_RATIO = 0.2     # max s-extent as a fraction of ell_0
D0_SAFETY = 0.8       # d_0 = safety * min measured crossing mass
TAU_BETA_CAP = 0.75   # accepted events keep sup tau_beta below this
EXCESS_PROPER = ELL_MIN / 10.0
EXCESS_SUPER = ELL_MIN / 5.0
FIBER_LO, FIBER_HI = 0.1, 0.9


class CouplingError(RuntimeError):
    """A magnet or coupling construction failed its contract."""


# -- rectangles and magnets --------------------------------------------------


def _constant_sequence(guide, depth: int = 26) -> MapSequence:
    """A sequence that repeats one guide map (its own foliations)."""
    return MapSequence([guide], [0, depth], [guide.map] * depth)


def _guide_sequence(seq: MapSequence, q: int) -> MapSequence:
    cache = seq.__dict__.setdefault("_guide_seq_cache", {})
    if q not in cache:
        cache[q] = _constant_sequence(seq.guides[q - 1])
    return cache[q]


def _field_step(cseq: MapSequence, pts: np.ndarray, ref: np.ndarray,
                stable: bool) -> np.ndarray:
    fn = eval_stable_field if stable else eval_unstable_field
    ang, _ = fn(cseq, 0, wrap(pts))
    d = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    flip = np.sum(d * ref, axis=-1) < 0
    d[flip] = -d[flip]
    return d


def _trace_guide_leaf(cseq: MapSequence, x0: np.ndarray, stable: bool,
                      arc_len: float, h: float = 5e-4) -> np.ndarray:
    """Leaf polyline through x0, parameterized from -arc_len to +arc_len."""
    halves = []
    for sgn in (-1.0, 1.0):
        p = np.array(x0, dtype=float)
        ref = None
        pts = [p.copy()]
        n_steps = int(math.ceil(arc_len / h))
        for _ in range(n_steps):
            if ref is None:
                ref = _field_step(cseq, p[None, :], np.ones((1, 2)), stable)[0]
                ref = sgn * ref
            k1 = _field_step(cseq, p[None, :], ref[None, :], stable)[0]
            k2 = _field_step(cseq, (p + 0.5 * h * k1)[None, :], k1[None, :],
                             stable)[0]
            k3 = _field_step(cseq, (p + 0.5 * h * k2)[None, :], k2[None, :],
                             stable)[0]
            k4 = _field_step(cseq, (p + h * k3)[None, :], k3[None, :],
                             stable)[0]
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            p = p + h * step
            ref = step / np.linalg.norm(step)
            pts.append(p.copy())
        halves.append(np.array(pts))
    return np.concatenate([halves[0][::-1], halves[1][1:]], axis=0)


def _cross_polylines(pl1: np.ndarray, pl2: np.ndarray) -> np.ndarray:
    """First intersection point of two polylines (they must cross)."""
    a, b = pl1[:-1], pl1[1:]
    for j in range(len(pl2) - 1):
        c, d = pl2[j], pl2[j + 1]
        r = b - a
        s = d - c
        den = r[:, 0] * s[1] - r[:, 1] * s[0]
        ok = np.abs(den) > 1e-15
        t = np.where(ok, ((c[0] - a[:, 0]) * s[1] - (c[1] - a[:, 1]) * s[0])
                     / np.where(ok, den, 1.0), -1.0)
        u = np.where(ok, ((c[0] - a[:, 0]) * r[:, 1] - (c[1] - a[:, 1]) * r[:, 0])
                     / np.where(ok, den, 1.0), -1.0)
        hit = ok & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        if np.any(hit):
            i = int(np.argmax(hit))
            return a[i] + t[i] * (b[i] - a[i])
    raise CouplingError("rectangle sides do not intersect")


@dataclass
class Rectangle:
    """Curvilinear rectangle bounded by guide stable/unstable segments.

    Membership and fiber coordinates use the affine frame spanned by the
    corner points; at the magnet scale the boundary leaves deviate from
    the frame parallelogram by a negligible sagitta, and for the exact
    linear guide the frame is exact.
    """

    q: int
    center: np.ndarray
    corners: np.ndarray          # (4, 2) lifted near center, frame order
    s_sides: list[np.ndarray]    # two stable-boundary polylines
    u_sides: list[np.ndarray]    # two unstable-boundary polylines
    origin: np.ndarray = field(init=False)
    frame_inv: np.ndarray = field(init=False)
    u_extent: float = field(init=False)
    s_extent: float = field(init=False)

    def __post_init__(self):
        c = self.corners
        self.origin = np.mean(c, axis=0)
        e_u = (c[1] + c[2] - c[0] - c[3]) / 4.0
        e_s = (c[2] + c[3] - c[0] - c[1]) / 4.0
        self.frame_inv = np.linalg.inv(np.stack([e_u, e_s], axis=-1))
        self.u_extent = 2.0 * float(np.linalg.norm(e_u))
        self.s_extent = 2.0 * float(np.linalg.norm(e_s))
        if self.s_extent > S_EXT_RATIO * ELL0 * (1.0 + 1e-6):
            raise CouplingError(
                "rectangle s-extent exceeds the allowed fraction of the "
                "stable leaf length", {"s_extent": self.s_extent})

    def local(self, pts: np.ndarray) -> np.ndarray:
        """Displacement from the center in the nearest torus chart."""
        d = np.asarray(pts, dtype=float) - self.origin
        return d - np.round(d)

    def frame(self, disp: np.ndarray) -> np.ndarray:
        """Normalized frame coordinates (a, b), inside iff both in (-1, 1)."""
        return disp @ self.frame_inv.T

    def contains(self, pts: np.ndarray, pad: float = 0.0) -> np.ndarray:
        ab = self.frame(self.local(pts))
        return (np.abs(ab[..., 0]) < 1.0 + pad) & (np.abs(ab[..., 1]) < 1.0 + pad)

    def fiber_ratio(self, pts: np.ndarray) -> np.ndarray:
        """Division ratio of the stable fiber through each point."""
        ab = self.frame(self.local(pts))
        return 0.5 * (ab[..., 1] + 1.0)

    def boundary_path(self) -> _MplPath:
        ring = np.concatenate([self.s_sides[0], self.u_sides[1],
                               self.s_sides[1][::-1], self.u_sides[0][::-1]])
        return _MplPath(ring)


@dataclass
class Magnet:
    """Per-guide base rectangle with its empirical crossing frequency."""

    rect: Rectangle
    freq: float | None = None


def build_rectangle(seq: MapSequence, q: int, center,
                    u_ext: float | None = None,
                    s_ext: float | None = None) -> Rectangle:
    """Rectangle of guide q's stable/unstable segments around a center."""
    u_ext = U_EXT_RATIO * ELL_MIN if u_ext is None else float(u_ext)
    s_ext = 0.995 * S_EXT_RATIO * ELL0 if s_ext is None else float(s_ext)
    if s_ext > S_EXT_RATIO * ELL0 + 1e-12:
        raise CouplingError(
            "rectangle s-extent must stay well below the leaf length ell_0",
            )
    center = np.asarray(center, dtype=float)
    cseq = _guide_sequence(seq, q)

    def at_arc(poly: np.ndarray, ds: float) -> np.ndarray:
        arc = _geometry(poly)[2]
        s = arc[len(poly) // 2] + ds
        x = np.interp(s, arc, poly[:, 0])
        y = np.interp(s, arc, poly[:, 1])
        return np.array([x, y])

    u_axis = _trace_guide_leaf(cseq, center, False, 0.62 * u_ext)
    s_left = _trace_guide_leaf(cseq, at_arc(u_axis, -0.5 * u_ext),
                               True, 0.7 * s_ext)
    s_right = _trace_guide_leaf(cseq, at_arc(u_axis, 0.5 * u_ext),
                                True, 0.7 * s_ext)
    s_axis = _trace_guide_leaf(cseq, center, True, 0.62 * s_ext)
    u_bot = _trace_guide_leaf(cseq, at_arc(s_axis, -0.5 * s_ext),
                              False, 0.7 * u_ext)
    u_top = _trace_guide_leaf(cseq, at_arc(s_axis, 0.5 * s_ext),
                              False, 0.7 * u_ext)
    corners = np.array([
        _cross_polylines(s_left, u_bot),    # (-u, -s)
        _cross_polylines(s_right, u_bot),   # (+u, -s)
        _cross_polylines(s_right, u_top),   # (+u, +s)
        _cross_polylines(s_left, u_top),    # (-u, +s)
    ])
    return Rectangle(q, center, corners, [s_left, s_right], [u_bot, u_top])


def magnet_crossing_frequency(seq: MapSequence, rect: Rectangle,
                              rng: np.random.Generator, n_curves: int = 100,
                              s_prime: int = 10,
                              h_max: float = 8e-3) -> float:
    """Fraction of random standard curves whose guide iterate crosses
    the rectangle super-properly."""
    cseq = _guide_sequence(seq, rect.q)
    guide = seq.guides[rect.q - 1]
    policy = RefinementPolicy(h_max=h_max, h_min=1e-5, theta=0.2)
    cone = guide.unstable_cone()
    hits = 0
    for _ in range(n_curves):
        pair = random_standard_pair(rng, guide, q=rect.q)
        strip = _Strip.from_curve(pair.curve)
        from .curves import _map_strip, _rebase
        ok = False
        for _step in range(s_prime):
            strip, _ = _map_strip(strip, cseq.maps[0], policy, cone)
            strip = _rebase(strip)
        comps = _rect_components(strip.nodes, rect)
        for comp in comps:
            if comp["complete"] and comp["excess_lo"] > EXCESS_SUPER \
                    and comp["excess_hi"] > EXCESS_SUPER \
                    and comp["fiber_ok"]:
                ok = True
                break
        hits += int(ok)
    return hits / n_curves


def choose_magnets(seq: MapSequence, centers=None, u_ext: float | None = None,
                   s_ext: float | None = None, verify: bool = True,
                   rng: np.random.Generator | None = None,
                   n_curves: int = 100, s_prime: int = 10,
                   d_min: float = 0.5) -> list[Magnet]:
    """One magnet rectangle per guide, optionally verified by Monte Carlo.

    Verification iterates random standard curves s_prime steps under the
    guide and requires the super-proper crossing frequency >= d_min.
    """
    out = []
    for q in range(1, seq.Q + 1):
        if centers is not None:
            c = np.asarray(centers[q - 1], dtype=float)
        else:
            c = np.array([0.41 + 0.05 * (q - 1), 0.33 + 0.03 * (q - 1)])
        rect = build_rectangle(seq, q, c, u_ext, s_ext)
        freq = None
        if verify:
            freq = magnet_crossing_frequency(
                seq, rect, rng or np.random.default_rng(0),
                n_curves=n_curves, s_prime=s_prime)
            if freq < d_min:
                raise CouplingError(
                    "magnet crossing frequency below threshold",
                    {"q": q, "freq": freq, "d_min": d_min})
        out.append(Magnet(rect, freq))
    return out


# -- crossing detection ------------------------------------------------------


def _rect_components(nodes: np.ndarray, rect: Rectangle) -> list[dict]:
    """Connected complete crossings of the rectangle by a node polyline.

    Returns one dict per component: arc interval, completeness (entered
    and left through opposite s-sides), excess lengths, and the fiber
    ratio range.  Arc values refer to the polyline's own arc length.
    """
    geo = _geometry(nodes)
    arc = geo[2]
    total = float(arc[-1])
    d = nodes - rect.origin
    off = np.round(d)
    cand = rect.contains(nodes, pad=1.5)
    out = []
    i = 0
    n = len(nodes)
    while i < n:
        if not cand[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and cand[j + 1]:
            j += 1
        lo = max(i - 2, 0)
        hi = min(j + 2, n - 1)
        o = off[(i + j) // 2]
        w = d[lo:hi + 1] - o
        ab = w @ rect.frame_inv.T
        a, b = ab[:, 0], ab[:, 1]
        inside = (np.abs(a) < 1.0) & (np.abs(b) < 1.0)
        k = 0
        m = len(inside)
        while k < m:
            if not inside[k]:
                k += 1
                continue
            k2 = k
            while k2 + 1 < m and inside[k2 + 1]:
                k2 += 1
            comp = _classify_component(a, b, arc[lo:hi + 1], k, k2,
                                       at_start=(lo + k == 0),
                                       at_end=(lo + k2 == n - 1))
            if comp is not None:
                comp["excess_lo"] = comp["arc_lo"]
                comp["excess_hi"] = total - comp["arc_hi"]
                comp["offset"] = o
                out.append(comp)
            k = k2 + 1
        i = hi + 1
    return out


def _classify_component(a, b, arc, k, k2, at_start, at_end) -> dict | None:
    """Classify one inside-run: complete iff both ends cross a-boundaries
    with opposite signs; returns arc interval and fiber ratio range."""
    if at_start or at_end:
        return None

    def boundary_cross(i0, i1):
        # crossing parameter and which boundary, moving i0 -> i1
        ta = tb = 2.0
        sa = sb = 0
        da = a[i1] - a[i0]
        if abs(da) > 0:
            for sgn in (-1.0, 1.0):
                t = (sgn - a[i0]) / da
                if 0.0 <= t <= 1.0 and t < ta:
                    ta, sa = t, int(sgn)
        db = b[i1] - b[i0]
        if abs(db) > 0:
            for sgn in (-1.0, 1.0):
                t = (sgn - b[i0]) / db
                if 0.0 <= t <= 1.0 and t < tb:
                    tb, sb = t, int(sgn)
        if ta <= tb:
            return ta, "a", sa
        return tb, "b", sb

    t_in, ax_in, sgn_in = boundary_cross(k, k - 1)
    t_out, ax_out, sgn_out = boundary_cross(k2, k2 + 1)
    if ax_in != "a" or ax_out != "a" or sgn_in == sgn_out:
        return None
    arc_lo = arc[k] + t_in * (arc[k - 1] - arc[k])
    arc_hi = arc[k2] + t_out * (arc[k2 + 1] - arc[k2])
    arc_lo, arc_hi = min(arc_lo, arc_hi), max(arc_hi, arc_lo)
    ratios = 0.5 * (b[k:k2 + 1] + 1.0)
    return {
        "complete": True,
        "arc_lo": float(arc_lo),
        "arc_hi": float(arc_hi),
        "ratio_min": float(np.min(ratios)),
        "ratio_max": float(np.max(ratios)),
        "fiber_ok": bool(FIBER_LO < np.min(ratios)
                         and np.max(ratios) < FIBER_HI),
    }


def _leaf_connects(seq: MapSequence, n: int, rect: Rectangle,
                   pts: np.ndarray, h: float = LEAF_STEP,
                   max_steps: int | None = None) -> np.ndarray:
    """True where the time-n stable leaf through the point connects the
    u-sides of the rectangle without first leaving through an s-side."""
    from .holonomy import _rk4_step

    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    npts = len(pts)
    if max_steps is None:
        max_steps = int(3.0 * rect.s_extent / h) + 8
    reached = np.zeros((npts, 2), dtype=bool)
    failed = np.zeros(npts, dtype=bool)
    for side, sgn in enumerate((-1.0, 1.0)):
        p = pts.copy()
        e_s = np.linalg.inv(rect.frame_inv)[None, :, 1] * sgn
        ref = np.broadcast_to(e_s, (npts, 2)).copy()
        done = np.zeros(npts, dtype=bool)
        for _ in range(max_steps):
            active = ~done
            if not np.any(active):
                break
            pa, dira = _rk4_step(seq, n, p[active], ref[active], h)
            p[active] = pa
            ref[active] = dira
            ab = rect.frame(rect.local(pa))
            out_b = np.abs(ab[:, 1]) >= 1.0
            out_a = np.abs(ab[:, 0]) >= 1.0
            idx = np.flatnonzero(active)
            good = idx[out_b & ~out_a]
            bad = idx[out_a & ~out_b]
            reached[good, side] = True
            failed[bad] = True
            done[good] = True
            done[bad] = True
        failed[~done & ~failed] = True
    return reached[:, 0] & reached[:, 1] & ~failed


@dataclass
class CrossingRecord:
    """One complete crossing of the magnet by one family pair."""

    pair_index: int
    cls: str                      # "super" | "proper" | "none"
    arc_lo: float                 # refined component, pair arc coords
    arc_hi: float
    rect_lo: float
    rect_hi: float
    excess_lo: float
    excess_hi: float
    mass: float                   # family-absolute measure on the component
    len_rect: float
    len_refined: float
    frac_length: float            # |W cap M_n| / |W cap R_q|
    frac_measure: float           # nu(W cap M_n) / nu(W cap R_q)
    ratio_range: tuple[float, float]
    offset: np.ndarray | None = None


def detect_crossings(seq: MapSequence, family: StandardFamily, n: int,
                     rect: Rectangle, refine: bool = True,
                     probes: int = 9) -> list[CrossingRecord]:
    """Classified magnet crossings of every family pair at time n.

    With refine=True each complete crossing is trimmed to the run of
    probe points whose time-n stable leaves connect the u-sides inside
    the rectangle, and the length/measure retention fractions of the
    refinement are recorded.
    """
    out = []
    for idx, (w, pair) in enumerate(zip(family.weights, family.pairs)):
        comps = _rect_components(pair.curve.nodes, rect)
        for comp in comps:
            if not comp["complete"]:
                continue
            cls = "none"
            if comp["excess_lo"] > EXCESS_PROPER and \
                    comp["excess_hi"] > EXCESS_PROPER:
                cls = "proper"
                if comp["excess_lo"] > EXCESS_SUPER and \
                        comp["excess_hi"] > EXCESS_SUPER and comp["fiber_ok"]:
                    cls = "super"
            lo, hi = comp["arc_lo"], comp["arc_hi"]
            len_rect = hi - lo
            mass_rect = float(w) * subcurve_measure(pair, lo, hi)
            r_lo, r_hi = lo, hi
            if refine and cls != "none":
                s_pr = np.linspace(lo, hi, probes + 2)[1:-1]
                ppts = _points_at_arcs(pair.curve, s_pr)
                good = _leaf_connects(seq, n, rect, ppts)
                run = _longest_run(good)
                if run is None:
                    cls = "none"
                else:
                    g0, g1 = run
                    gap = 0.5 * (hi - lo) / (probes + 1)
                    r_lo = lo if g0 == 0 else s_pr[g0] - gap
                    r_hi = hi if g1 == len(good) - 1 else s_pr[g1] + gap
            mass_ref = float(w) * subcurve_measure(pair, r_lo, r_hi)
            out.append(CrossingRecord(
                pair_index=idx, cls=cls, arc_lo=r_lo, arc_hi=r_hi,
                rect_lo=lo, rect_hi=hi,
                excess_lo=comp["excess_lo"], excess_hi=comp["excess_hi"],
                mass=mass_ref, len_rect=len_rect, len_refined=r_hi - r_lo,
                frac_length=(r_hi - r_lo) / len_rect if len_rect > 0 else 0.0,
                frac_measure=mass_ref / mass_rect if mass_rect > 0 else 0.0,
                ratio_range=(comp["ratio_min"], comp["ratio_max"]),
                offset=comp["offset"]))
    return out


def _points_at_arcs(curve: UnstableCurve, s: np.ndarray) -> np.ndarray:
    arc = curve.arc
    x = np.interp(s, arc, curve.nodes[:, 0])
    y = np.interp(s, arc, curve.nodes[:, 1])
    return np.stack([x, y], axis=-1)


def _longest_run(good: np.ndarray) -> tuple[int, int] | None:
    """Index range (first, last) of the longest run of True, or None."""
    best = None
    i = 0
    n = len(good)
    while i < n:
        if not good[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and good[j + 1]:
            j += 1
        if best is None or j - i > best[1] - best[0]:
            best = (i, j)
        i = j + 1
    return best


# -- coupling step -----------------------------------------------------------


def _node_at_arc(strip: _Strip, s: float) -> int:
    """Index of a node at arc position s, inserting one if necessary."""
    arc = _geometry(strip.nodes)[2]
    i = int(np.searchsorted(arc, s)) - 1
    i = min(max(i, 0), len(strip.nodes) - 2)
    f = (s - arc[i]) / (arc[i + 1] - arc[i])
    f = min(max(f, 0.0), 1.0)
    if f < 1e-9:
        return i
    if f > 1.0 - 1e-9:
        return i + 1
    p = (1.0 - f) * strip.nodes[i] + f * strip.nodes[i + 1]
    fields = {}
    for name, v in strip.node_fields():
        fields[name] = np.array([(1.0 - f) * v[i] + f * v[i + 1]])
    mass_lr = (None, None)
    if strip.seg_mass is not None:
        lr_a = strip.log_rho[i]
        lr_b = strip.log_rho[i + 1]
        lr_m = fields["log_rho"][0]
        c1 = float(np.linalg.norm(p - strip.nodes[i]))
        c2 = float(np.linalg.norm(strip.nodes[i + 1] - p))
        mass_lr = _split_mass(np.array([strip.seg_mass[i]]), np.array([lr_a]),
                              np.array([lr_m]), np.array([lr_b]),
                              np.array([c1]), np.array([c2]))
    strip.insert_nodes(np.array([i]), p[None, :], fields, *mass_lr)
    return i + 1


def _subpair(strip: _Strip, s0: float, s1: float) -> tuple[StandardPair, int, int]:
    """Extract [s0, s1] as a pair with the strip's own (unnormalized)
    density; returns the pair and the node range in the mutated strip."""
    i0 = _node_at_arc(strip, s0)
    i1 = _node_at_arc(strip, s1)
    if i1 <= i0:
        raise CouplingError("empty subcurve extraction")
    curve = UnstableCurve(strip.nodes[i0:i1 + 1].copy(), strip.q)
    dens = DensityProfile(strip.log_rho[i0:i1 + 1].copy(),
                          strip.seg_mass[i0:i1].copy())
    rem = strip.remaining[i0:i1 + 1].copy() if strip.remaining is not None \
        else None
    return StandardPair(curve, dens, rem), i0, i1


def _bracket_mass(strip: _Strip, i0: int, i1: int) -> float:
    """Remaining mass drained by a unit layer on nodes i0..i1.

    Includes the half-segment contributions of the boundary nodes to the
    segments just outside the range, which the trapezoid mass rule also
    reduces when the boundary nodes are scaled.
    """
    r = strip.remaining
    seg = strip.seg_mass
    m = float(np.sum(seg[i0:i1] * 0.5 * (r[i0:i1] + r[i0 + 1:i1 + 1])))
    if i0 > 0:
        m += 0.5 * float(seg[i0 - 1] * r[i0])
    if i1 < len(strip.nodes) - 1:
        m += 0.5 * float(seg[i1] * r[i1])
    return m


def _match_fragments(src_masses: list[float], tgt_masses: list[float]):
    """Cumulative-mass walk matching two relative-mass partitions.

    Returns fragments (i, j, r) with r the shared relative mass; the
    boundaries are the union of both partitions' cumulative breakpoints,
    so relative masses agree exactly by construction.
    """
    zs = sum(src_masses)
    zt = sum(tgt_masses)
    cs = np.concatenate([[0.0], np.cumsum(np.asarray(src_masses) / zs)])
    ct = np.concatenate([[0.0], np.cumsum(np.asarray(tgt_masses) / zt)])
    cs[-1] = ct[-1] = 1.0
    cuts = np.unique(np.concatenate([cs, ct]))
    frags = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi - lo < 1e-15:
            continue
        mid = 0.5 * (lo + hi)
        i = int(np.searchsorted(cs, mid) - 1)
        j = int(np.searchsorted(ct, mid) - 1)
        frags.append((i, j, float(hi - lo)))
    return frags


@dataclass
class CouplingEvent:
    index: int
    time: int
    q: int
    d0: float
    tau_alpha: float
    z_source: float
    z_target: float
    coupled_abs: float            # absolute mass drained by this event
    remaining_abs: float          # absolute mass still uncoupled after it
    sup_tau_beta: float
    fragments: list[tuple[int, int, float]]
    rescale_max: float            # max |target mass rescale - 1|
    quadrature_err: float
    aborted: bool = False
    reason: str = ""
    holonomies: dict = field(default_factory=dict)


@dataclass
class CouplingLedger:
    """Exact scalar bookkeeping of a coupling run."""

    d0: float = 0.0
    s0: int = 0
    events: list[CouplingEvent] = field(default_factory=list)
    probe_z: list[tuple[int, float, float]] = field(default_factory=list)
    starved: bool = False
    horizon: int = 0

    @property
    def remaining_abs(self) -> float:
        k = len([e for e in self.events if not e.aborted])
        return (1.0 - self.d0 / 2.0) ** k

    def event_masses(self) -> list[tuple[int, float]]:
        """(time, coupled absolute mass) per accepted event; the mass at
        event k is (d0/2)(1 - d0/2)^k by construction."""
        out = []
        rem = 1.0
        for e in self.events:
            if e.aborted:
                continue
            out.append((e.time, rem * self.d0 / 2.0))
            rem *= 1.0 - self.d0 / 2.0
        return out

    def mass_drift(self) -> float:
        """Max bookkeeping error |coupled so far + remaining - 1|."""
        drift = 0.0
        coupled = 0.0
        rem = 1.0
        for t, m in self.event_masses():
            coupled += m
            rem *= 1.0 - self.d0 / 2.0
            drift = max(drift, abs(coupled + rem - 1.0))
        return drift

    def tail_series(self, n_max: int | None = None):
        """mu_hat(Upsilon > n) on 0..n_max (a right-continuous staircase)."""
        if n_max is None:
            n_max = self.horizon
        times = self.event_masses()
        tail = np.ones(n_max + 1)
        rem = 1.0
        ti = 0
        for n in range(n_max + 1):
            while ti < len(times) and times[ti][0] <= n:
                rem *= 1.0 - self.d0 / 2.0
                ti += 1
            tail[n] = rem
        return tail

    def tail_fit(self) -> tuple[float, float]:
        """(theta_hat, r2) of the geometric envelope of the tail."""
        times = [t for t, _ in self.event_masses()]
        if len(times) < 2:
            return 1.0, 0.0
        tail = self.tail_series(max(times))
        ns = np.array(times, dtype=float)
        vals = np.log(tail[np.array(times)])
        A = np.stack([ns, np.ones_like(ns)], axis=-1)
        coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
        fit = A @ coef
        ss_res = float(np.sum((vals - fit) ** 2))
        ss_tot = float(np.sum((vals - np.mean(vals)) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        return float(np.exp(coef[0])), r2


def _interp_mass_arrays(pair: StandardPair):
    arc = pair.curve.arc
    rho = np.exp(pair.density.log_rho)
    return arc, rho


def _resample_curve(curve: UnstableCurve, s_lo: float, s_hi: float,
                    n_nodes: int) -> UnstableCurve:
    """Curve restricted to [s_lo, s_hi] on a uniform arc grid; nodes lie
    on the original polyline, so arc positions agree to curvature error."""
    s = np.linspace(s_lo, s_hi, n_nodes)
    return UnstableCurve(_points_at_arcs(curve, s), curve.q)


def couple_step(ledger: CouplingLedger, famG: StandardFamily,
                famE: StandardFamily, n: int, magnet: Magnet,
                seq: MapSequence, d0: float | None = None,
                n_quad_sets: int = 20,
                rng: np.random.Generator | None = None,
                keep_holonomies: bool = True):
    """One coupling event at time n; returns (famG', famE', event) or
    (famG, famE, None) when the preconditions are not met.

    The source family loses the constant layer tau_alpha on its crossing
    components; the target loses the holonomy-pushed layer given by the
    consistency rule, rescaled per component by a factor within the
    quadrature error so the drained masses agree to round-off.
    """
    rng = rng or np.random.default_rng(0)
    rect = magnet.rect
    d0 = ledger.d0 if d0 is None else d0
    recsG = [r for r in detect_crossings(seq, famG, n, rect)
             if r.cls != "none" and r.mass > 0]
    recsE = [r for r in detect_crossings(seq, famE, n, rect)
             if r.cls != "none" and r.mass > 0]
    if not recsG or not recsE:
        return famG, famE, None

    stripsG = [_Strip.from_pair(p) for p in famG.pairs]
    stripsE = [_Strip.from_pair(p) for p in famE.pairs]
    for st in stripsG + stripsE:
        if st.remaining is None:
            st.remaining = np.ones(len(st.nodes))

    # Extract component subpairs and build holonomies source -> target.
    # Component masses are the masses a unit layer on the component would
    # drain, so the layer bookkeeping below is exact in the family metric.
    subG, masses_G, idxG = [], [], []
    for r in recsG:
        sp, i0, i1 = _subpair(stripsG[r.pair_index], r.arc_lo, r.arc_hi)
        subG.append(sp)
        idxG.append((i0, i1))
        masses_G.append(float(famG.weights[r.pair_index])
                        * _bracket_mass(stripsG[r.pair_index], i0, i1))
    subE, masses_E, idxE = [], [], []
    for r in recsE:
        sp, i0, i1 = _subpair(stripsE[r.pair_index], r.arc_lo, r.arc_hi)
        subE.append(sp)
        idxE.append((i0, i1))
        masses_E.append(float(famE.weights[r.pair_index])
                        * _bracket_mass(stripsE[r.pair_index], i0, i1))
    frags = _match_fragments(masses_G, masses_E)

    # Holonomies use a slightly shrunk, finely resampled source core so
    # every probe leaf lands strictly inside the target component; the
    # layer profile extends to the component edges by interpolation.
    def comp_holonomy(i: int, j: int):
        lg = subG[i].curve.length
        core_lo = 0.04 * lg
        src = _resample_curve(subG[i].curve, core_lo, lg - core_lo, 101)
        tgt = _resample_curve(subE[j].curve, 0.0, subE[j].curve.length, 161)
        try:
            hol = build_holonomy(seq, n, src, tgt, n_probe=101)
            compute_jacobians(hol)
        except HolonomyError:
            return None
        if hol.domain_fraction < 0.9:
            return None
        return hol, hol.s1 + core_lo

    hols: dict[tuple[int, int], tuple] = {}
    for _attempt in range(2):
        bad = set()
        for i, j, _ in frags:
            if (i, j) in hols:
                continue
            built = comp_holonomy(i, j)
            if built is None:
                bad.add(i)
            else:
                hols[(i, j)] = built
        if not bad:
            break
        # Drop the source components whose holonomies failed and redo the
        # matching; their mass stays uncoupled, re-targeted to later events.
        keep = [k for k in range(len(recsG)) if k not in bad]
        if not keep:
            return famG, famE, None
        recsG = [recsG[k] for k in keep]
        subG = [subG[k] for k in keep]
        idxG = [idxG[k] for k in keep]
        masses_G = [masses_G[k] for k in keep]
        frags = _match_fragments(masses_G, masses_E)
        hols = {}
    else:
        return famG, famE, None

    z_G = float(sum(masses_G))
    z_E = float(sum(masses_E))
    if min(z_G, z_E) < d0:
        return famG, famE, None
    tau_alpha = d0 / (2.0 * z_G)

    # Per matched source/target component pair, the consistency-rule layer
    # F(y) = tau_alpha rho_a(x) / (Jh(x) rho_b(y)) at the matched probes.
    per_pair = {}
    sup_tau_beta = 0.0
    for (i, j), (hol, s1) in hols.items():
        arc_a, rho_a = _interp_mass_arrays(subG[i])
        arc_b, rho_b = _interp_mass_arrays(subE[j])
        s2 = hol.s2
        wG = float(famG.weights[recsG[i].pair_index])
        wE = float(famE.weights[recsE[j].pair_index])
        ra = np.interp(s1, arc_a, rho_a) * wG
        rb = np.interp(s2, arc_b, rho_b) * wE
        F = tau_alpha * ra / (hol.jac * rb)
        per_pair[(i, j)] = (s2, F)
        # replica layer heights: tau_beta^k = (wG_k / wE_k) F with
        # wG_k / wE_k = (z_G m_j) / (z_E m_i), the same for every fragment
        ratio = (z_G * masses_E[j]) / (z_E * masses_G[i])
        sup_tau_beta = max(sup_tau_beta, float(np.max(F)) * ratio)

    event = CouplingEvent(
        index=len(ledger.events), time=n, q=rect.q, d0=d0,
        tau_alpha=tau_alpha, z_source=z_G, z_target=z_E,
        coupled_abs=ledger.remaining_abs * d0 / 2.0,
        remaining_abs=ledger.remaining_abs * (1.0 - d0 / 2.0),
        sup_tau_beta=sup_tau_beta, fragments=frags,
        rescale_max=0.0, quadrature_err=0.0,
        holonomies={k: h for k, (h, _s) in hols.items()}
        if keep_holonomies else {})
    if sup_tau_beta > TAU_BETA_CAP:
        event.aborted = True
        event.reason = "sup tau_beta above cap"
        ledger.events.append(event)
        return famG, famE, event

    # Source surgery: the layers of every fragment of component i add up
    # to the constant tau_alpha, so remaining scales uniformly there.
    for r, (i0, i1) in zip(recsG, idxG):
        st = stripsG[r.pair_index]
        st.remaining[i0:i1 + 1] *= (1.0 - tau_alpha)

    # Target surgery: aggregate the fragment layers per target component,
    # H_j(y) = sum_k wG_k F_ij(y), then rescale so the drained mass is
    # exactly (d0/2) (m_j / z_E) in the family's own mass accounting.
    tgt_weight: dict[int, list] = {}
    for i, j, r in frags:
        tgt_weight.setdefault(j, []).append((i, r * z_G / masses_G[i]))
    rescale_max = 0.0
    for j, contribs in tgt_weight.items():
        rE = recsE[j]
        st = stripsE[rE.pair_index]
        wE = float(famE.weights[rE.pair_index])
        i0, i1 = idxE[j]
        arc = _geometry(st.nodes)[2]
        s_nodes = arc[i0:i1 + 1]
        s_base = arc[i0]
        H = np.zeros(len(s_nodes))
        for i, wk in contribs:
            s2, F = per_pair[(i, j)]
            order = np.argsort(s2)
            H += wk * np.interp(s_nodes - s_base, s2[order], F[order])
        r_here = st.remaining[i0:i1 + 1]
        seg = st.seg_mass[i0:i1]
        drained = float(np.sum(
            seg * 0.5 * (H[:-1] * r_here[:-1] + H[1:] * r_here[1:])))
        if i0 > 0:
            drained += 0.5 * float(st.seg_mass[i0 - 1] * H[0] * r_here[0])
        if i1 < len(st.nodes) - 1:
            drained += 0.5 * float(st.seg_mass[i1] * H[-1] * r_here[-1])
        drained *= wE
        target = (d0 / 2.0) * masses_E[j] / z_E
        if drained <= 0:
            continue
        c = target / drained
        rescale_max = max(rescale_max, abs(c - 1.0))
        st.remaining[i0:i1 + 1] *= np.clip(1.0 - c * H, 0.0, 1.0)
    event.rescale_max = rescale_max

    # Measure-preservation spot checks on random sub-arcs: the source mass
    # of a coupled layer equals the holonomy-pushed target-side integral,
    # evaluated on the image of a shared arc partition.
    checks = []
    pairs_list = list(hols.items())
    for _ in range(n_quad_sets):
        (i, j), (hol, s1_abs) = pairs_list[rng.integers(len(pairs_list))]
        arc_a, rho_a = _interp_mass_arrays(subG[i])
        wG = float(famG.weights[recsG[i].pair_index])
        s1 = np.sort(s1_abs)
        lo, hi = np.sort(rng.uniform(s1[0], s1[-1], size=2))
        if hi - lo < 1e-4:
            continue
        grid = np.linspace(lo, hi, 2001)
        src = tau_alpha * np.trapezoid(
            np.interp(grid, arc_a, rho_a) * wG, grid)
        order = np.argsort(s1_abs)
        g2 = np.interp(grid, s1_abs[order], hol.s2[order])
        arc_b, rho_b = _interp_mass_arrays(subE[j])
        wE = float(famE.weights[recsE[j].pair_index])
        s2d, Fd = per_pair[(i, j)]
        o2 = np.argsort(s2d)
        tgt = abs(np.trapezoid(np.interp(g2, s2d[o2], Fd[o2])
                               * np.interp(g2, arc_b, rho_b) * wE, g2))
        checks.append(abs(src - tgt))
    event.quadrature_err = float(max(checks)) if checks else 0.0

    ledger.events.append(event)
    newG = StandardFamily([st.to_pair() for st in stripsG],
                          famG.weights.copy())
    newE = StandardFamily([st.to_pair() for st in stripsE],
                          famE.weights.copy())
    return newG, newE, event


# -- recovery ----------------------------------------------------------------


def _fold_remnants(family: StandardFamily) -> StandardFamily:
    """Fold remaining profiles into densities and weights; renormalize."""
    pairs, weights = [], []
    for w, p in zip(family.weights, family.pairs):
        m = p.remaining_mass()
        if m * w < 1e-15:
            continue
        r = np.maximum(p.remaining, 1e-300)
        seg = p.density.seg_mass * 0.5 * (r[:-1] + r[1:]) / m
        lr = p.density.log_rho + np.log(r) - math.log(m)
        pairs.append(StandardPair(p.curve, DensityProfile(lr, seg),
                                  np.ones(p.curve.n_nodes)))
        weights.append(float(w) * m)
    tot = sum(weights)
    return StandardFamily(pairs, np.array(weights) / tot)


def recovery_step(seq: MapSequence, family: StandardFamily, n: int,
                  r0: int = 10, r0_cap: int = 50, c_r: float = 25.0,
                  eta_r: float = 0.5, policy: RefinementPolicy | None = None,
                  max_pairs: int = 96,
                  rng: np.random.Generator | None = None):
    """Renormalize remnants and evolve until densities are regular again.

    Returns (family', n'); evolution extends past r0 in chunks of 5 when
    a surviving non-remnant pair still violates the regular-density bound
    with constant c_r at exponent eta_r, up to r0_cap steps.
    """
    fam = _fold_remnants(family)
    steps = 0
    target = r0
    while True:
        fam = evolve_family(seq, fam, n + steps, n + target, policy=policy,
                            max_pairs=max_pairs, rng=rng)
        steps = target
        worst = 0.0
        for p in fam.pairs:
            if p.is_remnant:
                continue
            worst = max(worst, density_regularity(p, eta_r))
        if worst <= c_r or steps >= r0_cap:
            if worst > c_r:
                raise CouplingError(
                    "densities not regular within the recovery cap",
                    {"worst": worst, "c_r": c_r, "steps": steps})
            return fam, n + steps
        target = min(steps + 5, r0_cap)


# -- full runs ---------------------------------------------------------------


def run_coupling(seq: MapSequence, famG: StandardFamily, famE: StandardFamily,
                 magnets: list[Magnet] | None = None, r0: int = 10,
                 r0_cap: int = 50, probe_window: int = 2,
                 max_events: int | None = None, c_r: float = 25.0,
                 eta_r: float = 0.5, max_pairs: int = 96,
                 policy: RefinementPolicy | None = None,
                 rng: np.random.Generator | None = None,
                 keep_holonomies: bool = True) -> CouplingLedger:
    """Repeated couple -> recover over the whole sequence horizon.

    d0 is measured, not assumed: crossing masses are probed over the
    first probe_window times at which both families cross the refined
    magnet, and d0 = 0.8 min measured Z.  The first event defines s0.
    Returns the ledger; starvation (no events within the horizon) is
    reported on it rather than raised.
    """
    rng = rng or np.random.default_rng(0)
    if policy is None:
        policy = RefinementPolicy(h_max=2e-3, h_min=1e-5, theta=0.05)
    if magnets is None:
        magnets = choose_magnets(seq, verify=False)
    ledger = CouplingLedger(horizon=seq.n_total)
    n = 0
    while n < seq.n_total:
        famG = evolve_family(seq, famG, n, n + 1, policy=policy,
                             max_pairs=max_pairs, rng=rng)
        famE = evolve_family(seq, famE, n, n + 1, policy=policy,
                             max_pairs=max_pairs, rng=rng)
        n += 1
        q = seq.interval_index(n) + 1
        rect = magnets[q - 1].rect
        zg = sum(r.mass for r in detect_crossings(seq, famG, n, rect,
                                                  refine=False)
                 if r.cls != "none")
        ze = sum(r.mass for r in detect_crossings(seq, famE, n, rect,
                                                  refine=False)
                 if r.cls != "none")
        if len(ledger.probe_z) < probe_window:
            if zg > 0 and ze > 0:
                zg_r = sum(r.mass for r in detect_crossings(seq, famG, n, rect)
                           if r.cls != "none")
                ze_r = sum(r.mass for r in detect_crossings(seq, famE, n, rect)
                           if r.cls != "none")
                if zg_r > 0 and ze_r > 0:
                    ledger.probe_z.append((n, float(zg_r), float(ze_r)))
            continue
        if ledger.d0 == 0.0:
            zmin = min(min(a, b) for _, a, b in ledger.probe_z)
            ledger.d0 = D0_SAFETY * zmin
        if min(zg, ze) < ledger.d0:
            continue
        famG2, famE2, event = couple_step(
            ledger, famG, famE, n, magnets[q - 1], seq, rng=rng,
            keep_holonomies=keep_holonomies)
        if event is None or event.aborted:
            continue
        if ledger.s0 == 0:
            ledger.s0 = n
        famG, famE = famG2, famE2
        accepted = len([e for e in ledger.events if not e.aborted])
        if max_events is not None and accepted >= max_events:
            break
        if n + r0 >= seq.n_total:
            break
        famG, n_g = recovery_step(seq, famG, n, r0=r0, r0_cap=r0_cap,
                                  c_r=c_r, eta_r=eta_r, policy=policy,
                                  max_pairs=max_pairs, rng=rng)
        famE, n_e = recovery_step(seq, famE, n, r0=r0, r0_cap=r0_cap,
                                  c_r=c_r, eta_r=eta_r, policy=policy,
                                  max_pairs=max_pairs, rng=rng)
        while n_g < n_e:
            famG = evolve_family(seq, famG, n_g, n_g + 1, policy=policy,
                                 max_pairs=max_pairs, rng=rng)
            n_g += 1
        while n_e < n_g:
            famE = evolve_family(seq, famE, n_e, n_e + 1, policy=policy,
                                 max_pairs=max_pairs, rng=rng)
            n_e += 1
        n = n_g
    if not any(not e.aborted for e in ledger.events):
        ledger.starved = True
    return ledger


def separation_check(ledger: CouplingLedger, seq: MapSequence,
                     n_steps: int = 12) -> tuple[bool, float]:
    """Forward leaf-distance envelope for sampled coupled pairs.

    For each accepted event's stored holonomies, matched points iterated
    from the coupling time satisfy dist <= ell_0 lambda^(n - Upsilon)
    with lambda the certified per-step contraction.  Returns (ok, max
    envelope ratio observed).
    """
    rep = _cached_report(seq)
    lam = max(1.0 / iv.lambda_cert for iv in rep.intervals)
    worst = 0.0
    all_ok = True
    for e in ledger.events:
        if e.aborted or not e.holonomies:
            continue
        for hol in e.holonomies.values():
            steps = min(n_steps, seq.n_total - e.time)
            if steps <= 0:
                continue
            d, ok = matched_forward_separation(hol, steps, lam=lam)
            env = ELL0 * lam ** np.arange(steps + 1)
            worst = max(worst, float(np.max(d / env[:, None])))
            all_ok = all_ok and ok
    return all_ok, worst
