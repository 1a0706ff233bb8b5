"""Stable-leaf tracing, holonomy maps, and their Jacobians.

Leaves of the finite-time stable foliation are integral curves of the
stable line field; they are traced with RK4 at a fixed small step, the
line field re-evaluated (with its convergence certificate) at every
stage and sign-aligned by continuity.  A holonomy map between two nearby
unstable curves matches each probe point of the source with the point
where its leaf crosses the target, the crossing refined by bisection
along the leaf; matchings must be monotone in arc length and every
connecting leaf shorter than the cutoff.

The holonomy Jacobian is the infinite product of per-step tangential
Jacobian ratios along the forward orbits of a matched pair.  The factors
decay geometrically because the orbits approach each other along the
stable direction, so the product is truncated once a fitted geometric
tail bound drops below tolerance; the same per-step factors give the
whole decay series of the time-n Jacobians and the split-at-m
consistency identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import eval_stable_field
from .geometry import torus_delta, torus_dist, wrap
from .sequence import MapSequence

__all__ = [
    "ELL0",
    "StableLeafSegment",
    "HolonomyMap",
    "HolonomyError",
    "trace_stable_leaf",
    "build_holonomy",
    "compute_jacobians",
    "holonomy_jacobian",
    "holonomy_decay_series",
    "jac_decomp_check",
    "holonomy_regularity",
    "holonomy_pushforward",
    "matched_forward_separation",
]

ELL0 = 0.05  # leaf-length cutoff defining the matching
LEAF_STEP = 1e-3
JAC_TOL = 1e-9
JAC_DEPTH_CAP = 400


class HolonomyError(RuntimeError):
    """Holonomy construction or Jacobian truncation failed; witness in args."""


@dataclass
class StableLeafSegment:
    """Integral curve of the stable line field through a base point."""

    base_point: np.ndarray
    n: int
    nodes: np.ndarray  # lifted polyline, nodes[0] = base_point
    arc: np.ndarray
    error_estimate: float  # step-halving positional error

    @property
    def length(self) -> float:
        return float(self.arc[-1])


@dataclass
class HolonomyMap:
    """Monotone matching between two unstable curves along stable leaves."""

    seq: MapSequence
    n: int
    curve1: "object"  # UnstableCurve
    curve2: "object"
    s1: np.ndarray  # arc positions of matched probes on curve1
    x1: np.ndarray  # lifted matched points on curve1
    u1: np.ndarray  # unit tangents of curve1 there
    s2: np.ndarray
    x2: np.ndarray
    u2: np.ndarray
    leaf_len: np.ndarray
    domain_fraction: float
    jac: np.ndarray | None = None  # filled by compute_jacobians
    log_ratio: np.ndarray | None = None  # per-step factors (pairs, depth)
    jac_depth: int = 0
    jac_tail: float = 0.0
    mu_hat: float = 1.0

    @property
    def n_pairs(self) -> int:
        return len(self.s1)


def _field_dirs(seq: MapSequence, n: int, pts: np.ndarray) -> np.ndarray:
    """Unit stable directions at a batch of lifted points (sign arbitrary)."""
    angles, _ = eval_stable_field(seq, n, wrap(pts))
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _aligned(vec: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Flip line-field representatives to the half-plane of ref."""
    sign = np.sign(np.sum(vec * ref, axis=-1, keepdims=True))
    sign[sign == 0.0] = 1.0
    return vec * sign


def _rk4_step(seq: MapSequence, n: int, p: np.ndarray, ref: np.ndarray,
              h) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step along the stable line field; returns (new point, last dir).

    h may be a scalar or a per-point column; ref fixes the sign branch.
    """
    hcol = h if np.ndim(h) else float(h)
    if np.ndim(hcol) == 1:
        hcol = hcol[:, None]
    k1 = _aligned(_field_dirs(seq, n, p), ref)
    k2 = _aligned(_field_dirs(seq, n, p + 0.5 * hcol * k1), k1)
    k3 = _aligned(_field_dirs(seq, n, p + 0.5 * hcol * k2), k1)
    k4 = _aligned(_field_dirs(seq, n, p + hcol * k3), k1)
    return p + hcol / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), k1


def trace_stable_leaf(seq: MapSequence, n: int, x, max_len: float = ELL0,
                      h: float = LEAF_STEP, orientation: int = +1,
                      error_check: bool = True) -> StableLeafSegment:
    """Trace the stable leaf through x up to arc length max_len.

    The orientation picks the branch of the line field at the base point;
    the sign is then propagated by continuity.  One step-halving re-trace
    estimates the positional error of the whole segment.
    """
    x = np.asarray(x, dtype=float)

    def run(step: float) -> np.ndarray:
        p = x[None, :].copy()
        ref = orientation * _field_dirs(seq, n, p)
        nodes = [p[0].copy()]
        arc = 0.0
        while arc + step <= max_len + 1e-12:
            p, ref = _rk4_step(seq, n, p, ref, step)
            nodes.append(p[0].copy())
            arc += step
        rem = max_len - arc
        if rem > 1e-12:
            p, ref = _rk4_step(seq, n, p, ref, rem)
            nodes.append(p[0].copy())
        return np.array(nodes)

    nodes = run(h)
    err = 0.0
    if error_check:
        half = run(0.5 * h)
        err = float(np.max(np.linalg.norm(nodes - half[::2][: len(nodes)], axis=-1)))
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(nodes, axis=0),
                                                          axis=-1))])
    return StableLeafSegment(x, n, nodes, arc, err)


def _relift_near(nodes2: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Shift a lifted polyline by the integer vector bringing it near anchor."""
    shift = np.round(np.mean(nodes2, axis=0) - anchor)
    return nodes2 - shift


def _segment_crossings(p: np.ndarray, pn: np.ndarray, a: np.ndarray,
                       b: np.ndarray):
    """First crossing of each leaf step [p, pn] with the polyline segments
    (a_j, b_j): returns (has, t, j, frac) with t the fraction along the step."""
    m = len(p)
    d = pn - p  # (m, 2)
    e = b - a  # (k, 2)
    # solve p + t d = a_j + w e_j
    dx = d[:, None, 0]
    dy = d[:, None, 1]
    ex = e[None, :, 0]
    ey = e[None, :, 1]
    det = dx * ey - dy * ex
    rx = a[None, :, 0] - p[:, None, 0]
    ry = a[None, :, 1] - p[:, None, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rx * ey - ry * ex) / det
        w = (rx * dy - ry * dx) / det
    valid = (np.abs(det) > 1e-300) & (t >= 0.0) & (t <= 1.0) & (w >= 0.0) & (w <= 1.0)
    t_masked = np.where(valid, t, np.inf)
    j = np.argmin(t_masked, axis=1)
    tbest = t_masked[np.arange(m), j]
    has = np.isfinite(tbest)
    frac = w[np.arange(m), j]
    return has, tbest, j, frac


def _bisect_crossing(seq: MapSequence, n: int, p0: np.ndarray, ref: np.ndarray,
                     h: float, a: np.ndarray, b: np.ndarray,
                     tol: float = 1e-10) -> np.ndarray:
    """Refine the leaf/segment crossing inside one RK4 step by bisection.

    The position at fraction t of the step is a single RK4 step of size
    t*h from p0 (local error ~ h^5, far below tol); bisection runs on the
    signed side of the target segment's line.
    """
    e = b - a

    def side(t: float) -> float:
        if t <= 0.0:
            q = p0
        else:
            q, _ = _rk4_step(seq, n, p0[None, :], ref[None, :], t * h)
            q = q[0]
        r = q - a
        return float(e[0] * r[1] - e[1] * r[0])

    lo, hi = 0.0, 1.0
    flo = side(lo)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        fm = side(mid)
        if flo * fm <= 0.0:
            hi = mid
        else:
            lo, flo = mid, fm
        if (hi - lo) * h < tol:
            break
    t = 0.5 * (lo + hi)
    q, _ = _rk4_step(seq, n, p0[None, :], ref[None, :], t * h)
    return q[0], t * h


def build_holonomy(seq: MapSequence, n: int, curve1, curve2,
                   ell0: float = ELL0, n_probe: int = 101,
                   h: float = LEAF_STEP) -> HolonomyMap:
    """Match probe points of curve1 to curve2 along stable leaves.

    Probes are curve1 nodes subsampled to about n_probe; each leaf is
    traced toward curve2 (both branches if needed) until it crosses or
    exceeds ell0.  Unmatched probes are excluded from the domain; the
    matching must be monotone in arc length.
    """
    nodes2 = _relift_near(curve2.nodes.astype(float),
                          np.mean(curve1.nodes, axis=0))
    a2 = nodes2[:-1]
    b2 = nodes2[1:]
    arc2 = curve2.arc

    stride = max(curve1.n_nodes // max(n_probe - 1, 1), 1)
    idx = np.arange(0, curve1.n_nodes, stride)
    if idx[-1] != curve1.n_nodes - 1:
        idx = np.append(idx, curve1.n_nodes - 1)
    X0 = curve1.nodes[idx].astype(float)
    S1 = curve1.arc[idx]
    ang1 = curve1.tangents[idx]
    U1 = np.stack([np.cos(ang1), np.sin(ang1)], axis=-1)

    m = len(X0)
    matched = np.zeros(m, dtype=bool)
    S2 = np.zeros(m)
    X2 = np.zeros((m, 2))
    LL = np.full(m, np.inf)

    v0 = _field_dirs(seq, n, X0)
    toward = np.mean(nodes2, axis=0) - np.mean(curve1.nodes, axis=0)
    base_sign = np.sign(np.sum(v0 * toward, axis=-1))
    base_sign[base_sign == 0.0] = 1.0

    for attempt_sign in (1.0, -1.0):
        todo = ~matched
        if not np.any(todo):
            break
        p = X0[todo].copy()
        ref = (attempt_sign * base_sign[todo])[:, None] * v0[todo]
        live = np.arange(m)[todo]
        arc_done = np.zeros(len(p))
        steps = int(math.ceil(ell0 / h)) + 1
        for _ in range(steps):
            if len(p) == 0:
                break
            step_h = np.minimum(h, ell0 - arc_done)
            active = step_h > 1e-12
            if not np.any(active):
                break
            p = p[active]
            ref = ref[active]
            live = live[active]
            arc_done = arc_done[active]
            step_h = step_h[active]
            pn, k1 = _rk4_step(seq, n, p, ref, step_h)
            has, tfrac, j, frac = _segment_crossings(p, pn, a2, b2)
            for ii in np.flatnonzero(has):
                gid = live[ii]
                q, dlen = _bisect_crossing(seq, n, p[ii], k1[ii],
                                           float(step_h[ii]), a2[j[ii]], b2[j[ii]])
                e = b2[j[ii]] - a2[j[ii]]
                f = float(np.dot(q - a2[j[ii]], e) / np.dot(e, e))
                f = min(max(f, 0.0), 1.0)
                leaf_total = arc_done[ii] + dlen
                if leaf_total < LL[gid]:
                    matched[gid] = True
                    LL[gid] = leaf_total
                    S2[gid] = float(arc2[j[ii]]
                                    + f * (arc2[j[ii] + 1] - arc2[j[ii]]))
                    X2[gid] = q
            keep = ~has
            p = pn[keep]
            ref = k1[keep]
            live = live[keep]
            arc_done = arc_done[keep] + step_h[keep]

    sel = matched & (LL <= ell0 + 1e-9)
    order = np.argsort(S1[sel])
    s1 = S1[sel][order]
    s2 = S2[sel][order]
    if np.any(np.diff(s2) <= 0.0):
        k = int(np.flatnonzero(np.diff(s2) <= 0.0)[0])
        raise HolonomyError(
            "non-monotone holonomy matching",
            {"s1": float(s1[k]), "s2": float(s2[k]), "s2_next": float(s2[k + 1])},
        )
    ang2 = np.interp(s2, curve2.arc, curve2.tangents)
    hol = HolonomyMap(
        seq=seq, n=n, curve1=curve1, curve2=curve2,
        s1=s1, x1=X0[sel][order], u1=U1[sel][order],
        s2=s2, x2=X2[sel][order],
        u2=np.stack([np.cos(ang2), np.sin(ang2)], axis=-1),
        leaf_len=LL[sel][order],
        domain_fraction=float(np.mean(sel)),
    )
    return hol


# -- Jacobians ---------------------------------------------------------------


def _fit_envelope(step_max: np.ndarray, lo: int, hi: int) -> tuple[float, float]:
    """(c1, mu) from a semilog fit of the per-step factor maxima."""
    ks = np.arange(lo, hi, dtype=float)
    vals = step_max[lo:hi]
    pos = vals > 0
    if np.sum(pos) < 2:
        return 0.0, 0.5
    A = np.stack([ks[pos], np.ones(int(np.sum(pos)))], axis=-1)
    coef, *_ = np.linalg.lstsq(A, np.log(vals[pos]), rcond=None)
    return float(np.exp(coef[1])), float(min(np.exp(coef[0]), 0.97))


def compute_jacobians(hol: HolonomyMap, tol: float = JAC_TOL,
                      depth_cap: int = JAC_DEPTH_CAP) -> np.ndarray:
    """Truncated-product holonomy Jacobians for every matched pair.

    Per step k the factor is |DT u|/|DT v| evaluated along the two forward
    orbits.  The factors decay geometrically while the orbits approach
    along the stable direction, but any numerical leaf error blows up at
    the unstable rate, so the computed factors bottom out near
    sqrt(d0 * leaf error) and then diverge.  The product is therefore
    truncated either when the factors and the fitted tail drop below tol
    (clean convergence, the exact linear case) or at the detected noise
    floor; past the floor the true factors keep decaying, so the tail
    certificate comes from the fitted envelope c1 mu^k, and the achieved
    truncation error is reported instead of silently absorbing noise.
    """
    seq = hol.seq
    x = wrap(hol.x1.copy())
    y = wrap(hol.x2.copy())
    u = hol.u1.copy()
    v = hol.u2.copy()
    rows = []
    step_max: list[float] = []
    for k in range(hol.n + 1, hol.n + depth_cap + 1):
        T = seq.map_for_step(k)
        Mx = T.derivative(x)
        My = T.derivative(y)
        wu = np.einsum("nij,nj->ni", Mx, u)
        wv = np.einsum("nij,nj->ni", My, v)
        su = np.linalg.norm(wu, axis=-1)
        sv = np.linalg.norm(wv, axis=-1)
        rows.append(np.log(su) - np.log(sv))
        step_max.append(float(np.max(np.abs(rows[-1]))))
        u = wu / su[:, None]
        v = wv / sv[:, None]
        x = T(x)
        y = T(y)
        depth = len(rows)
        if depth < 8:
            continue
        sm = np.array(step_max)
        k_min = int(np.argmin(sm))
        floor = sm[k_min]
        clean = sm[-1] < tol and (sm[-4:] < tol).all()
        hit_floor = (depth - k_min >= 4 and floor < 1e-3
                     and (sm[k_min + 1:] > 2.0 * floor).sum() >= 3)
        if clean or hit_floor or depth == depth_cap:
            if not (clean or hit_floor):
                raise HolonomyError(
                    "holonomy Jacobian product did not converge",
                    {"depth": depth, "last_factor": sm[-1]},
                )
            cut = depth if clean else k_min + 1
            c1, mu = _fit_envelope(sm, 1, cut)
            R = np.stack(rows[:cut], axis=-1)
            hol.log_ratio = R
            hol.jac = np.exp(np.sum(R, axis=-1))
            hol.jac_depth = cut
            hol.jac_tail = c1 * mu ** cut / (1.0 - mu)
            hol.mu_hat = mu
            return hol.jac
    raise HolonomyError("empty holonomy product", {})


def holonomy_jacobian(hol: HolonomyMap, x, tol: float = JAC_TOL) -> tuple[float, dict]:
    """Jacobian at the matched pair nearest to x (lifted or torus point)."""
    if hol.jac is None:
        compute_jacobians(hol, tol)
    x = np.asarray(x, dtype=float)
    d = torus_dist(wrap(hol.x1), wrap(x))
    i = int(np.argmin(d))
    cert = {"depth": hol.jac_depth, "tail": hol.jac_tail, "mu_hat": hol.mu_hat,
            "pair_distance": float(d[i])}
    return float(hol.jac[i]), cert


def holonomy_decay_series(hol: HolonomyMap, n_max: int = 30):
    """Per-n max |ln J h_n| over pairs, with a fitted geometric envelope.

    ln J h_n at the evolved pair is the suffix sum of the stored per-step
    factors.  Returns (series, mu_hat, r2).
    """
    if hol.log_ratio is None:
        compute_jacobians(hol)
    R = hol.log_ratio
    suffix = np.cumsum(R[:, ::-1], axis=-1)[:, ::-1]
    depth = R.shape[1]
    n_max = min(n_max, depth - 1)
    series = np.max(np.abs(suffix[:, : n_max + 1]), axis=0)
    pos = series > 1e-15
    if np.sum(pos) < 3:
        return series, 0.0, 1.0
    ns = np.flatnonzero(pos)
    logs = np.log(series[pos])
    A = np.stack([ns, np.ones_like(ns, dtype=float)], axis=-1)
    coef, *_ = np.linalg.lstsq(A, logs, rcond=None)
    fit = A @ coef
    ss_res = float(np.sum((logs - fit) ** 2))
    ss_tot = float(np.sum((logs - np.mean(logs)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return series, float(np.exp(coef[0])), r2


def jac_decomp_check(hol: HolonomyMap, m: int) -> float:
    """Split-at-m identity: J h = [J_{W1} T_m / J_{W2} T_m] * J h_m.

    The prefix Jacobians are recomputed through the sequence's tangent
    evolution (an independent code path); the suffix is the stored tail
    product.  Returns the max relative difference over pairs.
    """
    if hol.log_ratio is None:
        compute_jacobians(hol)
    R = hol.log_ratio
    if not 0 < m < R.shape[1]:
        raise ValueError("need 0 < m < truncation depth")
    _, _, lj1 = hol.seq.evolve_with_tangents(wrap(hol.x1), hol.u1,
                                             hol.n, hol.n + m)
    _, _, lj2 = hol.seq.evolve_with_tangents(wrap(hol.x2), hol.u2,
                                             hol.n, hol.n + m)
    direct = np.sum(R, axis=-1)
    split = (lj1 - lj2) + np.sum(R[:, m:], axis=-1)
    return float(np.max(np.abs(np.exp(direct) - np.exp(split))
                        / np.exp(direct)))


def holonomy_regularity(hol: HolonomyMap, eta_fallback: float = 0.5):
    """Hölder estimate (C_h, eta_h, r2, flat) of ln J h along the source.

    Log-log regression of |Delta ln J h| against arc separation over the
    matched probes, one geometric mean per dyadic separation bin.  A flat
    result (all Jacobians equal, the exact linear case) reports the
    fallback exponent with zero constant.
    """
    if hol.jac is None:
        compute_jacobians(hol)
    lj = np.log(hol.jac)
    s = hol.s1
    n = len(s)
    i, j = np.triu_indices(n, k=1)
    dsep = np.abs(s[i] - s[j])
    dval = np.abs(lj[i] - lj[j])
    good = (dsep > 0) & (dval > 1e-14)
    if np.sum(good) < 8:
        return 0.0, eta_fallback, 1.0, True
    dsep, dval = dsep[good], dval[good]
    lo = np.floor(np.log2(dsep.min()))
    hi = np.ceil(np.log2(dsep.max()))
    xs, ys = [], []
    for e in np.arange(lo, hi):
        inbin = (dsep >= 2.0 ** e) & (dsep < 2.0 ** (e + 1))
        if np.sum(inbin) >= 3:
            xs.append(float(np.mean(np.log(dsep[inbin]))))
            ys.append(float(np.mean(np.log(dval[inbin]))))
    if len(xs) < 3:
        return float(np.max(dval)), eta_fallback, 1.0, True
    A = np.stack([np.array(xs), np.ones(len(xs))], axis=-1)
    coef, *_ = np.linalg.lstsq(A, np.array(ys), rcond=None)
    fit = A @ coef
    ss_res = float(np.sum((np.array(ys) - fit) ** 2))
    ss_tot = float(np.sum((np.array(ys) - np.mean(ys)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(coef[1])), float(coef[0]), r2, False


def holonomy_pushforward(hol: HolonomyMap, log_rho1: np.ndarray):
    """Push a density on the matched part of curve1 to curve2.

    log_rho1 gives log-density values at the matched probes (in s1 order);
    the image density at h(x) is rho1(x)/J h(x).  Returns (s2, log_rho2,
    mass_defect) where mass_defect compares the trapezoid masses of source
    and image over the matched range.
    """
    if hol.jac is None:
        compute_jacobians(hol)
    log_rho1 = np.asarray(log_rho1, dtype=float)
    if log_rho1.shape != hol.s1.shape:
        raise ValueError("need one density value per matched probe")
    log_rho2 = log_rho1 - np.log(hol.jac)
    rho1 = np.exp(log_rho1)
    rho2 = np.exp(log_rho2)
    m1 = float(np.sum(0.5 * (rho1[:-1] + rho1[1:]) * np.diff(hol.s1)))
    m2 = float(np.sum(0.5 * (rho2[:-1] + rho2[1:]) * np.diff(hol.s2)))
    return hol.s2, log_rho2, abs(m1 - m2) / max(m1, 1e-300)


def matched_forward_separation(hol: HolonomyMap, n_steps: int,
                               lam: float | None = None,
                               ell0: float = ELL0):
    """Forward torus distances of matched pairs and the geometric envelope.

    Returns (dists with shape (n_steps+1, pairs), ok) where ok checks
    d_n <= ell0 * lam^n with lam = max_q 1/Lambda_q when not given.
    """
    seq = hol.seq
    if lam is None:
        from .curves import _cached_report

        rep = _cached_report(seq)
        lam = max(1.0 / iv.lambda_cert for iv in rep.intervals)
    x = wrap(hol.x1.copy())
    y = wrap(hol.x2.copy())
    out = [torus_dist(x, y)]
    for k in range(hol.n + 1, hol.n + n_steps + 1):
        T = seq.map_for_step(k)
        x = T(x)
        y = T(y)
        out.append(torus_dist(x, y))
    d = np.stack(out, axis=0)
    env = ell0 * lam ** np.arange(n_steps + 1)
    ok = bool(np.all(d <= env[:, None] + 1e-12))
    return d, ok
