"""Certificates for the standing hyperbolicity assumptions of a sequence.

The validator samples a grid of base points and cone directions and checks,
with strict margins and witnesses:

* A0  one-step cone invariance of each guide map (its own cones),
* A1  one-step cone invariance of every map of an interval (forward on the
      unstable cone, inverse on the stable cone),
* A2  uniform expansion constants: certified Lambda_q (growth factor) and
      C_q (prefactor) from sampled derivative cocycles, forward on unstable
      vectors and inverse on stable ones,
* A3  transition cones: maps of interval q+1 carry unstable cone q strictly
      into unstable cone q+1; inverses of interval-q maps carry stable cone
      q+1 into stable cone q,
* A4  slack on narrow cones: A1 and A3 margins stay positive when the target
      half-widths are halved,
* ball membership of every step inside its guide neighbourhood.

Expansion rates are reported twice: ``lambda_hat`` is the raw deep growth
ratio minimized over samples, ``lambda_cert`` shrinks it by a safety factor,
and ``c_cert`` is then measured against the certified rate (capped at 1).
Downstream envelopes use the certified pair.  Global Hoelder data (b1, b2,
the predicted exponent, and the validity radius) come from derivative and
second-derivative sup bounds over every map in the sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Cone
from .maps import AnosovMap
from .sequence import MapSequence

__all__ = ["Certificate", "IntervalReport", "ValidationReport", "validate_assumptions"]


@dataclass
class Certificate:
    name: str
    passed: bool
    margin: float
    witness: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "margin": self.margin,
            "witness": self.witness,
        }


@dataclass
class IntervalReport:
    q: int  # 1-based interval label
    a: float
    eps_ball: float
    n_steps: int
    lambda_hat: float
    lambda_cert: float
    c_cert: float
    lambda_bar: float
    certificates: list[Certificate]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.certificates)

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "a": self.a,
            "eps_ball": self.eps_ball,
            "n_steps": self.n_steps,
            "lambda_hat": self.lambda_hat,
            "lambda_cert": self.lambda_cert,
            "c_cert": self.c_cert,
            "lambda_bar": self.lambda_bar,
            "certificates": [c.to_dict() for c in self.certificates],
        }


@dataclass
class ValidationReport:
    intervals: list[IntervalReport]
    b1: float
    b2: float
    lambda_min_cert: float
    alpha_pred: float
    holder_coeff: float  # c in the modulus c * dist^alpha, 0 for linear maps
    holder_radius: float  # distances below this are in the modulus regime
    certificates: list[Certificate]  # sequence-global certificates

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.certificates) and all(
            iv.passed for iv in self.intervals
        )

    def interval(self, q: int) -> IntervalReport:
        """Report of the 1-based interval q."""
        return self.intervals[q - 1]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "b1": self.b1,
            "b2": self.b2,
            "lambda_min_cert": self.lambda_min_cert,
            "alpha_pred": self.alpha_pred,
            "holder_coeff": self.holder_coeff,
            "holder_radius": self.holder_radius,
            "intervals": [iv.to_dict() for iv in self.intervals],
            "certificates": [c.to_dict() for c in self.certificates],
        }

    def to_text(self) -> str:
        lines = []
        for iv in self.intervals:
            lines.append(
                f"interval {iv.q}: steps={iv.n_steps} a={iv.a:g} eps={iv.eps_ball:g} "
                f"Lambda_hat={iv.lambda_hat:.9g} Lambda_cert={iv.lambda_cert:.9g} "
                f"C={iv.c_cert:.9g} Lambda_bar={iv.lambda_bar:.9g}"
            )
            for c in iv.certificates:
                mark = "PASS" if c.passed else "FAIL"
                lines.append(f"  {mark} {c.name} margin={c.margin:.6g}")
        lines.append(
            f"global: b1={self.b1:.9g} b2={self.b2:.9g} "
            f"alpha_pred={self.alpha_pred:.9g} holder_coeff={self.holder_coeff:.9g} "
            f"holder_radius={self.holder_radius:.6g}"
        )
        for c in self.certificates:
            mark = "PASS" if c.passed else "FAIL"
            lines.append(f"{mark} {c.name} margin={c.margin:.6g}")
        lines.append("PASS overall" if self.passed else "FAIL overall")
        return "\n".join(lines)


# -- small numeric helpers ---------------------------------------------------


def _grid(n: int) -> np.ndarray:
    t = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(t, t, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=-1)


def _inv22(M: np.ndarray) -> np.ndarray:
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    return out / det[..., None, None]


def _map_margins(M: np.ndarray, dirs: np.ndarray, target: Cone) -> np.ndarray:
    """Margins of M v inside the target cone: (points, dirs) array."""
    w = np.einsum("gij,dj->gdi", M, dirs)
    return target.margin(w)


def _margin_cert(name: str, margins: np.ndarray, pts: np.ndarray, dirs: np.ndarray,
                 step: int | None = None) -> Certificate:
    gi, di = np.unravel_index(int(np.argmin(margins)), margins.shape)
    m = float(margins[gi, di])
    witness = {"point": [float(v) for v in pts[gi]], "dir": [float(v) for v in dirs[di]]}
    if step is not None:
        witness["step"] = step
    return Certificate(name, m > 0.0, m, witness)


def _worst(certs: list[Certificate], name: str) -> Certificate:
    worst = min(certs, key=lambda c: c.margin)
    return Certificate(name, worst.passed, worst.margin, worst.witness)


def _cocycle_norms(steps: list[AnosovMap], x0: np.ndarray, dirs: np.ndarray):
    """Forward orbit of x0 and the norms of pushed cone vectors.

    Returns (norms, orbit) with norms[n] the (points, dirs) array of
    |D composition v| after n+1 steps, starting from unit vectors.
    """
    P = len(x0)
    W = np.broadcast_to(dirs, (P, len(dirs), 2)).copy()
    norms = []
    orbit = [x0]
    x = x0
    for T in steps:
        M = T.derivative(x)
        W = np.einsum("pij,pdj->pdi", M, W)
        norms.append(np.linalg.norm(W, axis=-1))
        x = T(x)
        orbit.append(x)
    return norms, orbit


def _inverse_cocycle_norms(steps: list[AnosovMap], orbit: list[np.ndarray],
                           dirs: np.ndarray):
    """Norms of stable vectors pulled back along a stored forward orbit."""
    P = len(orbit[0])
    W = np.broadcast_to(dirs, (P, len(dirs), 2)).copy()
    norms = []
    for n in range(len(steps), 0, -1):
        Minv = _inv22(steps[n - 1].derivative(orbit[n - 1]))
        W = np.einsum("pij,pdj->pdi", Minv, W)
        norms.append(np.linalg.norm(W, axis=-1))
    return norms


def _expansion_constants(runs, safety: float):
    """Certified (lambda_hat, lambda_cert, c_cert) from norm tables.

    Each run is a list of (points, dirs) norm arrays indexed by depth-1.
    lambda_hat is the deepest one-step growth ratio minimized over samples;
    c_cert is measured against the safety-shrunk rate and capped at 1.
    """
    lam = math.inf
    for norms in runs:
        if not norms:
            continue
        if len(norms) == 1:
            lam = min(lam, float(np.min(norms[0])))
        else:
            lam = min(lam, float(np.min(norms[-1] / norms[-2])))
    if not math.isfinite(lam):
        return math.nan, math.nan, math.nan
    lam_cert = safety * lam
    c = 1.0
    if lam_cert > 0:
        for norms in runs:
            for n, g in enumerate(norms, start=1):
                c = min(c, float(np.min(g)) / lam_cert ** n)
    return lam, lam_cert, max(c, 0.0)


# -- the validator -----------------------------------------------------------


def validate_assumptions(
    seq: MapSequence,
    grid_n: int = 128,
    n_dirs: int = 16,
    safety: float = 0.95,
    seed: int = 0,
    expansion_points: int = 48,
    expansion_dirs: int = 8,
    deep_cap: int = 24,
) -> ValidationReport:
    """Run every certificate over a sample grid and report the constants."""
    rng = np.random.default_rng(seed)
    pts = _grid(grid_n)
    intervals: list[IntervalReport] = []

    for q in range(seq.Q):
        guide = seq.guides[q]
        cu, cs = guide.unstable_cone(), guide.stable_cone()
        du, ds = cu.sample_dirs(n_dirs), cs.sample_dirs(n_dirs)
        interval_maps = [seq.maps[i - 1] for i in seq.interval_steps(q)]
        certs: list[Certificate] = []

        # A0: the guide preserves its own cones in one step
        Mg = guide.map.derivative(pts)
        certs.append(_margin_cert("A0_unstable", _map_margins(Mg, du, cu), pts, du))
        certs.append(
            _margin_cert("A0_stable", _map_margins(_inv22(Mg), ds, cs), pts, ds)
        )

        # A1: every map of the interval preserves the interval cones
        for narrowed, label in ((False, "A1"), (True, "A4_A1")):
            tu = cu.narrowed(0.5) if narrowed else cu
            ts = cs.narrowed(0.5) if narrowed else cs
            sub = []
            for step, T in zip(seq.interval_steps(q), interval_maps):
                M = T.derivative(pts)
                sub.append(_margin_cert(
                    f"{label}_unstable", _map_margins(M, du, tu), pts, du, step))
                sub.append(_margin_cert(
                    f"{label}_stable", _map_margins(_inv22(M), ds, ts), pts, ds, step))
            certs.append(_worst([s for s in sub if s.name.endswith("unstable")],
                                f"{label}_unstable"))
            certs.append(_worst([s for s in sub if s.name.endswith("_stable")],
                                f"{label}_stable"))

        # A3: transitions into the next interval's cones
        if q + 1 < seq.Q:
            nguide = seq.guides[q + 1]
            ncu, ncs = nguide.unstable_cone(), nguide.stable_cone()
            nds = ncs.sample_dirs(n_dirs)
            next_maps = [seq.maps[i - 1] for i in seq.interval_steps(q + 1)]
            next_maps.append(nguide.map)
            here_maps = interval_maps + [guide.map]
            for narrowed, label in ((False, "A3"), (True, "A4_A3")):
                tu = ncu.narrowed(0.5) if narrowed else ncu
                ts = cs.narrowed(0.5) if narrowed else cs
                sub_f, sub_i = [], []
                for j, T in enumerate(next_maps):
                    M = T.derivative(pts)
                    sub_f.append(_margin_cert(
                        f"{label}_forward", _map_margins(M, du, tu), pts, du, j + 1))
                for j, T in enumerate(here_maps):
                    Minv = _inv22(T.derivative(pts))
                    sub_i.append(_margin_cert(
                        f"{label}_inverse", _map_margins(Minv, nds, ts), pts, nds, j + 1))
                certs.append(_worst(sub_f, f"{label}_forward"))
                certs.append(_worst(sub_i, f"{label}_inverse"))

        # A2: expansion constants from sampled cocycles; one run over the
        # realized interval maps, one over the iterated guide (the guide run
        # also covers the augmented tails of the sequence)
        x0 = rng.random((expansion_points, 2))
        eu = cu.sample_dirs(expansion_dirs)
        es = cs.sample_dirs(expansion_dirs)
        depth = min(len(interval_maps), deep_cap)
        fwd_runs, inv_runs = [], []
        for steps in (interval_maps[:depth], [guide.map] * deep_cap):
            norms, orbit = _cocycle_norms(steps, x0, eu)
            fwd_runs.append(norms)
            inv_runs.append(_inverse_cocycle_norms(steps, orbit, es))
        lam_f, _, _ = _expansion_constants(fwd_runs, safety)
        lam_i, _, _ = _expansion_constants(inv_runs, safety)
        lam_hat = min(lam_f, lam_i)
        lam_cert = safety * lam_hat
        c_cert = 1.0
        if lam_cert > 0:
            for runs in (fwd_runs, inv_runs):
                for norms in runs:
                    for n, g in enumerate(norms, start=1):
                        c_cert = min(c_cert, float(np.min(g)) / lam_cert ** n)
        certs.append(Certificate(
            "A2_expansion", lam_hat > 1.0, lam_hat - 1.0,
            {"lambda_forward": lam_f, "lambda_inverse": lam_i}))

        intervals.append(IntervalReport(
            q=q + 1,
            a=guide.half_width,
            eps_ball=guide.eps_ball,
            n_steps=len(interval_maps),
            lambda_hat=lam_hat,
            lambda_cert=lam_cert,
            c_cert=max(c_cert, 0.0),
            lambda_bar=guide.lambda_bar(),
            certificates=certs,
        ))

    # ball membership of every step (analytic coefficient bounds)
    global_certs: list[Certificate] = []
    worst_ball = math.inf
    ball_witness: dict = {}
    ball_ok = True
    for i in range(1, seq.n_total + 1):
        d = seq.ball_deviation(i)
        if not d["same_linear_part"]:
            ball_ok = False
            worst_ball = -math.inf
            ball_witness = {"step": i, "reason": "linear part differs from guide"}
            break
        slack = d["radius_c0"] - d["c0"]
        if slack < worst_ball:
            worst_ball = slack
            ball_witness = {"step": i, "c0": d["c0"], "radius": d["radius_c0"]}
    if worst_ball < -1e-12:
        ball_ok = False
    global_certs.append(Certificate(
        "ball_membership", ball_ok,
        worst_ball if math.isfinite(worst_ball) else 0.0, ball_witness))

    # global derivative bounds and the predicted regularity exponent
    all_maps = [g.map for g in seq.guides] + [T for T, _ in seq.distinct_maps()]
    b1 = max(T.deriv_sup_bound() for T in all_maps)
    b2 = max(T.hessian_sup_bound() for T in all_maps)
    lam_min = min(iv.lambda_cert for iv in intervals)
    if lam_min > 1.0 and b1 > 1.0:
        alpha = 2.0 * math.log(lam_min) / (2.0 * math.log(b1) + math.log(lam_min))
    else:
        alpha = math.nan
    if b2 > 0.0 and b1 > 1.0:
        coeff = b2 / (b1 * (b1 - 1.0))
        radius = 1.0 / coeff
    else:
        coeff = 0.0
        radius = math.inf

    return ValidationReport(
        intervals=intervals,
        b1=b1,
        b2=b2,
        lambda_min_cert=lam_min,
        alpha_pred=alpha,
        holder_coeff=coeff,
        holder_radius=radius,
        certificates=global_certs,
    )
