"""Non-stationary map sequences: dwell intervals, guides, and cocycles.

A sequence is a finite list of maps T_1, ..., T_{n_Q} partitioned into
intervals I_q = (n_{q-1}, n_q]; the maps of interval q are drawn from the
declared neighbourhood of guide q.  The composition at time n is
T_n o ... o T_1.  Outside the declared window the sequence is augmented:
steps i > n_Q use the last guide, steps i <= 0 the first, so forward and
backward limits that define the finite-time invariant fields are available.

Time convention: the state at time n is obtained from the state at time n-1
by applying step n.  Derivative cocycles and orbits follow this convention;
negative direction uses Newton inverses.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from .maps import AnosovMap, GuideMap
from .trig import TrigVectorField

__all__ = ["MapSequence", "build_sequence", "compose_jacobian", "BallViolation"]


class BallViolation(ValueError):
    """A map leaves the declared neighbourhood of its guide."""


@dataclass
class MapSequence:
    """Guides, interval boundaries [0, n_1, ..., n_Q], and the map list."""

    guides: list[GuideMap]
    boundaries: list[int]
    maps: list[AnosovMap]
    dwell_minima: list[int] = field(default_factory=list)

    def __post_init__(self):
        b = list(int(n) for n in self.boundaries)
        if b[0] != 0 or any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("boundaries must be strictly increasing from 0")
        if len(self.guides) != len(b) - 1:
            raise ValueError("need one guide per interval")
        if len(self.maps) != b[-1]:
            raise ValueError("need one map per step up to the last boundary")
        if not self.dwell_minima:
            self.dwell_minima = [1] * len(self.guides)
        for q, nmin in enumerate(self.dwell_minima):
            if b[q + 1] - b[q] < nmin:
                raise ValueError(f"interval {q + 1} is shorter than its declared minimum")
        self.boundaries = b

    # -- indexing -----------------------------------------------------------

    @property
    def Q(self) -> int:
        return len(self.guides)

    @property
    def n_total(self) -> int:
        return self.boundaries[-1]

    def interval_index(self, step: int) -> int:
        """0-based interval index owning the given 1-based step (clamped)."""
        if step <= 0:
            return 0
        if step > self.n_total:
            return self.Q - 1
        return bisect_left(self.boundaries, step, lo=1) - 1

    def interval_steps(self, q: int) -> range:
        """1-based steps of 0-based interval q."""
        return range(self.boundaries[q] + 1, self.boundaries[q + 1] + 1)

    def map_for_step(self, step: int) -> AnosovMap:
        if step <= 0:
            return self.guides[0].map
        if step > self.n_total:
            return self.guides[-1].map
        return self.maps[step - 1]

    def guide_for_step(self, step: int) -> GuideMap:
        return self.guides[self.interval_index(step)]

    # -- evolution ----------------------------------------------------------

    def evolve_points(self, x, t0: int, t1: int) -> np.ndarray:
        """Carry states at time t0 to time t1 (backwards uses inverses)."""
        x = np.asarray(x, dtype=float)
        if t1 >= t0:
            for i in range(t0 + 1, t1 + 1):
                x = self.map_for_step(i)(x)
        else:
            for i in range(t0, t1, -1):
                x = self.map_for_step(i).inverse(x)
        return x

    def orbit(self, x, t0: int, t1: int) -> np.ndarray:
        """All states from time t0 to t1 inclusive, stacked on a new axis 0."""
        x = np.asarray(x, dtype=float)
        out = [x]
        step = 1 if t1 >= t0 else -1
        t = t0
        while t != t1:
            x = self.evolve_points(x, t, t + step)
            out.append(x)
            t += step
        return np.stack(out, axis=0)

    def evolve_with_tangents(self, x, u, t0: int, t1: int):
        """Push states and unit tangent vectors forward from t0 to t1.

        Returns (points, units, log_stretch) where log_stretch accumulates
        ln |DT u| along the way, i.e. the tangential Jacobian of the
        composition at each start point.  Batched over leading axes.
        """
        if t1 < t0:
            raise ValueError("forward evolution only")
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        u = u / np.linalg.norm(u, axis=-1, keepdims=True)
        logst = np.zeros(x.shape[:-1])
        for i in range(t0 + 1, t1 + 1):
            T = self.map_for_step(i)
            M = T.derivative(x)
            w = np.einsum("...ij,...j->...i", M, u)
            s = np.linalg.norm(w, axis=-1)
            u = w / s[..., None]
            logst = logst + np.log(s)
            x = T(x)
        return x, u, logst

    def derivative_cocycle(self, x, t0: int, t1: int) -> np.ndarray:
        """D of the composition carrying time t0 to t1, at state x (time t0)."""
        x = np.asarray(x, dtype=float)
        J = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        if t1 >= t0:
            for i in range(t0 + 1, t1 + 1):
                T = self.map_for_step(i)
                J = np.einsum("...ij,...jk->...ik", T.derivative(x), J)
                x = T(x)
        else:
            for i in range(t0, t1, -1):
                T = self.map_for_step(i)
                x = T.inverse(x)
                Minv = np.linalg.inv(T.derivative(x))
                J = np.einsum("...ij,...jk->...ik", Minv, J)
        return J

    # -- bookkeeping --------------------------------------------------------

    def distinct_maps(self) -> list[tuple[AnosovMap, list[int]]]:
        """Deduplicated maps with the 1-based steps at which each occurs."""
        seen: dict[bytes, int] = {}
        out: list[tuple[AnosovMap, list[int]]] = []
        for i in range(1, self.n_total + 1):
            T = self.maps[i - 1]
            key = T.content_key()
            if key not in seen:
                seen[key] = len(out)
                out.append((T, []))
            out[seen[key]][1].append(i)
        return out

    def ball_deviation(self, step: int) -> dict:
        """Analytic C0/C1/C2 bounds of T_step minus its guide."""
        T = self.map_for_step(step)
        G = self.guide_for_step(step)
        delta = T.g.minus(G.map.g)
        kmax = delta.max_freq_norm()
        two_pi_k = 2.0 * np.pi * kmax
        return {
            "step": step,
            "same_linear_part": bool(np.array_equal(T.A, G.map.A)),
            "c0": delta.sup_bound(),
            "c1": delta.jacobian_bound(),
            "c2": delta.hessian_bound(),
            "radius_c0": G.eps_ball,
            "radius_c1": G.eps_ball * two_pi_k,
            "radius_c2": G.eps_ball * two_pi_k ** 2,
        }

    def validate_balls(self) -> list[dict]:
        """Check every step against its guide ball; raise on violation."""
        out = []
        for i in range(1, self.n_total + 1):
            d = self.ball_deviation(i)
            if not d["same_linear_part"]:
                raise BallViolation(f"step {i} changes the linear part")
            if d["c0"] > d["radius_c0"] + 1e-12:
                raise BallViolation(
                    f"step {i} leaves its guide ball: C0 bound {d['c0']:.3e} "
                    f"> radius {d['radius_c0']:.3e}"
                )
            out.append(d)
        return out


def compose_jacobian(seq: MapSequence, x, t0: int, t1: int) -> np.ndarray:
    """Derivative of the composition carrying time t0 to time t1 at x."""
    return seq.derivative_cocycle(x, t0, t1)


# -- construction from a declarative description ----------------------------


def _draw_field(freqs, rng: np.random.Generator, amplitude: float) -> TrigVectorField:
    """Random trig field with coefficient-sum amplitude exactly ``amplitude``."""
    k = np.atleast_2d(np.asarray(freqs, dtype=int))
    while True:
        a = rng.standard_normal((len(k), 2))
        b = rng.standard_normal((len(k), 2))
        raw = TrigVectorField(k, a, b)
        s = raw.sup_bound()
        if s > 1e-12:
            return raw.scaled(amplitude / s)


_GEN_KEYS = {"kind", "amplitude", "freqs", "g", "eps", "step", "start"}


def _interval_maps(guide: GuideMap, length: int, gen: dict, rng: np.random.Generator):
    unknown = set(gen) - _GEN_KEYS
    if unknown:
        raise ValueError(
            f"unknown generator keys {sorted(unknown)}; allowed: {sorted(_GEN_KEYS)}"
        )
    kind = gen.get("kind", "fixed")
    amp = float(gen.get("amplitude", 0.0))
    if amp > guide.eps_ball + 1e-12:
        raise BallViolation("generator amplitude exceeds the declared ball radius")
    freqs = gen.get("freqs", [[1, 0], [0, 1]])

    def with_delta(delta: TrigVectorField) -> AnosovMap:
        return AnosovMap(guide.map.A, guide.map.g.plus(delta))

    if kind == "fixed":
        if "g" in gen:
            delta = TrigVectorField.from_dict(gen["g"])
            scale = float(gen.get("eps", 1.0))
            delta = delta.scaled(scale)
            if delta.sup_bound() > guide.eps_ball + 1e-12:
                raise BallViolation("explicit perturbation exceeds the ball radius")
        elif amp > 0.0:
            delta = _draw_field(freqs, rng, amp)
        else:
            delta = TrigVectorField.zero()
        T = with_delta(delta)
        return [T] * length

    if kind == "drift":
        d0 = _draw_field(freqs, rng, amp)
        d1 = _draw_field(freqs, rng, amp)
        out = []
        for j in range(length):
            t = j / max(length - 1, 1)
            mix = d0.scaled(1.0 - t).plus(d1.scaled(t))
            # interpolation stays in the ball by convexity of the bound
            out.append(with_delta(mix))
        return out

    if kind == "random_walk":
        step = float(gen.get("step", 0.25)) * amp
        cur = _draw_field(freqs, rng, amp * float(gen.get("start", 0.5)))
        out = []
        for _ in range(length):
            kick = _draw_field(freqs, rng, step)
            cur = cur.plus(kick)
            s = cur.sup_bound()
            if s > amp:  # project back onto the amplitude ball
                cur = cur.scaled(amp / s)
            out.append(with_delta(cur))
        return out

    raise ValueError(f"unknown generator kind: {kind!r}")


def build_sequence(config: dict, rng: np.random.Generator | None = None) -> MapSequence:
    """Build and ball-validate a MapSequence from a declarative description.

    The description holds ``guides`` (linear part, optional field, half_width,
    eps_ball) and ``intervals`` (length, optional min_length, generator).
    Generator kinds: ``fixed`` (one perturbation for the interval, drawn or
    explicit), ``drift`` (linear coefficient interpolation between two draws),
    ``random_walk`` (coefficient walk projected onto the amplitude ball).
    """
    if rng is None:
        rng = np.random.default_rng(int(config.get("seed", 0)))
    guides = [GuideMap.from_dict(d) for d in config["guides"]]
    intervals = config["intervals"]
    if len(guides) != len(intervals):
        raise ValueError("need one interval description per guide")
    boundaries = [0]
    maps: list[AnosovMap] = []
    minima = []
    for guide, iv in zip(guides, intervals):
        length = int(iv["length"])
        if length < 1:
            raise ValueError("interval length must be positive")
        minima.append(int(iv.get("min_length", 1)))
        maps.extend(_interval_maps(guide, length, iv.get("generator", {}), rng))
        boundaries.append(boundaries[-1] + length)
    seq = MapSequence(guides, boundaries, maps, minima)
    seq.validate_balls()
    return seq
