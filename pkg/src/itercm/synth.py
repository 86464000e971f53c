"""Noiseless synthetic event streams with analytic ground-truth flow.

Scenes are made of bright dots. A pixel fires whenever a dot contour sweeps
across its centre, so each event lies exactly under the contour at its
timestamp. Leading edges (the pixel enters the dot) are positive and
trailing edges negative.

Supported kinds:

* ``translating_dots``: ``velocity`` (px/s) shared by all dots, or one
  entry per dot in ``velocities``; ``dot_count``, ``dot_radius`` and
  optional explicit ``centers``.
* ``circular_dot``: one dot orbiting ``center`` (default frame centre) at
  ``radius`` px with ``angular_rate`` rad/s from angle ``phase``.
* ``rotating_field``: ``dot_count`` dots rigidly rotating about ``center``
  at ``angular_rate``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .events import CameraGeometry, EventArray, PartitionScheme
from .flow import DisplacementMap, FlowSequence

KINDS = ("translating_dots", "circular_dot", "rotating_field")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    geometry: CameraGeometry
    duration_us: int
    params: dict = field(default_factory=dict)
    seed: int = 0
    events_per_px_crossing: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.duration_us <= 0:
            raise ValueError("duration_us must be positive")
        if self.events_per_px_crossing < 1:
            raise ValueError("events_per_px_crossing must be >= 1")
        for key in ("velocity", "angular_rate", "radius", "dot_radius"):
            if key in self.params and not np.all(np.isfinite(self.params[key])):
                raise ValueError(f"parameter {key} is not finite")

    def to_json(self) -> str:
        d = {"kind": self.kind, "width": self.geometry.width, "height": self.geometry.height,
             "duration_us": self.duration_us, "params": self.params, "seed": self.seed,
             "events_per_px_crossing": self.events_per_px_crossing}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(d["kind"], CameraGeometry(d["width"], d["height"]), d["duration_us"], d["params"],
                   d["seed"], d["events_per_px_crossing"])


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Analytic flow ``flow_fn(x, y, t_s) -> (u, v)`` in px/s and trajectory displacement."""

    spec: SceneSpec
    flow_fn: Callable
    displacement_fn: Callable  # (x, y, t0_s, t1_s) -> (dx, dy)


def _frame_center(g: CameraGeometry, params) -> np.ndarray:
    return np.asarray(params.get("center", ((g.width - 1) / 2, (g.height - 1) / 2)), dtype=np.float64)


class _Scene:
    """Vectorised contour trajectories of one scene kind."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        g = spec.geometry
        prm = spec.params
        rng = np.random.default_rng(spec.seed)
        self.rng = rng
        self.dot_radius = float(prm.get("dot_radius", 2.0))
        kind = spec.kind
        if kind == "translating_dots":
            n = int(prm.get("dot_count", len(prm["centers"]) if "centers" in prm else 1))
            if "centers" in prm:
                self.centers = np.asarray(prm["centers"], dtype=np.float64).reshape(-1, 2)
            else:
                r = self.dot_radius
                self.centers = np.column_stack([rng.uniform(r, g.width - 1 - r, n), rng.uniform(r, g.height - 1 - r, n)])
            if "velocities" in prm:
                self.velocities = np.asarray(prm["velocities"], dtype=np.float64).reshape(-1, 2)
            else:
                self.velocities = np.tile(np.asarray(prm.get("velocity", (0.0, 0.0)), dtype=np.float64), (len(self.centers), 1))
            if len(self.velocities) != len(self.centers):
                raise ValueError("need one velocity per dot")
        elif kind == "circular_dot":
            self.center = _frame_center(g, prm)
            self.orbit = float(prm.get("radius", 10.0))
            self.omega = float(prm.get("angular_rate", 2 * math.pi))
            self.phase = float(prm.get("phase", 0.0))
        else:
            self.center = _frame_center(g, prm)
            self.omega = float(prm.get("angular_rate", 1.0))
            n = int(prm.get("dot_count", 10))
            r = self.dot_radius
            self.centers = np.column_stack([rng.uniform(r, g.width - 1 - r, n), rng.uniform(r, g.height - 1 - r, n)])

    # -- analytic motion ---------------------------------------------------

    def orbit_center(self, t):
        a = self.phase + self.omega * np.asarray(t)
        return self.center[0] + self.orbit * np.cos(a), self.center[1] + self.orbit * np.sin(a)

    def flow(self, x, y, t):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        kind = self.spec.kind
        if kind == "translating_dots":
            if len(self.velocities) == 1 or np.all(self.velocities == self.velocities[0]):
                return np.full(x.shape, self.velocities[0, 0]), np.full(x.shape, self.velocities[0, 1])
            idx = self._nearest(x, y, t)
            return self.velocities[idx, 0], self.velocities[idx, 1]
        if kind == "circular_dot":
            a = self.phase + self.omega * t
            s = self.omega * self.orbit
            return np.full(x.shape, -s * math.sin(a)), np.full(x.shape, s * math.cos(a))
        cx, cy = self.center
        return -self.omega * (y - cy), self.omega * (x - cx)

    def displacement(self, x, y, t0, t1):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        kind = self.spec.kind
        if kind == "translating_dots":
            idx = self._nearest(x, y, t0)
            return self.velocities[idx, 0] * (t1 - t0), self.velocities[idx, 1] * (t1 - t0)
        if kind == "circular_dot":
            x0, y0 = self.orbit_center(t0)
            x1, y1 = self.orbit_center(t1)
            return np.full(x.shape, x1 - x0), np.full(x.shape, y1 - y0)
        cx, cy = self.center
        a = self.omega * (t1 - t0)
        rx, ry = x - cx, y - cy
        return cx + math.cos(a) * rx - math.sin(a) * ry - x, cy + math.sin(a) * rx + math.cos(a) * ry - y

    def _nearest(self, x, y, t):
        c = self.centers + self.velocities * t
        d = (x[..., None] - c[:, 0]) ** 2 + (y[..., None] - c[:, 1]) ** 2
        return np.argmin(d, axis=-1)

    # -- dot centre trajectories ---------------------------------------------

    def dot_count(self) -> int:
        return 1 if self.spec.kind == "circular_dot" else len(self.centers)

    def dot_center(self, i: int, t):
        """Centre of dot ``i`` at times ``t`` (s)."""
        t = np.asarray(t, dtype=np.float64)
        kind = self.spec.kind
        if kind == "translating_dots":
            c, v = self.centers[i], self.velocities[i]
            return c[0] + v[0] * t, c[1] + v[1] * t
        if kind == "circular_dot":
            return self.orbit_center(t)
        cx, cy = self.center
        rx, ry = self.centers[i, 0] - cx, self.centers[i, 1] - cy
        a = self.omega * t
        return cx + np.cos(a) * rx - np.sin(a) * ry, cy + np.sin(a) * rx + np.cos(a) * ry

    def dot_speed(self, i: int) -> float:
        """Upper bound on the speed (px/s) of any point of dot ``i``."""
        kind = self.spec.kind
        if kind == "translating_dots":
            return float(np.hypot(*self.velocities[i]))
        if kind == "circular_dot":
            return abs(self.omega) * self.orbit
        cx, cy = self.center
        return abs(self.omega) * (math.hypot(self.centers[i, 0] - cx, self.centers[i, 1] - cy) + self.dot_radius)


# coarse time sampling: at most this many px of motion between samples
_SAMPLE_PX = 0.25
_BISECT_STEPS = 40
_CHUNK = 256


def _dot_events(scene: _Scene, i: int, T: float):
    """Contour crossings of in-frame pixel centres by dot ``i`` over ``[0, T)``."""
    g = scene.spec.geometry
    speed = scene.dot_speed(i)
    if speed <= 0:
        return None
    k = scene.spec.events_per_px_crossing
    radii = scene.dot_radius + (np.arange(k) + 0.5) / k - 0.5
    n = max(2, math.ceil(speed * T / _SAMPLE_PX))
    ts = np.linspace(0.0, T, n + 1)
    cx, cy = scene.dot_center(i, ts)
    reach = radii.max() + 1
    x0, x1 = max(0, math.floor(cx.min() - reach)), min(g.width - 1, math.ceil(cx.max() + reach))
    y0, y1 = max(0, math.floor(cy.min() - reach)), min(g.height - 1, math.ceil(cy.max() + reach))
    if x0 > x1 or y0 > y1:
        return None
    py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    px = px.ravel().astype(np.float64)
    py = py.ravel().astype(np.float64)
    out = []
    for a in range(0, n, _CHUNK):
        b = min(n, a + _CHUNK)
        dist = np.hypot(px[:, None] - cx[None, a:b + 1], py[:, None] - cy[None, a:b + 1])
        for r in radii:
            outside = dist > r
            pi, si = np.nonzero(outside[:, :-1] != outside[:, 1:])
            if not len(pi):
                continue
            entering = outside[pi, si]
            lo, hi = ts[a + si], ts[a + si + 1]
            qx, qy = px[pi], py[pi]
            for _ in range(_BISECT_STEPS):
                mid = 0.5 * (lo + hi)
                mx, my = scene.dot_center(i, mid)
                out_mid = np.hypot(qx - mx, qy - my) > r
                first_half = out_mid != entering
                hi = np.where(first_half, mid, hi)
                lo = np.where(first_half, lo, mid)
            out.append(np.column_stack([0.5 * (lo + hi), qx, qy, entering]))
    return np.concatenate(out) if out else np.zeros((0, 4))


def generate(spec: SceneSpec) -> tuple[EventArray, GroundTruth]:
    """Emit one event each time a dot contour crosses a pixel centre.

    With ``events_per_px_crossing = k`` the edge is modelled as ``k``
    concentric level sets spread across one pixel, so every crossing of a
    pixel yields ``k`` events. The event sits exactly at the pixel under the
    contour at its timestamp; entering the dot is positive, leaving it is
    negative.
    """
    scene = _Scene(spec)
    T = spec.duration_us * 1e-6
    parts = [e for e in (_dot_events(scene, i, T) for i in range(scene.dot_count())) if e is not None]
    moving = any(scene.dot_speed(i) > 0 for i in range(scene.dot_count()))
    rows = np.concatenate(parts) if parts else np.zeros((0, 4))
    if not len(rows):
        if moving:
            raise ValueError("scene parameters drive the pattern fully out of frame")
        return EventArray.empty(), GroundTruth(spec, scene.flow, scene.displacement)
    t_us = np.minimum(np.floor(rows[:, 0] * 1e6).astype(np.int64), spec.duration_us - 1)
    order = np.argsort(t_us, kind="stable")
    events = EventArray(t_us[order], rows[order, 1], rows[order, 2], rows[order, 3].astype(np.int8))
    return events, GroundTruth(spec, scene.flow, scene.displacement)


def render_gt(gt: GroundTruth, scheme: PartitionScheme, window_index: int = 0) -> tuple[FlowSequence, DisplacementMap]:
    """Flow maps at partition mid-times (px/partition) and the exact window displacement."""
    t_begin = scheme.t0_us + window_index * scheme.window_us
    t_end = t_begin + scheme.window_us
    if window_index < 0 or t_begin < 0 or t_end > gt.spec.duration_us:
        raise ValueError(f"window {window_index} is outside the {gt.spec.duration_us} us scene")
    g = gt.spec.geometry
    ys, xs = np.mgrid[0:g.height, 0:g.width].astype(np.float64)
    dt = scheme.dt_input_us * 1e-6
    maps = []
    for k in range(scheme.R):
        t_mid = (t_begin + (k + 0.5) * scheme.dt_input_us) * 1e-6
        u, v = gt.flow_fn(xs, ys, t_mid)
        maps.append(np.stack([np.broadcast_to(u, xs.shape) * dt, np.broadcast_to(v, xs.shape) * dt]))
    seq = FlowSequence.from_array(np.stack(maps), scheme)
    dx, dy = gt.displacement_fn(xs, ys, t_begin * 1e-6, t_end * 1e-6)
    ex, ey = xs + dx, ys + dy
    valid = (ex >= 0) & (ex <= g.width - 1) & (ey >= 0) & (ey <= g.height - 1)
    return seq, DisplacementMap(dx, dy, valid)
