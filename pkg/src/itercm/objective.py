"""Multi-reference, multi-timescale focus loss on average-timestamp images.

A window of ``R`` partitions is split at scale ``s`` into ``2**s``
sub-partitions of ``R / 2**s`` partitions each. Every sub-partition is
deblurred at each of its boundaries; the per-boundary losses are averaged
per sub-partition, then per scale, then over scales.

The reverse pass is exact for the implemented forward computation, with
two pieces held constant: the active-pixel count in the denominator and
the border masks of the current flow.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .events import EventWindow
from .flow import FlowSequence
from .warping import DEFAULT_EPS, _term_kernel, _trajectories, _trajectories_vjp

WARP_MODES = ("iterative", "linear")


@dataclass(frozen=True)
class LossConfig:
    R: int
    S: int = 1
    epsilon: float = DEFAULT_EPS
    grad_event_cap_per_ms: int | None = None
    seed: int = 0
    warp: str = "iterative"

    def __post_init__(self):
        if self.R < 1 or self.S < 1:
            raise ValueError("R and S must be >= 1")
        if self.R % (2 ** (self.S - 1)):
            raise ValueError(f"R={self.R} is not divisible into 2**{self.S - 1} sub-partitions")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.warp not in WARP_MODES:
            raise ValueError(f"warp must be one of {WARP_MODES}")
        if self.grad_event_cap_per_ms is not None and self.grad_event_cap_per_ms < 1:
            raise ValueError("grad_event_cap_per_ms must be positive")


@dataclass
class LossReport:
    """Loss total plus every ``(scale, sub-partition, t_ref) -> value`` term.

    ``t_ref`` keys are absolute partition boundaries within the window.
    """

    total: float
    per_term: dict[tuple[int, int, int], float] = field(default_factory=dict)
    masked_fraction: float = 0.0
    R: int = 0
    S: int = 1

    def recombine(self) -> float:
        return _combine(self.per_term, self.R, self.S)

    def to_json(self) -> str:
        terms = [{"s": s, "p": p, "t_ref": t, "value": v} for (s, p, t), v in sorted(self.per_term.items())]
        return json.dumps({"total": self.total, "terms": terms, "masked_fraction": self.masked_fraction,
                           "R": self.R, "S": self.S})

    @classmethod
    def from_json(cls, text: str) -> "LossReport":
        d = json.loads(text)
        terms = {(t["s"], t["p"], t["t_ref"]): t["value"] for t in d["terms"]}
        return cls(d["total"], terms, d["masked_fraction"], d.get("R", 0), d.get("S", 1))


@dataclass(frozen=True, eq=False)
class FlowGradient:
    grad: np.ndarray  # (R, 2, H, W), same layout as FlowSequence.as_array()

    @property
    def maps(self) -> list[np.ndarray]:
        """Per-map ``H x W x 2`` gradients."""
        return [np.moveaxis(g, 0, -1) for g in self.grad]


def _combine(per_term, R, S) -> float:
    total = 0.0
    for s in range(S):
        L = R >> s
        scale = 0.0
        for p in range(2 ** s):
            sub = 0.0
            for t in range(L + 1):
                sub += per_term[(s, p, p * L + t)]
            scale += sub / (L + 1)
        total += scale / 2 ** s
    return total / S


def normalize_timestamp(tau, t_ref, window_length):
    if window_length <= 0:
        raise ValueError("window_length must be positive")
    return 1.0 - np.abs(t_ref - np.asarray(tau, dtype=np.float64)) / window_length


class WindowData:
    """Column arrays of a window's events in the layout the kernels expect."""

    def __init__(self, x, y, tau, p, R: int, duration_ms: float = 0.0):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.y = np.ascontiguousarray(y, dtype=np.float64)
        self.tau = np.ascontiguousarray(tau, dtype=np.float64)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.R = R
        self.duration_ms = duration_ms
        if len(self.tau) and (np.any(np.diff(self.tau) < 0) or self.tau[0] < 0 or self.tau[-1] >= R):
            raise ValueError("event times must be sorted and inside [0, R)")

    @classmethod
    def from_window(cls, window: EventWindow) -> "WindowData":
        ev = window.events
        return cls(ev.x, ev.y, window.tau(), ev.p, window.R, window.scheme.window_us / 1000.0)

    def __len__(self):
        return len(self.x)

    def span(self, start: int, stop: int) -> tuple[int, int]:
        i0, i1 = np.searchsorted(self.tau, [start, stop], side="left")
        return int(i0), int(i1)


def _as_data(window) -> WindowData:
    return window if isinstance(window, WindowData) else WindowData.from_window(window)


def _as_flow(seq) -> np.ndarray:
    return seq.as_array() if isinstance(seq, FlowSequence) else np.ascontiguousarray(seq, dtype=np.float64)


def _terms(R: int, S: int):
    """(scale, sub-partition, t_ref, start, length, weight) for every loss term."""
    out = []
    for s in range(S):
        L = R >> s
        for p in range(2 ** s):
            for t in range(L + 1):
                out.append((s, p, p * L + t, p * L, L, 1.0 / S / 2 ** s / (L + 1)))
    return out


def evaluate(window, seq, cfg: LossConfig, want_grad: bool = False, rng: np.random.Generator | None = None,
             workers: int = 1):
    """Forward (and optionally reverse) pass of the full loss.

    Returns ``(LossReport, gradient array or None)``.
    """
    data = _as_data(window)
    F = _as_flow(seq)
    R = F.shape[0]
    if R != cfg.R:
        raise ValueError(f"flow has {R} maps but the loss expects R={cfg.R}")
    H, W = F.shape[2], F.shape[3]
    iterative = cfg.warp == "iterative"
    pos, inside = _trajectories(data.x, data.y, data.tau, F, iterative)

    terms = _terms(R, cfg.S)
    spans = {}
    for (_, _, _, a, L, _) in terms:
        if (a, L) not in spans:
            spans[(a, L)] = data.span(a, a + L)

    def run(term):
        s, p, b, a, L, _ = term
        i0, i1 = spans[(a, L)]
        tbar = 1.0 - np.abs(b - data.tau[i0:i1]) / L
        return _term_kernel(np.ascontiguousarray(pos[i0:i1, b]), np.ascontiguousarray(inside[i0:i1, b]),
                            tbar, data.p[i0:i1], H, W, cfg.epsilon, want_grad)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, terms))
    else:
        results = [run(t) for t in terms]

    per_term = {}
    adj = np.zeros((len(data), R + 1, 2)) if want_grad else None
    n_masked = 0
    n_pairs = 0
    for term, (value, g, masked) in zip(terms, results):
        s, p, b, a, L, weight = term
        i0, i1 = spans[(a, L)]
        per_term[(s, p, b)] = float(value)
        n_masked += masked
        n_pairs += i1 - i0
        if want_grad and i1 > i0:
            adj[i0:i1, b] += weight * g

    report = LossReport(_combine(per_term, R, cfg.S), per_term, n_masked / n_pairs if n_pairs else 0.0, R, cfg.S)
    if not want_grad:
        return report, None

    if cfg.grad_event_cap_per_ms is not None and len(data):
        cap = int(cfg.grad_event_cap_per_ms * data.duration_ms) if data.duration_ms else len(data)
        if cap < len(data):
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            keep = np.zeros(len(data), dtype=bool)
            keep[rng.choice(len(data), size=max(cap, 1), replace=False)] = True
            adj[~keep] = 0.0
    grad = _trajectories_vjp(data.x, data.y, data.tau, F, iterative, pos, adj)
    return report, grad


def loss_at_reference(window, seq, t_ref: int, epsilon: float = DEFAULT_EPS, start: int = 0,
                      length: int | None = None, warp: str = "iterative", masked: bool = True) -> float:
    """Focus loss of the sub-partition ``[start, start + length)`` warped to boundary ``t_ref``.

    ``t_ref`` is absolute (``start <= t_ref <= start + length``) and time
    normalisation uses ``length`` as the window length.
    """
    data = _as_data(window)
    F = _as_flow(seq)
    R = F.shape[0]
    length = R - start if length is None else length
    if not (0 <= start and start + length <= R and start <= t_ref <= start + length):
        raise ValueError("sub-partition or t_ref out of range")
    H, W = F.shape[2], F.shape[3]
    i0, i1 = data.span(start, start + length)
    pos, inside = _trajectories(data.x[i0:i1], data.y[i0:i1], data.tau[i0:i1], F, warp == "iterative")
    if not masked:
        inside = np.ones_like(inside)
    tbar = 1.0 - np.abs(t_ref - data.tau[i0:i1]) / length
    value, _, _ = _term_kernel(np.ascontiguousarray(pos[:, t_ref]), np.ascontiguousarray(inside[:, t_ref]),
                               tbar, data.p[i0:i1], H, W, epsilon, False)
    return float(value)


def loss_multi_reference(window, seq, start: int = 0, length: int | None = None,
                         epsilon: float = DEFAULT_EPS, warp: str = "iterative") -> float:
    """Mean of the focus loss over all ``length + 1`` boundaries of a sub-partition."""
    F = _as_flow(seq)
    length = F.shape[0] - start if length is None else length
    if length < 1:
        raise ValueError("sub-partition length must be >= 1")
    total = 0.0
    for t in range(length + 1):
        total += loss_at_reference(window, F, start + t, epsilon, start, length, warp)
    return total / (length + 1)


def loss_multi_timescale(window, seq, cfg: LossConfig, workers: int = 1) -> LossReport:
    report, _ = evaluate(window, seq, cfg, want_grad=False, workers=workers)
    return report


def loss_gradient(window, seq, cfg: LossConfig, rng: np.random.Generator | None = None,
                  workers: int = 1) -> tuple[LossReport, FlowGradient]:
    report, grad = evaluate(window, seq, cfg, want_grad=True, rng=rng, workers=workers)
    return report, FlowGradient(grad)
