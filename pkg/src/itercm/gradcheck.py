"""Finite-difference check of the analytic loss gradient on random small instances.

A coordinate is skipped when the +h and -h perturbations change the
piecewise structure of the loss: the integer cell of any warped position
(which fixes both the sampling cell and the splat footprint) or any border
mask. Inside one piece the loss is smooth and central differences apply.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import LossConfig, WindowData, evaluate
from .warping import _trajectories

H_STEP = 1e-4
REL_TOL = 1e-4
MIN_PASS_FRACTION = 0.99
# gradients below this magnitude are compared absolutely (FD round-off is ~1e-12)
ABS_FLOOR = 1e-7


@dataclass
class GradcheckResult:
    n_instances: int
    n_checked: int
    n_passed: int
    n_skipped_kinks: int
    worst_rel_error: float

    @property
    def pass_fraction(self) -> float:
        return self.n_passed / self.n_checked if self.n_checked else 0.0

    @property
    def ok(self) -> bool:
        return self.n_checked > 0 and self.pass_fraction >= MIN_PASS_FRACTION


def random_instance(rng: np.random.Generator, max_side: int = 16, max_events: int = 50, max_R: int = 4, max_S: int = 2):
    W = int(rng.integers(4, max_side + 1))
    H = int(rng.integers(4, max_side + 1))
    R = int(rng.choice([r for r in (1, 2, 4) if r <= max_R]))
    S = int(rng.integers(1, max_S + 1)) if R >= 2 else 1
    while R % 2 ** (S - 1):
        S -= 1
    n = int(rng.integers(1, max_events + 1))
    tau = np.sort(rng.uniform(0, R, n))
    x = rng.integers(0, W, n).astype(np.float64)
    y = rng.integers(0, H, n).astype(np.float64)
    p = rng.integers(0, 2, n)
    F = rng.normal(0.0, 0.6, (R, 2, H, W))
    warp = "iterative" if rng.random() < 0.8 else "linear"
    return WindowData(x, y, tau, p, R), F, LossConfig(R=R, S=S, warp=warp)


def _signature(data: WindowData, F: np.ndarray, iterative: bool):
    pos, inside = _trajectories(data.x, data.y, data.tau, F, iterative)
    return np.floor(pos), inside


def check_instance(data: WindowData, F: np.ndarray, cfg: LossConfig, rng: np.random.Generator,
                   n_coords: int = 24, h: float = H_STEP):
    """Return ``(rel_errors, n_skipped)`` for a sample of flow coordinates.

    Half the coordinates are drawn among cells with a nonzero analytic
    gradient, the rest uniformly.
    """
    _, grad = evaluate(data, F, cfg, want_grad=True)
    iterative = cfg.warp == "iterative"
    sig0 = _signature(data, F, iterative)
    flat = np.flatnonzero(grad)
    picks = []
    if len(flat):
        picks += list(rng.choice(flat, size=min(n_coords // 2, len(flat)), replace=False))
    picks += list(rng.choice(F.size, size=n_coords - len(picks), replace=False))
    errors = []
    skipped = 0
    for idx in picks:
        idx = np.unravel_index(int(idx), F.shape)
        Fp = F.copy()
        Fp[idx] += h
        Fm = F.copy()
        Fm[idx] -= h
        sp = _signature(data, Fp, iterative)
        sm = _signature(data, Fm, iterative)
        if not all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(sig0, sp, sm)):
            skipped += 1
            continue
        fd = (evaluate(data, Fp, cfg)[0].total - evaluate(data, Fm, cfg)[0].total) / (2 * h)
        an = grad[idx]
        errors.append(abs(fd - an) / max(abs(fd), abs(an), ABS_FLOOR))
    return np.array(errors), skipped


def run_gradcheck(seed: int = 0, n_instances: int = 100, n_coords: int = 24) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    errs = []
    skipped = 0
    for _ in range(n_instances):
        data, F, cfg = random_instance(rng)
        e, s = check_instance(data, F, cfg, rng, n_coords)
        errs.append(e)
        skipped += s
    errs = np.concatenate(errs) if errs else np.zeros(0)
    return GradcheckResult(n_instances, len(errs), int(np.sum(errs < REL_TOL)), skipped,
                           float(errs.max()) if len(errs) else 0.0)
