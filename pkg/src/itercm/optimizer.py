"""Per-window flow estimation by first-order descent on the focus loss.

Each flow map is parametrised by a coarse grid of nodes that is bilinearly
upsampled to full resolution, which supplies the spatial coherence the loss
itself does not enforce. Optimisation runs coarse to fine; every level is
initialised by upsampling the previous one, so the full-resolution flow is
unchanged across a level switch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .events import CameraGeometry, EventArray, EventWindow, PartitionScheme, partition_stream
from .flow import FlowMap, FlowSequence, interp_matrix, sample_array, upsample_flow
from .objective import LossConfig, LossReport, WindowData, evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    pyramid_levels: int = 3
    iters_per_level: int = 600
    step_size: float = 0.02
    moment_decays: tuple[float, float] = (0.9, 0.999)
    tile_base: int = 64
    warm_start: bool = True
    stop_tol: float = 1e-4
    patience: int = 20
    adam_eps: float = 1e-8
    seed: int = 0
    # refinement levels only: the cold level starts on zero flow, where every
    # event sits on a pixel centre, and must be allowed to climb out of it
    reject_uphill: bool = True

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iters_per_level < 1 or self.pyramid_levels < 1:
            raise ValueError("iters_per_level and pyramid_levels must be >= 1")
        b1, b2 = self.moment_decays
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.tile_base < 1:
            raise ValueError("tile_base must be >= 1")

    def factors(self) -> list[int]:
        """Cell sizes from the coarsest level to the finest."""
        out = []
        for i in range(self.pyramid_levels):
            f = max(1, self.tile_base >> i)
            if not out or f != out[-1]:
                out.append(f)
        return out


@dataclass
class EstimationResult:
    seq: FlowSequence
    loss_trace: list[float]
    final_report: LossReport
    level_traces: list[list[float]] = field(default_factory=list)
    initial_losses: list[float] = field(default_factory=list)
    n_evaluations: int = 0
    fallback: bool = False


class Adam:
    """Bias-corrected adaptive moment updates on a single parameter array."""

    def __init__(self, shape, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def reset(self):
        self.m[:] = 0
        self.v[:] = 0
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PyramidLevel:
    """Maps ``(R, 2, ny, nx)`` node grids (coarse px units) to full-resolution flow."""

    def __init__(self, geometry: CameraGeometry, factor: int):
        self.geometry = geometry
        self.factor = factor
        self.nx = max(2, math.ceil(geometry.width / factor))
        self.ny = max(2, math.ceil(geometry.height / factor))
        self.coarse_geometry = CameraGeometry(self.nx, self.ny)
        self.fine_geometry = CameraGeometry(self.nx * factor, self.ny * factor)
        self.mx = interp_matrix(self.nx * factor, self.nx, factor)[:geometry.width]
        self.my = interp_matrix(self.ny * factor, self.ny, factor)[:geometry.height]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def full(self, C: np.ndarray) -> np.ndarray:
        return self.factor * np.einsum("yj,rcji,xi->rcyx", self.my, C, self.mx, optimize=True)

    def pullback(self, G: np.ndarray) -> np.ndarray:
        return self.factor * np.einsum("yj,rcyx,xi->rcji", self.my, G, self.mx, optimize=True)

    def full_via_upsample(self, C: np.ndarray) -> np.ndarray:
        """Same as :meth:`full`, routed through :func:`upsample_flow` and cropped."""
        H, W = self.geometry.shape
        out = []
        for m in C:
            up = upsample_flow(FlowMap(m[0], m[1], self.coarse_geometry), self.fine_geometry, self.factor)
            out.append(np.stack([up.u[:H, :W], up.v[:H, :W]]))
        return np.stack(out)

    def from_full(self, F: np.ndarray) -> np.ndarray:
        """Point-sample a full-resolution flow at the node positions (coarse units)."""
        xs = np.arange(self.nx) * self.factor
        ys = np.arange(self.ny) * self.factor
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([[sample_array(m[c], gx, gy) for c in range(2)] for m in F]) / self.factor

    def refine(self, C: np.ndarray, finer: "PyramidLevel") -> np.ndarray:
        r = self.factor // finer.factor
        out = []
        for m in C:
            up = upsample_flow(FlowMap(m[0], m[1], self.coarse_geometry), CameraGeometry(self.nx * r, self.ny * r), r)
            out.append(np.stack([up.u[:finer.ny, :finer.nx], up.v[:finer.ny, :finer.nx]]))
        return np.stack(out)


def _empty_report(loss_cfg: LossConfig) -> LossReport:
    from .objective import _terms

    terms = {(s, p, b): 0.0 for (s, p, b, _, _, _) in _terms(loss_cfg.R, loss_cfg.S)}
    return LossReport(0.0, terms, 0.0, loss_cfg.R, loss_cfg.S)


def estimate_window(window: EventWindow | WindowData, config: OptimizerConfig, loss_cfg: LossConfig,
                    init: FlowSequence | None = None, geometry: CameraGeometry | None = None,
                    progress: Callable[[dict], None] | None = None, window_index: int = 0,
                    workers: int = 1) -> EstimationResult:
    """Estimate one window's flow sequence.

    ``geometry`` is required when no ``init`` is given. ``progress`` receives
    one dict per iteration.
    """
    data = window if isinstance(window, WindowData) else WindowData.from_window(window)
    if isinstance(window, EventWindow):
        window_index = window.window_index
        scheme = window.scheme
    else:
        scheme = init.scheme if init is not None else PartitionScheme(1, loss_cfg.R)
    if geometry is None:
        if init is None:
            raise ValueError("geometry is required without an init")
        geometry = init.geometry
    if len(data) == 0:
        if init is None:
            raise ValueError("nothing to optimize: empty window and no init")
        return EstimationResult(init, [], _empty_report(loss_cfg))

    levels = [PyramidLevel(geometry, f) for f in config.factors()]
    rng = np.random.default_rng(config.seed)
    if init is not None and config.warm_start:
        C = levels[0].from_full(init.as_array())
    else:
        C = np.zeros((loss_cfg.R, 2) + levels[0].shape)

    trace, level_traces, initial = [], [], []
    n_eval = 0
    for li, lvl in enumerate(levels):
        if li:
            C = levels[li - 1].refine(C, lvl)
        opt = Adam(C.shape, config.step_size / lvl.factor, config.moment_decays, config.adam_eps)
        best, best_C = math.inf, C
        ltrace = []
        for it in range(config.iters_per_level):
            report, G = evaluate(data, lvl.full(C), loss_cfg, want_grad=True, rng=rng, workers=workers)
            n_eval += 1
            loss = report.total
            if it == 0:
                initial.append(loss)
            gC = lvl.pullback(G)
            if progress is not None:
                progress({"window": window_index, "level": li, "iter": it, "loss": loss,
                          "grad_norm": float(np.linalg.norm(gC)), "masked_fraction": report.masked_fraction})
            if config.reject_uphill and li > 0 and loss > best * (1 + config.stop_tol):
                # overshoot: go back to the best iterate with a smaller step
                C = best_C
                opt.lr *= 0.5
                opt.reset()
                if opt.lr < config.step_size / lvl.factor * 2.0 ** -30:
                    break
                continue
            ltrace.append(loss)
            if loss < best:
                best, best_C = loss, C
            p = config.patience
            if len(ltrace) >= 2 * p:
                # window means, so a single low lattice-aligned start (zero
                # flow) cannot stop a trace that is still descending
                ref = float(np.mean(ltrace[-2 * p:-p]))
                if ref - float(np.mean(ltrace[-p:])) <= config.stop_tol * abs(ref):
                    break
            C = opt.step(C, gC)
        C = best_C
        trace.extend(ltrace)
        level_traces.append(ltrace)

    F = levels[-1].full(C)
    seq = FlowSequence.from_array(F, PartitionScheme(scheme.dt_input_us, loss_cfg.R, scheme.t0_us))
    final, _ = evaluate(data, F, loss_cfg, workers=workers)
    return EstimationResult(seq, trace, final, level_traces, initial, n_eval)


@dataclass
class SequentialResult:
    windows: list[EstimationResult]
    dropped: int = 0

    @property
    def final_losses(self) -> list[float]:
        return [r.final_report.total for r in self.windows]

    @property
    def mean_final_loss(self) -> float:
        return float(np.mean(self.final_losses)) if self.windows else float("nan")

    @property
    def n_fallbacks(self) -> int:
        return sum(r.fallback for r in self.windows)

    def concatenated(self) -> FlowSequence:
        """All windows' maps as one sequence spanning the processed stream."""
        a = np.concatenate([r.seq.as_array() for r in self.windows])
        s = self.windows[0].seq.scheme
        return FlowSequence.from_array(a, PartitionScheme(s.dt_input_us, len(a), s.t0_us))


def run_sequential(stream: EventArray, scheme: PartitionScheme, geometry: CameraGeometry,
                   config: OptimizerConfig, loss_cfg: LossConfig,
                   progress: Callable[[dict], None] | None = None, workers: int = 1) -> SequentialResult:
    """Estimate every window in order, warm-starting each from the previous one."""
    windows, dropped = partition_stream(stream, scheme)
    results = []
    prev = None
    for w in windows:
        init = None
        if prev is not None and config.warm_start:
            last = prev.seq.maps[-1]
            init = FlowSequence(tuple(last for _ in range(scheme.R)), scheme)
        try:
            res = estimate_window(w, config, loss_cfg, init, geometry, progress, workers=workers)
        except ValueError as exc:
            log.warning("window %d failed (%s); retrying from zero flow", w.window_index, exc)
            res = estimate_window(w, config, loss_cfg, FlowSequence.zeros(geometry, scheme), geometry,
                                  progress, workers=workers)
            res.fallback = True
        results.append(res)
        prev = res
    return SequentialResult(results, dropped)
