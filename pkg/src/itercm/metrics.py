"""Endpoint error and deblurring-quality metrics (FWL, RSAT)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .flow import DisplacementMap, FlowSequence
from .objective import WindowData, _as_data, _as_flow
from .warping import DEFAULT_EPS, _splat_kernel, _term_kernel, _trajectories


@dataclass
class MetricReport:
    epe: float = float("nan")
    pct_3pe: float = float("nan")
    fwl: float = float("nan")
    rsat: float = float("nan")
    n_valid: int = 0

    def to_json(self) -> str:
        # metrics that were not computed are NaN in memory and null on disk
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}
        return json.dumps(d, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(**{k: (float("nan") if v is None else v) for k, v in d.items()})

    def table(self) -> str:
        head = f"{'EPE':>8} {'%3PE':>8} {'FWL':>8} {'RSAT':>8} {'n_valid':>8}"
        row = f"{self.epe:8.3f} {self.pct_3pe:8.2f} {self.fwl:8.3f} {self.rsat:8.3f} {self.n_valid:8d}"
        return head + "\n" + row


def epe(pred: DisplacementMap, gt: DisplacementMap, mask: np.ndarray | None = None) -> tuple[float, float]:
    """Mean endpoint error and percentage of pixels with error above 3 px.

    Only pixels valid in both maps (and in ``mask`` when given) count.
    """
    if pred.dx.shape != gt.dx.shape:
        raise ValueError("prediction and ground truth differ in shape")
    valid = pred.valid & gt.valid
    if mask is not None:
        valid &= mask
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    err = np.hypot(pred.dx - gt.dx, pred.dy - gt.dy)[valid]
    return float(err.mean()), float(100.0 * np.mean(err > 3.0))


def _iwe(data: WindowData, F: np.ndarray, t_ref: int, iterative: bool) -> np.ndarray:
    pos, _ = _trajectories(data.x, data.y, data.tau, F, iterative)
    H, W = F.shape[2], F.shape[3]
    a, _ = _splat_kernel(np.ascontiguousarray(pos[:, t_ref, 0]), np.ascontiguousarray(pos[:, t_ref, 1]),
                         data.p, np.ones(len(data)), H, W)
    return a.sum(axis=0)


def fwl(window, seq, t_ref: int | None = None, warp: str = "iterative") -> float:
    """IWE variance relative to the identity warp (higher is sharper)."""
    data = _as_data(window)
    if len(data) == 0:
        raise ValueError("fwl needs at least one event")
    F = _as_flow(seq)
    t_ref = F.shape[0] if t_ref is None else t_ref
    iterative = warp == "iterative"
    ident = _iwe(data, np.zeros_like(F), t_ref, iterative).var()
    if ident == 0:
        raise ValueError("identity-warp IWE has zero variance")
    return float(_iwe(data, F, t_ref, iterative).var() / ident)


def _unmasked_loss(data: WindowData, F: np.ndarray, t_ref: int, iterative: bool, epsilon: float) -> float:
    pos, _ = _trajectories(data.x, data.y, data.tau, F, iterative)
    R = F.shape[0]
    tbar = 1.0 - np.abs(t_ref - data.tau) / R
    value, _, _ = _term_kernel(np.ascontiguousarray(pos[:, t_ref]), np.ones(len(data), dtype=np.bool_), tbar,
                               data.p, F.shape[2], F.shape[3], epsilon, False)
    return float(value)


def rsat(window, seq, loss_cfg=None, t_ref: int | None = None) -> float:
    """Average-timestamp loss relative to the identity warp (lower is better)."""
    data = _as_data(window)
    if len(data) == 0:
        raise ValueError("rsat needs at least one event")
    F = _as_flow(seq)
    t_ref = F.shape[0] if t_ref is None else t_ref
    eps = loss_cfg.epsilon if loss_cfg is not None else DEFAULT_EPS
    iterative = loss_cfg is None or loss_cfg.warp == "iterative"
    ident = _unmasked_loss(data, np.zeros_like(F), t_ref, iterative, eps)
    if ident == 0:
        raise ValueError("identity-warp loss is zero")
    return float(_unmasked_loss(data, F, t_ref, iterative, eps) / ident)


def evaluate_window(window, seq: FlowSequence, gt_disp: DisplacementMap | None = None,
                    pred_disp: DisplacementMap | None = None, loss_cfg=None) -> MetricReport:
    report = MetricReport()
    if gt_disp is not None and pred_disp is not None:
        report.epe, report.pct_3pe = epe(pred_disp, gt_disp)
        report.n_valid = int((pred_disp.valid & gt_disp.valid).sum())
    if window is not None and len(_as_data(window)):
        report.fwl = fwl(window, seq)
        report.rsat = rsat(window, seq, loss_cfg)
    return report
