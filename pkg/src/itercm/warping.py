"""Event warping, bilinear splatting and average-timestamp images.

Events inside a window carry a normalised time ``tau`` in partition units.
Reference times are integer partition boundaries ``0..R``. Iterative
warping chains one linear step per flow map, sampling flow at the current
warped position; going back in time applies the maps with negated sign.

The compiled kernels at the bottom work on a stacked ``(R, 2, H, W)``
flow array and compute every event's position at every boundary in one
pass, since the chain to boundary ``b + 1`` extends the chain to ``b``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .events import POS, CameraGeometry
from .flow import FlowMap, FlowSequence, sample_flow

DEFAULT_EPS = 1e-9


def kernel(a: float) -> float:
    return max(0.0, 1.0 - abs(a))


@dataclass(frozen=True)
class WarpedEvent:
    x_w: float
    y_w: float
    tau: float
    t_ref: float
    polarity: int
    in_frame_throughout: bool


def _in_frame(x: float, y: float, g: CameraGeometry) -> bool:
    return 0.0 <= x <= g.width - 1 and 0.0 <= y <= g.height - 1


def warp_linear(x: float, y: float, tau: float, flow: FlowMap, t_ref: float, polarity: int = POS) -> WarpedEvent:
    u, v = sample_flow(flow, x, y)
    xw = x + (t_ref - tau) * u
    yw = y + (t_ref - tau) * v
    return WarpedEvent(xw, yw, tau, t_ref, polarity, _in_frame(xw, yw, flow.geometry))


def warp_iterative(x: float, y: float, tau: float, seq: FlowSequence, t_ref: int, polarity: int = POS) -> WarpedEvent:
    """Chain linear warps through the flow maps from ``tau`` to boundary ``t_ref``."""
    R = seq.R
    if t_ref != int(t_ref) or not 0 <= t_ref <= R:
        raise ValueError(f"t_ref must be an integer boundary in [0, {R}], got {t_ref}")
    t_ref = int(t_ref)
    if t_ref == tau:
        return WarpedEvent(x, y, tau, t_ref, polarity, True)
    g = seq.geometry
    k = min(int(math.floor(tau)), R - 1)
    ok = True
    if t_ref > tau:
        u, v = sample_flow(seq.maps[k], x, y)
        c = (k + 1) - tau
        x, y = x + c * u, y + c * v
        ok = _in_frame(x, y, g)
        for j in range(k + 1, t_ref):
            u, v = sample_flow(seq.maps[j], x, y)
            x, y = x + u, y + v
            ok = ok and _in_frame(x, y, g)
    else:
        u, v = sample_flow(seq.maps[k], x, y)
        c = k - tau
        x, y = x + c * u, y + c * v
        ok = _in_frame(x, y, g)
        for j in range(k - 1, t_ref - 1, -1):
            u, v = sample_flow(seq.maps[j], x, y)
            x, y = x - u, y - v
            ok = ok and _in_frame(x, y, g)
    return WarpedEvent(x, y, tau, t_ref, polarity, ok)


@dataclass(frozen=True, eq=False)
class Iwe:
    count: np.ndarray  # (2, H, W), indexed by polarity
    t_ref: float

    @property
    def total(self) -> np.ndarray:
        return self.count.sum(axis=0)


@dataclass(frozen=True, eq=False)
class TimestampImage:
    T_pos: np.ndarray
    T_neg: np.ndarray
    epsilon: float


def splat(x, y, polarity, geometry: CameraGeometry, t_ref: float = 0.0, workers: int = 1) -> Iwe:
    """Deposit bilinear kernel mass of each warped event into its polarity channel.

    With ``workers > 1`` the events are split into contiguous chunks whose
    partial images are summed in chunk order.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    p = np.ascontiguousarray(polarity, dtype=np.int8)
    ones = np.ones_like(x)
    H, W = geometry.shape
    if workers <= 1 or len(x) < 2 * workers:
        a, _ = _splat_kernel(x, y, p, ones, H, W)
        return Iwe(a, t_ref)
    bounds = np.linspace(0, len(x), workers + 1).astype(np.int64)
    chunks = [slice(bounds[i], bounds[i + 1]) for i in range(workers)]
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda s: _splat_kernel(x[s], y[s], p[s], ones[s], H, W)[0], chunks))
    a = parts[0]
    for part in parts[1:]:
        a = a + part
    return Iwe(a, t_ref)


def timestamp_image(x, y, polarity, tbar, geometry: CameraGeometry, epsilon: float = DEFAULT_EPS) -> TimestampImage:
    """Per-polarity kernel-weighted average of the normalised timestamps ``tbar``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    H, W = geometry.shape
    a, b = _splat_kernel(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64),
                         np.ascontiguousarray(polarity, dtype=np.int8), np.ascontiguousarray(tbar, dtype=np.float64), H, W)
    t = b / (a + epsilon)
    return TimestampImage(t[POS], t[1 - POS], epsilon)


def border_mask(warped: list[WarpedEvent]) -> np.ndarray:
    """Inclusion mask for one deblurring window: events that never left the frame."""
    return np.array([w.in_frame_throughout for w in warped], dtype=bool)


def warp_events(x, y, tau, seq: FlowSequence | np.ndarray, t_ref: int, iterative: bool = True):
    """Vectorised warp of many events to one boundary.

    Returns ``(x_w, y_w, in_frame_throughout)``.
    """
    F = seq.as_array() if isinstance(seq, FlowSequence) else np.asarray(seq, dtype=np.float64)
    R = F.shape[0]
    if t_ref != int(t_ref) or not 0 <= t_ref <= R:
        raise ValueError(f"t_ref must be an integer boundary in [0, {R}], got {t_ref}")
    pos, inside = trajectories(x, y, tau, F, iterative)
    return pos[:, int(t_ref), 0], pos[:, int(t_ref), 1], inside[:, int(t_ref)]


def trajectories(x, y, tau, F: np.ndarray, iterative: bool = True):
    """Positions ``(N, R+1, 2)`` of every event at every boundary and the matching in-frame flags."""
    return _trajectories(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64),
                         np.ascontiguousarray(tau, dtype=np.float64), np.ascontiguousarray(F, dtype=np.float64),
                         bool(iterative))


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM, scaled so the image maximum maps to 65535."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape, dtype=">u2") if peak <= 0 else np.round(np.clip(img, 0, None) / peak * 65535).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + scaled.tobytes())


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True, nogil=True)
def _sample(F, k, x, y):
    H = F.shape[2]
    W = F.shape[3]
    cx = min(max(x, 0.0), W - 1.0)
    cy = min(max(y, 0.0), H - 1.0)
    x0 = min(int(math.floor(cx)), W - 2)
    y0 = min(int(math.floor(cy)), H - 2)
    fx = cx - x0
    fy = cy - y0
    u00 = F[k, 0, y0, x0]
    u01 = F[k, 0, y0, x0 + 1]
    u10 = F[k, 0, y0 + 1, x0]
    u11 = F[k, 0, y0 + 1, x0 + 1]
    v00 = F[k, 1, y0, x0]
    v01 = F[k, 1, y0, x0 + 1]
    v10 = F[k, 1, y0 + 1, x0]
    v11 = F[k, 1, y0 + 1, x0 + 1]
    u = (u00 * (1 - fx) + u01 * fx) * (1 - fy) + (u10 * (1 - fx) + u11 * fx) * fy
    v = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy
    # derivatives vanish along a clamped axis
    if 0.0 <= x <= W - 1.0:
        dudx = (1 - fy) * (u01 - u00) + fy * (u11 - u10)
        dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    else:
        dudx = 0.0
        dvdx = 0.0
    if 0.0 <= y <= H - 1.0:
        dudy = (1 - fx) * (u10 - u00) + fx * (u11 - u01)
        dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    else:
        dudy = 0.0
        dvdy = 0.0
    return u, v, dudx, dudy, dvdx, dvdy, x0, y0, fx, fy


@njit(cache=True, nogil=True)
def _inside(x, y, W, H):
    return 0.0 <= x <= W - 1.0 and 0.0 <= y <= H - 1.0


@njit(cache=True, nogil=True)
def _event_partition(tau, R):
    k = int(math.floor(tau))
    if k < 0:
        k = 0
    if k > R - 1:
        k = R - 1
    return k


@njit(cache=True, nogil=True)
def _trajectories(x, y, tau, F, iterative):
    N = x.shape[0]
    R = F.shape[0]
    H = F.shape[2]
    W = F.shape[3]
    pos = np.empty((N, R + 1, 2))
    inside = np.zeros((N, R + 1), dtype=np.bool_)
    for i in range(N):
        k = _event_partition(tau[i], R)
        u, v, _, _, _, _, _, _, _, _ = _sample(F, k, x[i], y[i])
        if not iterative:
            for b in range(R + 1):
                c = b - tau[i]
                px = x[i] + c * u
                py = y[i] + c * v
                pos[i, b, 0] = px
                pos[i, b, 1] = py
                inside[i, b] = _inside(px, py, W, H)
            continue
        # backward to the partition start, then one negated step per earlier map
        c = k - tau[i]
        px = x[i] + c * u
        py = y[i] + c * v
        ok = _inside(px, py, W, H)
        pos[i, k, 0] = px
        pos[i, k, 1] = py
        inside[i, k] = ok
        for j in range(k - 1, -1, -1):
            su, sv, _, _, _, _, _, _, _, _ = _sample(F, j, px, py)
            px = px - su
            py = py - sv
            ok = ok and _inside(px, py, W, H)
            pos[i, j, 0] = px
            pos[i, j, 1] = py
            inside[i, j] = ok
        # forward to the partition end, then one step per later map
        c = (k + 1) - tau[i]
        px = x[i] + c * u
        py = y[i] + c * v
        ok = _inside(px, py, W, H)
        pos[i, k + 1, 0] = px
        pos[i, k + 1, 1] = py
        inside[i, k + 1] = ok
        for j in range(k + 1, R):
            su, sv, _, _, _, _, _, _, _, _ = _sample(F, j, px, py)
            px = px + su
            py = py + sv
            ok = ok and _inside(px, py, W, H)
            pos[i, j + 1, 0] = px
            pos[i, j + 1, 1] = py
            inside[i, j + 1] = ok
    return pos, inside


@njit(cache=True, nogil=True)
def _scatter(G, k, x0, y0, fx, fy, gu, gv):
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    G[k, 0, y0, x0] += w00 * gu
    G[k, 0, y0, x0 + 1] += w01 * gu
    G[k, 0, y0 + 1, x0] += w10 * gu
    G[k, 0, y0 + 1, x0 + 1] += w11 * gu
    G[k, 1, y0, x0] += w00 * gv
    G[k, 1, y0, x0 + 1] += w01 * gv
    G[k, 1, y0 + 1, x0] += w10 * gv
    G[k, 1, y0 + 1, x0 + 1] += w11 * gv


@njit(cache=True, nogil=True)
def _trajectories_vjp(x, y, tau, F, iterative, pos, adj):
    """Pull position adjoints ``adj (N, R+1, 2)`` back onto the flow cells."""
    N = x.shape[0]
    R = F.shape[0]
    G = np.zeros_like(F)
    for i in range(N):
        k = _event_partition(tau[i], R)
        _, _, _, _, _, _, x0, y0, fx, fy = _sample(F, k, x[i], y[i])
        if not iterative:
            gu = 0.0
            gv = 0.0
            for b in range(R + 1):
                c = b - tau[i]
                gu += c * adj[i, b, 0]
                gv += c * adj[i, b, 1]
            _scatter(G, k, x0, y0, fx, fy, gu, gv)
            continue
        # forward chain, walked from the last boundary back to the event
        gx = 0.0
        gy = 0.0
        for b in range(R, k + 1, -1):
            gx += adj[i, b, 0]
            gy += adj[i, b, 1]
            if gx == 0.0 and gy == 0.0:
                continue
            _, _, dudx, dudy, dvdx, dvdy, sx0, sy0, sfx, sfy = _sample(F, b - 1, pos[i, b - 1, 0], pos[i, b - 1, 1])
            _scatter(G, b - 1, sx0, sy0, sfx, sfy, gx, gy)
            ngx = gx + gx * dudx + gy * dvdx
            ngy = gy + gx * dudy + gy * dvdy
            gx = ngx
            gy = ngy
        gx += adj[i, k + 1, 0]
        gy += adj[i, k + 1, 1]
        c = (k + 1) - tau[i]
        _scatter(G, k, x0, y0, fx, fy, c * gx, c * gy)
        # backward chain
        gx = 0.0
        gy = 0.0
        for b in range(0, k):
            gx += adj[i, b, 0]
            gy += adj[i, b, 1]
            if gx == 0.0 and gy == 0.0:
                continue
            _, _, dudx, dudy, dvdx, dvdy, sx0, sy0, sfx, sfy = _sample(F, b, pos[i, b + 1, 0], pos[i, b + 1, 1])
            _scatter(G, b, sx0, sy0, sfx, sfy, -gx, -gy)
            ngx = gx - gx * dudx - gy * dvdx
            ngy = gy - gx * dudy - gy * dvdy
            gx = ngx
            gy = ngy
        gx += adj[i, k, 0]
        gy += adj[i, k, 1]
        c = k - tau[i]
        _scatter(G, k, x0, y0, fx, fy, c * gx, c * gy)
    return G


@njit(cache=True, nogil=True)
def _splat_kernel(x, y, pol, val, H, W):
    """Kernel mass ``A`` and value-weighted mass ``B``, both ``(2, H, W)``."""
    A = np.zeros((2, H, W))
    B = np.zeros((2, H, W))
    for i in range(x.shape[0]):
        x0 = int(math.floor(x[i]))
        y0 = int(math.floor(y[i]))
        fx = x[i] - x0
        fy = y[i] - y0
        p = pol[i]
        for dy in range(2):
            Y = y0 + dy
            if Y < 0 or Y >= H:
                continue
            wy = fy if dy else 1.0 - fy
            for dx in range(2):
                X = x0 + dx
                if X < 0 or X >= W:
                    continue
                w = (fx if dx else 1.0 - fx) * wy
                A[p, Y, X] += w
                B[p, Y, X] += w * val[i]
    return A, B


@njit(cache=True, nogil=True)
def _dl(GA, GB, p, Y, X, W, tbar):
    """Loss sensitivity to unit mass at column ``X`` of row ``Y`` (0 off-frame)."""
    if X < 0 or X >= W:
        return 0.0
    return GA[p, Y, X] + tbar * GB[p, Y, X]


@njit(cache=True, nogil=True)
def _dl_y(GA, GB, p, Y, X, H, tbar):
    if Y < 0 or Y >= H:
        return 0.0
    return GA[p, Y, X] + tbar * GB[p, Y, X]


@njit(cache=True, nogil=True)
def _term_kernel(pos_b, inside_b, tbar, pol, H, W, eps, want_grad):
    """Focus loss at one reference time and its derivative w.r.t. the warped positions.

    Masked events (``inside_b`` false) are left out of both the image and the
    active-pixel count. Returns ``(loss, dloss/dpos, n_masked)``.
    """
    n = pos_b.shape[0]
    A = np.zeros((2, H, W))
    B = np.zeros((2, H, W))
    n_masked = 0
    for i in range(n):
        if not inside_b[i]:
            n_masked += 1
            continue
        x0 = int(math.floor(pos_b[i, 0]))
        y0 = int(math.floor(pos_b[i, 1]))
        fx = pos_b[i, 0] - x0
        fy = pos_b[i, 1] - y0
        p = pol[i]
        for dy in range(2):
            Y = y0 + dy
            if Y < 0 or Y >= H:
                continue
            wy = fy if dy else 1.0 - fy
            for dx in range(2):
                X = x0 + dx
                if X < 0 or X >= W:
                    continue
                w = (fx if dx else 1.0 - fx) * wy
                A[p, Y, X] += w
                B[p, Y, X] += w * tbar[i]
    num = 0.0
    active = 0
    for Y in range(H):
        for X in range(W):
            for p in range(2):
                t = B[p, Y, X] / (A[p, Y, X] + eps)
                num += t * t
            if A[0, Y, X] + A[1, Y, X] > 0.0:
                active += 1
    denom = active + eps
    loss = num / denom
    g = np.zeros((n, 2))
    if not want_grad or n == n_masked:
        return loss, g, n_masked
    # dloss/dA and dloss/dB per pixel; the active-pixel count is held fixed
    for p in range(2):
        for Y in range(H):
            for X in range(W):
                a = A[p, Y, X] + eps
                t = B[p, Y, X] / a
                A[p, Y, X] = -2.0 * t * t / a / denom
                B[p, Y, X] = 2.0 * t / a / denom
    for i in range(n):
        if not inside_b[i]:
            continue
        x0 = int(math.floor(pos_b[i, 0]))
        y0 = int(math.floor(pos_b[i, 1]))
        fx = pos_b[i, 0] - x0
        fy = pos_b[i, 1] - y0
        p = pol[i]
        c_bar = tbar[i]
        gx = 0.0
        gy = 0.0
        # d/dx: kernel slopes -1/+1 inside a cell; on a kink the midpoint
        # subgradient is 0 at the centre and -1/2, +1/2 one pixel either side
        for dy in range(2):
            Y = y0 + dy
            if Y < 0 or Y >= H:
                continue
            wy = fy if dy else 1.0 - fy
            if wy == 0.0:
                continue
            if fx > 0.0:
                gx += wy * (_dl(A, B, p, Y, x0 + 1, W, c_bar) - _dl(A, B, p, Y, x0, W, c_bar))
            else:
                gx += 0.5 * wy * (_dl(A, B, p, Y, x0 + 1, W, c_bar) - _dl(A, B, p, Y, x0 - 1, W, c_bar))
        for dx in range(2):
            X = x0 + dx
            if X < 0 or X >= W:
                continue
            wx = fx if dx else 1.0 - fx
            if wx == 0.0:
                continue
            if fy > 0.0:
                gy += wx * (_dl_y(A, B, p, y0 + 1, X, H, c_bar) - _dl_y(A, B, p, y0, X, H, c_bar))
            else:
                gy += 0.5 * wx * (_dl_y(A, B, p, y0 + 1, X, H, c_bar) - _dl_y(A, B, p, y0 - 1, X, H, c_bar))
        g[i, 0] = gx
        g[i, 1] = gy
    return loss, g, n_masked
