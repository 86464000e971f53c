"""Dense flow maps, per-window flow sequences and displacement reconstruction.

Flow is stored in pixels per input partition. Sampling is bilinear with
clamp-to-edge outside the frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import CameraGeometry, PartitionScheme


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FlowMap:
    u: np.ndarray
    v: np.ndarray
    geometry: CameraGeometry

    def __post_init__(self):
        u, v = _frozen(self.u), _frozen(self.v)
        if u.shape != self.geometry.shape or v.shape != self.geometry.shape:
            raise ValueError(f"flow planes {u.shape}/{v.shape} do not match geometry {self.geometry.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow map contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, geometry: CameraGeometry) -> "FlowMap":
        return cls(np.zeros(geometry.shape), np.zeros(geometry.shape), geometry)

    @classmethod
    def constant(cls, geometry: CameraGeometry, u: float, v: float) -> "FlowMap":
        return cls(np.full(geometry.shape, float(u)), np.full(geometry.shape, float(v)), geometry)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "FlowMap":
        """Build from a ``(2, H, W)`` array."""
        return cls(a[0], a[1], CameraGeometry(a.shape[2], a.shape[1]))

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v])


@dataclass(frozen=True, eq=False)
class FlowSequence:
    maps: tuple[FlowMap, ...]
    scheme: PartitionScheme

    def __post_init__(self):
        maps = tuple(self.maps)
        object.__setattr__(self, "maps", maps)
        if len(maps) != self.scheme.R:
            raise ValueError(f"expected {self.scheme.R} flow maps, got {len(maps)}")
        if any(m.geometry != maps[0].geometry for m in maps):
            raise ValueError("flow maps have different geometries")

    @property
    def geometry(self) -> CameraGeometry:
        return self.maps[0].geometry

    @property
    def R(self) -> int:
        return self.scheme.R

    def as_array(self) -> np.ndarray:
        """Stacked ``(R, 2, H, W)`` float64 array."""
        return np.stack([m.as_array() for m in self.maps])

    @classmethod
    def from_array(cls, a: np.ndarray, scheme: PartitionScheme) -> "FlowSequence":
        return cls(tuple(FlowMap.from_array(m) for m in a), scheme)

    @classmethod
    def zeros(cls, geometry: CameraGeometry, scheme: PartitionScheme) -> "FlowSequence":
        return cls.from_array(np.zeros((scheme.R, 2) + geometry.shape), scheme)

    @classmethod
    def constant(cls, geometry: CameraGeometry, scheme: PartitionScheme, u: float, v: float) -> "FlowSequence":
        return cls(tuple(FlowMap.constant(geometry, u, v) for _ in range(scheme.R)), scheme)


@dataclass(frozen=True, eq=False)
class DisplacementMap:
    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        dx, dy = _frozen(self.dx), _frozen(self.dy)
        valid = np.array(self.valid, dtype=bool)
        valid.setflags(write=False)
        if not (dx.shape == dy.shape == valid.shape):
            raise ValueError("displacement planes and mask differ in shape")
        if not (np.isfinite(dx[valid]).all() and np.isfinite(dy[valid]).all()):
            raise ValueError("displacement not finite at valid pixels")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)
        object.__setattr__(self, "valid", valid)


def _bilinear_cell(n: int, c):
    """Clamped coordinate -> (lower index, fraction) so that index+1 < n."""
    c = np.clip(c, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(c), n - 2).astype(np.int64)
    return i0, c - i0


def sample_array(plane: np.ndarray, x, y):
    """Bilinear clamp-to-edge sample of a 2-D array at float coordinates."""
    h, w = plane.shape
    x0, fx = _bilinear_cell(w, np.asarray(x, dtype=np.float64))
    y0, fy = _bilinear_cell(h, np.asarray(y, dtype=np.float64))
    top = plane[y0, x0] * (1 - fx) + plane[y0, x0 + 1] * fx
    bot = plane[y0 + 1, x0] * (1 - fx) + plane[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def sample_flow(flow: FlowMap, x: float, y: float) -> tuple[float, float]:
    return float(sample_array(flow.u, x, y)), float(sample_array(flow.v, x, y))


def interp_matrix(n_fine: int, n_coarse: int, factor: int) -> np.ndarray:
    """Row ``i`` holds the bilinear weights of fine index ``i`` at coarse coordinate ``i / factor``."""
    m = np.zeros((n_fine, n_coarse))
    rows = np.arange(n_fine)
    if n_coarse == 1:
        m[:, 0] = 1.0
        return m
    i0, f = _bilinear_cell(n_coarse, rows / factor)
    m[rows, i0] += 1 - f
    m[rows, i0 + 1] += f
    return m


def _check_factor(factor) -> int:
    if float(factor) != int(factor) or int(factor) < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    return int(factor)


def upsample_flow(coarse: FlowMap, target: CameraGeometry, scale_factor: float) -> FlowMap:
    """Bilinearly upsample ``coarse`` to ``target`` and rescale flow magnitudes.

    Fine pixel ``(x, y)`` reads the coarse map at ``(x / f, y / f)`` where
    ``f`` is the integer ratio between the two resolutions.
    """
    g = coarse.geometry
    fx = target.width / g.width
    fy = target.height / g.height
    if fx != fy:
        raise ValueError("upsampling must use the same factor on both axes")
    f = _check_factor(fx)
    if g.width * f != target.width or g.height * f != target.height:
        raise ValueError("target dims must be the coarse dims times an integer factor")
    my = interp_matrix(target.height, g.height, f)
    mx = interp_matrix(target.width, g.width, f)
    u = scale_factor * (my @ coarse.u @ mx.T)
    v = scale_factor * (my @ coarse.v @ mx.T)
    return FlowMap(u, v, target)


def downsample_flow(fine: FlowMap, factor: int, scale_factor: float) -> FlowMap:
    """Average-pool by ``factor`` (dims must divide) and rescale magnitudes."""
    f = _check_factor(factor)
    h, w = fine.geometry.shape
    if h % f or w % f:
        raise ValueError("geometry not divisible by pooling factor")

    def pool(a):
        return a.reshape(h // f, f, w // f, f).mean(axis=(1, 3)) * scale_factor

    return FlowMap(pool(fine.u), pool(fine.v), CameraGeometry(w // f, h // f))


def reconstruct_displacement(seq: FlowSequence, n_gt_partitions: int, start: int = 0) -> DisplacementMap:
    """Per-pixel displacement over ``n_gt_partitions`` partitions starting at map ``start``.

    Each pixel centre is traced through the maps; the sampled flow vectors
    are averaged and scaled by the number of partitions. Pixels whose trace
    leaves the frame are marked invalid.
    """
    if n_gt_partitions < 1:
        raise ValueError("n_gt_partitions must be >= 1")
    if start < 0 or start + n_gt_partitions > seq.R:
        raise ValueError(f"cannot take {n_gt_partitions} partitions from map {start} of a length-{seq.R} sequence")
    g = seq.geometry
    ys, xs = np.mgrid[0:g.height, 0:g.width].astype(np.float64)
    px, py = xs.copy(), ys.copy()
    su = np.zeros_like(px)
    sv = np.zeros_like(py)
    valid = np.ones(g.shape, dtype=bool)
    for k in range(start, start + n_gt_partitions):
        m = seq.maps[k]
        u = sample_array(m.u, px, py)
        v = sample_array(m.v, px, py)
        su += u
        sv += v
        px = px + u
        py = py + v
        valid &= (px >= 0) & (px <= g.width - 1) & (py >= 0) & (py <= g.height - 1)
    n = n_gt_partitions
    return DisplacementMap(su / n * n, sv / n * n, valid)


# ---------------------------------------------------------------------------
# EFCM flow-sequence files

_EFCM_MAGIC = b"EFCM"
_EFCM_HEADER = struct.Struct("<4sIIId")


def write_flow(path, seq: FlowSequence) -> None:
    g = seq.geometry
    with open(path, "wb") as fh:
        fh.write(_EFCM_HEADER.pack(_EFCM_MAGIC, g.width, g.height, seq.R, float(seq.scheme.dt_input_us)))
        fh.write(seq.as_array().astype("<f4").tobytes())


def read_flow(path) -> FlowSequence:
    data = Path(path).read_bytes()
    if len(data) < _EFCM_HEADER.size:
        raise ValueError(f"{path}: truncated EFCM header")
    magic, w, h, r, dt = _EFCM_HEADER.unpack_from(data)
    if magic != _EFCM_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _EFCM_HEADER.size + r * 2 * w * h * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    if dt != int(dt):
        raise ValueError(f"{path}: non-integer dt_input_us {dt}")
    a = np.frombuffer(data, dtype="<f4", offset=_EFCM_HEADER.size).reshape(r, 2, h, w)
    return FlowSequence.from_array(a.astype(np.float64), PartitionScheme(int(dt), r))
