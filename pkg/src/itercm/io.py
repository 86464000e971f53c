"""Event files (CSV and EVT1 binary), scene sidecars and PNG renderings.

CSV rows are ``t_us,x,y,p`` with an optional header line. The binary layout
is the magic ``EVT1``, little-endian u32 width, u32 height, u64 count, then
packed ``u64 t_us, u16 x, u16 y, u8 p`` records.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .events import CameraGeometry, EventArray
from .flow import DisplacementMap, FlowMap

CSV_HEADER = "t_us,x,y,p"
_BIN_MAGIC = b"EVT1"
_BIN_HEADER = struct.Struct("<4sIIQ")
_BIN_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])

# bump when the colour mapping changes so golden files can be regenerated
PALETTE_VERSION = 1


class EventFileError(ValueError):
    """Malformed event file; ``line`` is 1-based (CSV) or the record index (binary)."""

    def __init__(self, path, line: int | None, reason: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {reason}")
        self.line = line


class EventFile(NamedTuple):
    events: EventArray
    geometry: CameraGeometry | None


def _format_of(path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise ValueError(f"unknown event format {fmt!r}")
        return fmt
    return "bin" if Path(path).suffix.lower() in (".bin", ".evt") else "csv"


# ---------------------------------------------------------------------------
# CSV


def _parse_csv(path, text: str) -> EventArray:
    rows = []
    first = True
    prev_t = None
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if first:
            first = False
            if [c.strip() for c in rec] == CSV_HEADER.split(","):
                continue
        if len(rec) != 4:
            raise EventFileError(path, lineno, f"expected 4 fields, found {len(rec)}")
        try:
            t, x, y, p = (int(c) for c in rec)
        except ValueError:
            raise EventFileError(path, lineno, f"non-integer field in {','.join(rec)!r}") from None
        if t < 0 or x < 0 or y < 0:
            raise EventFileError(path, lineno, "negative timestamp or coordinate")
        if p not in (0, 1):
            raise EventFileError(path, lineno, f"polarity must be 0 or 1, found {p}")
        if prev_t is not None and t < prev_t:
            raise EventFileError(path, lineno, f"timestamp {t} precedes {prev_t}")
        prev_t = t
        rows.append((t, x, y, p))
    if not rows:
        return EventArray.empty()
    a = np.array(rows, dtype=np.int64)
    return EventArray(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def _write_csv(path, events: EventArray) -> None:
    cols = _integer_columns(events)
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        if len(events):
            np.savetxt(fh, np.column_stack(cols), fmt="%d", delimiter=",")


def _integer_columns(events: EventArray):
    x = events.x.astype(np.int64)
    y = events.y.astype(np.int64)
    if not (np.array_equal(x, events.x) and np.array_equal(y, events.y)):
        raise ValueError("event files store integer pixel coordinates only")
    return events.t_us, x, y, events.p.astype(np.int64)


# ---------------------------------------------------------------------------
# binary


def _parse_bin(path, data: bytes) -> EventFile:
    if len(data) < _BIN_HEADER.size:
        raise EventFileError(path, None, "truncated header")
    magic, w, h, n = _BIN_HEADER.unpack_from(data)
    if magic != _BIN_MAGIC:
        raise EventFileError(path, None, f"bad magic {magic!r}")
    body = len(data) - _BIN_HEADER.size
    if body != n * _BIN_RECORD.itemsize:
        whole = body // _BIN_RECORD.itemsize
        raise EventFileError(path, min(whole, n), f"expected {n} records, found {body / _BIN_RECORD.itemsize:g}")
    rec = np.frombuffer(data, dtype=_BIN_RECORD, count=n, offset=_BIN_HEADER.size)
    bad = np.flatnonzero(rec["p"] > 1)
    if len(bad):
        raise EventFileError(path, int(bad[0]), f"polarity must be 0 or 1, found {rec['p'][bad[0]]}")
    out = np.flatnonzero((rec["x"] >= w) | (rec["y"] >= h))
    if len(out):
        raise EventFileError(path, int(out[0]), f"pixel outside the {w}x{h} frame")
    t = rec["t"].astype(np.int64)
    inv = np.flatnonzero(np.diff(t) < 0)
    if len(inv):
        raise EventFileError(path, int(inv[0]) + 1, "timestamp inversion")
    events = EventArray(t, rec["x"].astype(np.float64), rec["y"].astype(np.float64), rec["p"])
    return EventFile(events, CameraGeometry(int(w), int(h)))


def _write_bin(path, events: EventArray, geometry: CameraGeometry) -> None:
    t, x, y, p = _integer_columns(events)
    if len(events):
        events.check_in_frame(geometry)
    rec = np.empty(len(events), dtype=_BIN_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = t, x, y, p
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(_BIN_MAGIC, geometry.width, geometry.height, len(events)))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# public API


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_events(path, fmt: str | None = None) -> EventFile:
    """Read events and, when known, the sensor geometry.

    Geometry comes from the binary header, or else from a ``<file>.json``
    sidecar written by :func:`write_sidecar`.
    """
    fmt = _format_of(path, fmt)
    if fmt == "bin":
        ef = _parse_bin(path, Path(path).read_bytes())
    else:
        ef = EventFile(_parse_csv(path, Path(path).read_text()), None)
    side = sidecar_path(path)
    if ef.geometry is None and side.exists():
        d = json.loads(side.read_text())
        ef = EventFile(ef.events, CameraGeometry(int(d["width"]), int(d["height"])))
    if ef.geometry is not None and len(ef.events):
        ef.events.check_in_frame(ef.geometry)
    return ef


def read_events(path, fmt: str | None = None) -> EventArray:
    return load_events(path, fmt).events


def write_events(path, events: EventArray, geometry: CameraGeometry | None = None, fmt: str | None = None) -> None:
    events.check_sorted()
    if _format_of(path, fmt) == "bin":
        if geometry is None:
            raise ValueError("the binary format needs the sensor geometry")
        _write_bin(path, events, geometry)
    else:
        _write_csv(path, events)


def write_sidecar(path, spec) -> Path:
    """Write ``spec.to_json()`` next to an event file and return its path."""
    side = sidecar_path(path)
    side.write_text(spec.to_json() + "\n")
    return side


# ---------------------------------------------------------------------------
# PNG rendering


@dataclass(frozen=True)
class RenderSpec:
    target: str = "flow"
    t_ref: int | None = None
    color_max: float | None = None

    def __post_init__(self):
        if self.target not in ("flow", "iwe", "timestamp_image"):
            raise ValueError(f"unknown render target {self.target!r}")
        if self.color_max is not None and not self.color_max > 0:
            raise ValueError("color_max must be positive")


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_rgb(u: np.ndarray, v: np.ndarray, color_max: float | None = None) -> np.ndarray:
    """8-bit colour wheel: hue from direction, saturation from magnitude, white at rest."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise ValueError("flow contains non-finite values")
    mag = np.hypot(u, v)
    if color_max is None:
        color_max = float(mag.max()) if mag.max() > 0 else 1.0
    hue = np.mod(np.arctan2(v, u), 2 * math.pi) / (2 * math.pi)
    sat = np.clip(mag / color_max, 0.0, 1.0)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.round(rgb * 255).astype(np.uint8)


def _save_png(path, rgb: np.ndarray) -> None:
    # Pillow writes no timestamps, so identical arrays give identical files
    Image.fromarray(np.ascontiguousarray(rgb), mode="RGB").save(path, format="PNG", optimize=False)


def render_flow_png(flow: FlowMap | DisplacementMap, path, spec: RenderSpec = RenderSpec()) -> None:
    if isinstance(flow, DisplacementMap):
        u, v = flow.dx, flow.dy
    else:
        u, v = flow.u, flow.v
    _save_png(path, flow_to_rgb(u, v, spec.color_max))


def polarity_rgb(pos: np.ndarray, neg: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Positive channel in red, negative in blue, on black."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if scale is None:
        scale = max(float(pos.max(initial=0)), float(neg.max(initial=0))) or 1.0
    rgb = np.zeros(pos.shape + (3,))
    rgb[..., 0] = np.clip(pos / scale, 0, 1)
    rgb[..., 2] = np.clip(neg / scale, 0, 1)
    return np.round(rgb * 255).astype(np.uint8)


def render_polarity_png(pos: np.ndarray, neg: np.ndarray, path, scale: float | None = None) -> None:
    _save_png(path, polarity_rgb(pos, neg, scale))
