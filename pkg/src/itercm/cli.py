"""Command-line driver: ``synth``, ``estimate``, ``eval``, ``render``, ``gradcheck``.

Results go to stdout (JSON with ``--json``), per-iteration progress to
stderr as JSON lines, and any failure ends with a one-line JSON error on
stderr and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as eio
from .events import CameraGeometry, PartitionScheme, partition_stream
from .flow import FlowSequence, read_flow, reconstruct_displacement, write_flow
from .gradcheck import run_gradcheck
from .metrics import MetricReport, fwl, rsat
from .objective import LossConfig
from .optimizer import OptimizerConfig, run_sequential
from .synth import KINDS, SceneSpec, generate, render_gt
from .warping import splat, warp_events

EXIT_FAILURE = 1


def _seconds_to_us(sec: float) -> int:
    us = sec * 1e6
    if us <= 0 or abs(us - round(us)) > 1e-6 * max(1.0, us):
        raise ValueError(f"--dt-input {sec} s is not a positive whole number of microseconds")
    return int(round(us))


def _emit(args, payload: dict, table: str | None = None) -> None:
    if args.json or table is None:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(table)


def _progress_writer(quiet: bool):
    if quiet:
        return None

    def write(rec: dict) -> None:
        sys.stderr.write(json.dumps(rec) + "\n")

    return write


def _geometry(args, ef: eio.EventFile) -> CameraGeometry:
    if args.width is not None and args.height is not None:
        return CameraGeometry(args.width, args.height)
    if ef.geometry is not None:
        return ef.geometry
    if not len(ef.events):
        raise ValueError("cannot infer the sensor size of an empty stream; pass --width and --height")
    return CameraGeometry(int(ef.events.x.max()) + 1, int(ef.events.y.max()) + 1)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    params = json.loads(args.params) if args.params else {}
    geometry = CameraGeometry(args.width, args.height)
    spec = SceneSpec(args.scene, geometry, args.duration_us, params, args.seed, args.events_per_px)
    events, gt = generate(spec)
    eio.write_events(args.out, events, geometry)
    eio.write_sidecar(args.out, spec)
    summary = {"events": len(events), "out": str(args.out), "width": geometry.width, "height": geometry.height}
    if args.gt_out:
        dt = _seconds_to_us(args.dt_input)
        n = spec.duration_us // dt
        if n < 1:
            raise ValueError("scene is shorter than one input partition")
        seq, _ = render_gt(gt, PartitionScheme(dt, n))
        write_flow(args.gt_out, seq)
        summary.update(gt_out=str(args.gt_out), gt_maps=n)
    _emit(args, summary)
    return 0


def cmd_estimate(args) -> int:
    ef = eio.load_events(args.events)
    geometry = _geometry(args, ef)
    scheme = PartitionScheme(_seconds_to_us(args.dt_input), args.r)
    loss_cfg = LossConfig(R=args.r, S=args.scales, warp=args.warp, seed=args.seed)
    defaults = OptimizerConfig()
    cfg = OptimizerConfig(
        pyramid_levels=args.levels if args.levels is not None else defaults.pyramid_levels,
        iters_per_level=args.iters if args.iters is not None else defaults.iters_per_level,
        step_size=args.step_size if args.step_size is not None else defaults.step_size,
        tile_base=args.tile_base if args.tile_base is not None else defaults.tile_base,
        warm_start=args.warm_start,
        seed=args.seed,
    )
    result = run_sequential(ef.events, scheme, geometry, cfg, loss_cfg, _progress_writer(args.quiet), args.workers)
    if not result.windows:
        raise ValueError("no complete training window in the event stream")
    write_flow(args.out, result.concatenated())
    summary = {
        "windows": len(result.windows),
        "maps": len(result.windows) * args.r,
        "dropped_events": result.dropped,
        "fallbacks": result.n_fallbacks,
        "final_losses": result.final_losses,
        "mean_final_loss": result.mean_final_loss,
        "out": str(args.out),
    }
    _emit(args, summary)
    return 0


def _near_events_mask(events, geometry: CameraGeometry, radius: float) -> np.ndarray:
    from scipy.ndimage import distance_transform_edt

    occupied = np.zeros(geometry.shape, dtype=bool)
    if len(events):
        occupied[events.y.astype(np.int64), events.x.astype(np.int64)] = True
    if not occupied.any():
        return occupied
    return distance_transform_edt(~occupied) <= radius


def cmd_eval(args) -> int:
    pred = read_flow(args.flow)
    gt = read_flow(args.gt)
    if pred.geometry != gt.geometry:
        raise ValueError("predicted and ground-truth flow differ in size")
    n = args.gt_every
    R = min(pred.R, gt.R)
    if R < n:
        raise ValueError(f"need at least {n} maps, found {R}")
    ef = eio.load_events(args.events) if args.events else None
    P, G = pred.as_array(), gt.as_array()
    errs, n_valid, n_big = [], 0, 0
    for start in range(0, R - n + 1, n):
        mask = None
        if ef is not None and args.near_events is not None:
            t0 = start * pred.scheme.dt_input_us
            t1 = t0 + n * pred.scheme.dt_input_us
            sel = (ef.events.t_us >= t0) & (ef.events.t_us < t1)
            mask = _near_events_mask(ef.events[sel], pred.geometry, args.near_events)
            if not mask.any():
                continue
        d_pred = reconstruct_displacement(FlowSequence.from_array(P, PartitionScheme(pred.scheme.dt_input_us, pred.R)), n, start)
        d_gt = reconstruct_displacement(FlowSequence.from_array(G, PartitionScheme(gt.scheme.dt_input_us, gt.R)), n, start)
        valid = d_pred.valid & d_gt.valid
        if mask is not None:
            valid &= mask
        if not valid.any():
            continue
        err = np.hypot(d_pred.dx - d_gt.dx, d_pred.dy - d_gt.dy)[valid]
        errs.append(err)
        n_valid += int(valid.sum())
        n_big += int((err > 3.0).sum())
    if not errs:
        raise ValueError("no valid pixels to evaluate")
    report = MetricReport(epe=float(np.concatenate(errs).mean()), pct_3pe=100.0 * n_big / n_valid, n_valid=n_valid)
    if ef is not None:
        r = args.r or pred.R
        windows = partition_stream(ef.events, PartitionScheme(pred.scheme.dt_input_us, r)).windows
        fw, rs = [], []
        for w in windows:
            if (w.window_index + 1) * r > pred.R or not len(w):
                continue
            chunk = P[w.window_index * r:(w.window_index + 1) * r]
            fw.append(fwl(w, chunk))
            rs.append(rsat(w, chunk))
        if fw:
            report.fwl = float(np.mean(fw))
            report.rsat = float(np.mean(rs))
    _emit(args, json.loads(report.to_json()), report.table())
    return 0


def cmd_render(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq = read_flow(args.flow)
    written = []
    if args.iwe:
        if not args.events:
            raise ValueError("--iwe needs --events")
        ef = eio.load_events(args.events)
        r = args.r or seq.R
        scheme = PartitionScheme(seq.scheme.dt_input_us, r)
        t_ref = r if args.t_ref is None else args.t_ref
        if not 0 <= t_ref <= r:
            raise ValueError(f"--t-ref must lie in [0, {r}]")
        F = seq.as_array()
        for w in partition_stream(ef.events, scheme).windows:
            if (w.window_index + 1) * r > seq.R or not len(w):
                continue
            chunk = F[w.window_index * r:(w.window_index + 1) * r]
            xw, yw, inside = warp_events(w.events.x, w.events.y, w.tau(), chunk, t_ref, args.warp == "iterative")
            iwe = splat(xw[inside], yw[inside], w.events.p[inside], seq.geometry, t_ref)
            path = out / f"iwe_w{w.window_index:04d}_t{t_ref:02d}.png"
            eio.render_polarity_png(iwe.count[1], iwe.count[0], path)
            written.append(str(path))
    else:
        spec = eio.RenderSpec("flow", color_max=args.color_max)
        for k, m in enumerate(seq.maps):
            path = out / f"flow_{k:04d}.png"
            eio.render_flow_png(m, path, spec)
            written.append(str(path))
    _emit(args, {"written": written, "palette_version": eio.PALETTE_VERSION})
    return 0


def cmd_gradcheck(args) -> int:
    res = run_gradcheck(args.seed, args.instances)
    payload = {
        "ok": res.ok,
        "instances": res.n_instances,
        "checked": res.n_checked,
        "passed": res.n_passed,
        "pass_fraction": res.pass_fraction,
        "skipped_kinks": res.n_skipped_kinks,
        "worst_rel_error": res.worst_rel_error,
    }
    table = (f"gradcheck seed={args.seed}: {res.n_passed}/{res.n_checked} coordinates pass "
             f"({100 * res.pass_fraction:.2f}%), {res.n_skipped_kinks} skipped at kinks -> {'PASS' if res.ok else 'FAIL'}")
    _emit(args, payload, table)
    return 0 if res.ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print machine-readable JSON on stdout")
    common.add_argument("--workers", type=int, default=1, help="parallelism budget (default 1, deterministic)")

    parser = argparse.ArgumentParser(prog="itercm", description="Iterative-warping contrast maximisation for event-camera optical flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic event stream with ground truth")
    p.add_argument("--scene", choices=KINDS, required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--duration-us", type=int, required=True)
    p.add_argument("--params", help="scene parameters as a JSON object")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--events-per-px", type=int, default=1)
    p.add_argument("--out", required=True, help="event file (.csv or .bin)")
    p.add_argument("--gt-out", help="ground-truth flow file (EFCM)")
    p.add_argument("--dt-input", type=float, default=0.01, help="input partition length in seconds for --gt-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", parents=[common], help="estimate flow over an event stream")
    p.add_argument("--events", required=True)
    p.add_argument("--dt-input", type=float, required=True, help="input partition length in seconds")
    p.add_argument("--r", type=int, required=True, help="input partitions per training window")
    p.add_argument("--scales", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--warp", choices=("iterative", "linear"), default="iterative")
    p.add_argument("--levels", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--tile-base", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warm-start", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--quiet", action="store_true", help="suppress JSON-lines progress on stderr")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", parents=[common], help="compare a flow file against ground truth")
    p.add_argument("--flow", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--gt-every", type=int, default=1, help="compare displacements over this many partitions")
    p.add_argument("--events", help="event file, enables FWL/RSAT and --near-events")
    p.add_argument("--near-events", type=float, help="only score pixels within this many px of an event")
    p.add_argument("--r", type=int, help="partitions per window for FWL/RSAT (default: all maps)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="write PNG visualisations")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--events")
    p.add_argument("--iwe", action="store_true", help="render images of warped events instead of flow")
    p.add_argument("--t-ref", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--warp", choices=("iterative", "linear"), default="iterative")
    p.add_argument("--color-max", type=float)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}) + "\n")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
