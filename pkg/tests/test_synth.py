import math

import numpy as np
import pytest

from itercm.events import CameraGeometry, PartitionScheme
from itercm.flow import reconstruct_displacement
from itercm.io import write_events
from itercm.synth import SceneSpec, _Scene, generate, render_gt

G32 = CameraGeometry(32, 32)


def test_translating_flow_constant():
    spec = SceneSpec("translating_dots", G32, 1_000_000, {"velocity": [10.0, 0.0], "dot_count": 1, "dot_radius": 3})
    ev, gt = generate(spec)
    assert len(ev) > 0
    ys, xs = np.mgrid[0:32, 0:32]
    for t in (0.0, 0.3, 0.99):
        u, v = gt.flow_fn(xs, ys, t)
        assert np.all(u == 10.0) and np.all(v == 0.0)


def test_circular_flow_tangential():
    w = 2 * math.pi
    spec = SceneSpec("circular_dot", CameraGeometry(48, 48), 1_000_000, {"radius": 10.0, "angular_rate": w})
    _, gt = generate(spec)
    scene = _Scene(spec)
    for t in np.linspace(0, 0.5, 7):
        u, v = gt.flow_fn(np.array([3.0]), np.array([4.0]), t)
        assert math.hypot(u[0], v[0]) == pytest.approx(w * 10.0)
        cx, cy = scene.orbit_center(t)
        assert u[0] * (cx - scene.center[0]) + v[0] * (cy - scene.center[1]) == pytest.approx(0, abs=1e-9)
        u2, v2 = gt.flow_fn(np.array([3.0]), np.array([4.0]), t + 0.5)
        assert u2[0] == pytest.approx(-u[0]) and v2[0] == pytest.approx(-v[0])


def test_same_spec_same_bytes(tmp_path):
    spec = SceneSpec("rotating_field", G32, 200_000, {"angular_rate": 2.0, "dot_count": 6}, seed=5)
    paths = []
    for i in range(2):
        ev, _ = generate(spec)
        paths.append(tmp_path / f"e{i}.csv")
        write_events(paths[-1], ev)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    other, _ = generate(SceneSpec("rotating_field", G32, 200_000, {"angular_rate": 2.0, "dot_count": 6}, seed=6))
    assert other != ev


@pytest.mark.parametrize("kind,params", [
    ("translating_dots", {"velocity": [120.0, -80.0], "dot_count": 5}),
    ("circular_dot", {"radius": 8.0, "angular_rate": 6.0, "dot_radius": 3.0}),
    ("rotating_field", {"angular_rate": 3.0, "dot_count": 5}),
])
def test_event_invariants(kind, params):
    spec = SceneSpec(kind, G32, 300_000, params, seed=1, events_per_px_crossing=2)
    ev, _ = generate(spec)
    assert len(ev) > 0
    assert ev.t_us.min() >= 0 and ev.t_us.max() < spec.duration_us
    assert ev.first_inversion() is None
    ev.check_in_frame(G32)
    assert np.array_equal(ev.x, np.round(ev.x)) and set(np.unique(ev.p)) == {0, 1}


def test_leading_edge_positive():
    spec = SceneSpec("translating_dots", G32, 500_000, {"centers": [[10.0, 16.0]], "velocity": [20.0, 0.0],
                                                         "dot_radius": 3.0})
    ev, _ = generate(spec)
    c = 10.0 + 20.0 * ev.t_us * 1e-6
    ahead = ev.x > c
    assert np.all(ev.p[ahead] == 1) and np.all(ev.p[~ahead] == 0)


def test_events_lie_on_contour():
    spec = SceneSpec("circular_dot", G32, 250_000, {"radius": 8.0, "angular_rate": 2 * math.pi, "dot_radius": 3.0})
    ev, _ = generate(spec)
    cx, cy = _Scene(spec).orbit_center(ev.t_us * 1e-6)
    r = np.hypot(ev.x - cx, ev.y - cy)
    # one microsecond of timestamp truncation moves the dot by under 0.01 px
    assert np.abs(r - 3.0).max() < 0.01


def test_out_of_frame_error():
    spec = SceneSpec("translating_dots", G32, 1_000_000, {"centers": [[100.0, 100.0]], "velocity": [5.0, 0.0]})
    with pytest.raises(ValueError, match="out of frame"):
        generate(spec)


def test_spec_validation_and_json():
    with pytest.raises(ValueError):
        SceneSpec("spiral", G32, 10)
    with pytest.raises(ValueError):
        SceneSpec("translating_dots", G32, 0)
    with pytest.raises(ValueError):
        SceneSpec("translating_dots", G32, 10, {"velocity": [float("inf"), 0.0]})
    spec = SceneSpec("circular_dot", G32, 1000, {"radius": 5.0}, seed=3, events_per_px_crossing=2)
    assert SceneSpec.from_json(spec.to_json()) == spec


def test_render_constant_velocity():
    spec = SceneSpec("translating_dots", CameraGeometry(40, 40), 100_000, {"velocity": [30.0, -20.0], "dot_count": 3})
    _, gt = generate(spec)
    seq, disp = render_gt(gt, PartitionScheme(10_000, 5), window_index=1)
    assert np.allclose(seq.as_array()[:, 0], 0.3) and np.allclose(seq.as_array()[:, 1], -0.2)
    assert np.allclose(disp.dx, 1.5) and np.allclose(disp.dy, -1.0)
    with pytest.raises(ValueError):
        render_gt(gt, PartitionScheme(10_000, 5), window_index=2)


def test_render_zero_velocity():
    spec = SceneSpec("translating_dots", G32, 100_000, {"velocity": [0.0, 0.0], "dot_count": 2})
    ev, gt = generate(spec)
    assert len(ev) == 0
    seq, disp = render_gt(gt, PartitionScheme(10_000, 4))
    assert not seq.as_array().any() and not disp.dx.any() and not disp.dy.any()


def test_circular_quarter_chord():
    w = 2 * math.pi
    spec = SceneSpec("circular_dot", CameraGeometry(48, 48), 1_000_000, {"radius": 10.0, "angular_rate": w})
    _, gt = generate(spec)
    _, disp = render_gt(gt, PartitionScheme(25_000, 10))  # 0.25 s = a quarter turn
    c = int(round((48 - 1) / 2 + 10.0))
    assert math.hypot(disp.dx[23, c], disp.dy[23, c]) == pytest.approx(10.0 * math.sqrt(2), rel=1e-12)


def test_sampled_flow_matches_analytic():
    spec = SceneSpec("rotating_field", G32, 100_000, {"angular_rate": 2.0, "dot_count": 4})
    _, gt = generate(spec)
    scheme = PartitionScheme(10_000, 4)
    seq, _ = render_gt(gt, scheme)
    ys, xs = np.mgrid[0:32, 0:32].astype(float)
    for k in range(4):
        u, v = gt.flow_fn(xs, ys, (k + 0.5) * 0.01)
        assert np.abs(seq.as_array()[k, 0] - u * 0.01).max() < 1e-6
        assert np.abs(seq.as_array()[k, 1] - v * 0.01).max() < 1e-6


def test_gt_self_consistency_linear():
    spec = SceneSpec("translating_dots", G32, 80_000, {"velocity": [40.0, 25.0], "dot_count": 4})
    _, gt = generate(spec)
    seq, disp = render_gt(gt, PartitionScheme(10_000, 8))
    rec = reconstruct_displacement(seq, 8)
    v = rec.valid & disp.valid
    assert np.abs(rec.dx - disp.dx)[v].max() < 0.1 and np.abs(rec.dy - disp.dy)[v].max() < 0.1


def test_gt_self_consistency_circular():
    # eight partitions per quarter revolution
    w = 2 * math.pi
    spec = SceneSpec("circular_dot", CameraGeometry(48, 48), 1_000_000, {"radius": 10.0, "angular_rate": w})
    _, gt = generate(spec)
    seq, disp = render_gt(gt, PartitionScheme(250_000 // 8, 8))
    rec = reconstruct_displacement(seq, 8)
    v = rec.valid & disp.valid
    err = np.hypot(rec.dx - disp.dx, rec.dy - disp.dy)[v]
    assert err.max() < 0.5


@pytest.mark.parametrize("seed", range(10))
def test_truth_beats_zero_flow(seed):
    from itercm.events import partition_stream
    from itercm.objective import LossConfig, evaluate

    rng = np.random.default_rng(100 + seed)
    a = rng.uniform(0, 2 * np.pi)
    vp = rng.uniform(0.5, 3.0) * np.array([np.cos(a), np.sin(a)])
    dt, R = 10_000, 4
    spec = SceneSpec("translating_dots", CameraGeometry(48, 48), R * dt,
                     {"velocity": (vp / (dt * 1e-6)).tolist(), "dot_count": 12, "dot_radius": 2.5}, seed=seed)
    ev, gt = generate(spec)
    scheme = PartitionScheme(dt, R)
    w = partition_stream(ev, scheme, t_end_us=R * dt).windows[0]
    G = render_gt(gt, scheme)[0].as_array()
    cfg = LossConfig(R=R)
    assert evaluate(w, G, cfg)[0].total < evaluate(w, 0 * G, cfg)[0].total
