import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itercm.events import NEG, POS, CameraGeometry, PartitionScheme
from itercm.flow import FlowMap, FlowSequence
from itercm.warping import (border_mask, kernel, splat, timestamp_image, trajectories, warp_events, warp_iterative,
                            warp_linear, write_pgm)

from . import oracles

G = CameraGeometry(16, 12)


def _random_seq(R, g=G, scale=0.7, seed=0):
    rng = np.random.default_rng(seed)
    return FlowSequence.from_array(rng.normal(0, scale, (R, 2, g.height, g.width)), PartitionScheme(1000, R))


def test_kernel_values():
    assert kernel(0.0) == 1.0
    assert kernel(0.25) == 0.75
    assert kernel(-1.5) == 0.0


def test_warp_linear_cases():
    c = FlowMap.constant(G, 2.0, -1.0)
    w = warp_linear(2.0, 3.0, 0.5, c, 0.5)
    assert (w.x_w, w.y_w) == (2.0, 3.0)
    w = warp_linear(2.0, 3.0, 0.5, c, 0.0)
    assert (w.x_w, w.y_w) == (1.0, 3.5)
    w = warp_linear(2.0, 3.0, 0.5, FlowMap.zeros(G), 7.0)
    assert (w.x_w, w.y_w) == (2.0, 3.0)


def test_warp_iterative_zero_flow():
    seq = FlowSequence.zeros(G, PartitionScheme(1000, 4))
    for t in range(5):
        w = warp_iterative(3.0, 4.0, 1.7, seq, t)
        assert (w.x_w, w.y_w, w.in_frame_throughout) == (3.0, 4.0, True)


def test_warp_iterative_hand_chain():
    a = np.zeros((2, 2, 12, 12))
    a[0, 0] = 1.0
    a[1, 1] = 1.0
    seq = FlowSequence.from_array(a, PartitionScheme(1000, 2))
    assert (warp_iterative(5.0, 5.0, 0.0, seq, 1).x_w, warp_iterative(5.0, 5.0, 0.0, seq, 1).y_w) == (6.0, 5.0)
    w = warp_iterative(5.0, 5.0, 0.0, seq, 2)
    assert (w.x_w, w.y_w) == (6.0, 6.0)


def test_warp_iterative_rejects_bad_tref():
    seq = FlowSequence.zeros(G, PartitionScheme(1000, 4))
    for t in (-1, 5, 1.5):
        with pytest.raises(ValueError):
            warp_iterative(1.0, 1.0, 0.5, seq, t)


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 3.999), st.integers(0, 4),
       st.floats(0, 15), st.floats(0, 11))
def test_constant_flow_collapse(u, v, tau, t_ref, x, y):
    seq = FlowSequence.constant(G, PartitionScheme(1000, 4), u, v)
    a = warp_iterative(x, y, tau, seq, t_ref)
    b = warp_linear(x, y, tau, seq.maps[0], t_ref)
    assert abs(a.x_w - b.x_w) < 1e-9 and abs(a.y_w - b.y_w) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 7.999), st.integers(0, 8))
def test_iterative_matches_oracle(seed, tau, t_ref):
    seq = _random_seq(8, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    x, y = float(rng.uniform(0, 15)), float(rng.uniform(0, 11))
    w = warp_iterative(x, y, tau, seq, t_ref)
    xo, yo, _ = oracles.warp_path(x, y, tau, seq.as_array().tolist(), t_ref)
    assert w.x_w == pytest.approx(xo, abs=1e-12) and w.y_w == pytest.approx(yo, abs=1e-12)
    assert w.in_frame_throughout == oracles.warp_mask(x, y, tau, seq.as_array().tolist(), t_ref)
    # the vectorised kernel agrees with the scalar reference implementation
    vx, vy, vin = warp_events([x], [y], [tau], seq, t_ref)
    assert vx[0] == pytest.approx(w.x_w, abs=1e-12) and vy[0] == pytest.approx(w.y_w, abs=1e-12)
    assert vin[0] == w.in_frame_throughout


def test_warp_composition_integer_split():
    seq = _random_seq(6, seed=4)
    x, y, tau = 7.2, 5.1, 1.4
    mid = warp_iterative(x, y, tau, seq, 4)
    two = warp_iterative(mid.x_w, mid.y_w, 4.0, seq, 6)
    direct = warp_iterative(x, y, tau, seq, 6)
    assert (two.x_w, two.y_w) == (direct.x_w, direct.y_w)
    back = warp_iterative(x, y, 4.6, seq, 2)
    rest = warp_iterative(back.x_w, back.y_w, 2.0, seq, 0)
    direct = warp_iterative(x, y, 4.6, seq, 0)
    assert (rest.x_w, rest.y_w) == (direct.x_w, direct.y_w)


def test_splat_cases():
    iwe = splat([4.0], [7.0], [POS], G)
    assert iwe.count[POS, 7, 4] == 1.0 and iwe.count.sum() == 1.0
    iwe = splat([4.5], [7.0], [POS], G)
    assert iwe.count[POS, 7, 4] == 0.5 and iwe.count[POS, 7, 5] == 0.5 and iwe.count.sum() == 1.0
    one = splat([4.3], [7.6], [NEG], G).count
    many = splat([4.3] * 5, [7.6] * 5, [NEG] * 5, G).count
    assert np.allclose(many, 5 * one)


def test_splat_mass_conservation_and_parallel():
    rng = np.random.default_rng(5)
    n = 500
    x, y = rng.uniform(-2, 17, n), rng.uniform(-2, 13, n)
    p = rng.integers(0, 2, n)
    iwe = splat(x, y, p, G)
    assert (iwe.count >= 0).all()
    full = (x >= 0) & (x <= G.width - 1) & (y >= 0) & (y <= G.height - 1)
    inner = (x >= 1) & (x <= G.width - 2) & (y >= 1) & (y <= G.height - 2)
    assert inner.sum() <= iwe.count.sum() <= n
    # events whose full support is in frame deposit exactly unit mass
    assert splat(x[full], y[full], p[full], G).count.sum() == pytest.approx(full.sum())
    ref = oracles.splat_dict(list(zip(x, y, p, np.ones(n))), G.width, G.height)
    dense = np.zeros_like(iwe.count)
    for (pp, Y, X), (a, _) in ref.items():
        dense[pp, Y, X] = a
    assert np.allclose(iwe.count, dense, atol=1e-12)
    par = splat(x, y, p, G, workers=4).count
    assert np.allclose(par, iwe.count, rtol=1e-6, atol=0)


def test_timestamp_image_cases():
    ts = timestamp_image([], [], [], [], G)
    assert not ts.T_pos.any() and not ts.T_neg.any()
    ts = timestamp_image([3.0], [2.0], [POS], [0.8], G, epsilon=1e-9)
    assert abs(ts.T_pos[2, 3] - 0.8) < 1e-8
    ts = timestamp_image([3.0, 3.0], [2.0, 2.0], [NEG, NEG], [0.2, 0.6], G)
    assert ts.T_neg[2, 3] == pytest.approx(0.4, abs=1e-8)
    with pytest.raises(ValueError):
        timestamp_image([3.0], [2.0], [POS], [0.8], G, epsilon=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_timestamp_image_bounded(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 80))
    x, y = rng.uniform(0, 15, n), rng.uniform(0, 11, n)
    p = rng.integers(0, 2, n)
    tb = rng.uniform(0, 1, n)
    eps = 1e-9
    ts = timestamp_image(x, y, p, tb, G, eps)
    mass = splat(x, y, p, G).count
    for pol, T in ((POS, ts.T_pos), (NEG, ts.T_neg)):
        sel = p == pol
        if not sel.any():
            continue
        m = mass[pol] > 10 * eps
        delta = 1e-6
        assert (T[m] >= tb[sel].min() - delta).all() and (T[m] <= tb[sel].max() + delta).all()
        assert (T >= 0).all() and (T <= 1).all()


def test_border_mask_cases():
    seq = FlowSequence.zeros(G, PartitionScheme(1000, 2))
    ws = [warp_iterative(x, 3.0, 0.5, seq, 2) for x in (0.0, 5.0, 15.0)]
    assert border_mask(ws).all()
    seq = FlowSequence.constant(G, PartitionScheme(1000, 2), -5.0, 0.0)
    w = warp_iterative(0.0, 3.0, 0.0, seq, 1)
    assert not border_mask([w])[0]


def test_mask_matches_brute_force():
    R = 6
    seq = _random_seq(R, scale=2.5, seed=9)
    F = seq.as_array()
    Fl = F.tolist()
    rng = np.random.default_rng(9)
    n = 300
    x, y = rng.integers(0, 16, n).astype(float), rng.integers(0, 12, n).astype(float)
    tau = np.sort(rng.uniform(0, R, n))
    for iterative in (True, False):
        _, inside = trajectories(x, y, tau, F, iterative)
        ref = np.array([[oracles.warp_mask(x[i], y[i], tau[i], Fl, b, iterative) for b in range(R + 1)]
                        for i in range(n)])
        assert np.array_equal(inside, ref)
    assert 0.1 < ref.mean() < 0.9


def test_write_pgm(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    write_pgm(tmp_path / "a.pgm", img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n2 2\n65535\n")
    px = np.frombuffer(data[-8:], dtype=">u2")
    assert list(px) == [0, 16384, 32768, 65535]
