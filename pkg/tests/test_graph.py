import math

import numpy as np
import pytest

from shotfusion.autodiff import ContractError, Tensor, gradient_report, reduce_sum
from shotfusion.graph import (
    GRU,
    LSTM,
    NUM_LANDMARKS,
    FacialGraph,
    GATLayer,
    GeometryError,
    LandmarkBranch,
    LandmarkEncoder,
    LandmarkFrame,
    LandmarkShot,
    build_facial_graph,
    compute_ear,
    compute_mar,
    frame_embed,
    gat_attend,
    gat_layer,
    gru_cell,
    gru_forward,
    lstm_cell,
    lstm_forward,
    node_features,
    normalize_coords,
    shot_pool,
)
from shotfusion.data.synth import template_face

TOL = 1e-6


def weighted_sum(out, seed=0):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return reduce_sum(out * Tensor(w))


def assert_grads(loss_fn, params, **kw):
    report = gradient_report(loss_fn, params, **kw)
    assert max(report.values()) < TOL, report


# -- graph ----------------------------------------------------------------------------

def test_facial_graph_structure():
    g = build_facial_graph()
    assert g.node_count == NUM_LANDMARKS
    assert g.is_symmetric() and g.is_connected()
    assert set(g.neighbors(0, include_self=False)) == {1}
    assert set(g.neighbors(3, include_self=False)) == {2, 4, 48}
    assert all(len(g.neighbors(i)) >= 2 for i in range(NUM_LANDMARKS))
    assert all(i in g.neighbors(i) for i in range(NUM_LANDMARKS))


def test_padded_table_closes_loops():
    g = build_facial_graph()
    nbr, valid, rev = g.padded
    for i in range(g.node_count):
        assert sorted(nbr[i][valid[i]]) == sorted(g.adjacency[i])
        for k in np.flatnonzero(valid[i]):
            assert nbr[nbr[i, k], rev[i, k]] == i


def test_edges_out_of_range():
    with pytest.raises(ValueError):
        FacialGraph.from_edges(3, [(0, 3)])


# -- geometry -----------------------------------------------------------------------

def test_normalize_idempotent_and_invariant(rng):
    face = template_face() + rng.normal(0, 0.01, (68, 2))
    n = normalize_coords(face)
    assert np.allclose(normalize_coords(n), n, rtol=0, atol=1e-12)
    assert np.allclose(normalize_coords(face + [5.0, -3.0]), n, rtol=0, atol=1e-12)
    assert np.allclose(normalize_coords(2.0 * face), n, rtol=0, atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(GeometryError):
        normalize_coords(np.ones((68, 2)))


def hexagon_frame():
    pts = template_face()
    ang = np.radians([180, 120, 60, 0, -60, -120])
    pts[36:42] = np.stack([np.cos(ang), np.sin(ang)], -1)
    return pts


def test_ear_regular_hexagon():
    # vertical chords are sqrt(3) each, horizontal span 2
    assert compute_ear(hexagon_frame()) == pytest.approx(math.sqrt(3) / 2, abs=1e-15)


def test_ear_homogeneous_in_vertical_scale():
    pts = hexagon_frame()
    squashed = pts.copy()
    squashed[36:42, 1] *= 0.25
    assert compute_ear(squashed) == pytest.approx(0.25 * compute_ear(pts), rel=1e-14)


def test_ear_collinear_is_zero_and_degenerate_raises():
    pts = hexagon_frame()
    pts[36:42, 1] = 0.0
    assert compute_ear(pts) == 0.0
    pts[36:42] = 0.0
    with pytest.raises(GeometryError):
        compute_ear(pts)


def test_mar_and_batching():
    face = template_face()
    batch = np.stack([face, face])
    assert compute_mar(batch).shape == (2,)
    assert compute_mar(face) > 0


def test_containers_validate():
    with pytest.raises(ValueError):
        LandmarkFrame(np.zeros((67, 2)))
    with pytest.raises(GeometryError):
        LandmarkFrame(np.full((68, 2), np.nan))
    with pytest.raises(ContractError):
        LandmarkShot.from_frames([LandmarkFrame(template_face(), valid=False)])
    shot = LandmarkShot.from_frames([LandmarkFrame(template_face()), LandmarkFrame(template_face(), False)])
    assert len(shot) == 1


# -- GAT ---------------------------------------------------------------------------------

def eight_node_subgraph():
    # right eye cycle plus two brow points bridged to it
    return build_facial_graph().subgraph([17, 18, 36, 37, 38, 39, 40, 41])


def test_attention_rows_sum_to_one(rng):
    g = build_facial_graph()
    layer = GATLayer(4, 8, 2, rng)
    _, att = gat_layer(Tensor(rng.normal(size=(3, 68, 4))), g, layer, return_attention=True)
    assert att.shape == (3, 2, 68, 68)
    assert np.max(np.abs(att.sum(axis=-1) - 1.0)) < 1e-12
    assert np.all(att[..., ~g.mask] == 0)


def test_gat_permutation_equivariance(rng):
    g = eight_node_subgraph()
    assert g.is_connected()
    layer = GATLayer(3, 6, 3, rng)
    x = rng.normal(size=(8, 3))
    perm = rng.permutation(8)
    xp = np.empty_like(x)
    xp[perm] = x
    out = gat_layer(Tensor(x), g, layer).data
    outp = gat_layer(Tensor(xp), g.permuted(perm), layer).data
    assert np.max(np.abs(outp[perm] - out)) < 1e-10


def test_gat_isolated_node_attends_to_itself(rng):
    g = FacialGraph.from_edges(3, [(0, 1)])
    layer = GATLayer(2, 2, 1, rng, act="relu")
    x = rng.normal(size=(3, 2))
    out, att = gat_layer(Tensor(x), g, layer, return_attention=True)
    assert att[0, 2, 2] == 1.0
    expected = np.maximum(layer.W.data[0] @ x[2], 0)
    assert np.allclose(out.data[2], expected, rtol=0, atol=1e-15)


def test_gat_attend_grads(rng):
    g = eight_node_subgraph()
    Wh = Tensor(rng.normal(size=(2, 2, 8, 3)), requires_grad=True)
    sr = Tensor(rng.normal(size=(2, 2, 8)), requires_grad=True)
    sn = Tensor(rng.normal(size=(2, 2, 8)), requires_grad=True)
    assert_grads(lambda: weighted_sum(gat_attend(Wh, sr, sn, g, 0.2)[0]), {"Wh": Wh, "sr": sr, "sn": sn})


def test_gat_layer_grads(rng):
    g = eight_node_subgraph()
    layer = GATLayer(3, 4, 2, rng)
    x = Tensor(rng.normal(size=(2, 8, 3)), requires_grad=True)
    assert_grads(lambda: weighted_sum(gat_layer(x, g, layer)), {"x": x, **layer.parameters()})


def test_frame_embed_shape_and_coord_grads(rng):
    g = build_facial_graph()
    enc = LandmarkEncoder(4, (6, 6), 2, rng)
    coords = Tensor(normalize_coords(template_face() + rng.normal(0, 0.02, (3, 68, 2))), requires_grad=True)
    z = frame_embed(node_features(coords), g, enc)
    assert z.shape == (3, enc.embed_dim)
    assert_grads(lambda: weighted_sum(frame_embed(node_features(coords), g, enc)), {"coords": coords},
                 max_elements=40)


def test_shot_pool_is_frame_mean(rng):
    z = rng.normal(size=(5, 4))
    assert np.allclose(shot_pool(Tensor(z)).data, z.mean(axis=0), rtol=0, atol=1e-15)
    with pytest.raises(ContractError):
        shot_pool(Tensor(np.zeros((0, 4))))


# -- recurrent cells -------------------------------------------------------------------

def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_lstm(xs, wi, wh, b):
    """Hand-rolled hidden-size-1 LSTM with gate order (i, f, g, o)."""
    h = c = 0.0
    hs = []
    for x in xs:
        pre = [wi[k] * x + wh[k] * h + b[k] for k in range(4)]
        i, f, g, o = sig(pre[0]), sig(pre[1]), math.tanh(pre[2]), sig(pre[3])
        c = f * c + i * g
        h = o * math.tanh(c)
        hs.append(h)
    return hs


def scalar_gru(xs, wi, wh, bi, bh, h=0.0):
    for x in xs:
        r = sig(wi[0] * x + bi[0] + wh[0] * h + bh[0])
        z = sig(wi[1] * x + bi[1] + wh[1] * h + bh[1])
        n = math.tanh(wi[2] * x + bi[2] + r * (wh[2] * h + bh[2]))
        h = (1 - z) * n + z * h
    return h


def test_lstm_scalar_recurrence(rng):
    p = LSTM(1, 1, rng)
    p.bias.data[...] = rng.normal(size=4)
    xs = rng.normal(size=5)
    got = [float(h.data[0]) for h in lstm_forward([Tensor([x]) for x in xs], p)]
    ref = scalar_lstm(xs, p.weight_ih.data[:, 0], p.weight_hh.data[:, 0], p.bias.data)
    assert np.max(np.abs(np.array(got) - ref)) < 1e-10


def test_gru_scalar_recurrence(rng):
    p = GRU(1, 1, rng)
    p.bias_ih.data[...] = rng.normal(size=3)
    p.bias_hh.data[...] = rng.normal(size=3)
    xs = rng.normal(size=5)
    got = float(gru_forward([Tensor([x]) for x in xs], p).data[0])
    ref = scalar_gru(xs, p.weight_ih.data[:, 0], p.weight_hh.data[:, 0], p.bias_ih.data, p.bias_hh.data)
    assert abs(got - ref) < 1e-10


def test_zero_weights_give_zero_states(rng):
    p = LSTM(3, 2, rng)
    q = GRU(2, 2, rng)
    for t in list(p.parameters().values()) + list(q.parameters().values()):
        t.data[...] = 0
    hs = lstm_forward([Tensor(np.zeros(3))] * 3, p)
    assert all(np.all(h.data == 0) for h in hs)
    assert np.all(gru_forward(hs, q).data == 0)


def test_single_step_equals_cell(rng):
    p = LSTM(3, 2, rng)
    x = Tensor(rng.normal(size=3))
    z = Tensor(np.zeros(2))
    assert np.array_equal(lstm_forward([x], p)[0].data, lstm_cell(x, z, z, p)[0].data)


def test_gru_update_gate_saturated_keeps_state(rng):
    q = GRU(2, 2, rng)
    q.bias_ih.data[2:4] = 1e3
    h0 = Tensor(np.array([0.3, -0.7]))
    out = gru_forward([Tensor(rng.normal(size=2)) for _ in range(4)], q, h0)
    assert np.array_equal(out.data, h0.data)


def test_recurrent_grads(rng):
    p = LSTM(3, 2, rng)
    q = GRU(2, 2, rng)
    p.bias.data[...] = rng.normal(size=8)
    q.bias_hh.data[...] = rng.normal(size=6)
    xs = [Tensor(rng.normal(size=(2, 3)), requires_grad=True) for _ in range(3)]
    params = {**{f"x{i}": x for i, x in enumerate(xs)},
              **{f"lstm.{k}": v for k, v in p.parameters().items()},
              **{f"gru.{k}": v for k, v in q.parameters().items()}}
    assert_grads(lambda: weighted_sum(gru_forward(lstm_forward(xs, p), q)), params)


def test_gru_cell_matches_forward(rng):
    q = GRU(2, 3, rng)
    x, h = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=3))
    assert np.array_equal(gru_cell(x, h, q).data, gru_forward([x], q, h).data)


def test_empty_sequences_rejected(rng):
    with pytest.raises(ContractError):
        lstm_forward([], LSTM(1, 1, rng))
    with pytest.raises(ContractError):
        gru_forward([], GRU(1, 1, rng))


# -- branch ------------------------------------------------------------------------------

def branch_inputs(rng, shots=2, frames=3):
    return [normalize_coords(template_face() + rng.normal(0, 0.02, (frames, 68, 2))) for _ in range(shots)]


def test_branch_output_shape_and_ragged_batch(rng):
    br = LandmarkBranch(8, (6,), 2, rng, center_shot=True, feature_scale=10.0)
    a, b = branch_inputs(rng, 2), branch_inputs(rng, 3)
    out = br([a, b]).data
    assert out.shape == (2, 8)
    assert np.allclose(out[0], br([a]).data[0], rtol=0, atol=1e-12)
    assert np.allclose(out[1], br([b]).data[0], rtol=0, atol=1e-12)


def test_branch_centering_ignores_static_offset(rng):
    br = LandmarkBranch(8, (6,), 2, rng, center_shot=True)
    shots = branch_inputs(rng)
    moved = [s + np.array([0.3, -0.2]) for s in shots]
    assert np.allclose(br([shots]).data, br([moved]).data, rtol=0, atol=1e-12)


def test_branch_grads(rng):
    br = LandmarkBranch(4, (4,), 2, rng, center_shot=True, feature_scale=10.0)
    for t in br.parameters().values():
        t.data[...] += rng.normal(0, 0.05, t.shape)
    shots = [Tensor(s, requires_grad=True) for s in branch_inputs(rng, 2, 2)]
    params = {"shot0": shots[0], **br.parameters()}
    assert_grads(lambda: weighted_sum(br([shots])), params, max_elements=24)
