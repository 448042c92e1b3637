import numpy as np
import pytest

from conftest import random_flows
from tcnet import tensor as T
from tcnet.gradcheck import check_parameters
from tcnet.tensor import ShapeError, Tensor
from tcnet.trajectory import (
    TrajectoryModule,
    attend,
    build_location_map,
    encode_location_map,
    gather_trajectory_features,
    init_trajectory_params,
    make_plan,
    normalize_coords,
    quantize_flow,
    trace_batch,
    trajectory_attention,
    trajectory_module_forward,
    window_horizons,
)


def oracle_trace(flows, x, y):
    """Scalar per-pixel recursion: coord_j = coord_{j-1} + flow_j(coord_{j-1})."""
    h, w = flows[0].shape[:2] if flows else (None, None)
    path = [(x, y)]
    for f in flows:
        dx, dy = f[y, x]
        x = min(max(x + dx, 0), w - 1)
        y = min(max(y + dy, 0), h - 1)
        path.append((x, y))
    return path


def fig3_flows():
    """Region now at (3, 4) came from (2, 4), before that (3, 4), then (1, 3)."""
    flows = [np.zeros((8, 8, 2), dtype=np.int64) for _ in range(3)]
    flows[0][4, 3] = (-1, 0)
    flows[1][4, 2] = (1, 0)
    flows[2][4, 3] = (-2, -1)
    return flows


# -- quantize_flow -------------------------------------------------------------


def test_quantize_rounds_to_nearest():
    raw = np.full((3, 3, 2), 0.4)
    assert np.array_equal(quantize_flow(raw), np.zeros((3, 3, 2)))


def test_quantize_ties_away_from_zero():
    raw = np.zeros((5, 5, 2))
    raw[2, 2] = (1.5, -1.5)
    q = quantize_flow(raw)
    assert tuple(q[2, 2]) == (2, -2)


def test_quantize_clamps_into_frame():
    raw = np.zeros((4, 4, 2))
    raw[0, 0] = (-3, -3)
    raw[3, 3] = (5, 0)
    q = quantize_flow(raw)
    assert tuple(q[0, 0]) == (0, 0)
    assert tuple(q[3, 3]) == (0, 0)


def test_quantize_rejects_extent_mismatch():
    with pytest.raises(ShapeError):
        quantize_flow(np.zeros((4, 4, 2)), width=5, height=4)


# -- build_location_map --------------------------------------------------------


def test_fig3_trace():
    loc = build_location_map(fig3_flows())
    assert [tuple(c) for c in loc.coords[4, 3]] == [(3, 4), (2, 4), (3, 4), (1, 3)]


def test_zero_flows_repeat_own_coordinate():
    loc = build_location_map([np.zeros((5, 6, 2), dtype=int)] * 3)
    ys, xs = np.mgrid[0:5, 0:6]
    for j in range(4):
        assert np.array_equal(loc.coords[:, :, j, 0], xs)
        assert np.array_equal(loc.coords[:, :, j, 1], ys)


def test_empty_flow_list_needs_shape():
    loc = build_location_map([], shape=(3, 4))
    assert loc.coords.shape == (3, 4, 1, 2)
    with pytest.raises(ValueError):
        build_location_map([])


def test_inconsistent_extents_rejected():
    with pytest.raises(ShapeError):
        build_location_map([np.zeros((4, 4, 2), int), np.zeros((4, 5, 2), int)])


def test_location_map_matches_recursive_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 13))
        flows = random_flows(rng, n - 1, 8, 8)
        loc = build_location_map(flows, (8, 8))
        for y in range(8):
            for x in range(8):
                assert [tuple(c) for c in loc.coords[y, x]] == oracle_trace(flows, x, y)


def test_location_map_channels_alternate_x_y():
    loc = build_location_map(fig3_flows())
    assert list(loc.channels()[4, 3]) == [3, 4, 2, 4, 3, 4, 1, 3]


def test_tracing_is_translation_equivariant(rng):
    flows = [np.zeros((12, 12, 2), dtype=np.int64) for _ in range(3)]
    for f in flows:
        f[2:6, 2:6] = rng.integers(-1, 2, size=(4, 4, 2))
    moved = [np.roll(np.roll(f, 3, axis=0), 2, axis=1) for f in flows]
    a = build_location_map(flows).coords[2:6, 2:6]
    b = build_location_map(moved).coords[5:9, 4:8]
    assert np.array_equal(b - a, np.broadcast_to([2, 3], a.shape))


# -- encoding ------------------------------------------------------------------


def test_normalize_coords_corners():
    c = np.array([[[0, 0]], [[7, 3]]])  # two pixels, one step each
    out = normalize_coords(c, height=4, width=8)
    assert np.array_equal(out, [[-1.0, -1.0], [1.0, 1.0]])


def test_encoder_with_zero_weights_is_bias(rng):
    p = init_trajectory_params(rng, 16, 12)
    for key in ("enc_w1", "enc_w2"):
        p[key] = Tensor(np.zeros(p[key].shape))
    p["enc_b2"] = Tensor(np.arange(16.0))
    loc = build_location_map(random_flows(rng, 11, 8, 8))
    e = encode_location_map(loc.coords, p, 8, 8)
    assert e.shape == (8, 8, 16)
    assert np.array_equal(e.data, np.broadcast_to(np.arange(16.0), (8, 8, 16)))


def test_encoder_gradient(rng):
    p = init_trajectory_params(rng, 8, 4)
    loc = build_location_map(random_flows(rng, 3, 5, 5))
    enc = {k: p[k] for k in ("enc_w1", "enc_b1", "enc_w2", "enc_b2")}
    # a plain sum makes the first-layer gradient a sum of normalized coordinates
    # over a symmetric grid, which is exactly zero; weight the outputs instead
    w = Tensor(rng.normal(size=(5, 5, 8)))
    errors = check_parameters(lambda: T.tsum(T.mul(encode_location_map(loc.coords, enc, 5, 5), w)), enc)
    assert max(errors.values()) < 1e-5


def test_encoder_rejects_wrong_horizon(rng):
    p = init_trajectory_params(rng, 8, 4)
    loc = build_location_map(random_flows(rng, 5, 5, 5))
    with pytest.raises(ShapeError):
        encode_location_map(loc.coords, p, 5, 5)


# -- gathering -----------------------------------------------------------------


def test_zero_flow_gather_is_temporal_stack(rng):
    frames = rng.normal(size=(4, 5, 5, 3))
    loc = build_location_map([np.zeros((5, 5, 2), int)] * 3)
    tok = gather_trajectory_features(Tensor(frames), loc).data
    assert np.array_equal(tok, frames.transpose(1, 2, 0, 3))


def test_fig3_gather(rng):
    frames = rng.normal(size=(4, 8, 8, 2))
    tok = gather_trajectory_features(Tensor(frames), build_location_map(fig3_flows())).data
    expected = [frames[0, 4, 3], frames[1, 4, 2], frames[2, 4, 3], frames[3, 3, 1]]
    assert np.array_equal(tok[4, 3], np.stack(expected))


def test_gather_matches_per_pixel_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 13))
        frames = rng.normal(size=(n, 8, 8, 3))
        flows = random_flows(rng, n - 1, 8, 8)
        tok = gather_trajectory_features(Tensor(frames), build_location_map(flows, (8, 8))).data
        for y in range(8):
            for x in range(8):
                for j, (cx, cy) in enumerate(oracle_trace(flows, x, y)):
                    assert np.array_equal(tok[y, x, j], frames[j, cy, cx])


def test_gather_backward_accumulates_on_collisions():
    flows = [np.zeros((1, 3, 2), dtype=np.int64)]
    flows[0][0, 0] = (1, 0)
    flows[0][0, 2] = (-1, 0)  # all three pixels trace into x=1 of the older frame
    frames = Tensor(np.zeros((2, 1, 3, 1)), requires_grad=True)
    with T.Tape() as tape:
        out = T.tsum(gather_trajectory_features(frames, build_location_map(flows)))
    tape.backward(out)
    assert np.array_equal(frames.grad[1, 0, :, 0], [0.0, 3.0, 0.0])
    assert np.array_equal(frames.grad[0, 0, :, 0], [1.0, 1.0, 1.0])


def test_rigid_motion_cancels_after_gather(rng):
    """A pattern moving by integer flow yields the same tokens as a static one."""
    n, h, w = 4, 10, 10
    pattern = rng.normal(size=(4, 4, 2))
    moving = np.zeros((n, h, w, 2))
    static = np.zeros((n, h, w, 2))
    flows = []
    for j in range(n):  # frame j is j steps older; the pattern moved +1 in x per step
        moving[j, 3:7, 5 - j : 9 - j] = pattern
        static[j, 3:7, 5:9] = pattern
    for j in range(n - 1):
        f = np.zeros((h, w, 2), dtype=np.int64)
        f[3:7, 5 - j : 9 - j, 0] = -1
        flows.append(f)
    tok_moving = gather_trajectory_features(Tensor(moving), build_location_map(flows)).data
    tok_static = gather_trajectory_features(Tensor(static), build_location_map([np.zeros((h, w, 2), int)] * (n - 1))).data
    assert np.array_equal(tok_moving[3:7, 5:9], tok_static[3:7, 5:9])


# -- attention -----------------------------------------------------------------


def dense_attention_oracle(tokens, p, heads):
    h, w, n, c = tokens.shape
    dh = c // heads
    out = np.zeros((h, w, c))
    for y in range(h):
        for x in range(w):
            tok = tokens[y, x]
            q = tok[0] @ p["wq"].data + p["bq"].data
            k = tok @ p["wk"].data
            v = tok @ p["wv"].data + p["bv"].data
            cat = []
            for hd in range(heads):
                s = slice(hd * dh, (hd + 1) * dh)
                logits = np.array([q[s] @ k[j, s] for j in range(n)]) / np.sqrt(dh)
                e = np.exp(logits - logits.max())
                cat.append((e / e.sum()) @ v[:, s])
            out[y, x] = np.concatenate(cat) @ p["wo"].data + p["bo"].data
    return out


def test_attention_matches_dense_oracle(rng):
    p = init_trajectory_params(rng, 8, 4)
    tokens = rng.normal(size=(4, 4, 4, 8))
    ta, weights = trajectory_attention(Tensor(tokens), p, heads=2)
    ref = dense_attention_oracle(tokens, p, 2)
    assert np.max(np.abs(ta.data - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-10
    assert weights.shape == (4, 4, 2, 4)
    assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_single_token_attention_is_value_projection(rng):
    p = init_trajectory_params(rng, 8, 1)
    tokens = rng.normal(size=(3, 3, 1, 8))
    ta, _ = trajectory_attention(Tensor(tokens), p, heads=2)
    ref = (tokens[:, :, 0] @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    assert np.allclose(ta.data, ref, rtol=0, atol=1e-12)


def test_identical_tokens_equal_single_token(rng):
    p = init_trajectory_params(rng, 8, 5)
    one = rng.normal(size=(3, 3, 1, 8))
    many = np.repeat(one, 5, axis=2)
    a = trajectory_attention(Tensor(one), p, 2)[0].data
    b = trajectory_attention(Tensor(many), p, 2)[0].data
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_heads_must_divide_channels(rng):
    p = init_trajectory_params(rng, 8, 2)
    with pytest.raises(ShapeError):
        trajectory_attention(Tensor(rng.normal(size=(2, 2, 2, 8))), p, heads=3)


def test_attend_respects_validity_mask(rng):
    q = Tensor(rng.normal(size=(3, 4)))
    k = Tensor(rng.normal(size=(3, 5, 4)))
    v = Tensor(rng.normal(size=(3, 5, 4)))
    valid = np.zeros((3, 5), bool)
    valid[:, :2] = True
    full, _ = attend(q, Tensor(k.data[:, :2]), Tensor(v.data[:, :2]), None, 2)
    masked, weights = attend(q, k, v, valid, 2)
    assert np.allclose(full.data, masked.data, rtol=0, atol=1e-14)
    assert np.all(weights[:, :, 2:] == 0.0)


# -- module --------------------------------------------------------------------


def test_module_single_frame_reduces_to_ta(rng):
    c = 8
    p = init_trajectory_params(rng, c, 1)
    for key in ("enc_w1", "enc_b1", "enc_w2", "enc_b2"):
        p[key] = Tensor(np.zeros(p[key].shape))
    p["out_w"] = Tensor(np.eye(c).reshape(1, 1, c, c))
    p["out_b"] = Tensor(np.zeros(c))
    frames = Tensor(rng.normal(size=(1, 4, 4, c)))
    out = trajectory_module_forward(frames, [], p, heads=2)
    ta, _ = trajectory_attention(T.reshape(frames, (4, 4, 1, c)), p, 2)
    assert np.array_equal(out.data, ta.data)


def test_module_zero_flow_is_temporal_attention(rng):
    c, n = 8, 3
    p = init_trajectory_params(rng, c, n)
    frames = rng.normal(size=(n, 4, 4, c))
    out = trajectory_module_forward(Tensor(frames), [np.zeros((4, 4, 2), int)] * (n - 1), p, 2)
    ta = dense_attention_oracle(frames.transpose(1, 2, 0, 3), p, 2)
    loc = build_location_map([np.zeros((4, 4, 2), int)] * (n - 1))
    enc = encode_location_map(loc.coords, p, 4, 4).data
    ref = (ta + enc) @ p["out_w"].data[0, 0] + p["out_b"].data
    assert np.allclose(out.data, ref, rtol=0, atol=1e-10)


def test_module_shape_and_gradient(rng):
    c, n = 4, 3
    p = init_trajectory_params(rng, c, n)
    frames = Tensor(rng.normal(size=(n, 4, 4, c)), requires_grad=True)
    flows = random_flows(rng, n - 1, 4, 4, reach=1)
    w = Tensor(rng.normal(size=(4, 4, c)))
    assert trajectory_module_forward(frames, flows, p, 2).shape == (4, 4, c)
    params = dict(p, frames=frames)
    errors = check_parameters(lambda: T.tsum(T.mul(trajectory_module_forward(frames, flows, p, 2), w)), params)
    assert max(errors.values()) < 1e-4


def test_module_rejects_wrong_flow_count(rng):
    p = init_trajectory_params(rng, 4, 3)
    with pytest.raises(ShapeError):
        trajectory_module_forward(Tensor(rng.normal(size=(3, 4, 4, 4))), [np.zeros((4, 4, 2), int)], p, 2)


# -- batched plan --------------------------------------------------------------


def test_window_horizons():
    assert list(window_horizons([5, 3], 3)) == [1, 2, 3, 3, 3, 1, 2, 3]


def test_trace_batch_matches_location_map(rng):
    lengths = [6, 5]
    flows = np.zeros((11, 6, 6, 2), dtype=np.int64)
    for f in range(11):
        if f not in (0, 6):
            flows[f] = random_flows(rng, 1, 6, 6)[0]
    n = 4
    horizons = window_horizons(lengths, n)
    ys, xs = np.mgrid[0:6, 0:6]
    start = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    traced = trace_batch(flows, horizons, n, start).reshape(11, 6, 6, n, 2)
    for f in range(11):
        hz = horizons[f]
        loc = build_location_map([flows[f - j] for j in range(hz - 1)], (6, 6))
        assert np.array_equal(traced[f, :, :, :hz], loc.coords)
        # steps past the horizon repeat the last traced coordinate
        assert np.array_equal(traced[f, :, :, hz:], np.repeat(loc.coords[:, :, -1:], n - hz, axis=2))


def test_plan_sample_mode_follows_coarse_cells():
    flows = np.zeros((3, 8, 8, 2), dtype=np.int64)
    flows[1:, :, :, 0] = -2  # everything moved right by 2 px per frame
    plan = make_plan(flows, [3], n=3, factor=4, mode="sample")
    # the cell whose centre is x=6 traces back to x=4 then x=2: cells 1, 1, 0
    assert list(plan.coords[2, 0, 1, :, 0]) == [1, 1, 0]
    assert list(plan.src_frame[2]) == [2, 1, 0]
    assert np.array_equal(plan.valid, np.tril(np.ones((3, 3), bool)))


def test_plan_pool_mode_loses_sub_cell_motion():
    flows = np.zeros((3, 8, 8, 2), dtype=np.int64)
    flows[1:, :, :, 0] = -1
    plan = make_plan(flows, [3], n=3, factor=4, mode="pool")
    assert np.all(plan.coords[2, :, :, :, 0] == np.arange(2)[None, :, None])


def test_plan_rejects_bad_mode_and_lengths():
    flows = np.zeros((3, 8, 8, 2), dtype=np.int64)
    with pytest.raises(ValueError):
        make_plan(flows, [3], 2, 2, mode="bilinear")
    with pytest.raises(ShapeError):
        make_plan(flows, [4], 2, 2)


def test_batched_module_matches_single_subsequence(rng):
    """Batched module output for a frame with a full window equals the
    single-subsequence forward on that window."""
    c, n = 4, 3
    mod = TrajectoryModule(c, n, 2, rng)
    frames = rng.normal(size=(3, 4, 4, c))
    flows = np.zeros((3, 4, 4, 2), dtype=np.int64)
    flows[1:] = np.stack(random_flows(rng, 2, 4, 4, reach=1))
    plan = make_plan(flows, [3], n, 1)
    out, weights = mod(Tensor(frames), plan, keep_weights=True)
    single = trajectory_module_forward(Tensor(frames[::-1].copy()), [flows[2], flows[1]], mod.params, 2)
    assert np.allclose(out.data[2], single.data, rtol=0, atol=1e-12)
    assert weights.shape == (3, 4, 4, 2, n)
    assert np.all(weights[0, :, :, :, 1:] == 0.0)  # first frame sees only itself
