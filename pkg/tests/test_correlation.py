import numpy as np
import pytest

from conftest import draw_smooth_point
from tcnet import tensor as T
from tcnet.correlation import (
    CorrelationModule,
    affinity,
    correlation_module_forward,
    gate_forward,
    gate_l1,
    init_correlation_params,
    init_gate_params,
    partition_regions,
    project_qkv,
    semhash,
    sparse_attention,
)
from tcnet.gradcheck import check_parameters
from tcnet.optim import Adam
from tcnet.tensor import ShapeError, Tape, Tensor, sat_sigmoid_np


def open_gate(params, bias=1.0):
    """Zero gate kernels with a positive output bias: the hard gate is all ones."""
    p = dict(params)
    for key in ("gate_w1", "gate_w2"):
        p[key] = Tensor(np.zeros(params[key].shape))
    p["gate_b2"] = Tensor(np.full(1, bias))
    return p


def dense_region_attention(x, params, heads):
    """Plain multi-head self-attention over all h*w tokens of one frame."""
    h, w, c = x.shape
    dh = c // heads
    tok = x.reshape(-1, c)
    q = tok @ params["wq"].data + params["bq"].data
    k = tok @ params["wk"].data + params["bk"].data
    v = tok @ params["wv"].data + params["bv"].data
    out = np.zeros_like(tok)
    for hd in range(heads):
        s = slice(hd * dh, (hd + 1) * dh)
        logits = q[:, s] @ k[:, s].T / np.sqrt(dh)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[:, s] = (e / e.sum(axis=1, keepdims=True)) @ v[:, s]
    return (out @ params["wo"].data + params["bo"].data).reshape(h, w, c)


# -- partition -----------------------------------------------------------------


def test_partition_4x4_window_2():
    x = np.arange(16.0).reshape(4, 4, 1)
    part = partition_regions(Tensor(x), 2)
    assert part.regions == 4
    assert part.tokens.data[..., 0].tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]


def test_partition_single_region(rng):
    x = rng.normal(size=(4, 4, 3))
    part = partition_regions(Tensor(x), 4)
    assert part.regions == 1
    assert np.array_equal(part.tokens.data[0], x.reshape(16, 3))


def test_partition_rejects_non_divisible():
    with pytest.raises(ShapeError):
        partition_regions(Tensor(np.zeros((5, 5, 1))), 2)


def test_departition_is_exact_inverse(rng):
    x = rng.normal(size=(2, 6, 4, 3))
    part = partition_regions(Tensor(x), 2)
    assert np.array_equal(part.departition().data, x)


# -- projections and affinity --------------------------------------------------


def test_identity_and_zero_projections(rng):
    part = partition_regions(Tensor(rng.normal(size=(4, 4, 3))), 2)
    eye = {k: Tensor(np.eye(3)) for k in ("wq", "wk", "wv")}
    qkv = project_qkv(part, eye)
    for t in (qkv.q, qkv.k, qkv.v):
        assert np.array_equal(t.data, part.tokens.data)
    zero = {k: Tensor(np.zeros((3, 3))) for k in ("wq", "wk", "wv")}
    assert not project_qkv(part, zero).q.data.any()


def test_projection_commutes_with_partition(rng):
    x = rng.normal(size=(4, 6, 3))
    w = {k: Tensor(rng.normal(size=(3, 3))) for k in ("wq", "wk", "wv")}
    a = project_qkv(partition_regions(Tensor(x), 2), w).k.data
    b = partition_regions(Tensor(x @ w["wk"].data), 2).tokens.data
    assert np.array_equal(a, b)


def test_projection_depth_mismatch(rng):
    part = partition_regions(Tensor(rng.normal(size=(4, 4, 3))), 2)
    with pytest.raises(ShapeError):
        project_qkv(part, {k: Tensor(np.eye(4)) for k in ("wq", "wk", "wv")})


def test_affinity_of_equal_tokens():
    u = np.array([1.0, 2.0, -1.0])
    t = Tensor(np.broadcast_to(u, (4, 4, 3)).copy())
    part = partition_regions(t, 2)
    a = affinity(part.tokens, part.tokens).data
    assert a.shape == (4, 4, 16)
    assert np.all(a == u @ u)


def test_affinity_of_one_hot_tokens_is_incidence():
    x = np.eye(16).reshape(4, 4, 16)
    part = partition_regions(Tensor(x), 2)
    a = affinity(part.tokens, part.tokens).data
    # query i of region r is global token r*4+i in region order
    assert np.array_equal(a.reshape(16, 16), np.eye(16))


def test_affinity_vs_double_loop(rng):
    q = rng.normal(size=(4, 4, 5))
    k = rng.normal(size=(4, 4, 5))
    a = affinity(Tensor(q), Tensor(k)).data
    for r in range(4):
        for i in range(4):
            for s in range(4):
                for j in range(4):
                    ref = sum(q[r, i, c] * k[s, j, c] for c in range(5))
                    assert abs(a[r, i, s * 4 + j] - ref) <= 1e-12 * max(abs(ref), 1e-300)


def test_affinity_depth_mismatch(rng):
    with pytest.raises(ShapeError):
        affinity(Tensor(rng.normal(size=(4, 4, 5))), Tensor(rng.normal(size=(4, 4, 4))))


def test_region_permutation_permutes_column_blocks(rng):
    q = rng.normal(size=(4, 4, 3))
    k = rng.normal(size=(4, 4, 3))
    perm = np.array([2, 0, 3, 1])
    a = affinity(Tensor(q), Tensor(k)).data
    b = affinity(Tensor(q[perm]), Tensor(k[perm])).data
    cols = (perm[:, None] * 4 + np.arange(4)).reshape(-1)
    assert np.array_equal(b, a[perm][:, :, cols])


# -- gate ----------------------------------------------------------------------


def test_degenerate_gate_weights(rng):
    p = open_gate(init_gate_params(rng), bias=0.7)
    a = Tensor(rng.normal(size=(3, 4, 16)))
    g = gate_forward(a, p, training=False)
    assert np.allclose(g.g_prime.data, 0.7, rtol=0, atol=1e-15)
    assert np.allclose(g.g_alpha, sat_sigmoid_np(np.array(0.7)), rtol=0, atol=1e-15)
    assert np.all(g.g_beta == 1.0)


def test_threshold_is_strict():
    g = semhash(Tensor([0.3, -0.2, 0.0]), soft=False)
    assert g.data.tolist() == [1.0, 0.0, 0.0]


def test_gate_kernel_extent_checked(rng):
    p = init_gate_params(rng)
    p["gate_w1"] = Tensor(np.zeros((5, 5, 1, 4)))
    with pytest.raises(ShapeError):
        gate_forward(Tensor(np.zeros((4, 16))), p, training=False)


def test_eval_gate_is_binary_and_coin_independent(rng):
    p = init_gate_params(rng)
    a = Tensor(rng.normal(size=(5, 4, 16)) * 3)
    g0 = gate_forward(a, p, training=False, coin=0)
    g1 = gate_forward(a, p, training=False, coin=1)
    assert set(np.unique(g0.active.data)) <= {0.0, 1.0}
    assert np.array_equal(g0.active.data, g1.active.data)


def test_training_coin_selects_relaxed_or_hard(rng):
    p = init_gate_params(rng)
    a = Tensor(rng.normal(size=(2, 4, 16)))
    g = gate_forward(a, p, training=True, coin=np.array([1, 0]))
    assert np.array_equal(g.active.data[0], g.g_alpha[0])
    assert np.array_equal(g.active.data[1], g.g_beta[1])


def test_straight_through_equality(rng):
    """Hard-gate parameter gradients equal those of a relaxed-gate backward."""
    q = Tensor(rng.normal(size=(4, 4, 3)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 4, 3)), requires_grad=True)
    p = init_gate_params(rng)
    params = dict(p, q=q, k=k)

    def grads(substitute):
        for t in params.values():
            t.requires_grad, t.grad = True, None
        with Tape() as tape:
            a = affinity(q, k)
            gb = gate_forward(a, p, training=True, coin=0)
            if substitute:
                # forward value g_beta, backward through sat_sigmoid (g_alpha)
                g = T.add(T.sat_sigmoid(gb.g_prime), Tensor(gb.g_beta - gb.g_alpha))
            else:
                g = gb.active
            loss = T.tsum(T.mul(a, g))
        tape.backward(loss)
        return {name: t.grad.copy() for name, t in params.items()}

    hard, ref = grads(False), grads(True)
    for name in params:
        assert np.max(np.abs(hard[name] - ref[name])) <= 1e-12 * max(1.0, np.abs(ref[name]).max())


# -- sparse attention ----------------------------------------------------------


def masked_dense_oracle(a, gate, values, scale):
    r, kk, n = a.shape
    out = np.zeros((r, kk, values.shape[-1]))
    for i in range(r):
        for j in range(kk):
            keep = np.nonzero(gate[i, j] > 0)[0]
            if keep.size == 0:
                out[i, j] = values[i * kk + j]
                continue
            logits = scale * a[i, j, keep] * gate[i, j, keep]
            e = np.exp(logits - logits.max())
            out[i, j] = (e / e.sum()) @ values[keep]
    return out


def test_all_ones_gate_is_dense_attention(rng):
    a = rng.normal(size=(4, 4, 16))
    v = rng.normal(size=(16, 3))
    out, _, deg = sparse_attention(Tensor(a), Tensor(np.ones_like(a)), True, Tensor(v), 0.5)
    logits = 0.5 * a.reshape(16, 16)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    ref = (e / e.sum(axis=1, keepdims=True)) @ v
    assert np.max(np.abs(out.data.reshape(16, 3) - ref)) < 1e-12
    assert deg == 0


def test_one_kept_entry_returns_that_value(rng):
    a = rng.normal(size=(4, 4, 16))
    v = rng.normal(size=(16, 3))
    gate = np.zeros_like(a)
    pick = rng.integers(0, 16, size=(4, 4))
    np.put_along_axis(gate, pick[..., None], 1.0, axis=-1)
    out, _, _ = sparse_attention(Tensor(a), Tensor(gate), True, Tensor(v), 1.0)
    assert np.array_equal(out.data, v[pick])


def test_random_binary_gate_vs_masked_oracle(rng):
    for _ in range(20):
        a = rng.normal(size=(4, 4, 16))
        v = rng.normal(size=(16, 3))
        gate = (rng.random(a.shape) < 0.4).astype(float)
        out, _, deg = sparse_attention(Tensor(a), Tensor(gate), True, Tensor(v), 0.7)
        ref = masked_dense_oracle(a, gate, v, 0.7)
        assert np.max(np.abs(out.data - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-10
        assert deg == int((gate.sum(axis=-1) == 0).sum())


def test_empty_gate_row_passes_own_token_through(rng):
    a = rng.normal(size=(4, 4, 16))
    v = rng.normal(size=(16, 3))
    out, _, deg = sparse_attention(Tensor(a), Tensor(np.zeros_like(a)), True, Tensor(v), 1.0)
    assert deg == 16
    assert np.array_equal(out.data.reshape(16, 3), v)


def test_relaxed_gate_uses_full_softmax(rng):
    a = rng.normal(size=(1, 4, 4))
    v = rng.normal(size=(4, 2))
    g = rng.random(a.shape)
    out, _, _ = sparse_attention(Tensor(a), Tensor(g), False, Tensor(v), 0.5)
    logits = 0.5 * (a * g)[0]
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    assert np.allclose(out.data[0], (e / e.sum(axis=1, keepdims=True)) @ v, rtol=0, atol=1e-13)


# -- L1 term -------------------------------------------------------------------


def test_gate_l1_values():
    assert float(gate_l1(Tensor(np.zeros((3, 4)))).data) == 0.0
    assert float(gate_l1(Tensor(np.ones((7, 5)))).data) == 1.0
    assert float(gate_l1(Tensor([1.0, 0.0, 0.0, 1.0])).data) == 0.5


def test_l1_gradient_reaches_gate_parameters_only(rng):
    """Every non-gate gradient is bit-identical with the L1 term on or off."""
    x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    params = init_correlation_params(rng, 4)
    w = Tensor(rng.normal(size=(2, 4, 4, 4)))

    def grads(l1_weight):
        for t in list(params.values()) + [x]:
            t.grad = None
        with Tape() as tape:
            res = correlation_module_forward(x, params, 2, 2, training=True, coin=np.array([1, 0]))
            loss = T.add(T.tsum(T.mul(res.output, w)), T.scale(res.l1, l1_weight))
        tape.backward(loss)
        out = {k: v.grad.copy() for k, v in params.items()}
        out["x"] = x.grad.copy()
        return out

    on, off = grads(1.0), grads(0.0)
    for name in on:
        if name.startswith("gate_"):
            assert not np.array_equal(on[name], off[name])
        else:
            assert on[name].tobytes() == off[name].tobytes(), name


# -- module --------------------------------------------------------------------


def test_open_gate_equals_windowed_global_attention(rng):
    x = rng.normal(size=(4, 4, 4))
    p = open_gate(init_correlation_params(rng, 4))
    res = correlation_module_forward(Tensor(x), p, window=2, heads=2, training=False)
    ref = dense_region_attention(x, p, 2)
    assert np.max(np.abs(res.output.data - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-10
    assert res.density == 1.0


def test_single_region_open_gate_is_global_attention(rng):
    x = rng.normal(size=(4, 4, 4))
    p = open_gate(init_correlation_params(rng, 4))
    res = correlation_module_forward(Tensor(x), p, window=4, heads=1, training=False)
    assert np.allclose(res.output.data, dense_region_attention(x, p, 1), rtol=0, atol=1e-12)


def test_module_shapes_and_density(rng):
    mod = CorrelationModule(8, 2, 2, rng)
    res = mod(Tensor(rng.normal(size=(3, 4, 6, 8))), training=False, keep_maps=True)
    assert res.output.shape == (3, 4, 6, 8)
    assert res.density == pytest.approx(res.gate.g_beta.mean(), abs=1e-15)
    assert 0.0 <= res.density <= 1.0
    with pytest.raises(ShapeError):
        CorrelationModule(6, 2, 4, rng)(Tensor(rng.normal(size=(4, 4, 6))))


def test_module_gradient_relaxed_mode():
    def make(rng):
        c = 4
        x = Tensor(rng.normal(size=(4, 4, c)), requires_grad=True)
        params = init_correlation_params(rng, c)
        w = Tensor(rng.normal(size=(4, 4, c)))
        out = lambda: correlation_module_forward(x, params, 2, 2, training=True, coin=1).output  # noqa: E731
        return (lambda: T.tsum(T.mul(out(), w))), dict(params, x=x)

    loss, params = draw_smooth_point(make)
    errors = check_parameters(loss, params)
    assert max(errors.values()) < 1e-4


def test_l1_lowers_density_on_toy_task():
    """Separable toy task: the output only needs each token's own value, so
    the gate can close almost everything. L1 pressure must close more."""
    densities = {0.0: [], 1.0: []}
    for seed in range(5):
        for lam in densities:
            rng = np.random.default_rng(seed)
            params = init_correlation_params(rng, 4)
            x = Tensor(rng.normal(size=(4, 4, 4, 4)))
            target = x.data @ rng.normal(size=(4, 4))
            opt = Adam(params, lr=1e-2)
            coins = np.random.default_rng(100 + seed)
            for _ in range(40):
                opt.zero_grad()
                with Tape() as tape:
                    res = correlation_module_forward(x, params, 2, 2, True, coins.integers(0, 2, 4))
                    err = T.sub(res.output, Tensor(target))
                    loss = T.add(T.mean(T.mul(err, err)), T.scale(res.l1, lam))
                tape.backward(loss)
                opt.step()
            densities[lam].append(correlation_module_forward(x, params, 2, 2, False).density)
    assert np.mean(densities[1.0]) < np.mean(densities[0.0])
