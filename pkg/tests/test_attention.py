import math

import numpy as np
import pytest

from remoh_lab.attention import (
    ActivationTrace,
    AttentionDims,
    AttentionWeights,
    HeatmapTable,
    RouterWeights,
    head_scores,
    init_attention,
    init_routers,
    merge_traces,
    mha_forward,
    moh_topk_forward,
    relu_router,
    remoh_forward,
    scaled_dot_attention,
    shared_router,
    trace_summary,
)
from remoh_lab.errors import ConfigurationError, DimensionError
from remoh_lab.tensor import Tensor, matmul, mean


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), grad)


def layer(rng, d=16, h=4, n=1, m=3):
    dims = AttentionDims(d, h, n, m)
    return dims, init_attention(dims, rng), init_routers(dims, rng) if m else None


def test_dims_invariants():
    with pytest.raises(ConfigurationError):
        AttentionDims(8, 4, 2, 1)
    d = AttentionDims(32, 8, 2, 6)
    assert (d.d_k, d.d_v, d.d_out) == (4, 4, 32)


def test_sdpa_single_key_and_equal_keys(rng):
    Q = T(rng.normal(size=(3, 2)))
    V = rng.normal(size=(1, 4))
    out = scaled_dot_attention(Q, T(rng.normal(size=(1, 2))), T(V)).data
    assert np.allclose(out, np.repeat(V, 3, axis=0), atol=1e-15)
    V = rng.normal(size=(5, 4))
    out = scaled_dot_attention(Q, T(np.ones((5, 2))), T(V)).data
    assert np.allclose(out, V.mean(axis=0), atol=1e-14)


def test_sdpa_brute_force(rng):
    Q, K, V = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        logits = [sum(Q[i, c] * K[j, c] for c in range(2)) / math.sqrt(2) for j in range(3)]
        w = [math.exp(z) for z in logits]
        s = sum(w)
        for j in range(3):
            ref[i] += w[j] / s * V[j]
    assert np.max(np.abs(scaled_dot_attention(T(Q), T(K), T(V)).data - ref)) < 1e-14


def test_sdpa_shape_error(rng):
    with pytest.raises(DimensionError):
        scaled_dot_attention(T(np.ones((2, 3))), T(np.ones((4, 2))), T(np.ones((4, 2))))


def test_mha_sum_equals_concat_and_single_head(rng):
    dims, w, _ = layer(rng, m=0, n=4)
    x1, x2 = T(rng.normal(size=(5, 16))), T(rng.normal(size=(7, 16)))
    a = mha_forward(x1, x2, w, dims, form="concat").data
    b = mha_forward(x1, x2, w, dims, form="sum").data
    assert np.max(np.abs(a - b)) < 1e-12
    d1 = AttentionDims(16, 1, 1, 0)
    w1 = init_attention(d1, rng)
    ref = matmul(scaled_dot_attention(matmul(x1, w1.W_Q), matmul(x2, w1.W_K), matmul(x2, w1.W_V)), w1.W_O)
    assert np.max(np.abs(mha_forward(x1, x2, w1, d1).data - ref.data)) < 1e-14
    wz = AttentionWeights(w.W_Q, w.W_K, w.W_V, T(np.zeros((16, 16))))
    assert not mha_forward(x1, x2, wz, dims).data.any()


def test_shared_router_examples(rng):
    r = RouterWeights(T(np.zeros((2, 4))), T(np.zeros(2)), T(np.zeros((2, 4))), T(np.zeros(2)))
    assert np.allclose(shared_router(r, T(rng.normal(size=4))).data, [0.5, 0.5])
    r = RouterWeights(r.W_r, r.b_r, T(np.zeros((2, 4))), T([math.log(3), 0.0]))
    assert np.allclose(shared_router(r, T(np.zeros(4))).data, [0.75, 0.25], atol=1e-15)


def test_relu_router_examples(rng):
    W = -np.abs(rng.normal(size=(3, 4)))
    r = RouterWeights(T(W), T(np.zeros(3)), T(np.zeros((2, 4))), T(np.zeros(2)))
    assert not relu_router(r, T(np.ones(4))).data.any()
    W[1] = np.abs(W[1])
    r = RouterWeights(T(W), T(np.zeros(3)), r.W_h, r.b_h)
    assert (relu_router(r, T(np.ones(4))).data > 0).sum() == 1
    x = rng.normal(size=(50, 4))
    Wr, br = rng.normal(size=(3, 4)), rng.normal(size=3)
    r = RouterWeights(T(Wr), T(br), r.W_h, r.b_h)
    assert np.array_equal(relu_router(r, T(x)).data > 0, x @ Wr.T + br > 0)
    with pytest.raises(ConfigurationError):
        relu_router(RouterWeights(T(np.zeros((0, 4))), T(np.zeros(0)), r.W_h, r.b_h), T(x))


def test_head_scores_degenerate_and_composed(rng):
    dims = AttentionDims(8, 4, 4, 0)
    assert np.array_equal(head_scores(dims, None, T(rng.normal(size=8))).scores.data, np.ones(4))
    dims, _, r = layer(rng, d=8, h=4, n=2, m=2)
    neg = RouterWeights(r.W_r, T([-100.0, -100.0]), r.W_h, r.b_h)
    hs = head_scores(dims, neg, T(rng.normal(size=8)))
    a1 = float(hs.alpha1.data)
    assert np.allclose(hs.scores.data, [a1, a1, 0, 0])
    x = T(rng.normal(size=(6, 8)))
    hs = head_scores(dims, r, x)
    a2 = hs.alpha2.data[:, None]
    assert np.allclose(hs.scores.data[:, 2:], a2 * relu_router(r, x).data, atol=1e-15)
    assert np.all(hs.scores.data[:, 0] == hs.scores.data[:, 1])


def test_remoh_m0_equals_mha(rng):
    dims, w, _ = layer(rng, m=0, n=4)
    x1, x2 = T(rng.normal(size=(2, 5, 16))), T(rng.normal(size=(2, 6, 16)))
    out, tr = remoh_forward(x1, x2, w, None, dims)
    assert np.max(np.abs(out.data - mha_forward(x1, x2, w, dims).data)) < 1e-12
    assert tr.total == 10 and tr.active.size == 0


def test_remoh_all_routed_inactive_scales_shared_heads(rng):
    dims, w, r = layer(rng, d=16, h=4, n=2, m=2)
    r = RouterWeights(r.W_r, T([-1e3, -1e3]), r.W_h, r.b_h)
    x1, x2 = T(rng.normal(size=(4, 16))), T(rng.normal(size=(5, 16)))
    out, tr = remoh_forward(x1, x2, w, r, dims)
    a1 = shared_router(r, x1).data[:, :1]
    # shared-only MHA: zero the routed heads' output blocks
    WO = w.W_O.data.copy()
    WO[2 * dims.d_v:] = 0
    shared = mha_forward(x1, x2, AttentionWeights(w.W_Q, w.W_K, w.W_V, T(WO)), dims).data
    assert np.max(np.abs(out.data - a1 * shared)) < 1e-12
    assert tr.active.sum() == 0


def test_remoh_head_permutation_invariance(rng):
    dims, w, r = layer(rng, d=16, h=4, n=1, m=3)
    x1, x2 = T(rng.normal(size=(4, 16))), T(rng.normal(size=(5, 16)))
    out, _ = remoh_forward(x1, x2, w, r, dims)
    perm_routed = [2, 0, 1]
    heads = [0] + [1 + p for p in perm_routed]
    cols = np.concatenate([np.arange(i * 4, (i + 1) * 4) for i in heads])
    wp = AttentionWeights(T(w.W_Q.data[:, cols]), T(w.W_K.data[:, cols]), T(w.W_V.data[:, cols]),
                          T(w.W_O.data[cols]))
    rp = RouterWeights(T(r.W_r.data[perm_routed]), T(r.b_r.data[perm_routed]), r.W_h, r.b_h)
    outp, _ = remoh_forward(x1, x2, wp, rp, dims)
    assert np.max(np.abs(out.data - outp.data)) < 1e-12


def test_remoh_grad_wrt_router_matches_fd(rng):
    dims, w, r = layer(rng, d=8, h=4, n=1, m=3)
    x1, x2 = T(rng.normal(size=(3, 8))), T(rng.normal(size=(4, 8)))

    def f():
        return mean(remoh_forward(x1, x2, w, r, dims)[0])

    f().backward()
    h = 1e-6
    base = r.W_r.data
    for idx in [(0, 0), (1, 3), (2, 7)]:
        p, m = base.copy(), base.copy()
        p[idx] += h
        m[idx] -= h
        r.W_r.data = p
        fp = f().item()
        r.W_r.data = m
        fm = f().item()
        r.W_r.data = base
        num = (fp - fm) / (2 * h)
        a = r.W_r.grad[idx]
        assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-4


def test_topk_examples(rng):
    dims, w, r = layer(rng, d=16, h=4, n=1, m=3)
    x1, x2 = T(rng.normal(size=(20, 16))), T(rng.normal(size=(5, 16)))
    _, tr, hs = moh_topk_forward(x1, x2, w, r, dims, k=3, return_scores=True)
    assert (hs.scores.data.reshape(20, 4)[:, 1:] > 0).all()
    _, tr, hs = moh_topk_forward(x1, x2, w, r, dims, k=1, return_scores=True)
    s = hs.scores.data.reshape(20, 4)[:, 1:]
    z = x1.data @ r.W_r.data.T + r.b_r.data
    assert np.array_equal(np.argmax(s, axis=1), np.argmax(z, axis=1))
    assert ((s > 0).sum(axis=1) == 1).all()
    assert tr.active.sum() == 20
    with pytest.raises(ConfigurationError):
        moh_topk_forward(x1, x2, w, r, dims, k=4)


def test_trace_summary_fixture():
    # 5 tokens, 3 heads; hand tally below
    routed = np.array([[0, 1, 0], [0, 2, 0], [1, 0, 0], [0, 3, 0], [0, 1, 0]], float)
    from remoh_lab.attention import trace_from_scores
    tr = trace_from_scores(routed, layer=0, label="present")
    table = trace_summary([tr])
    rates = [r.rate_present for r in table.rows]
    assert rates == [0.2, 0.8, 0.0]
    assert all(r.rate_absent is None for r in table.rows)
    all_on = trace_summary([ActivationTrace(0, [0, 0, 0, 4], 4, "absent")])
    assert all_on.rows[3].rate_absent == 1.0


def test_merge_and_csv_round_trip():
    a = ActivationTrace(0, [1, 2], 4, "present")
    b = ActivationTrace(0, [3, 0], 4, "present")
    c = ActivationTrace(0, [0, 1], 2, "absent")
    merged = merge_traces([a, b, c])
    table = trace_summary(merged)
    assert table.rows[0].rate_present == 0.5 and table.rows[1].rate_absent == 0.5
    back = HeatmapTable.from_csv(table.to_csv())
    assert back.to_csv() == table.to_csv()
    assert [(r.rate_present, r.rate_absent) for r in back.rows] == [(r.rate_present, r.rate_absent) for r in table.rows]
    with pytest.raises(ValueError):
        ActivationTrace(0, [5], 4)
