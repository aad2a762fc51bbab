import math

import numpy as np
import pytest

import tensor_core as tc
from conftest import analytic_grad, check_grads, rel_err
from utils import CheckpointError, ConfigError, DataError, ShapeError, UsageError, VersionError


def P(array):
    return tc.Tensor(array, requires_grad=True)


# --- matmul ---

def test_matmul_identity_and_hand_case():
    a = tc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tc.matmul(tc.Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal((tc.Tensor([[1.0, 2.0]]) @ tc.Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        tc.matmul(tc.Tensor(np.ones((3, 4))), tc.Tensor(np.ones((3, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_matmul_gradient(seed):
    r = np.random.default_rng(seed)
    a, b = P(r.normal(size=(3, 4))), P(r.normal(size=(4, 2)))
    m = tc.Tensor(r.normal(size=(3, 2)))
    check_grads(lambda: tc.tsum(tc.matmul(a, b) * m), [a, b], tol=1e-6)


# --- softmax / layer_norm ---

def test_softmax_basic_properties(rng):
    np.testing.assert_allclose(tc.softmax(tc.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = rng.normal(size=(4, 7))
    np.testing.assert_allclose(tc.softmax(tc.Tensor(x)).data, tc.softmax(tc.Tensor(x + 3.7)).data, atol=1e-12)
    np.testing.assert_allclose(tc.softmax(tc.Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_gradient(seed):
    r = np.random.default_rng(seed)
    x = P(r.normal(size=5))
    w = tc.Tensor(r.normal(size=5))
    check_grads(lambda: tc.tsum(tc.softmax(x) * w), [x], tol=1e-6)


def test_layer_norm_edge_cases(rng):
    out = tc.layer_norm(tc.Tensor(np.full(6, 3.0)), tc.Tensor(np.ones(6)), tc.Tensor(np.zeros(6)))
    np.testing.assert_array_equal(out.data, np.zeros(6))
    out = tc.layer_norm(tc.Tensor([1.0, -1.0]), tc.Tensor(np.ones(2)), tc.Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)
    pre = tc.layer_norm(tc.Tensor(rng.normal(size=(5, 9)) * 4 + 2))
    assert np.all(np.abs(pre.data.mean(axis=-1)) < 1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradient(seed):
    r = np.random.default_rng(seed)
    x, g, b = P(r.normal(size=8)), P(r.normal(size=8)), P(r.normal(size=8))
    w = tc.Tensor(r.normal(size=8))
    check_grads(lambda: tc.tsum(tc.layer_norm(x, g, b) * w), [x, g, b], tol=1e-5)


# --- elementares ---

@pytest.mark.parametrize("seed", range(20))
def test_elementwise_gradients(seed):
    r = np.random.default_rng(seed)
    a = P(r.uniform(0.5, 2.0, size=(3, 4)))
    b = P(r.uniform(0.5, 2.0, size=(4,)))

    def f():
        y = tc.exp(a * 0.3) + tc.log(a) * b - tc.sqrt(a) / b + tc.relu(a - 1.2)
        return tc.tsum(tc.mean(y, axis=0) * tc.Tensor(np.arange(1, 5)))

    check_grads(f, [a, b], tol=1e-5)


def test_shape_ops_gradients(rng):
    x = P(rng.normal(size=(2, 3, 4)))
    w = tc.Tensor(rng.normal(size=(2, 4, 10)))

    def f():
        y = tc.transpose(x, (2, 0, 1))
        y = tc.concat([y, tc.pad(y[:, :, 1:3], [(0, 0), (0, 0), (1, 2)])], axis=2)
        return tc.tsum(tc.repeat_stack(y.reshape((4, 16))[:, :10], 2) * w)

    check_grads(f, [x], tol=1e-6)


# --- convoluções ---

def grid_oracle(x, w, b):
    S, T, _ = x.shape
    co, ci, s, k = w.shape
    ps, pt = (s - 1) // 2, (k - 1) // 2
    out = np.zeros((S, T, co))
    for i in range(S):
        for t in range(T):
            for o in range(co):
                acc = b[o]
                for di in range(s):
                    for dt in range(k):
                        ii, tt = i + di - ps, t + dt - pt
                        if 0 <= ii < S and 0 <= tt < T:
                            for c in range(ci):
                                acc += w[o, c, di, dt] * x[ii, tt, c]
                out[i, t, o] = acc
    return out


def random_grid_case(seed, grad=False):
    r = np.random.default_rng(seed)
    S = int(r.integers(1, 4))
    T = int(r.integers(1, 5 if grad else 8))
    ci, co = int(r.integers(1, 4)), int(r.integers(1, 4))
    s, k = int(r.integers(1, S + 1)), int(r.choice([1, 3, 5]))
    return r, r.normal(size=(S, T, ci)), r.normal(size=(co, ci, s, k)), r.normal(size=co)


def test_conv2d_grid_identity_and_hand_case():
    x = tc.Tensor(np.arange(1.0, 7.0).reshape(2, 3, 1))
    w = np.zeros((1, 1, 1, 3))
    w[0, 0, 0, 1] = 1.0
    np.testing.assert_array_equal(tc.conv2d_grid(x, tc.Tensor(w)).data, x.data)
    out = tc.conv2d_grid(tc.Tensor([[[1.0], [2.0], [3.0]]]), tc.Tensor(np.ones((1, 1, 1, 3))))
    np.testing.assert_array_equal(out.data[0, :, 0], [3.0, 6.0, 5.0])


@pytest.mark.parametrize("seed", range(100))
def test_conv2d_grid_matches_loop_oracle(seed):
    _, x, w, b = random_grid_case(seed)
    out = tc.conv2d_grid(tc.Tensor(x), tc.Tensor(w), tc.Tensor(b)).data
    np.testing.assert_allclose(out, grid_oracle(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv2d_grid_rejects_even_kernel_and_wide_speaker_kernel():
    with pytest.raises(ConfigError):
        tc.conv2d_grid(tc.Tensor(np.ones((3, 5, 1))), tc.Tensor(np.ones((1, 1, 1, 4))))
    with pytest.raises(ConfigError):
        tc.conv2d_grid(tc.Tensor(np.ones((2, 5, 1))), tc.Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_grid_gradient(seed):
    r, x, w, b = random_grid_case(seed, grad=True)
    x, w, b = P(x), P(w), P(b)
    m = tc.Tensor(r.normal(size=x.shape[:2] + (w.shape[0],)))
    check_grads(lambda: tc.tsum(tc.conv2d_grid(x, w, b) * m), [x, w, b], tol=1e-6)


def convolve_oracle(x, w, b, stride, pads):
    """Uma janela por posição de saída, sem vetorizar sobre o kernel."""
    nsp = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + pads)
    kernel = w.shape[2:]
    out_sp = tuple((xp.shape[2 + d] - kernel[d]) // stride[d] + 1 for d in range(nsp))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp)
    for pos in np.ndindex(*out_sp):
        sl = tuple(slice(p * st, p * st + kk) for p, st, kk in zip(pos, stride, kernel))
        patch = xp[(slice(None), slice(None)) + sl]
        for o in range(w.shape[0]):
            out[(slice(None), o) + pos] = np.sum(patch * w[o], axis=tuple(range(1, nsp + 2))) + b[o]
    return out


def random_convolve_case(seed, grad=False):
    r = np.random.default_rng(seed)
    nsp = int(r.integers(1, 4))
    kernel = tuple(int(v) for v in r.integers(1, 4, size=nsp))
    stride = tuple(int(v) for v in r.integers(1, 3, size=nsp))
    pads = [tuple(int(v) for v in r.integers(0, 2, size=2)) for _ in range(nsp)]
    hi = 4 if grad else 7
    L = tuple(max(kk, int(v)) for kk, v in zip(kernel, r.integers(1, hi, size=nsp)))
    ci, co = int(r.integers(1, 3)), int(r.integers(1, 3))
    B = int(r.integers(1, 3))
    x, w, b = r.normal(size=(B, ci) + L), r.normal(size=(co, ci) + kernel), r.normal(size=co)
    return r, x, w, b, stride, pads


@pytest.mark.parametrize("seed", range(100))
def test_convolve_matches_window_oracle(seed):
    _, x, w, b, stride, pads = random_convolve_case(seed)
    out = tc.convolve(tc.Tensor(x), tc.Tensor(w), tc.Tensor(b), stride=stride, padding=pads).data
    np.testing.assert_allclose(out, convolve_oracle(x, w, b, stride, pads), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_convolve_gradient(seed):
    r, x, w, b, stride, pads = random_convolve_case(seed, grad=True)
    x, w, b = P(x), P(w), P(b)
    conv = lambda: tc.convolve(x, w, b, stride=stride, padding=pads)
    m = tc.Tensor(r.normal(size=conv().shape))
    check_grads(lambda: tc.tsum(conv() * m), [x, w, b], tol=1e-6)


def test_convolve_strided_3d_gradient(rng):
    x = P(rng.normal(size=(1, 2, 4, 5, 5)))
    w = P(rng.normal(size=(3, 2, 3, 3, 3)))
    b = P(rng.normal(size=3))
    conv = lambda: tc.convolve(x, w, b, stride=(1, 2, 2), padding=[(1, 1), (1, 1), (1, 1)])
    m = tc.Tensor(rng.normal(size=conv().shape))
    check_grads(lambda: tc.tsum(conv() * m), [x, w, b], tol=1e-6)


def transposed_oracle(x, w, stride):
    Tp, ci = x.shape
    K = w.shape[2]
    out = np.zeros((max((Tp - 1) * stride + K, Tp * stride), w.shape[1]))
    for t in range(Tp):
        for j in range(K):
            for c in range(ci):
                out[t * stride + j] += x[t, c] * w[c, :, j]
    return out[:Tp * stride]


def random_transposed_case(seed):
    r = np.random.default_rng(seed)
    Tp, ci, co = int(r.integers(1, 6)), int(r.integers(1, 4)), int(r.integers(1, 4))
    K, stride = int(r.integers(1, 5)), int(r.integers(1, 4))
    return r, r.normal(size=(Tp, ci)), r.normal(size=(ci, co, K)), stride


def test_transposed_conv1d_contracts(rng):
    x = rng.normal(size=(3, 2))
    ident = np.zeros((2, 2, 1))
    ident[:, :, 0] = np.eye(2)
    np.testing.assert_array_equal(tc.transposed_conv1d(tc.Tensor(x), tc.Tensor(ident), stride=1).data, x)
    assert tc.transposed_conv1d(tc.Tensor(x), tc.Tensor(rng.normal(size=(2, 4, 2))), stride=2).shape == (6, 4)


@pytest.mark.parametrize("seed", range(100))
def test_transposed_conv1d_matches_loop_oracle(seed):
    _, x, w, stride = random_transposed_case(seed)
    out = tc.transposed_conv1d(tc.Tensor(x), tc.Tensor(w), stride=stride).data
    np.testing.assert_allclose(out, transposed_oracle(x, w, stride), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_transposed_conv1d_gradient(seed):
    r, x, w, stride = random_transposed_case(seed)
    x, w = P(np.stack([x, r.normal(size=x.shape)])), P(w)
    b = P(r.normal(size=w.shape[1]))
    m = tc.Tensor(r.normal(size=(2, x.shape[1] * stride, w.shape[1])))
    check_grads(lambda: tc.tsum(tc.transposed_conv1d(x, w, b, stride=stride) * m), [x, w, b], tol=1e-6)


def test_max_pool_ceil_mode(rng):
    x = tc.Tensor(np.arange(5.0).reshape(1, 5))
    np.testing.assert_array_equal(tc.max_pool(x, axes=(1,)).data, [[1.0, 3.0, 4.0]])


@pytest.mark.parametrize("seed", range(20))
def test_max_pool_gradient(seed):
    r = np.random.default_rng(seed)
    H, W = int(r.integers(2, 7)), int(r.integers(2, 8))
    y = P(r.permutation(H * W).astype(float).reshape(1, H, W))
    m = tc.Tensor(r.normal(size=(1, -(-H // 2), -(-W // 2))))
    check_grads(lambda: tc.tsum(tc.max_pool(y, axes=(1, 2)) * m), [y], tol=1e-6)

# --- atenção ---

def attn_params(rng, C, identity=False):
    if identity:
        return {f"w{p}": tc.Tensor(np.eye(C)) for p in "qkvo"} | {f"b{p}": tc.Tensor(np.zeros(C)) for p in "qkvo"}
    return {f"w{p}": P(rng.normal(size=(C, C)) * 0.5) for p in "qkvo"} | {f"b{p}": P(rng.normal(size=C) * 0.1) for p in "qkvo"}


def attention_oracle(q, k, v, params, heads, key_bias=None):
    """Laço explícito por lote, cabeça e consulta."""
    p = {name: t.data for name, t in params.items()}
    Q, K, V = q @ p["wq"] + p["bq"], k @ p["wk"] + p["bk"], v @ p["wv"] + p["bv"]
    B, Tq, C = q.shape
    d = C // heads
    bias = np.zeros((B, heads, Tq, k.shape[1])) if key_bias is None else np.broadcast_to(
        key_bias, (B, heads, Tq, k.shape[1]))
    out = np.zeros((B, Tq, C))
    for bi in range(B):
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            for t in range(Tq):
                s = K[bi, :, cols] @ Q[bi, t, cols] / math.sqrt(d) + bias[bi, h, t]
                e = np.exp(s - s.max())
                out[bi, t, cols] = (e / e.sum()) @ V[bi, :, cols]
    return out @ p["wo"] + p["bo"]


def random_attention_case(seed):
    r = np.random.default_rng(seed)
    heads = int(r.integers(1, 4))
    C = heads * int(r.integers(1, 4))
    B, Tq, Tk = int(r.integers(1, 3)), int(r.integers(1, 5)), int(r.integers(1, 5))
    q, k, v = r.normal(size=(B, Tq, C)), r.normal(size=(B, Tk, C)), r.normal(size=(B, Tk, C))
    return r, q, k, v, attn_params(r, C), heads


def test_attention_single_key_has_unit_weight(rng):
    q, k = tc.Tensor(rng.normal(size=(2, 4, 4))), tc.Tensor(rng.normal(size=(2, 1, 4)))
    _, w = tc.multi_head_attention(q, k, k, attn_params(rng, 4), heads=2, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((2, 2, 4, 1)))


def test_attention_identity_projections_match_brute_force(rng):
    q, k, v = (rng.normal(size=(1, 2, 2)) for _ in range(3))
    out = tc.multi_head_attention(tc.Tensor(q), tc.Tensor(k), tc.Tensor(v), attn_params(rng, 2, True), heads=1)
    s = q[0] @ k[0].T / math.sqrt(2)
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data[0], p @ v[0], rtol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_attention_matches_loop_oracle(seed):
    r, q, k, v, params, heads = random_attention_case(seed)
    key_bias = None
    if k.shape[1] > 1 and r.random() < 0.5:
        key_bias = np.where(np.arange(k.shape[1]) == k.shape[1] - 1, -np.inf, 0.0).reshape(1, 1, 1, -1)
    out = tc.multi_head_attention(tc.Tensor(q), tc.Tensor(k), tc.Tensor(v), params, heads, key_bias=key_bias)
    np.testing.assert_allclose(out.data, attention_oracle(q, k, v, params, heads, key_bias), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradient(seed):
    r, q, k, _, params, heads = random_attention_case(seed)
    q, kv = P(q), P(k)
    m = tc.Tensor(r.normal(size=q.shape))
    f = lambda: tc.tsum(tc.multi_head_attention(q, kv, kv, params, heads=heads) * m)
    check_grads(f, [q, kv] + list(params.values()), tol=1e-5)


def test_attention_rejects_indivisible_heads(rng):
    x = tc.Tensor(rng.normal(size=(1, 2, 6)))
    with pytest.raises(ConfigError):
        tc.multi_head_attention(x, x, x, attn_params(rng, 6), heads=4)

# --- perda ---

def test_cross_entropy_values():
    assert tc.cross_entropy(tc.Tensor(np.zeros((5, 2))), np.array([0, 1, 0, 1, 1])).item() == pytest.approx(math.log(2))
    logits = np.array([[20.0, 0.0], [0.0, 20.0]])
    assert tc.cross_entropy(tc.Tensor(logits), np.array([0, 1])).item() < 1e-8


@pytest.mark.parametrize("seed", range(100))
def test_cross_entropy_matches_oracle(seed):
    r = np.random.default_rng(seed)
    T = int(r.integers(1, 10))
    z, lab = r.normal(size=(T, 2)) * r.uniform(0.1, 20.0), r.integers(0, 2, size=T)
    oracle = -np.mean([z[t, lab[t]] - np.log(np.exp(z[t]).sum()) for t in range(T)])
    assert tc.cross_entropy(tc.Tensor(z), lab).item() == pytest.approx(oracle, rel=1e-10, abs=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        tc.cross_entropy(tc.Tensor(np.zeros((2, 2))), np.array([0, 2]))


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    r = np.random.default_rng(seed)
    T = int(r.integers(1, 8))
    z, lab = P(r.normal(size=(T, 2))), r.integers(0, 2, size=T)
    check_grads(lambda: tc.cross_entropy(z, lab), [z], tol=1e-6)

# --- backward ---

def test_backward_sum_and_accumulation():
    x = P([1.0, 2.0, 3.0])
    g, = analytic_grad(lambda: tc.tsum(x), [x])
    np.testing.assert_array_equal(g, np.ones(3))
    g, = analytic_grad(lambda: tc.tsum(x + x), [x])
    np.testing.assert_array_equal(g, np.full(3, 2.0))


def test_backward_requires_scalar():
    x = P([1.0, 2.0])
    with tc.Graph() as g:
        y = x * 2.0
    with pytest.raises(UsageError):
        g.backward(y)
    with pytest.raises(UsageError):
        tc.backward(y)


def test_gradients_accumulate_until_zeroed():
    x = P([1.0, -2.0])
    for _ in range(2):
        with tc.Graph() as g:
            loss = tc.tsum(x * x)
        g.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * 2 * x.data)
    tc.zero_grad([x])
    assert x.grad is None


def test_no_recording_outside_graph():
    x = P([1.0, 2.0])
    y = tc.tsum(x * 3.0)
    assert y._graph is None


def test_backward_is_bit_deterministic(rng):
    w = P(rng.normal(size=(4, 3)))
    x = tc.Tensor(rng.normal(size=(5, 4)))
    f = lambda: tc.tsum(tc.softmax(tc.matmul(x, w)) * tc.Tensor(np.arange(3.0)))
    g1, = analytic_grad(f, [w])
    g2, = analytic_grad(f, [w])
    np.testing.assert_array_equal(g1, g2)

# --- Adam ---

def test_adam_zero_gradient_leaves_params():
    p = P([1.0, 2.0])
    p.grad = np.zeros(2)
    state = tc.AdamState.init([p], lr=0.1)
    tc.adam_step([p], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step == 1


def test_adam_first_step_is_minus_lr():
    p = P([0.0])
    p.grad = np.ones(1)
    state = tc.AdamState.init([p], lr=0.1)
    tc.adam_step([p], state)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-7)


def test_adam_converges_on_square():
    x = P([1.0])
    opt = tc.Adam([x], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        with tc.Graph() as g:
            loss = tc.tsum(x * x)
        g.backward(loss)
        opt.step()
    assert abs(x.data[0]) < 0.05
    assert opt.state.step == 100


def test_adam_state_mismatch():
    state = tc.AdamState.init([P(np.zeros(2))], lr=0.1)
    with pytest.raises(ConfigError):
        tc.adam_step([P(np.zeros(3))], state)


def test_adam_decay_per_epoch():
    opt = tc.Adam([P([0.0])], lr=1e-3, decay=0.5)
    opt.end_epoch()
    assert opt.lr == pytest.approx(5e-4)

# --- checkpoint ---

def test_checkpoint_round_trip_in_f32(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "scalar": np.array(2.5)}
    path = tc.save_checkpoint(tmp_path / "m.lcnt", arrays)
    assert path.read_bytes()[:4] == b"LCNT"
    back = tc.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k].astype(np.float32).astype(np.float64))


def test_checkpoint_version_and_truncation(tmp_path, rng):
    path = tc.save_checkpoint(tmp_path / "m.lcnt", {"w": rng.normal(size=(8, 8))})
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    bad = tmp_path / "v9.lcnt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(VersionError):
        tc.load_checkpoint(bad)
    short = tmp_path / "short.lcnt"
    short.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        tc.load_checkpoint(short)
    junk = tmp_path / "junk.lcnt"
    junk.write_bytes(b"NOPE0000")
    with pytest.raises(CheckpointError):
        tc.load_checkpoint(junk)


def test_numeric_gradient_helper_on_quadratic():
    x = P([1.0, -3.0])
    num = tc.numeric_gradient(lambda: float(np.sum(x.data ** 2)), x)
    assert rel_err(num, 2 * x.data) < 1e-8
