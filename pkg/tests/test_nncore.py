import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from snakesim import nncore
from snakesim.errors import ContractError, DimensionError, InputError
from snakesim.nncore import LayerDesc, LayerGraph, ParameterSet


def single_dense(w, b):
    g = LayerGraph((LayerDesc("dense", w.shape[0], w.shape[1]), LayerDesc("softmax-xent-head", w.shape[1], w.shape[1])))
    return g, ParameterSet([np.asarray(w, float)], [np.asarray(b, float)], [True])


def loop_forward(params, graph, x):
    """Scalar triple-loop oracle."""
    rows = [list(r) for r in x]
    k = 0
    for desc in graph.layers:
        if desc.kind == "dense":
            k += 1
            w, b = params.layer(k)
            out = []
            for r in rows:
                o = []
                for j in range(desc.out_dim):
                    acc = 0.0
                    for i in range(desc.in_dim):
                        acc += r[i] * w[i, j]
                    o.append(acc + b[j])
                out.append(o)
            rows = out
        elif desc.kind == "relu":
            rows = [[v if v > 0 else 0.0 for v in r] for r in rows]
    return np.array(rows)


def test_forward_identity():
    g, p = single_dense(np.eye(2), np.zeros(2))
    logits, _ = nncore.forward(p, g, np.array([[1.0, 2.0]]))
    assert logits.tolist() == [[1.0, 2.0]]


def test_forward_bias_only():
    g, p = single_dense(np.eye(2), np.ones(2))
    logits, _ = nncore.forward(p, g, np.zeros((1, 2)))
    assert logits.tolist() == [[1.0, 1.0]]


@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    g = nncore.mlp_graph(5, 7, 3, 3)
    p = nncore.init_params(g, rng)
    x = rng.normal(size=(4, 5))
    logits, cache = nncore.forward(p, g, x)
    ref = loop_forward(p, g, x)
    np.testing.assert_allclose(logits, ref, rtol=1e-12, atol=1e-14)
    assert len(cache.inputs) == len(g.layers)


def test_forward_shape_mismatch():
    g = nncore.mlp_graph(3, 4, 2, 3)
    p = nncore.init_params(g, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        nncore.forward(p, g, np.zeros((2, 4)))


def test_graph_rejects_incompatible_layers():
    with pytest.raises(DimensionError):
        LayerGraph((LayerDesc("dense", 3, 4), LayerDesc("dense", 5, 2)))


def _loss(p, g, x, y):
    logits, _ = nncore.forward(p, g, x)
    return nncore.softmax_xent(logits, y)[0]


def finite_difference(p, g, x, y, h=1e-5):
    out = {}
    for k in p.updated_layers():
        grads = []
        for arr in (p.weights[k - 1], p.biases[k - 1]):
            d = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = _loss(p, g, x, y)
                arr[idx] = old - h
                down = _loss(p, g, x, y)
                arr[idx] = old
                d[idx] = (up - down) / (2 * h)
            grads.append(d)
        out[k] = tuple(grads)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4):
    assert set(analytic) == set(numeric)
    for k in analytic:
        for a, n in zip(analytic[k], numeric[k]):
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            assert err.max() <= rtol, (k, err.max())


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = nncore.mlp_graph(3, 5, 3, 2)  # 20 + 18 = 38 parameters
    assert g.total_params() <= 50
    p = nncore.init_params(g, rng)
    x, y = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    loss, grads = nncore.backward(p, g, nncore.forward(p, g, x)[1], y)
    assert loss == pytest.approx(_loss(p, g, x, y))
    assert_grads_close(grads, finite_difference(p, g, x, y))


def test_frozen_layers_get_no_gradient():
    rng = np.random.default_rng(1)
    g = nncore.mlp_graph(3, 4, 2, 4)
    p = nncore.init_params(g, rng, updated={2, 4})
    x, y = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
    _, grads = nncore.backward(p, g, nncore.forward(p, g, x)[1], y)
    assert set(grads) == {2, 4}
    assert_grads_close(grads, finite_difference(p, g, x, y))


def test_all_frozen_is_a_no_op():
    g = nncore.mlp_graph(3, 4, 2, 3)
    p = nncore.init_params(g, np.random.default_rng(0), updated=())
    before = p.digest()
    _, grads = nncore.backward(p, g, nncore.forward(p, g, np.ones((2, 3)))[1], np.array([0, 1]))
    assert grads == {}
    p2, _ = nncore.optimizer_step(p, grads, nncore.OptimizerState("adam"), 0.1)
    assert p2.digest() == before


def test_uniform_logits_give_ln2():
    g, p = single_dense(np.zeros((3, 2)), np.zeros(2))
    loss, _ = nncore.backward(p, g, nncore.forward(p, g, np.ones((1, 3)))[1], np.array([0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


@given(st.integers(2, 50), st.integers(1, 8), st.floats(-5, 5))
def test_uniform_logits_give_ln_k(k, b, c):
    logits = np.full((b, k), c)
    loss, _ = nncore.softmax_xent(logits, np.zeros(b, dtype=int))
    assert abs(loss - math.log(k)) <= 1e-12


def test_label_out_of_range():
    with pytest.raises(InputError):
        nncore.softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


def grads_from(flat):
    return {1: (np.array([flat[:-1]]), np.array([flat[-1]]))}


def test_clip_below_threshold_is_identity():
    g = {1: (np.array([[3.0]]), np.array([0.0]))}
    assert nncore.clip_global_norm(g, 6.0) is g


def test_clip_scales_to_max_norm():
    g = {1: (np.array([[3.0]]), np.array([4.0]))}
    out = nncore.clip_global_norm(g, 2.5)
    assert out[1][0].tolist() == [[1.5]] and out[1][1].tolist() == [2.0]


def test_clip_zero_and_empty():
    z = {1: (np.zeros((2, 2)), np.zeros(2))}
    out = nncore.clip_global_norm(z, 0.1)
    assert not out[1][0].any() and not out[1][1].any()
    assert nncore.clip_global_norm({}, 1.0) == {}


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8), st.floats(1e-3, 1e3))
def test_clip_properties(flat, c):
    g = grads_from(np.array(flat))
    once = nncore.clip_global_norm(g, c)
    twice = nncore.clip_global_norm(once, c)
    assert nncore.global_norm(once) <= c * (1 + 1e-12)
    for k in once:
        np.testing.assert_allclose(once[k][0], twice[k][0], rtol=1e-12, atol=0)
    n = nncore.global_norm(g)
    if n > 0:
        cos = sum(float(np.sum(a * b)) for a, b in zip(g[1], once[1])) / (n * nncore.global_norm(once))
        assert cos == pytest.approx(1.0)


def test_sgd_step():
    p = ParameterSet([np.array([[1.0]])], [np.array([0.0])], [True])
    out, st_ = nncore.optimizer_step(p, {1: (np.array([[2.0]]), np.array([0.0]))}, nncore.OptimizerState(), 0.1)
    assert out.weights[0][0, 0] == pytest.approx(0.8)
    assert p.weights[0][0, 0] == 1.0


def test_zero_grads_still_advance_adam():
    p = ParameterSet([np.array([[1.0]])], [np.array([0.5])], [True])
    z = {1: (np.zeros((1, 1)), np.zeros(1))}
    out, s = nncore.optimizer_step(p, z, nncore.OptimizerState("adam"), 0.01)
    assert s.step == 1 and out.digest() == p.digest()


def test_adam_matches_hand_formula():
    # one step on a scalar: m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2
    w0, g, lr = 0.3, -0.7, 0.01
    m = (1 - 0.9) * g
    v = (1 - 0.999) * g * g
    expected = w0 - lr * (m / (1 - 0.9)) / (math.sqrt(v / (1 - 0.999)) + 1e-8)
    p = ParameterSet([np.array([[w0]])], [np.array([0.0])], [True])
    out, s = nncore.optimizer_step(p, {1: (np.array([[g]]), np.array([0.0]))}, nncore.OptimizerState("adam"), lr)
    assert out.weights[0][0, 0] == pytest.approx(expected, abs=1e-15)
    assert s.m[1][0][0, 0] == pytest.approx(m) and s.v[1][0][0, 0] == pytest.approx(v)


def test_nonpositive_lr_rejected():
    p = ParameterSet([np.array([[1.0]])], [np.array([0.0])], [True])
    with pytest.raises(InputError):
        nncore.optimizer_step(p, {}, nncore.OptimizerState(), 0.0)


def test_grad_for_frozen_layer_rejected():
    p = ParameterSet([np.array([[1.0]])], [np.array([0.0])], [False])
    with pytest.raises(ContractError):
        nncore.optimizer_step(p, {1: (np.ones((1, 1)), np.ones(1))}, nncore.OptimizerState(), 0.1)


def test_training_is_deterministic():
    def go():
        rng = np.random.default_rng(3)
        g = nncore.mlp_graph(4, 6, 3, 3)
        p = nncore.init_params(g, rng)
        s = nncore.OptimizerState("adam")
        for _ in range(20):
            x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
            _, gr = nncore.backward(p, g, nncore.forward(p, g, x)[1], y)
            p, s = nncore.optimizer_step(p, nncore.clip_global_norm(gr, 1.0), s, 0.01)
        return p.digest()
    assert go() == go()


# ---------------------------------------------------------------- quantization


def test_quantize_constant_tensor_round_trips():
    q = nncore.quantize_tensor(np.full((3, 4), 0.5))
    assert q.scale == 1.0 and not q.codes.any()
    assert (q.dequantize() == 0.5).all()


def test_quantization_error_bound_on_unit_range():
    # every value on a fine grid plus each of the 256 levels and midpoints between them
    levels = -1 + np.arange(256) * (2 / 255)
    mids = levels[:-1] + 1 / 255
    x = np.concatenate([np.linspace(-1, 1, 10001), levels, mids])
    q = nncore.quantize_tensor(x)
    assert q.scale == pytest.approx(2 / 255)
    assert np.abs(q.dequantize() - x).max() <= 2 / 255 / 2 + 1e-15


def test_quantizing_updated_layer_is_refused():
    g = nncore.mlp_graph(3, 4, 2, 3)
    p = nncore.init_params(g, np.random.default_rng(0), updated={1})
    with pytest.raises(ContractError):
        nncore.quantize_frozen(p, layers=[1])
    q = nncore.quantize_frozen(p)
    assert q.storage == ["full-precision", "quantized-8bit", "quantized-8bit"]
    with pytest.raises(ContractError):
        q.with_updates({2})


def _logit_bound(full, quant, graph, x):
    """Per-sample worst-case logit perturbation from layer-wise spectral norms."""
    delta = np.zeros(len(x))
    a = x
    for k in range(1, graph.n_param_layers + 1):
        w, b = full.layer(k)
        wq, bq = quant.layer(k)
        dw = np.linalg.norm(wq - w, 2)
        delta = np.linalg.norm(wq, 2) * delta + dw * np.linalg.norm(a, axis=1) + np.linalg.norm(bq - b)
        a = a @ w + b
        if k < graph.n_param_layers:
            a = np.maximum(a, 0)
    return delta


def test_quantized_forward_stays_within_bound():
    rng = np.random.default_rng(11)
    g = nncore.mlp_graph(8, 16, 4, 5)
    p = nncore.init_params(g, rng, updated={1, 5})
    q = nncore.quantize_frozen(p)
    x = rng.normal(size=(32, 8))
    full, _ = nncore.forward(p, g, x)
    approx, _ = nncore.forward(q, g, x)
    diff = np.linalg.norm(full - approx, axis=1)
    assert diff.max() > 0
    assert (diff <= _logit_bound(p, q, g, x) + 1e-12).all()
    for k in (2, 3, 4):
        w, _ = q.layer(k)
        assert np.abs(w - p.weights[k - 1]).max() <= q.weights[k - 1].scale / 2 + 1e-15


def test_serialized_size_close_to_analytic_bytes():
    g = nncore.mlp_graph(20, 50, 10, 5)
    p = nncore.init_params(g, np.random.default_rng(0))
    blob = nncore.serialize_params(p)
    model_bytes = 4 * g.total_params()
    assert model_bytes <= len(blob) <= 1.01 * model_bytes
    back = nncore.deserialize_params(blob)
    for i in range(1, 6):
        np.testing.assert_allclose(back[i][0], p.weights[i - 1], rtol=1e-6)
