import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from naht_mat import numerics as nx

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def vec(shape):
    return arrays(np.float64, shape, elements=finite)


def grad_of(f, *values):
    nodes = [nx.param(v.copy()) for v in values]
    nx.backward(f(*nodes))
    return [n.grad for n in nodes]


def numeric_grad(f, *values, h=1e-6):
    out = []
    for i, v in enumerate(values):
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus = [x.copy() for x in values]
            minus = [x.copy() for x in values]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (f(*map(nx.as_node, plus)).value - f(*map(nx.as_node, minus)).value) / (2 * h)
        out.append(g)
    return out


def test_linear_matches_numpy():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    out = nx.linear(x, nx.param(w), nx.param(b))
    np.testing.assert_allclose(out.value, x @ w + b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(vec((3, 4)), vec((4, 2)))
def test_matmul_gradient(a, b):
    f = lambda x, y: nx.sum_(nx.square(nx.matmul(x, y)))
    ga, gb = grad_of(f, a, b)
    na, nb = numeric_grad(f, a, b)
    np.testing.assert_allclose(ga, na, atol=1e-4, rtol=1e-4)
    np.testing.assert_allclose(gb, nb, atol=1e-4, rtol=1e-4)


@settings(max_examples=50, deadline=None)
@given(vec((3, 6)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax(nx.as_node(x)).value
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(nx.log_softmax(nx.as_node(x)).value), p, atol=1e-12)


def test_softmax_shift_invariant():
    x = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_allclose(nx.softmax(nx.as_node(x)).value, nx.softmax(nx.as_node(x + 1000)).value)


@settings(max_examples=30, deadline=None)
@given(vec((2, 5)))
def test_layer_norm_normalises(x):
    x = x + np.arange(5)  # avoid constant rows
    y = nx.layer_norm(nx.as_node(x), nx.param(np.ones(5)), nx.param(np.zeros(5))).value
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-9)


def test_layer_norm_gradient():
    rng = np.random.default_rng(1)
    x, g, b = rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))
    f = lambda x, g, b: nx.sum_(nx.mul(nx.layer_norm(x, g, b), w))
    for a, n in zip(grad_of(f, x, g, b), numeric_grad(f, x, g, b)):
        np.testing.assert_allclose(a, n, atol=1e-6, rtol=1e-5)


def test_gelu_gradient():
    x = np.linspace(-3, 3, 11)
    f = lambda x: nx.sum_(nx.gelu(x))
    np.testing.assert_allclose(grad_of(f, x)[0], numeric_grad(f, x)[0], atol=1e-7)


def test_attention_masked_keys_have_no_influence():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 4, 3))
    mask = np.ones((1, 4, 4), dtype=bool)
    mask[:, :, 2] = False
    out = nx.scaled_dot_attention(nx.as_node(q), nx.as_node(k), nx.as_node(v), mask).value
    k2, v2 = k.copy(), v.copy()
    k2[:, 2] = 99.0
    v2[:, 2] = -99.0
    out2 = nx.scaled_dot_attention(nx.as_node(q), nx.as_node(k2), nx.as_node(v2), mask).value
    assert np.array_equal(out, out2)


def test_attention_gradient_under_causal_mask():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(2, 3, 4)) for _ in range(3))
    mask = np.tril(np.ones((3, 3), dtype=bool))[None].repeat(2, 0)
    w = rng.normal(size=(2, 3, 4))
    f = lambda q, k, v: nx.sum_(nx.mul(nx.scaled_dot_attention(q, k, v, mask), w))
    grads = grad_of(f, q, k, v)
    for a, n in zip(grads, numeric_grad(f, q, k, v)):
        np.testing.assert_allclose(a, n, atol=1e-6, rtol=1e-5)


def test_attention_fully_masked_row_raises():
    x = nx.as_node(np.zeros((1, 2, 2)))
    mask = np.array([[[True, False], [False, False]]])
    with pytest.raises(ValueError):
        nx.scaled_dot_attention(x, x, x, mask)


def test_take_accumulates_repeated_indices():
    p = nx.param(np.arange(3.0))
    nx.backward(nx.sum_(nx.take(p, np.array([0, 0, 2]), axis=0)))
    assert p.grad.tolist() == [2.0, 0.0, 1.0]


def test_backward_requires_scalar():
    p = nx.param(np.ones(3))
    with pytest.raises(ValueError):
        nx.backward(nx.mul(p, 2.0))


def test_no_grad_builds_no_graph():
    p = nx.param(np.ones(2))
    with nx.no_grad():
        y = nx.sum_(nx.mul(p, 3.0))
    assert not y.requires_grad


def test_shared_leaf_accumulates():
    p = nx.param(np.array([2.0]))
    nx.backward(nx.sum_(nx.mul(p, p)))
    assert p.grad[0] == 4.0


def test_adam_first_step_moves_by_lr():
    s = nx.ParamStore()
    p = s.add("w", np.array([1.0, -1.0]))
    p.grad = np.array([0.5, -3.0])
    nx.adam_step(s, lr=0.01)
    np.testing.assert_allclose(p.value, [0.99, -0.99], atol=1e-8)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(4)
    s = nx.ParamStore()
    p = s.add("w", rng.normal(size=3))
    x = p.value.copy()
    m = v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        p.grad = g.copy()
        nx.adam_step(s, lr=1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.value, x, atol=1e-12)


def test_clip_grad_norm():
    s = nx.ParamStore()
    a = s.add("a", np.zeros(2))
    a.grad = np.array([3.0, 4.0])
    before = s.clip_grad_norm(1.0)
    assert before == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])


def test_duplicate_param_name_rejected():
    s = nx.ParamStore()
    s.add("a", np.zeros(1))
    with pytest.raises(KeyError):
        s.add("a", np.zeros(1))


def test_finite_diff_check_passes_and_catches_a_wrong_gradient():
    rng = np.random.default_rng(5)
    s = nx.ParamStore()
    w = s.add("w", rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))
    good = lambda: nx.sum_(nx.gelu(nx.linear(x, w)))
    assert nx.finite_diff_check(good, s, n_coords=12).passed

    def broken():
        y = nx.linear(x, w)
        wrong = nx.Node(y.value, [(y, lambda g: 0.5 * g)], True)  # halves the gradient
        return nx.sum_(wrong)

    report = nx.finite_diff_check(broken, s, n_coords=12)
    assert not report.passed
    assert report.max_rel_err > 0.4


def test_finite_diff_step_bounds():
    s = nx.ParamStore()
    s.add("w", np.ones(1))
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda: nx.sum_(s["w"]), s, h=1e-2)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    s = nx.ParamStore()
    s.add("a", rng.normal(size=(2, 3)))
    s.add("b", rng.normal(size=4))
    for _, p in s.items():
        p.grad = rng.normal(size=p.value.shape)
    nx.adam_step(s)
    path = tmp_path / "m.ckpt"
    nx.save_checkpoint(path, s, {"iteration": 3})
    t = nx.ParamStore()
    t.add("a", np.zeros((2, 3)))
    t.add("b", np.zeros(4))
    meta = nx.load_checkpoint(path, t)
    assert meta["iteration"] == 3
    for (n1, p1), (n2, p2) in zip(s.items(), t.items()):
        assert n1 == n2 and np.array_equal(p1.value, p2.value)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    s = nx.ParamStore()
    s.add("a", np.zeros(3))
    nx.save_checkpoint(tmp_path / "c", s)
    t = nx.ParamStore()
    t.add("a", np.zeros(4))
    with pytest.raises(ValueError):
        nx.load_checkpoint(tmp_path / "c", t)
