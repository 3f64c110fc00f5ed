import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalanchor import adcore as ad
from modalanchor.adcore import ParamStore, Tensor
from modalanchor.errors import ContractError, DimensionError, NumericError, ParameterError


def store(**arrays):
    p = ParamStore()
    for name, value in arrays.items():
        p.add(name, np.asarray(value, dtype=np.float64), "visual")
    return p


def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_l2_normalize_345():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_softmax_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_sum_of_squares_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, name="x")
    grads = ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(grads["x"], [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_mean_grad():
    x = Tensor(np.arange(4.0), requires_grad=True, name="x")
    ad.backward(ad.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(DimensionError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_only():
    out = ad.mul(Tensor(np.ones((2, 2))), 3.0)
    np.testing.assert_array_equal(out.data, 3 * np.ones((2, 2)))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_accumulation_over_two_paths():
    x = Tensor([0.3, -1.2], requires_grad=True, name="x")
    ad.backward(ad.sum(ad.tanh(x) + x * x))
    # each path separately
    a = Tensor([0.3, -1.2], requires_grad=True)
    ad.backward(ad.sum(ad.tanh(a)))
    b = Tensor([0.3, -1.2], requires_grad=True)
    ad.backward(ad.sum(b * b))
    np.testing.assert_allclose(x.grad, a.grad + b.grad, rtol=0, atol=1e-15)


def test_leaf_used_twice_in_product():
    x = Tensor([2.0], requires_grad=True)
    ad.backward(ad.sum(x * x * x))
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_graph_without_requires_grad():
    out = ad.tanh(Tensor([1.0]))
    assert not out.requires_grad


def test_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 2))
    p = store(w1=rng.normal(size=(4, 5)), b1=rng.normal(size=5), w2=rng.normal(size=(5, 2)), b2=rng.normal(size=2))

    def loss(t):
        h = ad.tanh(ad.linear(x, t["w1"], t["b1"]))
        return ad.mean(ad.square(ad.linear(h, t["w2"], t["b2"]) - y))

    assert ad.check_gradient(loss, p, step=1e-5) < 1e-4


def test_check_gradient_quadratic_and_constant():
    p = store(theta=[0.5, -1.5, 2.0])
    assert ad.check_gradient(lambda t: ad.sum(ad.square(t["theta"])), p) < 1e-8
    assert ad.check_gradient(lambda t: Tensor(3.0) + ad.sum(t["theta"]) * 0.0, p) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_check_gradient_rejects_non_finite():
    p = store(theta=[-1.0])
    with pytest.raises(NumericError):
        ad.check_gradient(lambda t: ad.sum(ad.log(t["theta"])), p)
    with pytest.raises(ParameterError):
        ad.check_gradient(lambda t: ad.sum(t["theta"]), p, step=0.0)


def test_sgd_step_arithmetic():
    p = store(theta=[1.0])
    ad.sgd_step(p, {"theta": np.array([2.0])}, lr=0.1)
    np.testing.assert_allclose(p["theta"], [0.8])


def test_sgd_step_weight_decay_toward_anchor():
    p = store(theta=[1.0])
    ad.sgd_step(p, {"theta": np.array([0.0])}, lr=0.5, weight_decay=1.0, anchor={"theta": np.array([0.6])})
    np.testing.assert_allclose(p["theta"], [0.8])


def test_sgd_zero_lr_and_frozen():
    p = store(a=[1.0], b=[2.0])
    p.set_trainable("b", False)
    ad.sgd_step(p, {"a": np.array([5.0]), "b": np.array([5.0])}, lr=0.0)
    assert p["a"][0] == 1.0
    ad.sgd_step(p, {"a": np.array([1.0]), "b": np.array([5.0])}, lr=0.1)
    assert p["b"][0] == 2.0


def test_sgd_missing_gradient():
    p = store(a=[1.0])
    with pytest.raises(ContractError):
        ad.sgd_step(p, {}, lr=0.1)


def test_determinism():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))

    def run():
        w = Tensor(np.linspace(-1, 1, 6).reshape(3, 2), requires_grad=True, name="w")
        loss = ad.sum(ad.log_softmax(ad.matmul(x, w)))
        ad.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_embed_mean_matches_dense_average():
    table = np.arange(12.0).reshape(4, 3)
    tokens = np.array([[0, 1, 1], [3, 3, 3]])
    out = ad.embed_mean(Tensor(table), tokens).data
    np.testing.assert_allclose(out, [table[[0, 1, 1]].mean(0), table[3]])
    with pytest.raises(DimensionError):
        ad.embed_mean(Tensor(table), np.array([[4]]))


def test_custom_op_uses_supplied_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.custom_op(np.sum(x.data**3), (x,), lambda g: (3 * g * x.data**2,), "cube_sum")
    ad.backward(y)
    np.testing.assert_array_equal(x.grad, [3.0, 12.0])


# property-based gradient checks ---------------------------------------------------

UNARY = {
    "tanh": (ad.tanh, -2.0, 2.0),
    "exp": (ad.exp, -2.0, 2.0),
    "log": (ad.log, 0.2, 3.0),
    "square": (ad.square, -2.0, 2.0),
    "relu": (ad.relu, -2.0, 2.0),
    "abs": (ad.abs, -2.0, 2.0),
    "softmax": (ad.softmax, -3.0, 3.0),
    "log_softmax": (ad.log_softmax, -3.0, 3.0),
    "l2_normalize": (ad.l2_normalize, -2.0, 2.0),
    "transpose": (ad.transpose, -2.0, 2.0),
    "sum0": (lambda a: ad.sum(a, axis=0), -2.0, 2.0),
    "mean1": (lambda a: ad.mean(a, axis=1), -2.0, 2.0),
}


def _away_from_kinks(x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    # relu/abs are not differentiable at 0; keep samples clear of it
    return np.where(np.abs(x) < step, step * 10, x)


@settings(max_examples=120, deadline=None)
@given(
    op=st.sampled_from(sorted(UNARY)),
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_unary_ops_match_finite_differences(op, rows, cols, seed):
    fn, lo, hi = UNARY[op]
    rng = np.random.default_rng(seed)
    p = store(x=_away_from_kinks(rng.uniform(lo, hi, size=(rows, cols))))
    if op == "l2_normalize":
        p.values["x"] = p["x"] + np.sign(p["x"]) * 0.5
    out_shape = fn(Tensor(p["x"])).shape
    weights = rng.normal(size=out_shape)
    err = ad.check_gradient(lambda t: ad.sum(fn(t["x"]) * weights), p, step=1e-6)
    assert err < 1e-4, (op, err)


BINARY = {
    "add": (ad.add, False),
    "sub": (ad.sub, False),
    "mul": (ad.mul, False),
    "div": (ad.div, True),
}


@settings(max_examples=100, deadline=None)
@given(op=st.sampled_from(sorted(BINARY)), n=st.integers(1, 5), seed=st.integers(0, 2**31 - 1), scalar=st.booleans())
def test_binary_ops_match_finite_differences(op, n, seed, scalar):
    fn, positive = BINARY[op]
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 2.0, size=() if scalar else (n,))
    p = store(a=rng.normal(size=n), b=b if positive else b - 1.25)
    weights = rng.normal(size=n)
    assert ad.check_gradient(lambda t: ad.sum(fn(t["a"], t["b"]) * weights), p, step=1e-6) < 1e-4


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_matrix_ops_match_finite_differences(n, k, m, seed):
    rng = np.random.default_rng(seed)
    r = min(k, m)
    p = store(
        x=rng.normal(size=(n, k)),
        w=rng.normal(size=(k, m)),
        b=rng.normal(size=m),
        a=rng.normal(size=(r, m)),
        bb=rng.normal(size=(k, r)),
        y=rng.normal(size=(2, k)),
    )
    wts = rng.normal(size=(n + 2, m))

    def loss(t):
        w = ad.add_lowrank(t["w"], t["a"], t["bb"], 0.7)
        h = ad.concat([ad.linear(t["x"], w, t["b"]), ad.matmul(t["y"], t["w"])])
        return ad.sum(h * wts) + ad.sum(ad.diag(ad.matmul(t["x"], ad.transpose(t["x"]))))

    assert ad.check_gradient(loss, p, step=1e-6) < 1e-4


@settings(max_examples=100, deadline=None)
@given(vocab=st.integers(2, 8), n=st.integers(1, 5), length=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_embedding_and_indexing_match_finite_differences(vocab, n, length, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(n, length))
    p = store(table=rng.normal(size=(vocab, 3)))
    idx = rng.integers(0, n, size=n + 1)
    wts = rng.normal(size=(n + 1, 3))

    def loss(t):
        pooled = ad.embed_mean(t["table"], tokens)
        return ad.sum(ad.take(ad.tanh(pooled), idx) * wts)

    assert ad.check_gradient(loss, p, step=1e-6) < 1e-4


@settings(max_examples=100, deadline=None)
@given(lo=st.floats(-1.0, 0.0), width=st.floats(0.5, 2.0), seed=st.integers(0, 2**31 - 1))
def test_clamp_gradient_zero_outside_range(lo, width, seed):
    rng = np.random.default_rng(seed)
    hi = lo + width
    x = rng.uniform(lo - 1, hi + 1, size=6)
    x = np.where(np.minimum(np.abs(x - lo), np.abs(x - hi)) < 1e-3, (lo + hi) / 2, x)
    t = Tensor(x, requires_grad=True)
    ad.backward(ad.sum(ad.clamp(t, lo, hi)))
    inside = (x > lo) & (x < hi)
    np.testing.assert_array_equal(t.grad, inside.astype(float))
