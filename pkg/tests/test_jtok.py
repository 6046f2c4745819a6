import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from jtoklab import jtok as jt
from jtoklab import numerics as nx
from jtoklab.numerics import Tensor

finite = st.floats(-5, 5, allow_nan=False)


def layer_with(row, s, eps=0.0, normalize=True):
    return jt.JTokLayer(np.array([row], dtype=float), np.array(s, dtype=float), eps, normalize)


def test_gate_345():
    p = jt.gate_vector(layer_with([3.0, 4.0], [1.0, 1.0]), 0)
    assert np.allclose(p, [1.6, 1.8], rtol=1e-15)


def test_gate_identity_cases():
    assert np.array_equal(jt.gate_vector(layer_with([0.0, 0.0, 0.0], [1, 2, 3], eps=1e-6), 0), np.ones(3))
    assert np.array_equal(jt.gate_vector(layer_with([5.0, -1.0, 2.0], [0, 0, 0]), 0), np.ones(3))


def test_gate_out_of_range():
    with pytest.raises(IndexError):
        jt.gate_vector(layer_with([1.0], [1.0]), 1)


def test_apply_gate_examples():
    assert np.allclose(jt.apply_gate([1.0, 2.0], [1.6, 1.8], [0.0, 0.0]), [1.6, 3.6])
    a = np.array([0.3, -0.2])
    assert np.array_equal(jt.apply_gate([0.0, 0.0], [2.0, 3.0], a), a)
    assert np.array_equal(jt.apply_gate([1.0, 2.0], [1.0, 1.0], a), a + [1.0, 2.0])
    with pytest.raises(ValueError):
        jt.apply_gate([1.0], [1.0, 1.0], [0.0, 0.0])


def test_no_norm_gate():
    p = jt.gate_vector(layer_with([3.0, 4.0], [0.5, 2.0], normalize=False), 0)
    assert np.array_equal(p, 1.0 + np.array([0.5, 2.0]) * np.array([3.0, 4.0]))


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_gate_bound(row, s):
    p = jt.gate_vector(layer_with(row, s, eps=1e-6), 0)
    assert np.max(np.abs(p - 1.0)) <= np.max(np.abs(s)) + 1e-15


@given(arrays(np.float64, 5, elements=finite))
def test_hypersphere_radius(u):
    n = np.linalg.norm(u)
    v = jt._normalize(u, 1e-6)
    if n > 0:
        assert 0 < np.linalg.norm(v) <= 1.0
        assert np.isclose(np.linalg.norm(v), n / (n + 1e-6), rtol=1e-12)


def test_token_locality():
    rng = np.random.default_rng(0)
    layer = jt.JTokLayer.init(6, 4, rng)
    layer.scaler = rng.normal(size=4)
    before = jt.gate_vector(layer, 2)
    layer.table[[0, 1, 3, 4, 5]] += rng.normal(size=(5, 4))
    assert np.array_equal(jt.gate_vector(layer, 2), before)


def _layer_loss(row, s, dm, a, g, eps, normalize):
    lay = jt.JTokLayer(row[None, :], s, eps, normalize)
    h, _ = jt.jtok_forward(lay, 0, dm, a)
    return float(np.sum(g * h))


@pytest.mark.parametrize("normalize", [True, False])
def test_backward_matches_finite_differences(normalize):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(25):
        row, s, dm, a, g = (rng.normal(size=8) for _ in range(5))
        lay = jt.JTokLayer(row[None, :], s, 1e-6, normalize)
        _, cache = jt.jtok_forward(lay, 0, dm, a)
        got = jt.jtok_backward(g, cache)
        args = dict(row=row, s=s, dm=dm, a=a)
        for key, name in (("row", "row"), ("scaler", "s"), ("dm", "dm"), ("a_tilde", "a")):
            def fn(v, name=name):
                kw = dict(args, **{name: v})
                return _layer_loss(kw["row"], kw["s"], kw["dm"], kw["a"], g, 1e-6, normalize)
            num = nx.central_difference(fn, args[name], 1e-5, np.longdouble)
            worst = max(worst, nx.rel_error(got[key], num))
    assert worst < 1e-5


def test_backward_zero_scaler_gives_zero_row_grad():
    rng = np.random.default_rng(2)
    lay = jt.JTokLayer(rng.normal(size=(1, 5)), np.zeros(5))
    _, cache = jt.jtok_forward(lay, 0, rng.normal(size=5), rng.normal(size=5))
    assert np.array_equal(jt.jtok_backward(rng.normal(size=5), cache)["row"], np.zeros(5))


def test_backward_at_zero_row():
    # at u = 0 the map u/(|u|+eps) has derivative I/eps; a large eps keeps the
    # central-difference truncation error far below tolerance
    rng = np.random.default_rng(4)
    eps = 0.5
    s, dm, a, g = (rng.normal(size=8) for _ in range(4))
    lay = jt.JTokLayer(np.zeros((1, 8)), s, eps)
    _, cache = jt.jtok_forward(lay, 0, dm, a)
    got = jt.jtok_backward(g, cache)["row"]
    assert np.allclose(got, g * dm * s / eps, rtol=1e-14)
    num = nx.central_difference(lambda r: _layer_loss(r, s, dm, a, g, eps, True),
                                np.zeros(8), 1e-6, np.longdouble)
    assert nx.rel_error(got, num) < 1e-5


def test_gate_tensor_matches_per_token():
    rng = np.random.default_rng(5)
    lay = jt.JTokLayer.init(7, 4, rng)
    lay.scaler = rng.normal(size=4)
    ids = rng.integers(0, 7, size=(2, 3))
    p = jt.gate_tensor(Tensor(lay.table), Tensor(lay.scaler), ids, lay.eps).data
    for b in range(2):
        for t in range(3):
            assert np.allclose(p[b, t], jt.gate_vector(lay, ids[b, t]), rtol=1e-14, atol=0)


def test_gate_tensor_grad_check():
    rng = np.random.default_rng(6)
    ids = np.array([[0, 3, 3, 1]])
    for normalize in (True, False):
        for _ in range(20):
            params = {"table": rng.normal(size=(4, 5)), "s": rng.normal(size=5)}
            w = rng.normal(size=(1, 4, 5))

            def f(p):
                gate = jt.gate_tensor(p["table"], p["s"], ids, 1e-6, normalize)
                return nx.sum_all(nx.mul_const(gate, w))

            assert nx.grad_check(f, params, oracle_dtype=np.longdouble) < 1e-5
