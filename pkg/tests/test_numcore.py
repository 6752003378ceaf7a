import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radarasr import numcore as nc
from radarasr.errors import EmptyRow, NonFiniteError, NonFiniteProbe, NotScalar, ShapeMismatch
from radarasr.numcore import Tape, Tensor, backward, grad_check


@pytest.fixture(autouse=True)
def _f64():
    with nc.precision("float64"):
        yield


def _triple_loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(n)] for i in range(m)]


def test_matmul_examples():
    ident = Tensor(np.eye(2))
    col = Tensor([[5.0], [6.0]])
    assert np.array_equal(nc.matmul(ident, col).data, [[5.0], [6.0]])
    a = [[1.0, 2.0], [3.0, 4.0]]
    expected = _triple_loop_matmul(a, [[5.0], [6.0]])
    assert expected == [[17.0], [39.0]]
    assert np.array_equal(nc.matmul(Tensor(a), col).data, expected)
    with pytest.raises(ShapeMismatch):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_masked_softmax_examples():
    out = nc.masked_softmax(Tensor([0.0, 0.0]), np.array([1, 1], bool)).data
    assert np.allclose(out, [0.5, 0.5])
    out = nc.masked_softmax(Tensor([np.log(2.0), 0.0]), np.array([1, 1], bool)).data
    assert np.allclose(out, [2 / 3, 1 / 3], atol=1e-15)
    out = nc.masked_softmax(Tensor([9.0, 7.0]), np.array([1, 0], bool)).data
    assert out[0] == 1.0 and out[1] == 0.0
    with pytest.raises(EmptyRow):
        nc.masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[1, 0], [0, 0]], bool))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-1e3, 1e3), st.data())
def test_masked_softmax_shift_invariant(values, c, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(values), max_size=len(values))))
    mask[0] = True
    x = np.array(values)
    a = nc.masked_softmax(Tensor(x), mask).data
    b = nc.masked_softmax(Tensor(x + c), mask).data
    assert np.all(a[~mask] == 0.0)
    assert abs(a[mask].sum() - 1.0) < 1e-12
    assert np.max(np.abs(a - b)) < 1e-12


def test_layer_norm_examples():
    one, zero = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])
    assert np.allclose(nc.layer_norm(Tensor([5.0, 5.0]), one, zero).data, [0.0, 0.0])
    assert np.allclose(nc.layer_norm(Tensor([1.0, 3.0]), one, zero, eps=1e-12).data, [-1.0, 1.0])
    assert np.allclose(nc.layer_norm(Tensor([0.0, 0.0]), one, Tensor([7.0, 7.0])).data, [7.0, 7.0])


def test_backward_examples():
    with Tape() as tape:
        x = Tensor([3.0], requires_grad=True)
        y = Tensor([5.0], requires_grad=True)
        z = Tensor([2.0], requires_grad=True)
        loss = (x * y).sum()
    grads = backward(loss, tape, wrt=[z])
    assert grads[x.id].data[0] == 5.0 and grads[y.id].data[0] == 3.0
    assert grads[z.id].data[0] == 0.0
    with pytest.raises(NotScalar):
        backward(x * y + Tensor([1.0, 2.0]), tape)


def test_softmax_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=5)
    c = 2
    onehot = np.eye(5)[c]

    def ce(z):
        return -(nc.log_softmax(z) * Tensor(onehot)).sum()

    with Tape() as tape:
        z = Tensor(logits, requires_grad=True)
        loss = ce(z)
    analytic = backward(loss, tape)[z.id].data
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert np.allclose(analytic, p - onehot, atol=1e-12)
    h = 1e-6
    numeric = np.array([(ce(Tensor(logits + h * e)).item() - ce(Tensor(logits - h * e)).item()) / (2 * h)
                        for e in np.eye(5)])
    assert np.allclose(analytic, numeric, atol=1e-8)


def test_fanout_gradients_accumulate():
    with Tape() as tape:
        x = Tensor([2.0], requires_grad=True)
        loss = (x * x + x * 3.0).sum()
    assert backward(loss, tape)[x.id].data[0] == 7.0


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    a_data, b_data = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

    def run():
        with Tape() as tape:
            a = Tensor(a_data, requires_grad=True)
            b = Tensor(b_data, requires_grad=True)
            loss = nc.log_softmax(nc.relu(a @ b)).sum() + (a * a).sum()
        g = backward(loss, tape)
        return g[a.id].data, g[b.id].data

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_nonfinite_primitive_raises():
    with pytest.raises(NonFiniteError):
        nc.log(Tensor([0.0, 1.0]))


def test_grad_check_examples():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-8
    assert grad_check(lambda t: Tensor(3.0) + 0.0 * t.sum(), x) == 0.0
    with pytest.raises(NonFiniteProbe):
        grad_check(lambda t: nc.log(t - 1.0).sum(), Tensor([1.0 + 1e-6]), step=1e-5)


# Every primitive, 10 seeds, relative error < 1e-4 with step 1e-5.
def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


PRIMITIVE_CASES = {
    "add": lambda r: (r.normal(size=(3, 4)), lambda t: ((t + _weights(r, (4,))) * _weights(r, (3, 4))).sum()),
    "sub": lambda r: (r.normal(size=(3, 4)), lambda t: ((_weights(r, (1, 4)) - t) * _weights(r, (3, 4))).sum()),
    "mul": lambda r: (r.normal(size=(3, 4)), lambda t: (t * _weights(r, (3, 4))).sum()),
    "div": lambda r: (r.uniform(1, 2, size=(3, 4)), lambda t: (_weights(r, (3, 4)) / t).sum()),
    "exp": lambda r: (r.normal(size=(5,)), lambda t: (nc.exp(t) * _weights(r, (5,))).sum()),
    "log": lambda r: (r.uniform(0.5, 2, size=(5,)), lambda t: (nc.log(t) * _weights(r, (5,))).sum()),
    "relu": lambda r: (r.choice([-1, 1], size=(6,)) * r.uniform(0.1, 1, size=(6,)),
                       lambda t: (nc.relu(t) * _weights(r, (6,))).sum()),
    "square": lambda r: (r.normal(size=(5,)), lambda t: (nc.square(t) * _weights(r, (5,))).sum()),
    "matmul": lambda r: (r.normal(size=(2, 3, 4)), lambda t: ((t @ _weights(r, (4, 5))) * _weights(r, (2, 3, 5))).sum()),
    "transpose": lambda r: (r.normal(size=(2, 3, 4)), lambda t: (t.transpose(2, 0, 1) * _weights(r, (4, 2, 3))).sum()),
    "reshape": lambda r: (r.normal(size=(2, 6)), lambda t: (t.reshape(3, 4) * _weights(r, (3, 4))).sum()),
    "getitem": lambda r: (r.normal(size=(5, 3)), lambda t: (t[1:4, ::2] * _weights(r, (3, 2))).sum()),
    "concat": lambda r: (r.normal(size=(2, 3)), lambda t: (nc.concat([t, t * 2.0], axis=0) * _weights(r, (4, 3))).sum()),
    "sum": lambda r: (r.normal(size=(3, 4)), lambda t: (t.sum(axis=1) * _weights(r, (3,))).sum()),
    "mean": lambda r: (r.normal(size=(3, 4)), lambda t: (t.mean(axis=0, keepdims=True) * _weights(r, (1, 4))).sum()),
    "masked_softmax": lambda r: (r.normal(size=(3, 4)),
                                 lambda t: (nc.masked_softmax(t, np.tril(np.ones((3, 4), bool))) * _weights(r, (3, 4))).sum()),
    "log_softmax": lambda r: (r.normal(size=(3, 4)), lambda t: (nc.log_softmax(t) * _weights(r, (3, 4))).sum()),
    "layer_norm": lambda r: (r.normal(size=(3, 6)),
                             lambda t: (nc.layer_norm(t, _weights(r, (6,)), _weights(r, (6,))) * _weights(r, (3, 6))).sum()),
    "conv2d": lambda r: (r.normal(size=(4, 5, 2)),
                         lambda t: (nc.conv2d(t, _weights(r, (3, 3, 2, 3)), _weights(r, (3,))) * _weights(r, (4, 5, 3))).sum()),
    "max_pool2x2": lambda r: (r.permutation(30).reshape(5, 3, 2) * 0.1,
                              lambda t: (nc.max_pool2x2(t) * _weights(r, (3, 2, 2))).sum()),
    "embedding": lambda r: (r.normal(size=(4, 3)),
                            lambda t: (nc.embedding(t, [0, 2, 2, 3]) * _weights(r, (4, 3))).sum()),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, f = PRIMITIVE_CASES[name](rng)
        weights_rng_state = rng.bit_generator.state

        def fixed(t):
            # same random coefficients on every probe
            rng.bit_generator.state = weights_rng_state
            return f(t)

        assert grad_check(fixed, Tensor(x), step=1e-5) < 1e-4, (name, seed)


def test_layer_norm_gain_and_bias_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 5)))
    coef = Tensor(rng.normal(size=(3, 5)))
    bias = Tensor(rng.normal(size=5))
    gain = Tensor(rng.normal(size=5))
    assert grad_check(lambda g: (nc.layer_norm(x, g, bias) * coef).sum(), gain) < 1e-4
    assert grad_check(lambda b: (nc.layer_norm(x, gain, b) * coef).sum(), bias) < 1e-4


def test_conv2d_kernel_gradient_and_reference():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out = nc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((4, 5, 3))
    for t in range(4):
        for f in range(5):
            for co in range(3):
                ref[t, f, co] = b[co] + np.sum(pad[t:t + 3, f:f + 3, :] * w[:, :, :, co])
    assert np.allclose(out, ref, atol=1e-12)
    coef = Tensor(rng.normal(size=(4, 5, 3)))
    assert grad_check(lambda k: (nc.conv2d(Tensor(x), k, Tensor(b)) * coef).sum(), Tensor(w)) < 1e-4


def test_max_pool_rounds_up():
    x = Tensor(np.arange(33 * 4 * 1, dtype=float).reshape(33, 4, 1))
    assert nc.max_pool2x2(x).shape == (17, 2, 1)
