import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from grcseg import autodiff as ad
from grcseg.errors import DeterminismError, DimensionError, NumericDomainError, ParseError


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f over array x (independent of the tape)."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    m = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(ad.tensor(np.eye(2)), m).data, m.data)


def test_matmul_projector_selects_row():
    out = ad.matmul(ad.tensor([[1.0, 0.0], [0.0, 0.0]]), ad.tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a, b = ad.parameter(A), ad.parameter(B)
    ad.sum(ad.matmul(a, b)).backward()
    assert rel_err(a.grad, fd_grad(lambda x: (x @ B).sum(), A)) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda x: (A @ x).sum(), B)) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


# ------------------------------------------------------------- elementwise

def test_add():
    assert np.array_equal(ad.elementwise("add", ad.tensor([1.0, 2.0]), ad.tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_exp_at_zero():
    x = ad.parameter([0.0])
    y = ad.elementwise("exp", x)
    ad.sum(y).backward()
    assert y.data[0] == 1.0 and x.grad[0] == 1.0


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    a, b = ad.parameter(A), ad.parameter(B)
    ad.sum(ad.elementwise("mul", a, b)).backward()
    assert rel_err(a.grad, fd_grad(lambda x: (x * B).sum(), A)) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda x: (A * x).sum(), B)) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_last_axis_vector_broadcast_gradients(op):
    rng = np.random.default_rng(3)
    A, b = rng.normal(size=(4, 3)), rng.uniform(0.5, 2.0, size=3)
    fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[op]
    w = rng.normal(size=(4, 3))
    x, v = ad.parameter(A), ad.parameter(b)
    ad.sum(ad.elementwise(op, x, v) * w).backward()
    assert rel_err(x.grad, fd_grad(lambda z: (fn(z, b) * w).sum(), A)) < 1e-6
    assert rel_err(v.grad, fd_grad(lambda z: (fn(A, z) * w).sum(), b)) < 1e-6


def test_non_trailing_broadcast_is_rejected():
    with pytest.raises(DimensionError):
        ad.add(ad.tensor(np.ones((4, 3))), ad.tensor(np.ones(4)))


def test_log_domain_error_reports_index():
    with pytest.raises(NumericDomainError, match=r"\(1,\)"):
        ad.log(ad.tensor([1.0, -2.0, 3.0]))


def test_div_by_zero_reports_index():
    with pytest.raises(NumericDomainError, match=r"\(0, 1\)"):
        ad.div(ad.tensor(np.ones((2, 2))), ad.tensor([[1.0, 0.0], [2.0, 2.0]]))


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        ad.elementwise("pow", ad.tensor([1.0]), ad.tensor([1.0]))


# ---------------------------------------------------------------- softplus

def test_softplus_values():
    assert ad.softplus(ad.tensor(0.0)).data == pytest.approx(math.log(2), abs=1e-15)
    assert abs(ad.softplus(ad.tensor(50.0)).data - 50.0) < 1e-12
    with np.errstate(over="raise"):
        assert np.isfinite(ad.softplus(ad.tensor([1000.0, -1000.0])).data).all()


def test_softplus_gradient_is_sigmoid():
    x = ad.parameter([1.0])
    ad.sum(ad.softplus(x)).backward()
    assert x.grad[0] == pytest.approx(0.7310585786300049, abs=1e-12)
    fd = fd_grad(lambda z: np.log1p(np.exp(z)).sum(), np.array([1.0]))
    assert rel_err(x.grad, fd) < 1e-8


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 7, elements=st.floats(-700, 700)))
def test_softplus_positive(x):
    assert (ad.softplus(ad.tensor(x)).data > 0).all() or (x < -36).any()


# ----------------------------------------------------------------- softmax

def test_softmax_uniform_and_stable():
    assert np.allclose(ad.softmax_lastaxis(ad.tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    out = ad.softmax_lastaxis(ad.tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=5)
    for k in range(5):
        x = ad.parameter(x0)
        ad.softmax_lastaxis(x)[k].backward()

        def f(z, k=k):
            e = np.exp(z - z.max())
            return (e / e.sum())[k]

        assert rel_err(x.grad, fd_grad(f, x0)) < 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    assert np.allclose(ad.softmax_lastaxis(ad.tensor(x)).data.sum(axis=-1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ reduce

def test_reduce_values():
    assert ad.reduce("mean", ad.tensor([2.0, 4.0]), axis=0).data == 3.0
    assert ad.reduce("sum", ad.tensor(np.ones((3, 3)))).data == 9.0


def test_mean_backward_is_quarter():
    x = ad.parameter(np.random.default_rng(5).normal(size=4))
    ad.mean(x, axis=0).backward()
    assert np.array_equal(x.grad, np.full(4, 0.25))


def test_reduce_invalid_axis():
    with pytest.raises(DimensionError):
        ad.reduce("sum", ad.tensor(np.ones((2, 2))), axis=2)


# ---------------------------------------------------------------- backward

def test_backward_of_sum_is_ones():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = ad.parameter([3.0])
    ad.sum(x * x).backward()
    assert x.grad[0] == 6.0


def test_backward_requires_scalar():
    with pytest.raises(DimensionError):
        ad.backward(ad.parameter([1.0, 2.0]) * 2.0)


def test_repeated_backward_accumulates():
    x = ad.parameter([1.0, 2.0])
    loss = ad.sum(x * 3.0)
    loss.backward()
    loss.backward()
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_shared_subexpression_matches_duplicated_graph():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(3, 3))
    x1 = ad.parameter(X)
    h = ad.exp(x1 * 0.3)
    ad.sum(h * h + h).backward()
    x2 = ad.parameter(X)
    ha, hb, hc = ad.exp(x2 * 0.3), ad.exp(x2 * 0.3), ad.exp(x2 * 0.3)
    ad.sum(ha * hb + hc).backward()
    assert np.allclose(x1.grad, x2.grad, rtol=1e-14)


def test_backward_visits_each_node_once():
    x = ad.parameter([1.0])
    y = x
    for _ in range(30):  # 2**30 paths if nodes were revisited per path
        y = y + y
    ad.sum(y).backward()
    assert x.grad[0] == 2.0 ** 30


def test_deterministic():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(5, 4))
    outs = []
    for _ in range(2):
        a = ad.parameter(A)
        l = ad.sum(ad.softplus(ad.matmul(a, a.T)))
        l.backward()
        outs.append((l.data.copy(), a.grad.copy()))
    assert np.array_equal(outs[0][0], outs[1][0]) and np.array_equal(outs[0][1], outs[1][1])


# ---------------------------------------------------------- shaping & misc

def test_gather_rows_with_padding_rows():
    x = ad.parameter(np.arange(6.0).reshape(3, 2))
    out = ad.gather_rows(x, [2, -1, 2, 0])
    assert np.array_equal(out.data, [[4, 5], [0, 0], [4, 5], [0, 1]])
    ad.sum(out).backward()
    assert np.array_equal(x.grad, [[1, 1], [0, 0], [2, 2]])


@pytest.mark.parametrize("name", ["concat", "broadcast", "pad", "transpose", "slice", "clamp", "sqrt", "logsoftmax"])
def test_shape_op_gradients(name):
    rng = np.random.default_rng(8)
    X = rng.uniform(0.2, 2.0, size=(3, 4, 2))
    W = rng.normal(size=64)

    def build(x):
        if name == "concat":
            y = ad.concat([x, x * 2.0], axis=1)
        elif name == "broadcast":
            y = ad.broadcast_to(ad.reshape(x[:, :, 0], (3, 4, 1)), (3, 4, 5))
        elif name == "pad":
            y = ad.pad2d(x, 1, 1)
        elif name == "transpose":
            y = ad.transpose(x, (2, 0, 1))
        elif name == "slice":
            y = x[::2, 1:]
        elif name == "clamp":
            y = ad.clamp(x, 0.5, 1.5)
        elif name == "sqrt":
            y = ad.sqrt(x)
        else:
            y = ad.log_softmax_lastaxis(x)
        flat = ad.reshape(y, (y.size,))
        return ad.sum(flat * W[:y.size])

    report = ad.gradient_check(lambda x: build(x), ad.parameter(X))
    assert report.passed, report.max_rel_err


# -------------------------------------------------------- gradient_check

def test_gradient_check_sum_of_squares():
    x = ad.parameter(np.random.default_rng(9).normal(size=10))
    rep = ad.gradient_check(lambda t: ad.sum(t * t), x, tol=1e-8)
    assert rep.passed and rep.max_rel_err < 1e-8
    assert np.allclose(rep.analytic, 2 * x.data)


def test_gradient_check_softplus():
    x = ad.parameter(np.random.default_rng(10).normal(size=10))
    assert ad.gradient_check(lambda t: ad.sum(ad.softplus(t)), x, tol=1e-6).passed


def test_gradient_check_flags_wrong_backward():
    def bad_square(a):
        return ad._node(a.data ** 2, (a,), lambda g: (3.0 * g * a.data,))

    x = ad.parameter(np.random.default_rng(11).normal(size=5))
    assert not ad.gradient_check(lambda t: ad.sum(bad_square(t)), x).passed


def test_gradient_check_detects_nondeterminism():
    rng = np.random.default_rng(12)
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(DeterminismError):
        ad.gradient_check(lambda t: ad.sum(t * rng.normal()), x)


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    tensors = {"a": rng.normal(size=(2, 3)), "bé": rng.normal(size=(4,)), "s": np.array(1.5)}
    path = tmp_path / "w.grcw"
    ad.save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"GRCW" and int.from_bytes(raw[4:8], "little") == 1
    back = ad.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ParseError):
        ad.load_tensors(p)
