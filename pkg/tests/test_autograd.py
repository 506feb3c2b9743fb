import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrl_tall import autograd as ag
from ctrl_tall.autograd import ParameterStore, Tensor
from ctrl_tall.errors import DimensionError, NumericalError


def _numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up.flat[i] += eps
        down.flat[i] -= eps
        g.flat[i] = (f(up) - f(down)) / (2 * eps)
    return g


def _check_unary(op, x, tol=1e-6):
    t = Tensor(x, requires_grad=True)
    ag.sum_all(op(t)).backward()
    num = _numeric_grad(lambda v: op(Tensor(v)).data.sum(), x)
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=1e-8)


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert ag.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_zero(self):
        assert ag.matmul(Tensor([[0.0]]), Tensor([[7.5]])).data.tolist() == [[0.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        ag.sum_all(ag.square(ag.matmul(a, b))).backward()
        np.testing.assert_allclose(a.grad, _numeric_grad(lambda v: ((v @ b0) ** 2).sum(), a0), rtol=1e-6)
        np.testing.assert_allclose(b.grad, _numeric_grad(lambda v: ((a0 @ v) ** 2).sum(), b0), rtol=1e-6)


class TestElementwise:
    def test_add_identity(self):
        assert ag.elementwise("add", Tensor([1, 2]), Tensor([0, 0])).data.tolist() == [1, 2]

    def test_mul_values(self):
        assert ag.elementwise("mul", Tensor([2, 3]), Tensor([4, 5])).data.tolist() == [8, 15]

    def test_mul_identity(self):
        x = np.array([0.3, -7.0])
        np.testing.assert_array_equal(ag.elementwise("mul", Tensor(x), Tensor([1, 1])).data, x)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.add(Tensor([1.0, 2.0]), Tensor([1.0]))

    def test_product_rule(self):
        a, b = Tensor([2.0, 3.0], requires_grad=True), Tensor([4.0, 5.0], requires_grad=True)
        ag.sum_all(ag.mul(a, b)).backward()
        assert a.grad.tolist() == [4.0, 5.0]
        assert b.grad.tolist() == [2.0, 3.0]

    def test_shared_input_accumulates(self):
        a = Tensor([3.0], requires_grad=True)
        ag.sum_all(ag.mul(a, a)).backward()
        assert a.grad.tolist() == [6.0]


class TestConcat:
    def test_values(self):
        assert ag.concat([Tensor([[1, 2]]), Tensor([[3]])]).data.tolist() == [[1, 2, 3]]

    def test_single_is_identity(self):
        t = Tensor([[1.0, 2.0]])
        assert ag.concat([t]) is t

    def test_width(self):
        parts = [Tensor(np.ones((2, 4))) for _ in range(3)]
        assert ag.concat(parts).shape == (2, 12)

    def test_errors(self):
        with pytest.raises(DimensionError):
            ag.concat([])
        with pytest.raises(DimensionError):
            ag.concat([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))])

    def test_backward_routes_slices(self):
        a, b = Tensor([[1.0, 2.0]], requires_grad=True), Tensor([[3.0]], requires_grad=True)
        ag.sum_all(ag.mul_const(ag.concat([a, b]), np.array([[10.0, 20.0, 30.0]]))).backward()
        assert a.grad.tolist() == [[10.0, 20.0]]
        assert b.grad.tolist() == [[30.0]]


class TestSoftplus:
    def test_zero(self):
        assert ag.softplus(Tensor([0.0])).data[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_asymptotes(self):
        out = ag.softplus(Tensor([-1000.0, 1000.0])).data
        assert out[0] == pytest.approx(0.0, abs=1e-300)
        assert out[1] == pytest.approx(1000.0)
        assert np.all(np.isfinite(out))

    def test_gradient_is_logistic(self):
        x = np.array([-3.0, 0.0, 2.5])
        t = Tensor(x, requires_grad=True)
        ag.sum_all(ag.softplus(t)).backward()
        np.testing.assert_allclose(t.grad, 1 / (1 + np.exp(-x)), rtol=1e-12)

    @given(st.floats(min_value=-1e12, max_value=1e12))
    def test_finite_everywhere(self, v):
        t = Tensor([v], requires_grad=True)
        out = ag.softplus(t)
        ag.sum_all(out).backward()
        assert np.isfinite(out.data).all() and np.isfinite(t.grad).all()

    @given(st.floats(-50, 50), st.floats(0.001, 10))
    def test_monotone(self, v, d):
        a, b = ag.softplus(Tensor([v])).data[0], ag.softplus(Tensor([v + d])).data[0]
        assert b >= a


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_values(self, x, expected):
        assert ag.smooth_l1(Tensor([x])).data[0] == pytest.approx(expected, abs=1e-15)

    def test_gradient_clamped(self):
        t = Tensor([-5.0, -0.25, 0.0, 0.4, 3.0], requires_grad=True)
        ag.sum_all(ag.smooth_l1(t)).backward()
        assert t.grad.tolist() == [-1.0, -0.25, 0.0, 0.4, 1.0]

    @given(st.floats(min_value=-1e12, max_value=1e12))
    def test_finite_everywhere(self, v):
        t = Tensor([v], requires_grad=True)
        out = ag.smooth_l1(t)
        ag.sum_all(out).backward()
        assert np.isfinite(out.data).all() and np.isfinite(t.grad).all()


class TestReduce:
    def test_mean(self):
        assert ag.reduce("mean", Tensor([2.0, 4.0])).item() == 3.0

    def test_sum_zeros(self):
        assert ag.reduce("sum", Tensor(np.zeros(5))).item() == 0.0

    def test_mean_single(self):
        assert ag.reduce("mean", Tensor([7.25])).item() == 7.25

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            ag.reduce("sum", Tensor(np.zeros((2, 2))), axis=2)

    def test_mean_axis_gradient(self):
        t = Tensor(np.ones((2, 4, 3)), requires_grad=True)
        ag.sum_all(ag.reduce("mean", t, axis=1)).backward()
        np.testing.assert_allclose(t.grad, np.full((2, 4, 3), 0.25))


@pytest.mark.parametrize(
    "op",
    [ag.softplus, ag.sigmoid, ag.smooth_l1, ag.square, ag.log_softmax, lambda t: ag.reduce("mean", t, axis=0)],
    ids=["softplus", "sigmoid", "smooth_l1", "square", "log_softmax", "mean0"],
)
def test_unary_ops_match_finite_differences(op):
    rng = np.random.default_rng(7)
    x = rng.normal(scale=2.0, size=(3, 4))
    # keep smooth_l1 away from its breakpoint
    x = np.where(np.abs(np.abs(x) - 1.0) < 1e-3, x + 0.01, x)
    _check_unary(op, x, tol=1e-5)


def test_gather_rows_and_take_accumulate():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ag.sum_all(ag.gather_rows(x, [0, 0, 2])).backward()
    assert x.grad.tolist() == [[2, 2], [0, 0], [1, 1]]
    y = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    ag.sum_all(ag.take(y, [3, 3, 0])).backward()
    assert y.grad.tolist() == [[1, 0], [0, 2]]


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    r1 = ag.softplus(ag.matmul(Tensor(a), Tensor(b))).data
    r2 = ag.softplus(ag.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


def test_graph_released_after_backward():
    a = Tensor([1.0], requires_grad=True)
    out = ag.sum_all(ag.square(a))
    out.backward()
    assert out._parents == () and out._backward is None


class TestAdam:
    def _store(self, value=1.0):
        s = ParameterStore()
        s.add("w", np.array([value]))
        return s

    def test_zero_gradient_is_noop(self):
        s = self._store()
        s.zero_grad()
        ag.adam_step(s)
        assert s["w"].data.tolist() == [1.0]
        assert s.m["w"].tolist() == [0.0] and s.v["w"].tolist() == [0.0]
        assert s.step == 1

    def test_first_step_moves_by_lr(self):
        for g in (3.0, -0.01):
            s = self._store()
            s["w"].grad = np.array([g])
            ag.adam_step(s, lr=1e-3)
            assert s["w"].data[0] == pytest.approx(1.0 - 1e-3 * np.sign(g), abs=1e-8)
            assert s["w"].grad.tolist() == [0.0]

    def test_two_steps_monotone(self):
        s = self._store()
        trail = [s["w"].data[0]]
        for _ in range(2):
            s["w"].grad = np.array([0.5])
            ag.adam_step(s)
            trail.append(s["w"].data[0])
        assert trail[0] > trail[1] > trail[2]

    def test_missing_gradient_names_parameter(self):
        s = self._store()
        with pytest.raises(ValueError, match="'w'"):
            ag.adam_step(s)

    def test_duplicate_name_rejected(self):
        s = self._store()
        with pytest.raises(KeyError):
            s.add("w", [0.0])


class TestFiniteDiff:
    def test_quadratic(self):
        s = ParameterStore()
        w = s.add("w", np.array([0.7, -1.3, 2.0]))
        err = ag.finite_diff_check(lambda: ag.scale(ag.sum_all(ag.square(w)), 0.5), s, epsilon=1e-5)
        assert err < 1e-8

    def test_linear_exact(self):
        s = ParameterStore()
        w = s.add("w", np.array([0.7, -1.3]))
        c = np.array([2.0, -3.0])
        loss = lambda: ag.sum_all(ag.mul_const(w, c))  # noqa: E731
        s.zero_grad()
        loss().backward()
        assert w.grad.tolist() == c.tolist()
        assert ag.finite_diff_check(loss, s, epsilon=1e-6) < 1e-8

    def test_nondeterministic_loss_detected(self):
        s = ParameterStore()
        w = s.add("w", np.array([1.0]))
        calls = iter(range(100))
        with pytest.raises(NumericalError):
            ag.finite_diff_check(lambda: ag.shift(ag.sum_all(w), float(next(calls))), s)

    def test_epsilon_range(self):
        s = ParameterStore()
        w = s.add("w", np.array([1.0]))
        with pytest.raises(ValueError):
            ag.finite_diff_check(lambda: ag.sum_all(w), s, epsilon=1e-2)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        s = ParameterStore()
        s.add("a.weight", rng.normal(size=(3, 4)))
        s.add("a.bias", rng.normal(size=(1, 4)) * 1e-300)
        s.add("scalar", np.array(np.pi))
        path = tmp_path / "m.ckpt"
        ag.save_checkpoint(path, s)
        back = ag.load_checkpoint(path)
        assert list(back) == list(s.params)
        for k, t in s:
            assert back[k].shape == t.shape
            assert back[k].tobytes() == t.data.tobytes()

    def test_header(self, tmp_path):
        path = tmp_path / "m.ckpt"
        ag.save_checkpoint(path, {"x": np.zeros(2)})
        raw = path.read_bytes()
        assert raw[:8] == b"CTRLCKPT"
        assert int.from_bytes(raw[8:12], "little") == 1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"NOTACKPT\x01\x00\x00\x00")
        with pytest.raises(ValueError):
            ag.load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_random_graph_gradients(m, k, n, seed):
    rng = np.random.default_rng(seed)
    s = ParameterStore()
    a = s.add("a", rng.normal(size=(m, k)))
    b = s.add("b", rng.normal(size=(k, n)))
    c = rng.normal(size=(m, n))

    def loss():
        h = ag.matmul(a, b)
        z = ag.concat([ag.mul(h, ag.constant(c)), ag.add(h, ag.constant(c))])
        return ag.reduce("mean", ag.softplus(z))

    assert ag.finite_diff_check(loss, s, epsilon=1e-6) < 1e-4
