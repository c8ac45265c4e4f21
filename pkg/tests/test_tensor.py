import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlflow import tensor as T
from vlflow.gradcheck import check_arrays, numerical_grad, relative_error
from vlflow.tensor import Tape, Tensor


def grad_of(fn, *values):
    """Analytic gradients of scalar fn(*tensors) w.r.t. each input array."""
    ts = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        out = fn(*ts)
    T.backward(tape, out)
    return [t.grad for t in ts]


def fd_check(fn, *values, tol=1e-6):
    values = [np.array(v, dtype=np.float64) for v in values]
    grads = grad_of(fn, *values)

    def f():
        return fn(*[Tensor(v) for v in values]).item()

    return check_arrays(f, zip(values, grads), samples=None, rng=np.random.default_rng(0)) < tol


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 2))
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(x)).data, x)

    def test_hand_product(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5], [6]])
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_gradient(self, rng):
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 4))
        assert fd_check(lambda x, y: T.total(T.mul(x @ y, Tensor(w))), a, b)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[np.log(1.0), np.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)

    def test_gradient(self, rng):
        x = rng.normal(size=(1, 6))
        w = rng.normal(size=(1, 6))
        assert fd_check(lambda t: T.total(T.mul(T.softmax_rows(t), Tensor(w))), x)

    def test_nan_rejected(self):
        with pytest.raises(T.NumericError):
            T.softmax_rows(Tensor([[0.0, np.nan]]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
    def test_rows_sum_to_one(self, x):
        y = T.softmax_rows(Tensor(x)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_log_softmax_gradient(self, rng):
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        assert fd_check(lambda t: T.total(T.mul(T.log_softmax_rows(t), Tensor(w))), x)


class TestLayerNorm:
    def test_constant_row_collapses(self):
        out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_two_element_row(self):
        # mean 0, variance 1: [1, -1] / sqrt(1 + eps)
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        expected = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_gradient(self, rng):
        x = rng.normal(size=(3, 5))
        g, b = rng.normal(size=5), rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        assert fd_check(lambda t, gg, bb: T.total(T.mul(T.layer_norm(t, gg, bb), Tensor(w))),
                        x, g, b, tol=1e-5)

    def test_rejects_width_one(self):
        with pytest.raises(T.ShapeError):
            T.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        (g,) = grad_of(T.total, rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(g, np.ones((3, 2)))

    def test_product_rule(self):
        gx, gy = grad_of(lambda x, y: T.total(T.mul(x, y)), [2.0, 3.0], [5.0, 7.0])
        np.testing.assert_array_equal(gx, [5.0, 7.0])
        np.testing.assert_array_equal(gy, [2.0, 3.0])

    def test_accumulates_across_uses(self):
        (g,) = grad_of(lambda x: T.total(T.mul(x, x) + x), [1.5, -2.0])
        np.testing.assert_allclose(g, [4.0, -3.0])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = T.scale(x, 2.0)
        with pytest.raises(ValueError):
            T.backward(tape, y)

    def test_tape_is_topological(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            T.total(T.gelu(x @ Tensor(rng.normal(size=(3, 2)))))
        seen = {id(x)}
        for out, inputs, _ in tape.nodes:
            assert all(id(i) in seen or not tape.tracks(i) for i in inputs)
            seen.add(id(out))

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.total(x)
        assert T.current_tape() is None and y.item() == 3.0

    def test_tapes_are_thread_local(self, rng):
        results = {}

        def worker(k):
            x = Tensor(np.full(3, float(k)), requires_grad=True)
            with Tape() as tape:
                loss = T.total(T.mul(x, x))
            T.backward(tape, loss)
            results[k] = x.grad

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for k in range(4):
            np.testing.assert_array_equal(results[k], np.full(3, 2.0 * k))


@pytest.mark.parametrize("op", ["gelu", "normalize_rows", "take_rows", "concat", "slice",
                                "square", "mean", "transpose", "take_elements"])
def test_op_gradients(op, rng):
    x = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(4, 3)))
    fns = {
        "gelu": lambda t: T.total(T.mul(T.gelu(t), w)),
        "normalize_rows": lambda t: T.total(T.mul(T.normalize_rows(t), w)),
        "take_rows": lambda t: T.total(T.mul(T.take_rows(t, [3, 0, 0, 2]), w)),
        "concat": lambda t: T.total(T.mul(T.concat_rows([T.take_rows(t, [1, 2]), T.take_rows(t, [0, 0])]), w))
        + T.total(T.concat_cols([t, t])),
        "slice": lambda t: T.total(T.mul(T.concat_cols([T.slice_cols(t, 1, 3), T.slice_cols(t, 0, 1)]), w)),
        "square": lambda t: T.total(T.mul(T.square(t), w)),
        "mean": lambda t: T.mean(T.mul(t, w)),
        "transpose": lambda t: T.total(T.mul(T.transpose(T.transpose(t)), w)),
        "take_elements": lambda t: T.total(T.take_elements(t, [0, 1, 1], [2, 0, 0])),
    }
    assert fd_check(fns[op], x)


def test_bias_broadcast_gradient(rng):
    x, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    w = Tensor(rng.normal(size=(4, 3)))
    assert fd_check(lambda t, bb: T.total(T.mul(T.add(t, bb), w)), x, b)


def test_bias_rejects_other_broadcasts():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_normalize_rows_zero_norm():
    with pytest.raises(T.NumericError):
        T.normalize_rows(Tensor(np.zeros((1, 3))))


def test_numerical_grad_restores_value():
    arr = np.array([1.0, 2.0])
    numerical_grad(lambda: float(arr.sum()), arr, (0,))
    np.testing.assert_array_equal(arr, [1.0, 2.0])


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


class TestDumpFormat:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(3, 4, 2))
        x[0, 0, 0] = np.nextafter(0.0, 1.0)
        T.save_tensor(tmp_path / "x.bin", x)
        y = T.load_tensor(tmp_path / "x.bin")
        assert y.shape == x.shape
        assert y.tobytes() == x.tobytes()

    def test_header_and_layout(self, tmp_path):
        T.save_tensor(tmp_path / "x.bin", np.array([[1.0, 2.0]]))
        raw = (tmp_path / "x.bin").read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert b'"shape": [1, 2]' in header and b'"count": 2' in header
        assert payload == np.array([1.0, 2.0], dtype="<f8").tobytes()

    def test_truncated_file(self, tmp_path):
        T.save_tensor(tmp_path / "x.bin", np.ones(4))
        data = (tmp_path / "x.bin").read_bytes()
        (tmp_path / "x.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError):
            T.load_tensor(tmp_path / "x.bin")


def test_shape_invariants():
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    assert t.data.size == 6
    with Tape() as tape:
        loss = T.total(t)
    T.backward(tape, loss)
    assert t.grad.shape == t.shape
