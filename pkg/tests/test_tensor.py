import math

import numpy as np
import pytest

from songxai.errors import NumericError
from songxai.tensor import (
    AdamState,
    Tensor,
    TapeGraph,
    adam_step,
    backward,
    conv2d,
    cross_entropy,
    flatten,
    linear,
    maxpool2d,
    no_grad,
    relu,
)

from oracles import central_difference, naive_conv2d, naive_linear, naive_maxpool, random_net_gradient_errors, rel_err


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        out = conv2d(x, Tensor(k), Tensor([0.0]), stride=1, pad=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_scalar_kernel_scales(self):
        x = Tensor([[[[1, 2], [3, 4]]]])
        out = conv2d(x, Tensor([[[[2.0]]]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1)
        assert np.abs(out.data - naive_conv2d(x, w, b, pad=1)).max() < 1e-5

    @pytest.mark.parametrize("seed", range(100))
    def test_random_shapes_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(3, 8, size=2)
        pad = int(rng.integers(0, 2))
        stride = 1
        x = rng.uniform(-1, 1, (n, c, h, w)).astype(np.float32)
        ker = rng.uniform(-1, 1, (k, c, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, k).astype(np.float32)
        out = conv2d(Tensor(x), Tensor(ker), Tensor(b), stride=stride, pad=pad)
        assert np.abs(out.data - naive_conv2d(x, ker, b, stride, pad)).max() < 1e-5

    def test_stride_two(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 7, 9)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = np.zeros(3, dtype=np.float32)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
        assert np.abs(out.data - naive_conv2d(x, w, b, 2, 1)).max() < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))

    def test_non_integral_extent(self):
        with pytest.raises(ValueError, match="integer"):
            conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), stride=2, pad=0)


class TestMaxPool:
    def test_simple(self):
        out, sw = maxpool2d(Tensor([[[[1, 2], [3, 4]]]]))
        assert out.data.item() == 4
        assert sw.item() == 3

    def test_constant_tie_break(self):
        out, sw = maxpool2d(Tensor(np.full((1, 1, 4, 4), 2.5)))
        np.testing.assert_array_equal(out.data, 2.5)
        np.testing.assert_array_equal(sw[0, 0], [[0, 2], [8, 10]])

    @pytest.mark.parametrize("seed", range(100))
    def test_window_scan_oracle(self, seed):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        # coarse values force ties
        x = rng.integers(0, 4, shape).astype(np.float32)
        out, sw = maxpool2d(Tensor(x))
        ref, ref_sw = naive_maxpool(x)
        np.testing.assert_array_equal(out.data, ref)
        np.testing.assert_array_equal(sw, ref_sw)

    def test_odd_dims_dropped(self):
        out, _ = maxpool2d(Tensor(np.arange(35.0).reshape(1, 1, 5, 7)))
        assert out.shape == (1, 1, 2, 3)

    def test_too_small(self):
        with pytest.raises(ValueError):
            maxpool2d(Tensor(np.ones((1, 1, 1, 4))))

    def test_backward_routes_to_switch(self):
        x = Tensor([[[[1.0, 5.0], [3.0, 4.0]]]], requires_grad=True)
        out, _ = maxpool2d(x)
        backward(out.sum())
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 1], [0, 0]])


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        np.testing.assert_array_equal(relu(Tensor([-3.0, -0.5])).data, [0, 0])

    def test_gradient_indicator(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        backward(relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0, 1])

    def test_subgradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        backward(relu(x).sum())
        assert x.grad[0] == 0


class TestLinear:
    def test_identity(self):
        x = np.array([[1.0, -2.0, 3.0]])
        out = linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_small(self):
        out = linear(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
        assert out.data.tolist() == [[6.0]]

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, f, o = rng.integers(1, 5, size=3)
        x = rng.standard_normal((n, f)).astype(np.float32)
        w = rng.standard_normal((o, f)).astype(np.float32)
        b = rng.standard_normal(o).astype(np.float32)
        assert np.abs(linear(Tensor(x), Tensor(w), Tensor(b)).data - naive_linear(x, w, b)).max() < 1e-5

    def test_mismatch(self):
        with pytest.raises(ValueError):
            linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 4))), Tensor(np.zeros(2)))


class TestCrossEntropy:
    def test_uniform(self):
        for label in (0, 1):
            loss = cross_entropy(Tensor([[0.0, 0.0]]), [label])
            assert loss.item() == pytest.approx(math.log(2), abs=1e-7)

    def test_confident(self):
        assert cross_entropy(Tensor([[20.0, -20.0]]), [0]).item() < 1e-12

    def test_random_vs_float64(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((16, 2)).astype(np.float32) * 3
        y = rng.integers(0, 2, 16)
        zz = z.astype(np.float64)
        ref = np.mean([-(zz[i, y[i]] - math.log(math.exp(zz[i, 0]) + math.exp(zz[i, 1]))) for i in range(16)])
        assert abs(cross_entropy(Tensor(z), y).item() - ref) < 1e-6

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([[0.0, 0.0]]), [2])

    def test_gradient(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((4, 2))
        y = [0, 1, 1, 0]
        t = Tensor(z, requires_grad=True)
        backward(cross_entropy(t, y))

        def f(zz):
            zz = zz - zz.max(axis=1, keepdims=True)
            lp = zz - np.log(np.exp(zz).sum(axis=1, keepdims=True))
            return -lp[np.arange(4), y].mean()

        assert rel_err(t.grad, central_difference(f, z)) < 1e-4


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_root(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_constant_loss_zero_grads(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        backward((x * 0.0).sum())
        np.testing.assert_array_equal(x.grad, 0)

    def test_tape_visits_each_node_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = relu(x)
        z = (y * y + y).sum()
        graph = TapeGraph.from_root(z)
        assert len({id(n) for n in graph.nodes}) == len(graph.nodes)
        pos = {id(n): i for i, n in enumerate(graph.nodes)}
        for n in graph.nodes:
            for p in n._parents:
                assert pos[id(p)] < pos[id(n)]
        backward(z)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    def test_nan_is_error(self):
        with pytest.raises(NumericError):
            Tensor([np.nan])
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            Tensor([3e38]) * Tensor([10.0])


@pytest.mark.parametrize("seed", range(50))
def test_gradient_check_random_nets(seed):
    err_x, err_params = random_net_gradient_errors(seed)
    assert err_x < 1e-4
    for i, e in enumerate(err_params):
        assert e < 1e-4, f"param {i}"


class TestAdam:
    def test_first_step(self):
        p = {"w": Tensor([0.5], requires_grad=True)}
        p["w"].grad = np.array([1.0], dtype=np.float32)
        state = AdamState(lr=0.001, weight_decay=0.0)
        adam_step(p, state)
        assert p["w"].data[0] - 0.5 == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-7)
        assert state.step_count == 1

    def test_zero_gradient(self):
        p = {"w": Tensor([0.25, -1.5], requires_grad=True)}
        p["w"].grad = np.zeros(2, dtype=np.float32)
        before = p["w"].data.copy()
        adam_step(p, AdamState(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"].data, before)

    def test_descent_on_square(self):
        theta = Tensor([1.0], requires_grad=True)
        state = AdamState(lr=0.001, weight_decay=0.0)
        values = []
        for _ in range(100):
            theta.zero_grad()
            backward((theta * theta).sum())
            adam_step({"t": theta}, state)
            values.append(abs(float(theta.data[0])))
        assert all(b < a for a, b in zip(values, values[1:]))
        assert state.step_count == 100

    def test_nan_gradient(self):
        p = {"w": Tensor([1.0], requires_grad=True)}
        p["w"].grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(NumericError):
            adam_step(p, AdamState())

    def test_weight_decay_only_on_named(self):
        p = {"w": Tensor([2.0], requires_grad=True), "b": Tensor([2.0], requires_grad=True)}
        for t in p.values():
            t.grad = np.zeros(1, dtype=np.float32)
        adam_step(p, AdamState(lr=0.1, weight_decay=0.5), decay=["w"])
        assert p["w"].data[0] < 2.0
        assert p["b"].data[0] == 2.0

    def test_moment_shapes(self):
        p = {"w": Tensor(np.ones((2, 3)), requires_grad=True)}
        p["w"].grad = np.ones((2, 3), dtype=np.float32)
        state = AdamState()
        adam_step(p, state)
        assert state.first_moment["w"].shape == (2, 3)
        assert state.second_moment["w"].shape == (2, 3)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = {"w": Tensor(rng.standard_normal(4), requires_grad=True)}
            st = AdamState()
            for _ in range(5):
                p["w"].zero_grad()
                backward((p["w"] * p["w"]).sum())
                adam_step(p, st, decay=["w"])
            return p["w"].data.tobytes()

        assert run() == run()
