import numpy as np
import pytest

from fnfm.errors import ConfigError, NumericError, ShapeError
from fnfm.optim import AdaGrad, Adam, OptimizerConfig, make_optimizer, minibatch_iter
from fnfm.sparse import SparseRows


def blocks(rng):
    return {"w": rng.normal(size=(3, 2)), "table": rng.normal(size=(5, 2, 3))}


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig("sgd")
        with pytest.raises(ConfigError):
            OptimizerConfig(lr=0.0)

    def test_factory(self):
        params = {"w": np.zeros(2)}
        assert isinstance(make_optimizer(OptimizerConfig("adam"), params), Adam)
        opt = make_optimizer(OptimizerConfig("adagrad", 0.3), params)
        assert isinstance(opt, AdaGrad) and opt.lr == 0.3


class TestAdam:
    def test_zero_gradient_step(self):
        w = np.array([1.0, -2.0])
        opt = Adam({"w": w})
        opt.step({"w": np.zeros(2)})
        assert opt.t == 1
        np.testing.assert_array_equal(w, [1.0, -2.0])

    def test_first_step_is_lr_times_sign(self):
        w = np.zeros(4)
        Adam({"w": w}, lr=0.01).step({"w": np.array([3.0, -0.2, 1e-3, -50.0])})
        np.testing.assert_allclose(w, [-0.01, 0.01, -0.01, 0.01], rtol=1e-4)

    def test_matches_reference_recursion(self, rng):
        w = rng.normal(size=3)
        ref = w.copy()
        opt = Adam({"w": w}, lr=0.05)
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.normal(size=3)
            opt.step({"w": g})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w, ref, rtol=1e-13)

    def test_gradient_scale_invariance(self, rng):
        grads = [rng.normal(size=4) for _ in range(5)]
        a, b = np.zeros(4), np.zeros(4)
        oa, ob = Adam({"w": a}, 0.01), Adam({"w": b}, 0.01)
        for g in grads:
            oa.step({"w": g})
            ob.step({"w": 1000.0 * g})
        np.testing.assert_allclose(a, b, rtol=1e-6)

    def test_monotone_on_quadratic(self):
        x = np.array([2.0, -1.0, 0.5])
        opt = Adam({"x": x}, lr=0.01)
        values = []
        for _ in range(100):
            values.append(0.5 * x @ x)
            opt.step({"x": x.copy()})
        assert np.all(np.diff(values) < 0)

    def test_sparse_rows_lazy(self, rng):
        params = blocks(rng)
        before = {k: v.copy() for k, v in params.items()}
        opt = Adam(params, lr=0.1)
        g = rng.normal(size=(2, 3))
        opt.step({"table": SparseRows(np.array([1, 7]), g)})
        touched = np.zeros(10, bool)
        touched[[1, 7]] = True
        flat, flat0 = params["table"].reshape(10, 3), before["table"].reshape(10, 3)
        np.testing.assert_array_equal(flat[~touched], flat0[~touched])
        np.testing.assert_allclose(flat[touched] - flat0[touched], -0.1 * np.sign(g), rtol=1e-6)
        assert not opt.m["table"].reshape(10, 3)[~touched].any()
        np.testing.assert_array_equal(params["w"], before["w"])

    def test_sparse_equals_dense_on_touched_rows(self, rng):
        """A row touched every step follows the dense recursion exactly."""
        dense, sparse = np.ones((4, 2)), np.ones((4, 2))
        od, osp = Adam({"p": dense}, 0.1), Adam({"p": sparse}, 0.1)
        for _ in range(4):
            g = rng.normal(size=(1, 2))
            full = np.zeros((4, 2))
            full[2] = g
            od.step({"p": full})
            osp.step({"p": SparseRows(np.array([2]), g)})
        np.testing.assert_allclose(sparse[2], dense[2], rtol=1e-14)


class TestAdaGrad:
    def test_closed_form_constant_gradient(self):
        lr, g, eps = 0.1, 0.5, 1e-10
        w = np.zeros(1)
        opt = AdaGrad({"w": w}, lr=lr, eps=eps)
        expected = 0.0
        for i in range(1, 8):
            opt.step({"w": np.array([g])})
            expected -= lr * g / np.sqrt(i * g * g + eps)
            assert w[0] == pytest.approx(expected, rel=1e-14)

    def test_sparse_rows(self, rng):
        params = blocks(rng)
        before = params["table"].copy()
        opt = AdaGrad(params, lr=0.2)
        opt.step({"table": SparseRows(np.array([4]), np.full((1, 3), 2.0))})
        flat, flat0 = params["table"].reshape(10, 3), before.reshape(10, 3)
        np.testing.assert_allclose(flat[4] - flat0[4], -0.2, rtol=1e-9)
        np.testing.assert_array_equal(np.delete(flat, 4, 0), np.delete(flat0, 4, 0))


class TestValidation:
    @pytest.mark.parametrize("cls", [Adam, AdaGrad])
    @pytest.mark.parametrize("bad,err", [
        ({"w": np.zeros((2, 2))}, ShapeError),
        ({"w": np.full((3, 2), np.nan)}, NumericError),
        ({"table": SparseRows(np.array([10]), np.zeros((1, 3)))}, ShapeError),
        ({"table": SparseRows(np.array([0]), np.zeros((1, 4)))}, ShapeError),
        ({"table": SparseRows(np.array([0]), np.full((1, 3), np.inf))}, NumericError),
        ({"nope": np.zeros(1)}, ShapeError),
    ])
    def test_invalid_gradient_mutates_nothing(self, cls, bad, err, rng):
        params = blocks(rng)
        before = {k: v.copy() for k, v in params.items()}
        opt = cls(params)
        grads = {"w": np.ones((3, 2)), **bad}   # a valid block alongside the bad one
        with pytest.raises(err):
            opt.step(grads)
        assert opt.t == 0
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])


class TestMinibatch:
    def test_ten_by_four(self):
        batches = list(minibatch_iter(10, 4, seed=0, epoch=1))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))

    def test_deterministic(self):
        a = np.concatenate(list(minibatch_iter(100, 7, 3, 2)))
        b = np.concatenate(list(minibatch_iter(100, 7, 3, 2)))
        np.testing.assert_array_equal(a, b)

    def test_epochs_differ(self):
        a = np.concatenate(list(minibatch_iter(100, 7, 3, 1)))
        b = np.concatenate(list(minibatch_iter(100, 7, 3, 2)))
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("n,b", [(1, 1), (5, 10), (97, 8), (64, 64)])
    def test_permutation(self, n, b):
        out = np.concatenate(list(minibatch_iter(n, b, 0, 1)))
        assert sorted(out.tolist()) == list(range(n))

    def test_errors(self):
        with pytest.raises(ConfigError):
            list(minibatch_iter(0, 4, 0, 1))
        with pytest.raises(ConfigError):
            list(minibatch_iter(4, 0, 0, 1))
