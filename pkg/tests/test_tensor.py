import os

import numpy as np
import pytest

import vgram.tensor as T
from vgram.tensor import ParameterStore, Tensor, adam_step


def central_difference(fn, arrays, eps=1e-6):
    """Gradient of a scalar function of raw arrays, one entry at a time."""
    grads = []
    for x in arrays:
        g = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = x[idx]
            x[idx] = old + eps
            fp = fn()
            x[idx] = old - eps
            fm = fn()
            x[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
            it.iternext()
        grads.append(g)
    return grads


def check_grads(build_loss, arrays, rtol=1e-6, atol=1e-8):
    """Compare tape gradients against central differences."""
    tensors = [Tensor(x, requires_grad=True) for x in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    def rerun():
        return build_loss(*[Tensor(x) for x in arrays]).item()

    fd = central_difference(rerun, arrays)
    for t, g in zip(tensors, fd):
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, g, rtol=rtol, atol=atol)


class TestBasicOps:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_logsumexp_grad_is_softmax(self):
        data = np.array([0.3, -1.2, 2.0, 0.0])
        x = Tensor(data, requires_grad=True)
        T.logsumexp(x, axis=0).backward()
        expected = np.exp(data) / np.exp(data).sum()
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

    @pytest.mark.parametrize("op", ["add", "mul", "div", "matmul"])
    def test_binary_ops(self, op):
        rng = np.random.default_rng(hash(op) % 1000)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) + 3.0 if op == "div" else rng.normal(size=(3, 4))
        if op == "matmul":
            b = rng.normal(size=(4, 2))
        fn = getattr(T, op if op != "matmul" else "matmul")
        check_grads(lambda x, y: T.tsum(fn(x, y)), [a, b])

    def test_broadcast_add(self):
        rng = np.random.default_rng(1)
        check_grads(lambda x, y: T.tsum(T.mul(T.add(x, y), T.add(x, y))),
                    [rng.normal(size=(3, 4)), rng.normal(size=(4,))])

    @pytest.mark.parametrize("op", ["relu", "exp", "log", "sqrt"])
    def test_unary_ops(self, op):
        rng = np.random.default_rng(hash(op) % 1000)
        a = rng.uniform(0.5, 2.0, size=(5,)) if op in ("log", "sqrt") else rng.normal(size=(5,))
        if op == "relu":
            a = a + np.where(np.abs(a) < 0.05, 0.2, 0.0)  # keep away from the kink
        check_grads(lambda x: T.tsum(getattr(T, op)(x)), [a])

    def test_concat_stack_getitem(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

        def loss(x, y):
            cat = T.concat([x, y], axis=0)
            stk = T.stack([x, y], axis=1)
            return T.tsum(cat[1:, :2]) + T.tsum(T.mul(stk, stk))

        check_grads(loss, [a, b])

    def test_take(self):
        rng = np.random.default_rng(6)
        emb = rng.normal(size=(7, 4))
        idx = np.array([1, 3, 3, 0])
        check_grads(lambda e: T.tsum(T.mul(T.take(e, idx), 2.0)), [emb])

    def test_reductions(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(4, 5))
        check_grads(lambda x: T.tsum(T.mul(T.tmean(x, axis=1), 3.0)), [a])
        check_grads(lambda x: T.tsum(T.tmax(x, axis=1)), [a])

    def test_log_softmax_and_normalize(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(3, 4))
        check_grads(lambda x: T.tsum(T.mul(T.log_softmax(x, axis=-1), 0.5)), [a])
        check_grads(lambda x: T.tsum(T.mul(T.l2_normalize(x), np.ones((3, 4)))), [a],
                    rtol=1e-5)

    def test_nan_trips_error(self):
        with pytest.raises(FloatingPointError):
            Tensor(np.array([1.0, np.nan]))

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, 2.0).backward()

    def test_detached_loss_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(())).backward()


class TestComposedNetwork:
    def test_three_layer_network_gradcheck(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(5, 6))
        w1, b1 = rng.normal(size=(6, 8)), rng.normal(size=(8,))
        w2, b2 = rng.normal(size=(8, 8)), rng.normal(size=(8,))
        w3, b3 = rng.normal(size=(8, 3)), rng.normal(size=(3,))

        def loss(xt, w1t, b1t, w2t, b2t, w3t, b3t):
            h = T.mlp(xt, [(w1t, b1t), (w2t, b2t), (w3t, b3t)])
            return T.tsum(T.logsumexp(h, axis=-1))

        check_grads(loss, [x, w1, b1, w2, b2, w3, b3], rtol=1e-5, atol=1e-7)


class TestBiaffine:
    def test_worked_example(self):
        u = Tensor([1.0, 0.0])
        v = Tensor([0.0, 1.0])
        w1 = Tensor([[0.0, 1.0], [0.0, 0.0]])
        w2 = Tensor([2.0, 3.0])
        out = T.biaffine(u, v, w1, w2, 0.5)
        assert out.item() == pytest.approx(6.5)

    def test_constant_when_weights_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            u, v = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
            out = T.biaffine(u, v, Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)), 0.7)
            assert out.item() == pytest.approx(0.7)

    def test_table_matches_scalar_loops(self):
        rng = np.random.default_rng(9)
        us, vs = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        w1, w2, b = rng.normal(size=(4, 4)), rng.normal(size=4), 0.3
        table = T.biaffine_table(Tensor(us), Tensor(vs), Tensor(w1), Tensor(w2), b)
        for i in range(3):
            for j in range(5):
                ref = us[i] @ w1 @ vs[j] + (us[i] + vs[j]) @ w2 + b
                assert table.numpy()[i, j] == pytest.approx(ref)

    def test_features_match_scalar_loops(self):
        rng = np.random.default_rng(10)
        us, vs = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
        w1, w2, b = rng.normal(size=(4, 6, 4)), rng.normal(size=(4, 6)), rng.normal(size=6)
        feats = T.biaffine_features(Tensor(us), Tensor(vs), Tensor(w1),
                                    Tensor(w2), Tensor(b)).numpy()
        for bi in range(2):
            for i in range(3):
                for j in range(5):
                    ref = np.array([us[bi, i] @ w1[:, c, :] @ vs[bi, j] for c in range(6)])
                    ref += us[bi, i] @ w2 + vs[bi, j] @ w2 + b
                    np.testing.assert_allclose(feats[bi, i, j], ref, rtol=1e-10)

    def test_features_gradcheck(self):
        rng = np.random.default_rng(11)
        us, vs = rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 2, 3))
        w1, w2, b = rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)

        def loss(*ts):
            return T.tsum(T.biaffine_features(*ts))

        check_grads(loss, [us, vs, w1, w2, b], rtol=1e-5, atol=1e-7)


class TestAttention:
    def test_single_key_returns_value(self):
        q = Tensor(np.random.default_rng(0).normal(size=(1, 2, 4)))
        k = Tensor(np.random.default_rng(1).normal(size=(1, 1, 4)))
        v = Tensor(np.random.default_rng(2).normal(size=(1, 1, 4)))
        out = T.attention(q, k, v)
        np.testing.assert_allclose(out.numpy()[0, 0], v.numpy()[0, 0], rtol=1e-12)
        np.testing.assert_allclose(out.numpy()[0, 1], v.numpy()[0, 0], rtol=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(3)
        logits = T.mul(T.matmul(Tensor(rng.normal(size=(2, 3, 4))),
                                T.swapaxes(Tensor(rng.normal(size=(2, 5, 4))), -1, -2)), 0.5)
        w = T.softmax(logits, axis=-1)
        np.testing.assert_allclose(w.numpy().sum(-1), 1.0, atol=1e-6)

    def test_mask_excludes_padded_keys(self):
        rng = np.random.default_rng(4)
        q = Tensor(rng.normal(size=(1, 1, 4)))
        k = Tensor(rng.normal(size=(1, 3, 4)))
        v = Tensor(rng.normal(size=(1, 3, 4)))
        mask = np.zeros((1, 1, 3))
        mask[:, :, 2] = -1e30
        out = T.attention(q, k, v, mask)
        k2 = Tensor(k.numpy()[:, :2])
        v2 = Tensor(v.numpy()[:, :2])
        np.testing.assert_allclose(out.numpy(), T.attention(q, k2, v2).numpy(), rtol=1e-12)

    def test_mlp_identity(self):
        x = Tensor(np.array([[0.5, 1.5], [2.0, 0.0]]))
        eye = Tensor(np.eye(2))
        zero = Tensor(np.zeros(2))
        out = T.mlp(x, [(eye, zero), (eye, zero)])
        np.testing.assert_allclose(out.numpy(), x.numpy())


class TestAdam:
    def _store(self):
        store = ParameterStore()
        store.get("w", (3,), lambda s: np.array([1.0, -2.0, 0.5]))
        return store

    def test_zero_grad_no_change(self):
        store = self._store()
        store["w"].grad = np.zeros(3)
        before = store["w"].data.copy()
        adam_step(store)
        np.testing.assert_array_equal(store["w"].data, before)

    def test_first_step_magnitude(self):
        store = self._store()
        store["w"].grad = np.array([0.2, -3.0, 1.0])
        adam_step(store, lr=0.01, eps=1e-12)
        delta = store["w"].data - np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(np.abs(delta), 0.01, rtol=1e-6)
        assert np.sign(delta[1]) == 1.0

    def test_quadratic_decreases(self):
        store = ParameterStore()
        w = store.get("w", (2,), lambda s: np.array([3.0, -4.0]))

        def loss_value():
            return float((w.data ** 2).sum())

        start = loss_value()
        for _ in range(50):
            store.zero_grad()
            w.grad = 2 * w.data
            adam_step(store, lr=0.1)
        assert loss_value() < start

    def test_clip_gradients(self):
        store = self._store()
        store["w"].grad = np.array([30.0, 40.0, 0.0])
        norm = store.clip_gradients(5.0)
        assert norm == pytest.approx(50.0)
        assert store.grad_norm() == pytest.approx(5.0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        store = ParameterStore()
        rng = np.random.default_rng(0)
        store.get("a.w", (3, 2), lambda s: rng.normal(size=s))
        store.get("b", (4,), lambda s: rng.normal(size=s))
        path = os.path.join(tmp_path, "ckpt.bin")
        T.save_checkpoint(path, store, "digest123")
        params, digest = T.load_checkpoint(path)
        assert digest == "digest123"
        assert list(params) == ["a.w", "b"]
        for name in params:
            np.testing.assert_allclose(params[name], store[name].data, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = os.path.join(tmp_path, "junk.bin")
        with open(path, "wb") as f:
            f.write(b"nope")
        with pytest.raises(ValueError):
            T.load_checkpoint(path)

    def test_determinism(self, tmp_path):
        paths = []
        for run in range(2):
            store = ParameterStore()
            rng = np.random.default_rng(7)
            w = store.get("w", (4, 4), lambda s: rng.normal(size=s))
            for _ in range(5):
                store.zero_grad()
                T.tsum(T.mul(T.matmul(w, w), 0.1)).backward()
                store.clip_gradients()
                adam_step(store)
            p = os.path.join(tmp_path, f"run{run}.bin")
            T.save_checkpoint(p, store)
            paths.append(p)
        with open(paths[0], "rb") as f0, open(paths[1], "rb") as f1:
            assert f0.read() == f1.read()
