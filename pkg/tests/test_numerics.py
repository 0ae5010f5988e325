import math

import numpy as np
import pytest

from sfpnet.errors import CheckpointError, ShapeError, SfpnetError
from sfpnet.numerics import (
    ParamStore,
    adam_step,
    grad_check,
    layer_norm,
    layer_norm_bwd,
    layer_norm_fwd,
    linear,
    linear_bwd,
    named_seed,
    relu,
    sigmoid,
    sigmoid_bwd,
    xavier_init,
)


class TestLinear:
    def test_identity(self):
        out = linear(np.array([3.0, -1.0]), np.eye(2), np.zeros(2))
        assert np.array_equal(out, [3.0, -1.0])

    def test_hand_multiply(self):
        w = np.array([[1.0, 2.0], [0.0, 1.0]])
        out = linear(np.array([1.0, 1.0]), w, np.array([1.0, 1.0]))
        assert np.array_equal(out, [4.0, 2.0])

    def test_zero_weights(self):
        w = np.zeros((1, 3))
        for x in (np.zeros(3), np.ones(3), np.array([5.0, -2.0, 0.25])):
            assert np.array_equal(linear(x, w, np.array([0.5])), [0.5])

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        xs = rng.normal(size=(6, 3))
        batched = linear(xs, w, b)
        for i in range(6):
            assert np.allclose(batched[i], linear(xs[i], w, b))

    def test_shape_error_names_operands(self):
        with pytest.raises(ShapeError, match="x.*W"):
            linear(np.zeros(3), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ShapeError):
            linear(np.zeros(2), np.zeros((2, 2)), np.zeros(3))

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        x = rng.normal(size=4)
        g = rng.normal(size=3)
        dx, dw, db = linear_bwd(g, x, w)
        h = 1e-6
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            num = (linear(xp, w, b) - linear(xm, w, b)) @ g / (2 * h)
            assert abs(dx[i] - num) < 1e-8
        assert np.allclose(dw, np.outer(g, x))
        assert np.allclose(db, g)


class TestActivations:
    def test_relu(self):
        assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_strict_open_interval(self):
        x = np.array([-1e6, -800.0, -30.0, 0.0, 30.0, 800.0, 1e6])
        s = sigmoid(x)
        assert np.all(s > 0.0) and np.all(s < 1.0)
        assert np.all(np.isfinite(s))

    def test_sigmoid_symmetry(self):
        x = np.linspace(-5, 5, 41)
        assert np.allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)

    def test_sigmoid_bwd(self):
        x = np.array([0.3, -1.2, 2.0])
        s = sigmoid(x)
        h = 1e-6
        num = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
        assert np.allclose(sigmoid_bwd(np.ones(3), s), num, atol=1e-9)


class TestLayerNorm:
    def test_two_point_example(self):
        out = layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2))
        # mean 2, population std 1, up to the eps term
        assert np.allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_gain_bias_applied(self):
        out = layer_norm(np.array([1.0, 3.0]), np.array([2.0, 2.0]), np.array([1.0, -1.0]))
        assert np.allclose(out, [-1.0, 1.0], atol=3e-4)

    def test_normalization_property(self):
        rng = np.random.default_rng(7)
        for n in (8, 16, 64, 257):
            v = rng.normal(3.0, 5.0, size=n)
            out = layer_norm(v, np.ones(n), np.zeros(n))
            assert abs(out.mean()) < 1e-10
            assert abs(out.var() - 1.0) < 1e-4  # eps-limited

    def test_length_one_rejected(self):
        with pytest.raises(ShapeError):
            layer_norm(np.array([1.0]), np.ones(1), np.zeros(1))

    def test_backward_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        n = 6
        x = rng.normal(size=n)
        gain = rng.normal(size=n)
        bias = rng.normal(size=n)
        gout = rng.normal(size=n)
        out, cache = layer_norm_fwd(x, gain, bias)
        dx, dgain, dbias = layer_norm_bwd(gout, cache)
        h = 1e-6
        for arr, grad in ((x, dx), (gain, dgain), (bias, dbias)):
            for i in range(n):
                orig = arr[i]
                arr[i] = orig + h
                lp = layer_norm(x, gain, bias) @ gout
                arr[i] = orig - h
                lm = layer_norm(x, gain, bias) @ gout
                arr[i] = orig
                assert abs(grad[i] - (lp - lm) / (2 * h)) < 1e-7


class TestAdam:
    def _store(self, w):
        ps = ParamStore()
        ps.register("w", np.array(w))
        return ps

    def test_zero_gradient_is_noop(self):
        ps = self._store([1.0, -2.0])
        adam_step(ps, {"w": np.zeros(2)}, lr=0.1)
        assert np.array_equal(ps["w"], [1.0, -2.0])
        assert ps.t == 1

    def test_missing_gradient_treated_as_zero(self):
        ps = self._store([1.0, -2.0])
        adam_step(ps, {}, lr=0.1)
        assert np.array_equal(ps["w"], [1.0, -2.0])

    def test_first_step_closed_form(self):
        # m_hat = g, v_hat = g^2, so the first step is lr / (1 + eps) ~ lr
        ps = self._store([1.0])
        adam_step(ps, {"w": np.array([1.0])}, lr=0.1)
        assert abs(ps["w"][0] - 0.9) < 1e-8

    def test_two_steps_differ_from_one_double_lr_step(self):
        # gradients re-evaluated along the trajectory of f(w) = w^2
        a = self._store([1.0])
        for _ in range(2):
            adam_step(a, {"w": 2.0 * a["w"]}, lr=0.1)
        b = self._store([1.0])
        adam_step(b, {"w": 2.0 * b["w"]}, lr=0.2)
        assert a.t == 2 and b.t == 1
        assert abs(a["w"][0] - b["w"][0]) > 1e-5

    def test_deterministic(self):
        grads = {"w": np.array([0.3, -0.1])}
        a = self._store([1.0, 2.0])
        b = self._store([1.0, 2.0])
        for _ in range(5):
            adam_step(a, grads, lr=0.01)
            adam_step(b, grads, lr=0.01)
        assert np.array_equal(a["w"], b["w"])

    def test_shape_mismatch_rejected(self):
        ps = self._store([1.0, 2.0])
        with pytest.raises(ShapeError):
            adam_step(ps, {"w": np.zeros(3)}, lr=0.1)

    def test_nonpositive_lr_rejected(self):
        ps = self._store([1.0])
        with pytest.raises(ValueError):
            adam_step(ps, {}, lr=0.0)


class TestXavier:
    def test_single_entry_bound(self):
        v = xavier_init(1, 1, seed=3)
        assert abs(v[0, 0]) <= math.sqrt(3.0)

    def test_deterministic(self):
        assert np.array_equal(xavier_init(5, 7, seed=9), xavier_init(5, 7, seed=9))

    def test_large_matrix_bound(self):
        m = xavier_init(100, 100, seed=1)
        assert np.abs(m).max() <= math.sqrt(6.0 / 200)

    def test_different_seeds_differ(self):
        assert not np.array_equal(xavier_init(4, 4, seed=0), xavier_init(4, 4, seed=1))

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            xavier_init(0, 3, seed=0)

    def test_named_seed_is_name_keyed(self):
        a = xavier_init(3, 3, named_seed(42, "w.a"))
        b = xavier_init(3, 3, named_seed(42, "w.b"))
        a2 = xavier_init(3, 3, named_seed(42, "w.a"))
        assert np.array_equal(a, a2)
        assert not np.array_equal(a, b)


class TestGradCheck:
    def test_quadratic(self):
        ps = ParamStore()
        ps.register("theta", np.array([3.0]))

        def f(params):
            th = params["theta"][0]
            return th * th, {"theta": np.array([2.0 * th])}

        errs = grad_check(f, ps, h=1e-5)
        assert errs["theta"] < 1e-9

    def test_linear_sigmoid_bce_composite(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=3)
        y = 1.0
        ps = ParamStore()
        ps.register("w", rng.normal(size=(1, 3)))
        ps.register("b", rng.normal(size=1))

        def f(params):
            z = linear(x, params["w"], params["b"])
            p = sigmoid(z)[0]
            loss = -(y * np.log(p) + (1 - y) * np.log(1 - p))
            dz = p - y
            return loss, {"w": dz * x[None, :], "b": np.array([dz])}

        errs = grad_check(f, ps, h=1e-5)
        assert max(errs.values()) < 1e-6

    def test_h_range_enforced(self):
        ps = ParamStore()
        ps.register("w", np.ones(1))
        with pytest.raises(ValueError):
            grad_check(lambda p: (0.0, {}), ps, h=1e-2)

    def test_nonfinite_loss_names_parameter(self):
        ps = ParamStore()
        ps.register("bad", np.array([0.0]))

        def f(params):
            v = params["bad"][0]
            loss = float(np.log(v)) if v > 0 else float("nan")
            return (loss if v != 0 else 0.0), {"bad": np.array([1.0])}

        with pytest.raises(SfpnetError, match="bad"):
            grad_check(f, ps, h=1e-5)


class TestParamStore:
    def test_duplicate_name_rejected(self):
        ps = ParamStore()
        ps.register("w", np.ones(2))
        with pytest.raises(SfpnetError):
            ps.register("w", np.ones(2))

    def test_unknown_name_rejected(self):
        with pytest.raises(SfpnetError):
            ParamStore()["nope"]

    def test_moments_match_shapes(self):
        ps = ParamStore()
        ps.register("w", np.ones((3, 2)))
        m, v = ps.moments("w")
        assert m.shape == (3, 2) and v.shape == (3, 2)
        assert not m.any() and not v.any()

    def test_clone_is_independent(self):
        ps = ParamStore()
        ps.register("w", np.ones(2))
        cp = ps.clone()
        cp["w"][0] = 99.0
        assert ps["w"][0] == 1.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        ps = ParamStore()
        ps.register("emb.item", rng.normal(size=(7, 3)))
        ps.register("head.out.b", rng.normal(size=4))
        path = tmp_path / "m.ckpt"
        ps.save(path)
        back = ParamStore.load(path)
        assert back.names() == ps.names()
        for name, arr in ps.items():
            assert back[name].dtype == arr.dtype
            assert back[name].shape == arr.shape
            assert np.array_equal(back[name], arr)

    def test_round_trip_f32(self, tmp_path):
        ps = ParamStore(dtype=np.float32)
        ps.register("w", np.arange(6, dtype=np.float32).reshape(2, 3) / 7)
        path = tmp_path / "m.ckpt"
        ps.save(path)
        back = ParamStore.load(path)
        assert back["w"].dtype == np.float32
        assert np.array_equal(back["w"], ps["w"])

    def test_save_is_stable_bytes(self, tmp_path):
        ps = ParamStore()
        ps.register("w", np.linspace(0, 1, 12).reshape(3, 4))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ps.save(p1)
        ps.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            ParamStore.load(path)
