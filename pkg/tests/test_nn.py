import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sesar.model import SesarModel
from sesar.nn import (AdamState, BiGruEncoder, GruDecoder, GruLayer, Linear, Param,
                      adam_step, classify, cross_entropy, decode, encode, grad_check,
                      gru_cell, l1_loss, load_checkpoint, save_checkpoint, softmax)


def _zero(layer):
    for p in layer.params():
        p.value[...] = 0.0


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestGruCell:
    def test_zero_params_halves_state(self):
        layer = GruLayer("g", 3, 4)
        _zero(layer)
        h = np.array([0.4, -1.0, 2.0, 0.0])
        np.testing.assert_array_equal(gru_cell(np.ones(3), h, layer), 0.5 * h)

    def test_zero_state_fixed_point(self):
        layer = GruLayer("g", 3, 4)
        _zero(layer)
        assert np.array_equal(gru_cell(np.zeros(3), np.zeros(4), layer), np.zeros(4))

    def test_matches_straight_line_equations(self):
        rng = np.random.default_rng(11)
        layer = GruLayer("g", 3, 2, rng)
        layer.b.value[...] = rng.normal(size=6)
        x, h = rng.normal(size=3), rng.normal(size=2)
        # scalar loops, independent of the vectorised path
        out = []
        for k in range(2):
            az = sum(x[i] * layer.W_z[i, k] for i in range(3)) + \
                sum(h[j] * layer.U_z[j, k] for j in range(2)) + layer.b_z[k]
            z = _sig(az)
            out.append(z)
        z = out
        r = [_sig(sum(x[i] * layer.W_r[i, k] for i in range(3)) +
                  sum(h[j] * layer.U_r[j, k] for j in range(2)) + layer.b_r[k]) for k in range(2)]
        cand = [math.tanh(sum(x[i] * layer.W_h[i, k] for i in range(3)) +
                          sum(r[j] * h[j] * layer.U_h[j, k] for j in range(2)) + layer.b_h[k])
                for k in range(2)]
        expected = [(1 - z[k]) * h[k] + z[k] * cand[k] for k in range(2)]
        np.testing.assert_allclose(gru_cell(x, h, layer), expected, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gru_cell(np.zeros(2), np.zeros(4), GruLayer("g", 3, 4))

    @given(arrays(np.float64, (5, 3), elements=st.floats(-50, 50)),
           arrays(np.float64, 4, elements=st.floats(-1, 1)))
    @settings(max_examples=40, deadline=None)
    def test_state_stays_between_previous_and_candidate(self, xs, h0):
        layer = GruLayer("g", 3, 4, np.random.default_rng(0))
        h = h0
        for x in xs:
            h_new = gru_cell(x, h, layer)
            # convex combination of h and a tanh output
            assert np.all(np.abs(h_new) <= np.maximum(np.abs(h), 1.0) + 1e-12)
            h = h_new


class TestEncoder:
    def test_single_frame(self):
        enc = BiGruEncoder(3, 4, 2, np.random.default_rng(0))
        H = encode(np.ones((1, 3)), enc)
        assert H.shape == (8,) and np.all(np.isfinite(H))

    def test_zero_input_zero_params(self):
        enc = BiGruEncoder(3, 4, 3)
        for p in enc.params():
            p.value[...] = 0.0
        assert np.array_equal(encode(np.zeros((6, 3)), enc), np.zeros(8))

    def test_reversal_swaps_halves_with_tied_weights(self):
        rng = np.random.default_rng(5)
        enc = BiGruEncoder(3, 4, 1, rng)
        fwd, bwd = enc.layers[0]
        for a, b in zip(fwd.params(), bwd.params()):
            b.value[...] = a.value
        x = rng.normal(size=(7, 3))
        H = encode(x, enc)
        Hr = encode(x[::-1], enc)
        np.testing.assert_allclose(Hr, np.concatenate([H[4:], H[:4]]), atol=1e-14)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(2)
        enc = BiGruEncoder(3, 5, 2, rng)
        X = rng.normal(size=(4, 6, 3))
        batch = enc.forward(X)
        for i in range(4):
            np.testing.assert_allclose(batch[i], encode(X[i], enc), atol=1e-14)

    def test_layer_input_sizes(self):
        enc = BiGruEncoder(3, 5, 3)
        assert [f.input_size for f, _ in enc.layers] == [3, 10, 10]
        with pytest.raises(ValueError):
            enc.forward(np.zeros((1, 4, 2)))


class TestDecoder:
    def test_zero_length(self):
        dec = GruDecoder(4, 3)
        with pytest.raises(ValueError, match="T must be >= 1"):
            decode(np.zeros(4), 0, dec)

    def test_zero_readout(self):
        dec = GruDecoder(4, 3, np.random.default_rng(1))
        for p in dec.readout.params():
            p.value[...] = 0.0
        out = decode(np.random.default_rng(0).normal(size=4), 5, dec)
        assert out.shape == (5, 3) and np.all(out == 0.0)

    def test_deterministic(self):
        dec = GruDecoder(4, 3, np.random.default_rng(1))
        H = np.array([0.1, -0.2, 0.3, 0.9])
        assert np.array_equal(decode(H, 6, dec), decode(H, 6, dec))

    def test_latent_width_checked(self):
        with pytest.raises(ValueError):
            decode(np.zeros(3), 2, GruDecoder(4, 3))


class TestClassifyAndLosses:
    def test_zero_layer_uniform(self):
        lin = Linear("c", 4, 5)
        _zero(lin)
        p = softmax(classify(np.ones(4), lin))
        np.testing.assert_allclose(p, np.full(5, 0.2), atol=1e-15)

    def test_bias_only_argmax(self):
        lin = Linear("c", 4, 5)
        _zero(lin)
        lin.b.value[3] = 7.0
        assert np.argmax(softmax(classify(np.ones(4), lin))) == 3

    def test_matches_matrix_vector(self):
        rng = np.random.default_rng(4)
        lin = Linear("c", 4, 3, rng)
        lin.b.value[...] = rng.normal(size=3)
        H = rng.normal(size=4)
        expected = [sum(H[i] * lin.W.value[i, j] for i in range(4)) + lin.b.value[j]
                    for j in range(3)]
        np.testing.assert_allclose(classify(H, lin), expected, atol=1e-12, rtol=0)

    def test_l1(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert l1_loss(x, x) == 0.0
        assert l1_loss(np.zeros((4, 3)), np.full((4, 3), 2.0)) == 2.0
        y = np.random.default_rng(1).normal(size=(4, 3))
        brute = sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / 12
        assert l1_loss(x, y) == pytest.approx(brute, abs=1e-15)
        with pytest.raises(ValueError):
            l1_loss(x, y[:2])

    def test_cross_entropy(self):
        assert cross_entropy(np.zeros(4), 2) == pytest.approx(1.3862943611198906, abs=1e-12)
        assert cross_entropy(np.array([1000.0, 0.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)
        assert math.isfinite(cross_entropy(np.array([1000.0, 0.0, 0.0]), 1))
        with pytest.raises(ValueError):
            cross_entropy(np.zeros(3), 3)

    def test_cross_entropy_matches_naive(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            z = rng.normal(scale=3, size=5)
            y = int(rng.integers(5))
            e = [math.exp(v) for v in z]
            naive = -math.log(e[y] / sum(e))
            assert cross_entropy(z, y) == pytest.approx(naive, abs=1e-10)

    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
    @settings(max_examples=80, deadline=None)
    def test_softmax_positive_normalized(self, z):
        p = softmax(z)
        assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


class TestBackward:
    def test_before_forward(self):
        with pytest.raises(RuntimeError):
            Linear("l", 2, 2).backward(np.zeros(2))
        with pytest.raises(RuntimeError):
            GruLayer("g", 2, 2).backward(np.zeros((1, 1, 2)))
        with pytest.raises(RuntimeError):
            BiGruEncoder(2, 2, 1).backward(np.zeros((1, 4)))

    def test_linear_l1_sign_closed_form(self):
        rng = np.random.default_rng(0)
        lin = Linear("l", 3, 2, rng)
        x, target = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        y = lin.forward(x)
        lin.backward(np.sign(y - target) / y.size)
        s = np.sign(x @ lin.W.value + lin.b.value - target) / 10
        np.testing.assert_allclose(lin.W.grad, x.T @ s, atol=1e-15)
        np.testing.assert_allclose(lin.b.grad, s.sum(axis=0), atol=1e-15)

    def test_repeated_backward_accumulates(self):
        rng = np.random.default_rng(0)
        lin = Linear("l", 3, 2, rng)
        lin.forward(rng.normal(size=(4, 3)))
        dy = rng.normal(size=(4, 2))
        lin.backward(dy)
        once = lin.W.grad.copy()
        lin.backward(dy)
        np.testing.assert_allclose(lin.W.grad, 2 * once)

    def test_constant_loss_zero_grads(self):
        model = SesarModel(4, 3, hidden_size=3, num_layers=1)
        model.zero_grad()
        # zero weights on both losses: nothing reaches the parameters
        model.batch_loss(np.ones((2, 3, 4)), np.array([0, -1]), 0.0, 0.0)
        assert all(np.all(p.grad == 0) for p in model.params())


def _tiny_closure(seed=0):
    rng = np.random.default_rng(seed)
    model = SesarModel(8, 3, hidden_size=8, num_layers=2, seed=seed)
    X = rng.normal(size=(4, 5, 8))
    y = np.array([0, -1, 2, -1])

    def closure():
        model.zero_grad()
        model.batch_loss(X, y)
        return model.loss_terms(X, y)
    return model, closure


class TestGradCheck:
    def test_linear_l1(self):
        rng = np.random.default_rng(1)
        lin = Linear("l", 4, 3, rng)
        # odd row count: no bias gradient can cancel to exactly zero
        x, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))

        def closure():
            y = lin.forward(x)
            lin.backward(np.sign(y - t) / y.size)
            return np.abs(y - t).reshape(-1) / y.size
        rep = grad_check(closure, lin.params(), tolerance=1e-6)
        assert rep.passed, rep

    def test_terms_sum_to_batch_loss(self):
        model, closure = _tiny_closure()
        total = model.batch_loss(np.ones((2, 5, 8)), np.array([1, -1]), backward=False)[0]
        assert model.loss_terms(np.ones((2, 5, 8)), np.array([1, -1])).sum() == \
            pytest.approx(total, rel=1e-14)

    def test_tiny_model(self):
        model, closure = _tiny_closure()
        rep = grad_check(closure, model.params(), tolerance=1e-3, n_coords=300)
        assert rep.n_checked == 300
        assert rep.passed, rep

    def test_corrupted_gradient_detected(self):
        model, closure = _tiny_closure()
        target = model.classifier.W

        def corrupted():
            loss = closure()
            target.grad += 0.5
            return loss
        rep = grad_check(corrupted, [target], tolerance=1e-3)
        assert not rep.passed and rep.max_rel_error > 1e-3


class TestAdam:
    def test_schedule(self):
        st_ = AdamState(base_lr=1e-4, decay=0.95, decay_interval=1000)
        assert st_.lr_at(0) == 1e-4
        assert st_.lr_at(999) == 1e-4
        assert st_.lr_at(1000) == pytest.approx(9.5e-5, rel=1e-15)
        assert st_.lr_at(2500) == pytest.approx(1e-4 * 0.95 ** 2, rel=1e-15)

    def test_zero_gradient_is_identity(self):
        p = Param("w", np.array([1.0, -2.0]))
        before = p.value.copy()
        st_ = AdamState(base_lr=0.1)
        for _ in range(5):
            adam_step([p], st_)
        assert np.array_equal(p.value, before)

    def test_descends_quadratic(self):
        p = Param("w", np.array([1.0]))
        st_ = AdamState(base_lr=1e-2)
        p.grad[...] = 2 * p.value
        adam_step([p], st_)
        assert p.value[0] < 1.0
        assert np.all(p.grad == 0) and st_.step == 1

    def test_frozen_params_skipped(self):
        p = Param("w", np.array([1.0]), frozen=True)
        p.grad[...] = 3.0
        adam_step([p], AdamState(base_lr=0.1))
        assert p.value[0] == 1.0 and p.grad[0] == 0.0


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    model = SesarModel(6, 3, hidden_size=4, num_layers=2, seed=3)
    X = rng.normal(size=(3, 4, 6))
    model.batch_loss(X, np.array([1, -1, 0]))
    adam_step(model.params(), model.optimizer)
    model.iteration = 1
    model.save(tmp_path / "ck.json")
    back = SesarModel.load(tmp_path / "ck.json")
    for a, b in zip(model.params(), back.params()):
        assert a.name == b.name and np.array_equal(a.value, b.value)
    assert back.iteration == 1 and back.optimizer.step == 1
    for k in model.optimizer.m:
        assert np.array_equal(model.optimizer.m[k], back.optimizer.m[k])
        assert np.array_equal(model.optimizer.v[k], back.optimizer.v[k])


def test_checkpoint_shape_mismatch(tmp_path):
    p = Param("w", np.zeros(3))
    save_checkpoint(tmp_path / "c.json", [p])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.json", [Param("w", np.zeros(4))])
